#include "carspeed/signal.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "carspeed/rng.hpp"

namespace carspeed {

namespace {

double parse_strict_double(const std::string& field, const std::string& where) {
    double v = 0;
    const char* begin = field.data();
    const char* end = begin + field.size();
    const auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
        throw InvalidInput(where + ": malformed number '" + field + "'");
    }
    return v;
}

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

std::string basename_id(const std::string& path, const std::string& suffix) {
    std::string name = std::filesystem::path(path).filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix)) {
        return name.substr(0, name.size() - suffix.size());
    }
    return std::filesystem::path(path).stem().string();
}

}  // namespace

ImuSession parse_imu_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput(path + ": cannot open");
    std::string line;
    if (!std::getline(in, line)) throw InvalidInput(path + ": empty file");
    if (strip_cr(line) != "t,ax,ay,az") {
        throw InvalidInput(path + ": expected header 't,ax,ay,az', got '" + line + "'");
    }
    ImuSession session;
    session.session_id = basename_id(path, ".imu.csv");
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split(line, ',');
        const std::string where = strfmt("%s row %d", path.c_str(), row);
        if (fields.size() != 4) throw InvalidInput(where + ": expected 4 fields");
        ImuSample s;
        s.t = parse_strict_double(fields[0], where);
        s.ax = parse_strict_double(fields[1], where);
        s.ay = parse_strict_double(fields[2], where);
        s.az = parse_strict_double(fields[3], where);
        if (!session.samples.empty() && s.t <= session.samples.back().t) {
            throw InvalidInput(where + ": timestamp not strictly increasing");
        }
        session.samples.push_back(s);
    }
    if (session.samples.empty()) throw InvalidInput(path + ": no samples");
    return session;
}

GpsTrack parse_gps_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput(path + ": cannot open");
    std::string line;
    if (!std::getline(in, line)) throw InvalidInput(path + ": empty file");
    if (strip_cr(line) != "t,speed,gdop") {
        throw InvalidInput(path + ": expected header 't,speed,gdop', got '" + line + "'");
    }
    GpsTrack track;
    track.session_id = basename_id(path, ".gps.csv");
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split(line, ',');
        const std::string where = strfmt("%s row %d", path.c_str(), row);
        if (fields.size() != 3) throw InvalidInput(where + ": expected 3 fields");
        GpsPoint p;
        p.t = parse_strict_double(fields[0], where);
        p.speed = parse_strict_double(fields[1], where);
        p.gdop = parse_strict_double(fields[2], where);
        if (p.speed < 0) throw InvalidInput(where + ": negative speed");
        if (p.gdop <= 0) throw InvalidInput(where + ": GDOP must be positive");
        if (!track.points.empty() && p.t <= track.points.back().t) {
            throw InvalidInput(where + ": timestamp not strictly increasing");
        }
        track.points.push_back(p);
    }
    if (track.points.empty()) throw InvalidInput(path + ": no points");
    return track;
}

GatedPair gate_gdop(const GpsTrack& track, const ImuSession& imu, double threshold) {
    if (!(threshold > 0)) throw InvalidInput("gate_gdop: threshold must be positive");
    size_t lock = track.points.size();
    for (size_t i = 0; i < track.points.size(); ++i) {
        if (track.points[i].gdop <= threshold) {
            lock = i;
            break;
        }
    }
    if (lock == track.points.size()) {
        throw SessionRejected(strfmt("%s: GPS never reaches GDOP <= %g", track.session_id.c_str(),
                                     threshold));
    }
    const double t_gate = track.points[lock].t;
    GatedPair out;
    out.track.session_id = track.session_id;
    for (size_t i = lock; i < track.points.size(); ++i) {
        GpsPoint p = track.points[i];
        p.t -= t_gate;
        out.track.points.push_back(p);
    }
    out.imu.session_id = imu.session_id;
    out.imu.nominal_rate_hz = imu.nominal_rate_hz;
    for (const ImuSample& s : imu.samples) {
        if (s.t + 1e-12 < t_gate) continue;
        ImuSample shifted = s;
        shifted.t -= t_gate;
        out.imu.samples.push_back(shifted);
    }
    return out;
}

std::vector<double> lowpass(const std::vector<double>& x, double fs_hz, double cutoff_hz) {
    if (!(cutoff_hz > 0) || !(cutoff_hz < fs_hz / 2)) {
        throw InvalidInput(strfmt("lowpass: cutoff %g Hz outside (0, %g)", cutoff_hz, fs_hz / 2));
    }
    if (x.empty()) return {};

    // RBJ biquad, Butterworth characteristic (Q = 1/sqrt(2)), bilinear.
    const double w0 = 2.0 * M_PI * cutoff_hz / fs_hz;
    const double cw = std::cos(w0);
    const double alpha = std::sin(w0) / std::sqrt(2.0);
    const double a0 = 1.0 + alpha;
    const double b0 = (1.0 - cw) / 2.0 / a0;
    const double b1 = (1.0 - cw) / a0;
    const double b2 = (1.0 - cw) / 2.0 / a0;
    const double a1 = -2.0 * cw / a0;
    const double a2 = (1.0 - alpha) / a0;

    // Direct form II transposed, state initialized to the DC steady state of
    // the first processed sample so constants stay exactly constant.
    auto run = [&](const double* in, double* out, int64_t n, int64_t step) {
        const double c = *in;
        double s1 = (1.0 - b0) * c;
        double s2 = (b2 - a2) * c;
        const double* p = in;
        double* q = out;
        for (int64_t i = 0; i < n; ++i, p += step, q += step) {
            const double xi = *p;
            const double yi = b0 * xi + s1;
            s1 = b1 * xi - a1 * yi + s2;
            s2 = b2 * xi - a2 * yi;
            *q = yi;
        }
    };

    const int64_t n = static_cast<int64_t>(x.size());
    std::vector<double> y(x.size());
    run(x.data(), y.data(), n, 1);
    run(y.data() + (n - 1), y.data() + (n - 1), n, -1);
    return y;
}

std::vector<double> decimate(const std::vector<double>& x, int factor) {
    if (factor < 1) throw InvalidInput("decimate: factor must be at least 1");
    std::vector<double> out;
    out.reserve(x.size() / static_cast<size_t>(factor) + 1);
    for (size_t i = 0; i < x.size(); i += static_cast<size_t>(factor)) {
        out.push_back(x[i]);
    }
    return out;
}

std::vector<ImuSegment> regularize_session(const ImuSession& session, const PipelineConfig& cfg) {
    const double rate = cfg.imu_rate_hz;
    const int64_t gap_idx = std::max<int64_t>(1, static_cast<int64_t>(std::llround(cfg.gap_split_s * rate)));

    // Snap each sample to the nearest grid slot; first sample wins a slot.
    std::vector<std::pair<int64_t, const ImuSample*>> grid;
    grid.reserve(session.samples.size());
    for (const ImuSample& s : session.samples) {
        const int64_t k = static_cast<int64_t>(std::llround(s.t * rate));
        if (!grid.empty() && grid.back().first == k) continue;
        grid.emplace_back(k, &s);
    }

    std::vector<ImuSegment> segments;
    size_t start = 0;
    auto flush = [&](size_t end) {
        if (end <= start) return;
        ImuSegment seg;
        seg.samples.reserve(static_cast<size_t>(grid[end - 1].first - grid[start].first) + 1);
        size_t src = start;
        for (int64_t k = grid[start].first; k <= grid[end - 1].first; ++k) {
            // advance so src is the last entry at or before k
            while (src + 1 < end && grid[src + 1].first <= k) ++src;
            const ImuSample* near = grid[src].second;
            if (src + 1 < end && grid[src + 1].first - k <= k - grid[src].first) {
                near = grid[src + 1].second;
            }
            ImuSample snapped = *near;
            snapped.t = static_cast<double>(k) / rate;
            seg.samples.push_back(snapped);
        }
        seg.segment_id = session.session_id;
        segments.push_back(std::move(seg));
        start = end;
    };
    for (size_t i = 1; i < grid.size(); ++i) {
        if (grid[i].first - grid[i - 1].first > gap_idx) flush(i);
    }
    flush(grid.size());
    if (segments.size() > 1) {
        for (size_t i = 0; i < segments.size(); ++i) {
            segments[i].segment_id = strfmt("%s#%zu", session.session_id.c_str(), i);
        }
    }
    return segments;
}

AccelStream filter_and_decimate(const ImuSegment& segment, const PipelineConfig& cfg) {
    const size_t n = segment.samples.size();
    std::vector<double> t(n), ax(n), ay(n), az(n);
    for (size_t i = 0; i < n; ++i) {
        t[i] = segment.samples[i].t;
        ax[i] = segment.samples[i].ax;
        ay[i] = segment.samples[i].ay;
        az[i] = segment.samples[i].az;
    }
    AccelStream out;
    out.stream_id = segment.segment_id;
    out.t = decimate(t, cfg.decim_factor);
    out.ax = decimate(lowpass(ax, cfg.imu_rate_hz, cfg.cutoff_hz), cfg.decim_factor);
    out.ay = decimate(lowpass(ay, cfg.imu_rate_hz, cfg.cutoff_hz), cfg.decim_factor);
    out.az = decimate(lowpass(az, cfg.imu_rate_hz, cfg.cutoff_hz), cfg.decim_factor);
    return out;
}

WindowExtraction extract_windows(const AccelStream& accel, const GpsTrack& track, int window_size,
                                 double tolerance_s, const std::string& stamp_id) {
    if (window_size < 5) throw InvalidInput("extract_windows: window size must be at least 5");
    WindowExtraction out;
    out.dataset.window_size = window_size;
    const std::string id = stamp_id.empty() ? accel.stream_id : stamp_id;
    for (const GpsPoint& p : track.points) {
        // last accel sample at or before the label time
        const auto it = std::upper_bound(accel.t.begin(), accel.t.end(), p.t + 1e-9);
        const int64_t j = static_cast<int64_t>(it - accel.t.begin()) - 1;
        if (j < window_size - 1 || j < 0 || std::abs(accel.t[static_cast<size_t>(j)] - p.t) > tolerance_s) {
            ++out.skipped_labels;
            continue;
        }
        WindowEntry e;
        e.window.resize(static_cast<size_t>(window_size) * 3);
        for (int k = 0; k < window_size; ++k) {
            const size_t src = static_cast<size_t>(j - window_size + 1 + k);
            e.window[static_cast<size_t>(k) * 3 + 0] = accel.ax[src];
            e.window[static_cast<size_t>(k) * 3 + 1] = accel.ay[src];
            e.window[static_cast<size_t>(k) * 3 + 2] = accel.az[src];
        }
        e.label = p.speed;
        e.t_label = p.t;
        e.session_id = id;
        out.dataset.entries.push_back(std::move(e));
    }
    return out;
}

SessionWindows windows_from_files(const std::string& session_id, const std::string& imu_path,
                                  const std::string& gps_path, int window_size,
                                  const PipelineConfig& cfg) {
    ImuSession imu = parse_imu_csv(imu_path);
    GpsTrack gps = parse_gps_csv(gps_path);
    imu.session_id = session_id;
    gps.session_id = session_id;

    SessionWindows out;
    out.session_id = session_id;
    out.imu_samples = imu.samples.size();
    out.gps_points = gps.points.size();
    out.windows.window_size = window_size;

    GatedPair gated = gate_gdop(gps, imu, cfg.gdop_max);
    const auto segments = regularize_session(gated.imu, cfg);
    out.segments = static_cast<int>(segments.size());
    size_t emitted = 0;
    for (const auto& seg : segments) {
        const AccelStream stream = filter_and_decimate(seg, cfg);
        WindowExtraction ext =
            extract_windows(stream, gated.track, window_size, cfg.label_tolerance_s, session_id);
        for (auto& e : ext.dataset.entries) out.windows.entries.push_back(std::move(e));
        emitted += ext.dataset.entries.size();
    }
    out.skipped_labels = static_cast<int>(gated.track.points.size() - emitted);
    return out;
}

std::vector<SessionFiles> discover_sessions(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw InvalidInput(dir + ": not a directory");
    std::map<std::string, SessionFiles> found;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.ends_with(".imu.csv")) {
            const std::string id = name.substr(0, name.size() - 8);
            found[id].session_id = id;
            found[id].imu_path = entry.path().string();
        } else if (name.ends_with(".gps.csv")) {
            const std::string id = name.substr(0, name.size() - 8);
            found[id].session_id = id;
            found[id].gps_path = entry.path().string();
        }
    }
    std::vector<SessionFiles> out;
    for (auto& [id, files] : found) {
        if (files.imu_path.empty() || files.gps_path.empty()) {
            throw InvalidInput(dir + ": session '" + id + "' is missing its imu or gps file");
        }
        out.push_back(std::move(files));
    }
    if (out.empty()) throw InvalidInput(dir + ": no session file pairs found");
    return out;
}

SplitResult split_sessions(const std::vector<SessionWindows>& sessions, int test_session_count,
                           double val_fraction, uint64_t seed) {
    if (sessions.size() < 3) {
        throw InvalidInput(strfmt("split_sessions: need at least 3 sessions, got %zu", sessions.size()));
    }
    if (test_session_count < 1 || test_session_count > static_cast<int>(sessions.size()) - 2) {
        throw InvalidInput("split_sessions: test session count leaves no room for train and val");
    }
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
        throw InvalidInput("split_sessions: val fraction must be inside (0, 1)");
    }

    std::vector<size_t> order(sessions.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return sessions[a].session_id < sessions[b].session_id;
    });
    Rng rng(derive_seed(seed, "session-split"));
    rng.shuffle(order);

    SplitResult out;
    std::vector<bool> is_test(sessions.size(), false);
    for (int i = 0; i < test_session_count; ++i) {
        is_test[order[static_cast<size_t>(i)]] = true;
        out.test_session_ids.push_back(sessions[order[static_cast<size_t>(i)]].session_id);
    }
    std::sort(out.test_session_ids.begin(), out.test_session_ids.end());

    const int w = sessions.front().windows.window_size;
    out.train.window_size = out.val.window_size = out.test.window_size = w;
    std::vector<const WindowEntry*> pool;
    for (size_t i = 0; i < sessions.size(); ++i) {
        if (sessions[i].windows.window_size != w) {
            throw InvalidInput("split_sessions: sessions were windowed at different sizes");
        }
        for (const auto& e : sessions[i].windows.entries) {
            if (is_test[i]) {
                out.test.entries.push_back(e);
            } else {
                pool.push_back(&e);
            }
        }
    }
    if (pool.size() < 2) throw InvalidInput("split_sessions: not enough windows to split train/val");
    rng.shuffle(pool);
    const size_t val_n = std::max<size_t>(1, static_cast<size_t>(std::llround(
                                                 static_cast<double>(pool.size()) * val_fraction)));
    for (size_t i = 0; i < pool.size(); ++i) {
        (i < val_n ? out.val : out.train).entries.push_back(*pool[i]);
    }
    return out;
}

bool audit_no_leakage(const SplitResult& split) {
    auto held_out = [&](const WindowEntry& e) {
        return std::binary_search(split.test_session_ids.begin(), split.test_session_ids.end(),
                                  e.session_id);
    };
    for (const auto& e : split.train.entries) {
        if (held_out(e)) return false;
    }
    for (const auto& e : split.val.entries) {
        if (held_out(e)) return false;
    }
    for (const auto& e : split.test.entries) {
        if (!held_out(e)) return false;
    }
    return true;
}

NormStats standardize_fit(const WindowedDataset& train) {
    if (train.empty()) throw InvalidInput("standardize: cannot fit on an empty dataset");
    NormStats stats;
    std::array<double, 3> sum{0, 0, 0};
    std::array<double, 3> sumsq{0, 0, 0};
    int64_t n = 0;
    for (const auto& e : train.entries) {
        for (size_t i = 0; i < e.window.size(); i += 3) {
            for (int a = 0; a < 3; ++a) {
                sum[static_cast<size_t>(a)] += e.window[i + static_cast<size_t>(a)];
            }
        }
        n += static_cast<int64_t>(e.window.size() / 3);
    }
    for (int a = 0; a < 3; ++a) stats.mean[static_cast<size_t>(a)] = sum[static_cast<size_t>(a)] / static_cast<double>(n);
    for (const auto& e : train.entries) {
        for (size_t i = 0; i < e.window.size(); i += 3) {
            for (int a = 0; a < 3; ++a) {
                const double d = e.window[i + static_cast<size_t>(a)] - stats.mean[static_cast<size_t>(a)];
                sumsq[static_cast<size_t>(a)] += d * d;
            }
        }
    }
    for (int a = 0; a < 3; ++a) {
        const double var = sumsq[static_cast<size_t>(a)] / static_cast<double>(n);
        if (!(var > 0)) {
            throw InvalidInput(strfmt("standardize: axis %d has zero standard deviation", a));
        }
        stats.stddev[static_cast<size_t>(a)] = std::sqrt(var);
    }
    stats.fitted = true;
    return stats;
}

std::vector<double> standardize_apply(const NormStats& stats, const std::vector<double>& window) {
    if (!stats.fitted) throw InvalidInput("standardize: apply called before fit");
    std::vector<double> out(window.size());
    for (size_t i = 0; i < window.size(); ++i) {
        const size_t a = i % 3;
        out[i] = (window[i] - stats.mean[a]) / stats.stddev[a];
    }
    return out;
}

std::vector<double> standardize_invert(const NormStats& stats, const std::vector<double>& window) {
    if (!stats.fitted) throw InvalidInput("standardize: invert called before fit");
    std::vector<double> out(window.size());
    for (size_t i = 0; i < window.size(); ++i) {
        const size_t a = i % 3;
        out[i] = window[i] * stats.stddev[a] + stats.mean[a];
    }
    return out;
}

}  // namespace carspeed
