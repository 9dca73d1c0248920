#include "carspeed/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "carspeed/rng.hpp"

namespace carspeed {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

void DriveProfile::rebuild_index() {
    starts.clear();
    starts.reserve(segments.size());
    double t = 0;
    for (const auto& seg : segments) {
        starts.push_back(t);
        t += seg.duration;
    }
    duration = t;
}

double DriveProfile::speed_at(double t) const {
    if (segments.empty()) return 0.0;
    if (t <= 0) return segments.front().v0;
    if (t >= duration) return segments.back().v1;
    const auto it = std::upper_bound(starts.begin(), starts.end(), t);
    const size_t i = static_cast<size_t>(it - starts.begin()) - 1;
    const ProfileSegment& seg = segments[i];
    const double frac = (t - starts[i]) / seg.duration;
    return seg.v0 + (seg.v1 - seg.v0) * frac;
}

double DriveProfile::accel_at(double t) const {
    if (segments.empty() || t < 0 || t >= duration) return 0.0;
    const auto it = std::upper_bound(starts.begin(), starts.end(), t);
    const size_t i = static_cast<size_t>(it - starts.begin()) - 1;
    const ProfileSegment& seg = segments[i];
    return (seg.v1 - seg.v0) / seg.duration;
}

double DriveProfile::yaw_rate_at(double t) const {
    if (segments.empty() || t < 0 || t >= duration) return 0.0;
    const auto it = std::upper_bound(starts.begin(), starts.end(), t);
    const size_t i = static_cast<size_t>(it - starts.begin()) - 1;
    return segments[i].yaw_rate;
}

DriveProfile gen_profile(double duration_s, uint64_t seed) {
    if (duration_s < 60.0) throw InvalidInput("gen_profile: duration must be at least 60 s");
    Rng rng(derive_seed(seed, "profile"));
    DriveProfile p;
    double elapsed = 0;
    double v = 0;
    auto push = [&](double dur, double v0, double v1, double yaw) {
        p.segments.push_back({dur, v0, v1, yaw});
        elapsed += dur;
        v = v1;
    };

    push(rng.uniform(5.0, 30.0), 0.0, 0.0, 0.0);
    bool highway = rng.uniform() < 0.35;
    while (true) {
        // propose the next maneuver, then reject it if it would cross the
        // room reserved for the final brake-and-stop
        std::vector<ProfileSegment> prop;
        if (v == 0.0) {
            highway = rng.uniform() < 0.35;
            const double target = highway ? rng.uniform(20.0, 33.0) : rng.uniform(5.0, 15.0);
            const double a = rng.uniform(1.0, 3.0);
            prop.push_back({target / a, 0.0, target, 0.0});
        } else {
            const double choice = rng.uniform();
            if (choice < 0.5) {
                // cruise, possibly turning
                double yaw = 0.0;
                if (rng.uniform() < 0.5) {
                    const double mag = std::min(0.5, 3.0 / std::max(v, 1.0));
                    yaw = (rng.uniform() < 0.5 ? -1.0 : 1.0) * mag * rng.uniform(0.3, 1.0);
                }
                prop.push_back({rng.uniform(5.0, 15.0), v, v, yaw});
            } else if (choice < 0.8) {
                // ramp to a new target in the same regime
                const double target =
                    std::clamp(v * rng.uniform(0.6, 1.4), 3.0, highway ? 33.0 : 16.0);
                const double a = rng.uniform(0.8, 2.5);
                const double dur = std::abs(target - v) / a;
                if (dur > 0.5) {
                    prop.push_back({dur, v, target, 0.0});
                } else {
                    prop.push_back({rng.uniform(3.0, 8.0), v, v, 0.0});
                }
            } else {
                // brake to a stop and wait
                const double a = rng.uniform(1.5, 3.5);
                prop.push_back({v / a, v, 0.0, 0.0});
                prop.push_back({rng.uniform(5.0, 30.0), 0.0, 0.0, 0.0});
            }
        }
        double pd = 0;
        for (const auto& seg : prop) pd += seg.duration;
        const double v_end = prop.back().v1;
        if (elapsed + pd + v_end / 2.0 + 8.0 > duration_s) break;
        for (const auto& seg : prop) push(seg.duration, seg.v0, seg.v1, seg.yaw_rate);
    }
    if (v > 0.0) push(v / 2.0, v, 0.0, 0.0);
    push(duration_s - elapsed, 0.0, 0.0, 0.0);
    p.rebuild_index();
    return p;
}

void MountModel::validate() const {
    if (noise_std < 0) throw InvalidInput("mount: noise_std must be non-negative");
    // R^T R == I within 1e-9
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) {
                s += rotation[static_cast<size_t>(k * 3 + i)] * rotation[static_cast<size_t>(k * 3 + j)];
            }
            if (std::abs(s - (i == j ? 1.0 : 0.0)) > 1e-9) {
                throw InvalidInput("mount: rotation is not orthonormal");
            }
        }
    }
}

MountModel MountModel::identity(double noise_std) {
    MountModel m;
    m.noise_std = noise_std;
    return m;
}

MountModel MountModel::randomized(uint64_t seed, double max_tilt_deg, double max_bias,
                                  double noise_std) {
    Rng rng(derive_seed(seed, "mount"));
    MountModel m;
    // random rotation axis, angle uniform in [0, max_tilt]
    double ax = rng.normal(), ay = rng.normal(), az = rng.normal();
    const double norm = std::sqrt(ax * ax + ay * ay + az * az);
    ax /= norm;
    ay /= norm;
    az /= norm;
    const double angle = rng.uniform(0.0, max_tilt_deg * kTwoPi / 360.0);
    const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    m.rotation = {t * ax * ax + c,      t * ax * ay - s * az, t * ax * az + s * ay,
                  t * ax * ay + s * az, t * ay * ay + c,      t * ay * az - s * ax,
                  t * ax * az - s * ay, t * ay * az + s * ax, t * az * az + c};
    for (auto& b : m.bias) b = rng.uniform(-max_bias, max_bias);
    m.noise_std = noise_std;
    return m;
}

ImuSession render_imu(const DriveProfile& profile, const MountModel& mount, uint64_t seed,
                      const VibrationModel& vibration, double rate_hz) {
    mount.validate();
    Rng rng(derive_seed(seed, "imu"));
    std::array<double, 3> low_phase{}, high_phase{}, low_amp{}, high_amp{};
    for (int a = 0; a < 3; ++a) {
        const size_t ai = static_cast<size_t>(a);
        low_phase[ai] = rng.uniform(0.0, kTwoPi);
        high_phase[ai] = rng.uniform(0.0, kTwoPi);
        low_amp[ai] = vibration.low_amp[ai] * (1.0 + rng.uniform(-1.0, 1.0) * vibration.amp_jitter);
        high_amp[ai] = vibration.high_amp[ai] * (1.0 + rng.uniform(-1.0, 1.0) * vibration.amp_jitter);
    }

    ImuSession session;
    session.nominal_rate_hz = rate_hz;
    const int64_t n = static_cast<int64_t>(std::llround(profile.duration * rate_hz));
    session.samples.reserve(static_cast<size_t>(n));
    for (int64_t k = 0; k < n; ++k) {
        const double t = static_cast<double>(k) / rate_hz;
        const double v = profile.speed_at(t);
        std::array<double, 3> f{profile.accel_at(t), v * profile.yaw_rate_at(t),
                                MountModel::gravity};
        for (int a = 0; a < 3; ++a) {
            const size_t ai = static_cast<size_t>(a);
            f[ai] += v * (low_amp[ai] * std::sin(kTwoPi * vibration.low_freq_hz[ai] * t + low_phase[ai]) +
                          high_amp[ai] * std::sin(kTwoPi * vibration.high_freq_hz[ai] * t + high_phase[ai]));
        }
        ImuSample s;
        s.t = t;
        std::array<double, 3> out{};
        for (int i = 0; i < 3; ++i) {
            double acc = mount.bias[static_cast<size_t>(i)];
            for (int j = 0; j < 3; ++j) {
                acc += mount.rotation[static_cast<size_t>(i * 3 + j)] * f[static_cast<size_t>(j)];
            }
            out[static_cast<size_t>(i)] = acc;
        }
        if (mount.noise_std > 0) {
            for (auto& o : out) o += mount.noise_std * rng.normal();
        }
        s.ax = out[0];
        s.ay = out[1];
        s.az = out[2];
        session.samples.push_back(s);
    }
    return session;
}

double GdopProfile::at(double t) const {
    if (t < warmup_s) {
        return start - (start - 5.2) * (t / warmup_s);
    }
    return locked + wiggle * std::sin(0.13 * t);
}

GpsTrack render_gps(const DriveProfile& profile, double noise_std, const GdopProfile& gdop,
                    uint64_t seed) {
    Rng rng(derive_seed(seed, "gps"));
    GpsTrack track;
    const int64_t n = static_cast<int64_t>(std::floor(profile.duration));
    track.points.reserve(static_cast<size_t>(n));
    for (int64_t k = 0; k < n; ++k) {
        GpsPoint p;
        p.t = static_cast<double>(k);
        p.speed = profile.speed_at(p.t);
        if (noise_std > 0) p.speed += noise_std * rng.normal();
        if (p.speed < 0) p.speed = 0;
        p.gdop = gdop.at(p.t);
        track.points.push_back(p);
    }
    return track;
}

EmittedSession emit_session(const DriveProfile& profile, const MountModel& mount,
                            const std::string& out_dir, uint64_t seed, const SynthConfig& cfg,
                            const std::string& session_id) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    EmittedSession out;
    out.session_id = session_id.empty() ? strfmt("drive_%05llu", static_cast<unsigned long long>(seed % 100000))
                                        : session_id;
    out.duration_s = profile.duration;
    out.profile_seed = seed;
    out.imu_path = (fs::path(out_dir) / (out.session_id + ".imu.csv")).string();
    out.gps_path = (fs::path(out_dir) / (out.session_id + ".gps.csv")).string();

    const ImuSession imu = render_imu(profile, mount, seed, cfg.vibration);
    const GpsTrack gps = render_gps(profile, cfg.gps_noise_std, cfg.gdop, seed);

    {
        std::ofstream f(out.imu_path, std::ios::trunc);
        if (!f) throw InvalidInput(out.imu_path + ": cannot open for writing");
        f << "t,ax,ay,az\n";
        for (const auto& s : imu.samples) {
            f << strfmt("%.6f,%.6f,%.6f,%.6f\n", s.t, s.ax, s.ay, s.az);
        }
        if (!f) throw InvalidInput(out.imu_path + ": write failed");
    }
    {
        std::ofstream f(out.gps_path, std::ios::trunc);
        if (!f) throw InvalidInput(out.gps_path + ": cannot open for writing");
        f << "t,speed,gdop\n";
        for (const auto& p : gps.points) {
            f << strfmt("%.6f,%.6f,%.6f\n", p.t, p.speed, p.gdop);
        }
        if (!f) throw InvalidInput(out.gps_path + ": write failed");
    }
    return out;
}

std::vector<EmittedSession> synth_corpus(const std::string& out_dir, double hours, int n_sessions,
                                         uint64_t seed, const SynthConfig& cfg) {
    if (!(hours > 0)) throw InvalidInput("synth_corpus: hours must be positive");
    const double total_s = hours * 3600.0;
    Rng rng(derive_seed(seed, "corpus"));
    std::vector<EmittedSession> sessions;
    double emitted_s = 0;
    int i = 0;
    while (n_sessions > 0 ? i < n_sessions : emitted_s < total_s) {
        const double duration = n_sessions > 0
                                    ? std::max(60.0, total_s / n_sessions)
                                    : rng.uniform(300.0, 600.0);
        const uint64_t session_seed = derive_seed(seed, "session", static_cast<uint64_t>(i));
        const DriveProfile profile = gen_profile(duration, session_seed);
        const MountModel mount =
            MountModel::randomized(session_seed, cfg.max_tilt_deg, cfg.max_bias, cfg.imu_noise_std);
        EmittedSession s = emit_session(profile, mount, out_dir, session_seed, cfg,
                                        strfmt("drive_%04d", i));
        sessions.push_back(std::move(s));
        emitted_s += duration;
        ++i;
    }
    return sessions;
}

}  // namespace carspeed
