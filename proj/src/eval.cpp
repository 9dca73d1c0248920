#include "carspeed/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>

namespace carspeed {

double rmse(const std::vector<double>& gt, const std::vector<double>& pred) {
    if (gt.empty() || gt.size() != pred.size()) {
        throw InvalidInput(strfmt("rmse: need equal non-empty vectors, got %zu and %zu", gt.size(),
                                  pred.size()));
    }
    double sq = 0;
    for (size_t i = 0; i < gt.size(); ++i) {
        const double d = gt[i] - pred[i];
        sq += d * d;
    }
    return std::sqrt(sq / static_cast<double>(gt.size()));
}

double mae(const std::vector<double>& gt, const std::vector<double>& pred) {
    if (gt.empty() || gt.size() != pred.size()) {
        throw InvalidInput(strfmt("mae: need equal non-empty vectors, got %zu and %zu", gt.size(),
                                  pred.size()));
    }
    double acc = 0;
    for (size_t i = 0; i < gt.size(); ++i) acc += std::abs(gt[i] - pred[i]);
    return acc / static_cast<double>(gt.size());
}

double median(std::vector<double> values) {
    if (values.empty()) throw InvalidInput("median: empty input");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double latency_from_samples(std::vector<double> samples_ms) { return median(std::move(samples_ms)); }

double rmse_of_trace(const std::vector<TraceRow>& trace) {
    std::vector<double> gt, pred;
    gt.reserve(trace.size());
    pred.reserve(trace.size());
    for (const auto& r : trace) {
        gt.push_back(r.gt_speed);
        pred.push_back(r.pred_speed);
    }
    return rmse(gt, pred);
}

double mae_of_trace(const std::vector<TraceRow>& trace) {
    std::vector<double> gt, pred;
    gt.reserve(trace.size());
    pred.reserve(trace.size());
    for (const auto& r : trace) {
        gt.push_back(r.gt_speed);
        pred.push_back(r.pred_speed);
    }
    return mae(gt, pred);
}

void MetricsReport::validate(bool timing_measured) const {
    if (!(rmse_mps >= 0) || !(mae_mps >= 0)) {
        throw InvalidInput("metrics: negative error value");
    }
    if (rmse_mps < mae_mps - 1e-12 * std::max(1.0, mae_mps)) {
        throw InvalidInput(strfmt("metrics: rmse %.9g below mae %.9g", rmse_mps, mae_mps));
    }
    if (timing_measured && !(latency_ms > 0)) {
        throw InvalidInput("metrics: measured latency must be positive");
    }
}

Precision precision_from_name(const std::string& name) {
    if (name == "narrow") return Precision::narrow;
    if (name == "wide") return Precision::wide;
    throw InvalidInput("precision must be 'narrow' or 'wide', got '" + name + "'");
}

std::vector<std::string> select_test_sessions(std::vector<std::string> ids, int test_count,
                                              uint64_t seed) {
    if (ids.size() < 3) {
        throw InvalidInput(strfmt("need at least 3 sessions, got %zu", ids.size()));
    }
    if (test_count < 1 || test_count > static_cast<int>(ids.size()) - 2) {
        throw InvalidInput("test session count leaves no room for train and val");
    }
    std::sort(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, "session-split"));
    rng.shuffle(ids);
    ids.resize(static_cast<size_t>(test_count));
    std::sort(ids.begin(), ids.end());
    return ids;
}

namespace {

template <typename S>
EvalOutcome run_cell_impl(const std::vector<SessionFiles>& sessions, const std::string& model_name,
                          int window_size, const HarnessConfig& cfg) {
    std::vector<SessionWindows> per_session;
    per_session.reserve(sessions.size());
    for (const auto& files : sessions) {
        per_session.push_back(windows_from_files(files.session_id, files.imu_path, files.gps_path,
                                                 window_size, cfg.pipeline));
    }
    SplitResult split =
        split_sessions(per_session, cfg.test_sessions, cfg.val_fraction, cfg.train.seed);
    if (!audit_no_leakage(split)) {
        throw InvalidInput("run_training_cell: session audit found test windows in train/val");
    }

    const uint64_t cell_seed =
        derive_seed(cfg.train.seed, model_name + "/w" + std::to_string(window_size));
    Model<S> model = build_model<S>(model_name, window_size, cell_seed);
    TrainConfig tc = cfg.train;
    tc.seed = cell_seed;
    EvalOutcome out;
    out.history = fit(model, split.train, split.val, tc);

    const auto preds = predict_dataset(model, split.test);
    out.trace.reserve(preds.size());
    for (size_t i = 0; i < preds.size(); ++i) {
        out.trace.push_back(
            {split.test.entries[i].t_label, split.test.entries[i].label, preds[i]});
    }
    if (out.trace.empty()) {
        throw InvalidInput("run_training_cell: held-out sessions produced no windows");
    }

    MetricsReport& r = out.report;
    r.model_name = model_name;
    r.window_samples = window_size;
    r.window_seconds = window_size / cfg.pipeline.out_rate_hz();
    r.rmse_mps = rmse_of_trace(out.trace);
    r.mae_mps = mae_of_trace(out.trace);
    r.param_count = model.param_count();
    r.published_count = published_param_count(model_name);
    std::string tag;
    for (const auto& id : split.test_session_ids) tag += (tag.empty() ? "" : "+") + id;
    r.dataset_tag = tag;
    if (cfg.latency_reps > 0) {
        std::vector<double> window(static_cast<size_t>(window_size) * 3, 0.0);
        r.latency_ms = measure_latency_ms(model, window, cfg.latency_reps);
    }
    r.validate(cfg.latency_reps > 0);
    return out;
}

}  // namespace

EvalOutcome run_training_cell(const std::vector<SessionFiles>& sessions,
                              const std::string& model_name, int window_size,
                              const HarnessConfig& cfg) {
    if (cfg.precision == Precision::wide) {
        return run_cell_impl<double>(sessions, model_name, window_size, cfg);
    }
    return run_cell_impl<float>(sessions, model_name, window_size, cfg);
}

std::vector<MetricsReport> sweep_windows(const std::vector<SessionFiles>& sessions,
                                         const std::string& model_name,
                                         const std::vector<int>& sizes, const HarnessConfig& cfg,
                                         std::vector<EvalOutcome>* outcomes) {
    if (sizes.empty()) throw InvalidInput("sweep_windows: no window sizes given");
    std::vector<MetricsReport> rows;
    for (const int w : sizes) {
        try {
            EvalOutcome cell = run_training_cell(sessions, model_name, w, cfg);
            rows.push_back(cell.report);
            if (outcomes != nullptr) outcomes->push_back(std::move(cell));
        } catch (const std::exception& e) {
            throw InvalidInput(strfmt("sweep: window size %d failed: %s", w, e.what()));
        }
    }
    return rows;
}

std::vector<MetricsReport> compare_models(const std::vector<SessionFiles>& sessions,
                                          const std::vector<std::string>& names, int window_size,
                                          const HarnessConfig& cfg) {
    if (names.empty()) throw InvalidInput("compare_models: no model names given");
    std::vector<MetricsReport> rows;
    for (const auto& name : names) {
        rows.push_back(run_training_cell(sessions, name, window_size, cfg).report);
    }
    return rows;
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsReport>& rows,
                       bool include_published) {
    out << "model,window_samples,window_seconds,rmse_mps,mae_mps,latency_ms,param_count";
    if (include_published) out << ",published_param_count";
    out << "\n";
    for (const auto& r : rows) {
        out << strfmt("%s,%d,%.2f,%.6f,%.6f,%.3f,%lld", r.model_name.c_str(), r.window_samples,
                      r.window_seconds, r.rmse_mps, r.mae_mps, r.latency_ms,
                      static_cast<long long>(r.param_count));
        if (include_published) out << strfmt(",%lld", static_cast<long long>(r.published_count));
        out << "\n";
    }
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows) {
    out << "t,gt_speed,pred_speed\n";
    for (const auto& r : rows) {
        out << strfmt("%.17g,%.17g,%.17g\n", r.t, r.gt_speed, r.pred_speed);
    }
}

void write_history_csv(std::ostream& out, const TrainHistory& hist, bool zero_seconds) {
    out << "epoch,train_loss,val_loss,lr,seconds\n";
    for (const auto& e : hist.epochs) {
        out << strfmt("%d,%.9g,%.9g,%.9g,%.3f\n", e.epoch, e.train_loss, e.val_loss, e.lr,
                      zero_seconds ? 0.0 : e.seconds);
    }
}

void write_history_csv(const std::string& path, const TrainHistory& hist, bool zero_seconds) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InvalidInput(path + ": cannot open for writing");
    write_history_csv(f, hist, zero_seconds);
}

}  // namespace carspeed
