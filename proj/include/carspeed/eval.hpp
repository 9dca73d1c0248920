#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "carspeed/model.hpp"
#include "carspeed/serialize.hpp"
#include "carspeed/signal.hpp"
#include "carspeed/train.hpp"

namespace carspeed {

// Error metrics, always computed in double regardless of model precision.
double rmse(const std::vector<double>& gt, const std::vector<double>& pred);
double mae(const std::vector<double>& gt, const std::vector<double>& pred);

double median(std::vector<double> values);

/// The latency statistic is the median of the per-repetition wall times.
double latency_from_samples(std::vector<double> samples_ms);

/// Median wall time of single-window inference over `reps` runs after 5
/// warm-up runs. Single-threaded.
template <typename S>
double measure_latency_ms(Model<S>& model, const std::vector<double>& window, int reps);

/// One evaluation point per GPS label: time, ground truth and prediction.
struct TraceRow {
    double t;
    double gt_speed;
    double pred_speed;
};

double rmse_of_trace(const std::vector<TraceRow>& trace);
double mae_of_trace(const std::vector<TraceRow>& trace);

/// One row of the published-style results tables.
struct MetricsReport {
    std::string model_name;
    int window_samples = 0;
    double window_seconds = 0;
    double rmse_mps = 0;
    double mae_mps = 0;
    double latency_ms = 0;  // 0 when timing was disabled
    int64_t param_count = 0;
    int64_t published_count = 0;
    std::string dataset_tag;

    /// rmse >= mae >= 0 always; latency > 0 whenever it was measured.
    void validate(bool timing_measured) const;
};

enum class Precision { narrow, wide };
Precision precision_from_name(const std::string& name);

struct HarnessConfig {
    TrainConfig train;
    PipelineConfig pipeline;
    int test_sessions = 1;
    double val_fraction = 0.2;
    int latency_reps = 50;  // 0 disables latency measurement
    Precision precision = Precision::narrow;
};

/// The deterministic held-out choice shared by training and evaluation:
/// shuffle the sorted ids with the split seed, take the first test_count.
std::vector<std::string> select_test_sessions(std::vector<std::string> ids, int test_count,
                                              uint64_t seed);

struct EvalOutcome {
    MetricsReport report;
    std::vector<TraceRow> trace;
    TrainHistory history;
};

/// Train `model_name` at `window_size` on the corpus (minus held-out
/// sessions) and evaluate it on the held-out windows.
EvalOutcome run_training_cell(const std::vector<SessionFiles>& sessions,
                              const std::string& model_name, int window_size,
                              const HarnessConfig& cfg);

/// One independent train/test cycle per window size.
std::vector<MetricsReport> sweep_windows(const std::vector<SessionFiles>& sessions,
                                         const std::string& model_name,
                                         const std::vector<int>& sizes, const HarnessConfig& cfg,
                                         std::vector<EvalOutcome>* outcomes = nullptr);

/// One independent train/test cycle per architecture at a fixed window.
std::vector<MetricsReport> compare_models(const std::vector<SessionFiles>& sessions,
                                          const std::vector<std::string>& names, int window_size,
                                          const HarnessConfig& cfg);

// CSV emitters. Sweep/compare header:
//   model,window_samples,window_seconds,rmse_mps,mae_mps,latency_ms,param_count
// with compare adding published_param_count. Trace header: t,gt_speed,pred_speed
// (full round-trip precision so metrics recomputed from the file match).
void write_metrics_csv(std::ostream& out, const std::vector<MetricsReport>& rows,
                       bool include_published);
void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows);
void write_history_csv(std::ostream& out, const TrainHistory& hist, bool zero_seconds);

// ---------------------------------------------------------------------------
// templates

template <typename S>
double measure_latency_ms(Model<S>& model, const std::vector<double>& window, int reps) {
    if (reps < 10) throw InvalidInput("measure_latency: need at least 10 repetitions");
    for (int i = 0; i < 5; ++i) {
        model.predict(window.data(), 1, model.window_size, 3);
    }
    std::vector<double> samples;
    samples.reserve(static_cast<size_t>(reps));
    for (int i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        model.predict(window.data(), 1, model.window_size, 3);
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return latency_from_samples(std::move(samples));
}

/// Run the pipeline over one session and predict at every labeled window.
template <typename S>
std::vector<TraceRow> trace_session(Model<S>& model, const SessionFiles& files,
                                    const PipelineConfig& pcfg) {
    const SessionWindows sw = windows_from_files(files.session_id, files.imu_path, files.gps_path,
                                                 model.window_size, pcfg);
    const auto preds = predict_dataset(model, sw.windows);
    std::vector<TraceRow> rows;
    rows.reserve(preds.size());
    for (size_t i = 0; i < preds.size(); ++i) {
        rows.push_back({sw.windows.entries[i].t_label, sw.windows.entries[i].label, preds[i]});
    }
    return rows;
}

/// Evaluate an already-trained model on the corpus' held-out sessions
/// (selected with the same seed rule as training).
template <typename S>
EvalOutcome evaluate_model(Model<S>& model, const std::vector<SessionFiles>& sessions,
                           const HarnessConfig& cfg) {
    std::vector<std::string> ids;
    for (const auto& s : sessions) ids.push_back(s.session_id);
    const auto test_ids = select_test_sessions(ids, cfg.test_sessions, cfg.train.seed);

    EvalOutcome out;
    std::string tag;
    for (const auto& files : sessions) {
        if (std::find(test_ids.begin(), test_ids.end(), files.session_id) == test_ids.end()) continue;
        const auto rows = trace_session(model, files, cfg.pipeline);
        out.trace.insert(out.trace.end(), rows.begin(), rows.end());
        tag += (tag.empty() ? "" : "+") + files.session_id;
    }
    if (out.trace.empty()) throw InvalidInput("evaluate_model: held-out sessions produced no windows");

    MetricsReport& r = out.report;
    r.model_name = model.name;
    r.window_samples = model.window_size;
    r.window_seconds = model.window_size / cfg.pipeline.out_rate_hz();
    r.rmse_mps = rmse_of_trace(out.trace);
    r.mae_mps = mae_of_trace(out.trace);
    r.param_count = model.param_count();
    r.published_count = published_param_count(model.name);
    r.dataset_tag = tag;
    if (cfg.latency_reps > 0) {
        std::vector<double> window(static_cast<size_t>(model.window_size) * 3, 0.0);
        r.latency_ms = measure_latency_ms(model, window, cfg.latency_reps);
    }
    r.validate(cfg.latency_reps > 0);
    return out;
}

}  // namespace carspeed
