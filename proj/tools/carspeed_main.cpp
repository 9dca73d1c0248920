// carspeed: synthesize drive data, preprocess it, train the speed models and
// run the evaluation harnesses from one executable.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "carspeed/eval.hpp"
#include "carspeed/model.hpp"
#include "carspeed/serialize.hpp"
#include "carspeed/signal.hpp"
#include "carspeed/synth.hpp"
#include "carspeed/train.hpp"

namespace carspeed::cli {

namespace {

using nlohmann::json;

/// Ties CLI flags, JSON config keys and the resolved-config log together.
/// Flags win over config values; config values win over defaults.
class Binder {
public:
    explicit Binder(CLI::App* cmd) : cmd_(cmd) {}

    template <typename T>
    CLI::Option* bind(const std::string& flag, T& var, const std::string& desc) {
        CLI::Option* opt = cmd_->add_option(flag, var, desc)->capture_default_str();
        reg(flag, opt, var);
        return opt;
    }

    template <typename T>
    CLI::Option* bind_vec(const std::string& flag, std::vector<T>& var, const std::string& desc) {
        CLI::Option* opt = cmd_->add_option(flag, var, desc)->delimiter(',');
        const std::string key = key_of(flag);
        keys_[key] = opt;
        setters_[key] = [&var](const json& j) {
            var.clear();
            if (j.is_string()) {
                for (const auto& part : split(j.get<std::string>(), ',')) {
                    std::istringstream ss(part);
                    T v;
                    ss >> v;
                    var.push_back(v);
                }
            } else {
                for (const auto& item : j) var.push_back(item.get<T>());
            }
        };
        getters_[key] = [&var]() {
            json arr = json::array();
            for (const auto& v : var) arr.push_back(v);
            return arr;
        };
        return opt;
    }

    CLI::Option* bind_flag(const std::string& flag, bool& var, const std::string& desc) {
        CLI::Option* opt = cmd_->add_flag(flag, var, desc);
        reg(flag, opt, var);
        return opt;
    }

    /// Apply a config document: reject keys unknown to any subcommand, set
    /// the ones this subcommand knows and the user did not pass as flags.
    void apply(const json& cfg, const std::set<std::string>& global_keys) {
        for (const auto& [key, value] : cfg.items()) {
            if (!global_keys.count(key)) {
                throw InvalidInput("config: unknown key '" + key + "'");
            }
            const auto it = setters_.find(key);
            if (it == setters_.end()) continue;  // belongs to another subcommand
            if (keys_.at(key)->count() > 0) continue;  // flag wins
            try {
                it->second(value);
            } catch (const json::exception& e) {
                throw InvalidInput("config: bad value for '" + key + "': " + e.what());
            }
        }
    }

    json resolved() const {
        json out;
        for (const auto& [key, getter] : getters_) out[key] = getter();
        return out;
    }

    void collect_keys(std::set<std::string>& into) const {
        for (const auto& [key, opt] : keys_) into.insert(key);
    }

private:
    static std::string key_of(const std::string& flag) {
        std::string key = flag.substr(flag.find_first_not_of('-'));
        for (auto& c : key) {
            if (c == '-') c = '_';
        }
        return key;
    }

    template <typename T>
    void reg(const std::string& flag, CLI::Option* opt, T& var) {
        const std::string key = key_of(flag);
        keys_[key] = opt;
        setters_[key] = [&var](const json& j) { var = j.get<T>(); };
        getters_[key] = [&var]() { return json(var); };
    }

    CLI::App* cmd_;
    std::map<std::string, CLI::Option*> keys_;
    std::map<std::string, std::function<void(const json&)>> setters_;
    std::map<std::string, std::function<json()>> getters_;
};

struct CommonOpts {
    std::string config_path;
    std::string precision = "narrow";
    bool no_timing = false;
};

void log_config(const std::string& sub, const Binder& binder) {
    std::cerr << "carspeed " << sub << ": config " << binder.resolved().dump() << "\n";
}

template <typename Fn>
int with_precision(const std::string& precision, Fn&& fn) {
    if (precision_from_name(precision) == Precision::wide) return fn(double{});
    return fn(float{});
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InvalidInput(path + ": cannot open for writing");
    f << text;
    if (!f) throw InvalidInput(path + ": write failed");
}

void emit_to(const std::string& out_path, const std::function<void(std::ostream&)>& writer) {
    if (out_path.empty()) {
        writer(std::cout);
        return;
    }
    std::ostringstream ss;
    writer(ss);
    write_text(out_path, ss.str());
}

SessionFiles find_session(const std::vector<SessionFiles>& sessions, const std::string& wanted) {
    if (wanted.empty()) {
        if (sessions.size() == 1) return sessions.front();
        throw InvalidInput(strfmt("directory holds %zu sessions; pick one with --session",
                                  sessions.size()));
    }
    for (const auto& s : sessions) {
        if (s.session_id == wanted) return s;
    }
    throw InvalidInput("session '" + wanted + "' not found in the data directory");
}

// Per-subcommand option bundles.

struct SynthOpts {
    std::string out;
    double hours = 1.0;
    int sessions = 0;
    uint64_t seed = 7;
    double noise_imu = 0.05;
    double noise_gps = 0.2;
    double max_bias = 0.1;
    double max_tilt_deg = 10.0;
};

struct PipelineOpts {
    double cutoff_hz = 8.0;
    double gdop_max = 5.0;

    PipelineConfig to_config() const {
        PipelineConfig cfg;
        cfg.cutoff_hz = cutoff_hz;
        cfg.gdop_max = gdop_max;
        return cfg;
    }
};

struct TrainOpts {
    std::string data;
    std::string model = "carspeednet";
    int window = 80;
    uint64_t seed = 1;
    int epochs = 200;
    int batch_size = 32;
    double lr = 1e-3;
    int decay_steps = 30000;
    double decay_rate = 0.2;
    int patience = 1000;
    double clip_norm = 5.0;
    double val_fraction = 0.2;
    int test_sessions = 1;

    TrainConfig to_config() const {
        TrainConfig cfg;
        cfg.batch_size = batch_size;
        cfg.max_epochs = epochs;
        cfg.initial_lr = lr;
        cfg.decay_steps = decay_steps;
        cfg.decay_rate = decay_rate;
        cfg.patience = patience;
        cfg.clip_norm = clip_norm;
        cfg.seed = seed;
        return cfg;
    }
};

void bind_pipeline(Binder& b, PipelineOpts& p) {
    b.bind("--cutoff-hz", p.cutoff_hz, "anti-alias low-pass cutoff [Hz]");
    b.bind("--gdop-max", p.gdop_max, "largest acceptable GDOP at session start");
}

void bind_train(Binder& b, TrainOpts& t) {
    b.bind("--data", t.data, "session directory")->required();
    b.bind("--model", t.model, "model name (carspeednet|dnn_star|lstm|wavenet|bilstm|resnet)");
    b.bind("--window", t.window, "input window length [20 Hz samples]");
    b.bind("--seed", t.seed, "master seed for split/init/shuffle/dropout");
    b.bind("--epochs", t.epochs, "maximum training epochs");
    b.bind("--batch-size", t.batch_size, "mini-batch size [windows]");
    b.bind("--lr", t.lr, "initial learning rate");
    b.bind("--decay-steps", t.decay_steps, "learning-rate decay span [optimizer steps]");
    b.bind("--decay-rate", t.decay_rate, "learning-rate decay factor over decay-steps");
    b.bind("--patience", t.patience, "early-stopping patience [epochs]");
    b.bind("--clip-norm", t.clip_norm, "global gradient-norm clip; 0 disables");
    b.bind("--val-fraction", t.val_fraction, "fraction of pooled windows held for validation");
    b.bind("--test-sessions", t.test_sessions, "whole sessions held out for testing");
}

struct App {
    CLI::App app{"car speed estimation from smartphone accelerometer windows"};
    std::set<std::string> global_keys;
    std::vector<std::pair<std::string, Binder*>> binders;
    json config_doc;

    CLI::App* add_sub(const std::string& name, const std::string& desc, Binder** binder,
                      CommonOpts& common) {
        CLI::App* cmd = app.add_subcommand(name, desc);
        auto* b = new Binder(cmd);  // lives for the whole run
        b->bind("--config", common.config_path, "JSON config file; flags override its values");
        b->bind("--precision", common.precision, "scalar width: narrow (f32) or wide (f64)");
        b->bind_flag("--no-timing", common.no_timing,
                     "zero wall-time fields in outputs for byte-reproducible runs");
        binders.emplace_back(name, b);
        *binder = b;
        return cmd;
    }
};

}  // namespace

int run(int argc, const char* const* argv) {
    App a;
    a.app.require_subcommand(1);

    // --- synth ---------------------------------------------------------
    CommonOpts synth_common;
    Binder* synth_b = nullptr;
    CLI::App* synth_cmd = a.add_sub("synth", "generate synthetic drive sessions", &synth_b, synth_common);
    SynthOpts so;
    synth_b->bind("--out", so.out, "output directory for session file pairs")->required();
    synth_b->bind("--hours", so.hours, "total driving time to generate [h]");
    synth_b->bind("--sessions", so.sessions, "exact session count; 0 draws 300-600 s sessions");
    synth_b->bind("--seed", so.seed, "corpus seed");
    synth_b->bind("--noise-imu", so.noise_imu, "accelerometer noise std [m/s^2]");
    synth_b->bind("--noise-gps", so.noise_gps, "GPS speed noise std [m/s]");
    synth_b->bind("--max-bias", so.max_bias, "largest per-axis accelerometer bias [m/s^2]");
    synth_b->bind("--max-tilt-deg", so.max_tilt_deg, "largest phone mounting tilt [deg]");

    // --- preprocess ----------------------------------------------------
    CommonOpts pre_common;
    Binder* pre_b = nullptr;
    CLI::App* pre_cmd = a.add_sub("preprocess", "run the signal pipeline and report window counts",
                                  &pre_b, pre_common);
    std::string pre_data, pre_out;
    int pre_window = 80;
    PipelineOpts pre_pipe;
    pre_b->bind("--data", pre_data, "session directory")->required();
    pre_b->bind("--window", pre_window, "input window length [20 Hz samples]");
    pre_b->bind("--out", pre_out, "summary CSV path (default: stdout)");
    bind_pipeline(*pre_b, pre_pipe);

    // --- train ---------------------------------------------------------
    CommonOpts train_common;
    Binder* train_b = nullptr;
    CLI::App* train_cmd = a.add_sub("train", "train one model and save its weights", &train_b,
                                    train_common);
    TrainOpts to;
    PipelineOpts train_pipe;
    std::string train_out = "model.csnw", train_history;
    bind_train(*train_b, to);
    bind_pipeline(*train_b, train_pipe);
    train_b->bind("--out", train_out, "weights file to write");
    train_b->bind("--history", train_history, "per-epoch history CSV path (optional)");

    // --- eval ----------------------------------------------------------
    CommonOpts eval_common;
    Binder* eval_b = nullptr;
    CLI::App* eval_cmd = a.add_sub("eval", "evaluate trained weights on the held-out session",
                                   &eval_b, eval_common);
    std::string eval_weights, eval_data, eval_out;
    uint64_t eval_seed = 1;
    int eval_test_sessions = 1, eval_reps = 50;
    PipelineOpts eval_pipe;
    eval_b->bind("--weights", eval_weights, "weights file from `train`")->required();
    eval_b->bind("--data", eval_data, "session directory")->required();
    eval_b->bind("--seed", eval_seed, "seed that selected the held-out session");
    eval_b->bind("--test-sessions", eval_test_sessions, "whole sessions held out for testing");
    eval_b->bind("--reps", eval_reps, "latency repetitions; 0 skips timing");
    eval_b->bind("--out", eval_out, "metrics CSV path (default: stdout)");
    bind_pipeline(*eval_b, eval_pipe);

    // --- sweep ---------------------------------------------------------
    CommonOpts sweep_common;
    Binder* sweep_b = nullptr;
    CLI::App* sweep_cmd = a.add_sub("sweep", "train/test once per window size", &sweep_b,
                                    sweep_common);
    TrainOpts sweep_to;
    PipelineOpts sweep_pipe;
    std::vector<int> sweep_sizes{5, 10, 20, 40, 60, 80};
    std::string sweep_out;
    int sweep_reps = 50;
    bind_train(*sweep_b, sweep_to);
    bind_pipeline(*sweep_b, sweep_pipe);
    sweep_b->bind_vec("--sizes", sweep_sizes, "window sizes to sweep [20 Hz samples]");
    sweep_b->bind("--reps", sweep_reps, "latency repetitions; 0 skips timing");
    sweep_b->bind("--out", sweep_out, "sweep CSV path (default: stdout)");

    // --- compare -------------------------------------------------------
    CommonOpts cmp_common;
    Binder* cmp_b = nullptr;
    CLI::App* cmp_cmd = a.add_sub("compare", "train/test every architecture at one window size",
                                  &cmp_b, cmp_common);
    TrainOpts cmp_to;
    cmp_to.window = 20;
    PipelineOpts cmp_pipe;
    std::vector<std::string> cmp_models = zoo_model_names();
    std::string cmp_out;
    int cmp_reps = 50;
    bind_train(*cmp_b, cmp_to);
    bind_pipeline(*cmp_b, cmp_pipe);
    cmp_b->bind_vec("--models", cmp_models, "model names to compare");
    cmp_b->bind("--reps", cmp_reps, "latency repetitions; 0 skips timing");
    cmp_b->bind("--out", cmp_out, "comparison CSV path (default: stdout)");

    // --- infer / trace --------------------------------------------------
    CommonOpts infer_common;
    Binder* infer_b = nullptr;
    CLI::App* infer_cmd = a.add_sub("infer", "run the pipeline on one session and print the trace",
                                    &infer_b, infer_common);
    std::string infer_weights, infer_data, infer_session;
    PipelineOpts infer_pipe;
    infer_b->bind("--weights", infer_weights, "weights file from `train`")->required();
    infer_b->bind("--data", infer_data, "session directory")->required();
    infer_b->bind("--session", infer_session, "session id (optional when the directory has one)");
    bind_pipeline(*infer_b, infer_pipe);

    CommonOpts trace_common;
    Binder* trace_b = nullptr;
    CLI::App* trace_cmd = a.add_sub("trace", "like infer, writing the trace CSV to a file",
                                    &trace_b, trace_common);
    std::string trace_weights, trace_data, trace_session_id, trace_out;
    PipelineOpts trace_pipe;
    trace_b->bind("--weights", trace_weights, "weights file from `train`")->required();
    trace_b->bind("--data", trace_data, "session directory")->required();
    trace_b->bind("--session", trace_session_id, "session id (optional when the directory has one)");
    trace_b->bind("--out", trace_out, "trace CSV path")->required();
    bind_pipeline(*trace_b, trace_pipe);

    for (const auto& [name, binder] : a.binders) binder->collect_keys(a.global_keys);

    try {
        a.app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return a.app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return a.app.exit(e);
    } catch (const CLI::ParseError& e) {
        a.app.exit(e);
        return 2;
    }

    try {
        auto apply_config = [&](Binder* binder, const CommonOpts& common) {
            if (common.config_path.empty()) return;
            std::ifstream f(common.config_path);
            if (!f) throw InvalidInput(common.config_path + ": cannot open config");
            json doc;
            try {
                doc = json::parse(f);
            } catch (const json::exception& e) {
                throw InvalidInput(common.config_path + ": bad JSON: " + e.what());
            }
            binder->apply(doc, a.global_keys);
        };

        if (synth_cmd->parsed()) {
            apply_config(synth_b, synth_common);
            log_config("synth", *synth_b);
            SynthConfig cfg;
            cfg.imu_noise_std = so.noise_imu;
            cfg.gps_noise_std = so.noise_gps;
            cfg.max_bias = so.max_bias;
            cfg.max_tilt_deg = so.max_tilt_deg;
            const auto sessions = synth_corpus(so.out, so.hours, so.sessions, so.seed, cfg);
            double total = 0;
            for (const auto& s : sessions) {
                std::cerr << strfmt("synth: %s  %.0f s\n", s.session_id.c_str(), s.duration_s);
                total += s.duration_s;
            }
            std::cerr << strfmt("synth: %zu sessions, %.2f h -> %s\n", sessions.size(),
                                total / 3600.0, so.out.c_str());
            return 0;
        }

        if (pre_cmd->parsed()) {
            apply_config(pre_b, pre_common);
            log_config("preprocess", *pre_b);
            const auto sessions = discover_sessions(pre_data);
            std::ostringstream csv;
            csv << "session_id,segments,imu_samples,gps_labels,windows,skipped_labels\n";
            size_t total_windows = 0;
            for (const auto& files : sessions) {
                const SessionWindows sw = windows_from_files(
                    files.session_id, files.imu_path, files.gps_path, pre_window, pre_pipe.to_config());
                csv << strfmt("%s,%d,%zu,%zu,%zu,%d\n", sw.session_id.c_str(), sw.segments,
                              sw.imu_samples, sw.gps_points, sw.windows.size(), sw.skipped_labels);
                total_windows += sw.windows.size();
            }
            emit_to(pre_out, [&](std::ostream& os) { os << csv.str(); });
            std::cerr << strfmt("preprocess: %zu sessions, %zu windows at w=%d\n", sessions.size(),
                                total_windows, pre_window);
            return 0;
        }

        if (train_cmd->parsed()) {
            apply_config(train_b, train_common);
            log_config("train", *train_b);
            return with_precision(train_common.precision, [&](auto tag) {
                using S = decltype(tag);
                const auto sessions = discover_sessions(to.data);
                std::vector<SessionWindows> per_session;
                for (const auto& files : sessions) {
                    per_session.push_back(windows_from_files(files.session_id, files.imu_path,
                                                             files.gps_path, to.window,
                                                             train_pipe.to_config()));
                }
                SplitResult split =
                    split_sessions(per_session, to.test_sessions, to.val_fraction, to.seed);
                if (!audit_no_leakage(split)) {
                    throw InvalidInput("train: session audit found test windows in train/val");
                }
                const uint64_t cell_seed =
                    derive_seed(to.seed, to.model + "/w" + std::to_string(to.window));
                Model<S> model = build_model<S>(to.model, to.window, cell_seed);
                TrainConfig tc = to.to_config();
                tc.seed = cell_seed;
                std::cerr << strfmt("train: %s w=%d params=%lld cell_seed=%llu train/val/test = %zu/%zu/%zu windows\n",
                                    to.model.c_str(), to.window,
                                    static_cast<long long>(model.param_count()),
                                    static_cast<unsigned long long>(cell_seed), split.train.size(),
                                    split.val.size(), split.test.size());
                const TrainHistory hist = fit(model, split.train, split.val, tc,
                                              [](const EpochStats& e) {
                                                  std::cerr << strfmt(
                                                      "epoch %d: train %.6f  val %.6f  lr %.3g  (%.1f s)\n",
                                                      e.epoch, e.train_loss, e.val_loss, e.lr,
                                                      e.seconds);
                                              });
                save_weights(model, train_out);
                if (!train_history.empty()) {
                    write_history_csv(train_history, hist, train_common.no_timing);
                }
                std::cerr << strfmt("train: stopped by %s; best val %.6f at epoch %d; weights -> %s\n",
                                    hist.stop_reason.c_str(), hist.best_val_loss, hist.best_epoch,
                                    train_out.c_str());
                return 0;
            });
        }

        if (eval_cmd->parsed()) {
            apply_config(eval_b, eval_common);
            log_config("eval", *eval_b);
            return with_precision(eval_common.precision, [&](auto tag) {
                using S = decltype(tag);
                Model<S> model = load_weights<S>(eval_weights);
                HarnessConfig hc;
                hc.train.seed = eval_seed;
                hc.pipeline = eval_pipe.to_config();
                hc.test_sessions = eval_test_sessions;
                hc.latency_reps = eval_common.no_timing ? 0 : eval_reps;
                const EvalOutcome outcome = evaluate_model(model, discover_sessions(eval_data), hc);
                emit_to(eval_out,
                        [&](std::ostream& os) { write_metrics_csv(os, {outcome.report}, false); });
                std::cerr << strfmt("eval: %s on %s -> rmse %.4f m/s, mae %.4f m/s\n",
                                    model.name.c_str(), outcome.report.dataset_tag.c_str(),
                                    outcome.report.rmse_mps, outcome.report.mae_mps);
                return 0;
            });
        }

        if (sweep_cmd->parsed()) {
            apply_config(sweep_b, sweep_common);
            log_config("sweep", *sweep_b);
            HarnessConfig hc;
            hc.train = sweep_to.to_config();
            hc.pipeline = sweep_pipe.to_config();
            hc.test_sessions = sweep_to.test_sessions;
            hc.val_fraction = sweep_to.val_fraction;
            hc.latency_reps = sweep_common.no_timing ? 0 : sweep_reps;
            hc.precision = precision_from_name(sweep_common.precision);
            const auto sessions = discover_sessions(sweep_to.data);
            const auto rows = sweep_windows(sessions, sweep_to.model, sweep_sizes, hc);
            emit_to(sweep_out, [&](std::ostream& os) { write_metrics_csv(os, rows, false); });
            return 0;
        }

        if (cmp_cmd->parsed()) {
            apply_config(cmp_b, cmp_common);
            log_config("compare", *cmp_b);
            HarnessConfig hc;
            hc.train = cmp_to.to_config();
            hc.pipeline = cmp_pipe.to_config();
            hc.test_sessions = cmp_to.test_sessions;
            hc.val_fraction = cmp_to.val_fraction;
            hc.latency_reps = cmp_common.no_timing ? 0 : cmp_reps;
            hc.precision = precision_from_name(cmp_common.precision);
            const auto sessions = discover_sessions(cmp_to.data);
            const auto rows = compare_models(sessions, cmp_models, cmp_to.window, hc);
            emit_to(cmp_out, [&](std::ostream& os) { write_metrics_csv(os, rows, true); });
            return 0;
        }

        if (infer_cmd->parsed()) {
            apply_config(infer_b, infer_common);
            log_config("infer", *infer_b);
            return with_precision(infer_common.precision, [&](auto tag) {
                using S = decltype(tag);
                Model<S> model = load_weights<S>(infer_weights);
                const auto files = find_session(discover_sessions(infer_data), infer_session);
                const auto rows = trace_session(model, files, infer_pipe.to_config());
                write_trace_csv(std::cout, rows);
                return 0;
            });
        }

        if (trace_cmd->parsed()) {
            apply_config(trace_b, trace_common);
            log_config("trace", *trace_b);
            return with_precision(trace_common.precision, [&](auto tag) {
                using S = decltype(tag);
                Model<S> model = load_weights<S>(trace_weights);
                const auto files = find_session(discover_sessions(trace_data), trace_session_id);
                const auto rows = trace_session(model, files, trace_pipe.to_config());
                emit_to(trace_out, [&](std::ostream& os) { write_trace_csv(os, rows); });
                std::cerr << strfmt("trace: %zu rows -> %s\n", rows.size(), trace_out.c_str());
                return 0;
            });
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace carspeed::cli

int main(int argc, char** argv) { return carspeed::cli::run(argc, argv); }
