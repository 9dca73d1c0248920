#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "carspeed/model.hpp"
#include "carspeed/signal.hpp"

namespace carspeed {

struct TrainConfig {
    int batch_size = 32;
    int max_epochs = 200;
    double initial_lr = 1e-3;
    int decay_steps = 30000;
    double decay_rate = 0.2;
    int patience = 1000;            // epochs without validation improvement
    double min_improvement = 1e-6;  // required validation-loss improvement
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double clip_norm = 5.0;  // global-norm gradient clip; <= 0 disables
    uint64_t seed = 1;
    double target_train_loss = 0.0;  // > 0: stop once the train loss drops below

    void validate() const {
        if (batch_size < 1 || max_epochs < 1 || patience < 1 || decay_steps < 1) {
            throw InvalidInput("train config: counts must be positive");
        }
        if (!(initial_lr > 0) || !(adam_epsilon > 0) || !(min_improvement >= 0)) {
            throw InvalidInput("train config: rates must be positive");
        }
        if (!(decay_rate > 0 && decay_rate < 1)) {
            throw InvalidInput("train config: decay rate must be inside (0, 1)");
        }
        if (!(adam_beta1 > 0 && adam_beta1 < 1 && adam_beta2 > 0 && adam_beta2 < 1)) {
            throw InvalidInput("train config: adam betas must be inside (0, 1)");
        }
    }
};

/// Continuous exponential decay: lr = initial * rate^(step / decay_steps).
inline double lr_at(int64_t step, const TrainConfig& cfg) {
    if (step < 0) throw InvalidInput("lr_at: step must be non-negative");
    return cfg.initial_lr *
           std::pow(cfg.decay_rate, static_cast<double>(step) / static_cast<double>(cfg.decay_steps));
}

/// Mean square error with the 1/(2N) normalizer, differentiable on the tape.
template <typename S>
inline Tensor<S> mse_loss(Tape<S>* tape, const Tensor<S>& pred, const Tensor<S>& gt) {
    if (pred.shape != gt.shape) {
        throw InvalidInput(strfmt("mse_loss: prediction %s and ground truth %s differ",
                                  shape_str(pred.shape).c_str(), shape_str(gt.shape).c_str()));
    }
    const int64_t n = pred.numel();
    if (n < 1) throw InvalidInput("mse_loss: empty batch");
    Tensor<S> diff = sub(tape, gt, pred);
    Tensor<S> sq = mul(tape, diff, diff);
    return scale(tape, sum_all(tape, sq), static_cast<S>(0.5 / static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// Adam

template <typename S>
struct AdamState {
    std::vector<std::vector<S>> m, v;  // first and second moments per parameter
    int64_t step = 0;

    void init(const std::vector<ParamRef<S>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(static_cast<size_t>(p.tensor->numel()), S(0));
            v.emplace_back(static_cast<size_t>(p.tensor->numel()), S(0));
        }
        step = 0;
    }
};

/// One synchronized Adam update across all parameters. Aborts on non-finite
/// gradients, naming the parameter and the global step.
template <typename S>
inline void adam_step(const std::vector<ParamRef<S>>& params, const std::vector<Tensor<S>>& grads,
                      AdamState<S>& state, double lr, const TrainConfig& cfg) {
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw InvalidInput("adam_step: parameter, gradient and state lists disagree");
    }
    const int64_t t = ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor<S>& theta = *params[i].tensor;
        const Tensor<S>& g = grads[i];
        if (g.shape != theta.shape) {
            throw InvalidInput("adam_step: gradient shape mismatch for " + params[i].name);
        }
        S* pt = theta.mut();
        S* pm = state.m[i].data();
        S* pv = state.v[i].data();
        const S* pg = g.ptr();
        for (int64_t j = 0; j < theta.numel(); ++j) {
            const double gj = static_cast<double>(pg[j]);
            if (!std::isfinite(gj)) {
                throw InvalidInput(strfmt("adam_step: non-finite gradient in %s at step %lld",
                                          params[i].name.c_str(), static_cast<long long>(t)));
            }
            const double mj = cfg.adam_beta1 * static_cast<double>(pm[j]) + (1.0 - cfg.adam_beta1) * gj;
            const double vj = cfg.adam_beta2 * static_cast<double>(pv[j]) + (1.0 - cfg.adam_beta2) * gj * gj;
            pm[j] = static_cast<S>(mj);
            pv[j] = static_cast<S>(vj);
            pt[j] = static_cast<S>(static_cast<double>(pt[j]) -
                                   lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.adam_epsilon));
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most max_norm.
/// Returns the pre-clip norm.
template <typename S>
inline double clip_global_norm(std::vector<Tensor<S>>& grads, double max_norm) {
    double sq = 0;
    for (const auto& g : grads) {
        const S* p = g.ptr();
        for (int64_t i = 0; i < g.numel(); ++i) sq += static_cast<double>(p[i]) * static_cast<double>(p[i]);
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const S factor = static_cast<S>(max_norm / norm);
        for (auto& g : grads) {
            S* p = g.mut();
            for (int64_t i = 0; i < g.numel(); ++i) p[i] *= factor;
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------
// early stopping

class EarlyStopper {
public:
    EarlyStopper(int patience, double min_improvement)
        : patience_(patience), min_improvement_(min_improvement) {}

    /// Observe one epoch's validation loss; true means stop now.
    bool observe(double val_loss) {
        improved_ = val_loss < best_ - min_improvement_;
        if (improved_) {
            best_ = val_loss;
            bad_epochs_ = 0;
            return false;
        }
        ++bad_epochs_;
        return bad_epochs_ >= patience_;
    }

    bool improved_last() const { return improved_; }
    double best() const { return best_; }

private:
    int patience_;
    double min_improvement_;
    double best_ = std::numeric_limits<double>::infinity();
    int bad_epochs_ = 0;
    bool improved_ = false;
};

// ---------------------------------------------------------------------------
// batches and dataset-level evaluation

template <typename S>
inline Tensor<S> standardized_batch(const WindowedDataset& ds, const std::vector<size_t>& idx,
                                    const NormStats& stats) {
    if (!stats.fitted) throw InvalidInput("standardize: apply called before fit");
    const int w = ds.window_size;
    const int64_t per = static_cast<int64_t>(w) * 3;
    std::vector<S> values(idx.size() * static_cast<size_t>(per));
    for (size_t b = 0; b < idx.size(); ++b) {
        const auto& win = ds.entries[idx[b]].window;
        for (int64_t i = 0; i < per; ++i) {
            const size_t a = static_cast<size_t>(i % 3);
            values[b * static_cast<size_t>(per) + static_cast<size_t>(i)] =
                static_cast<S>((win[static_cast<size_t>(i)] - stats.mean[a]) / stats.stddev[a]);
        }
    }
    return Tensor<S>({static_cast<int>(idx.size()), w, 3}, std::move(values));
}

template <typename S>
inline Tensor<S> label_batch(const WindowedDataset& ds, const std::vector<size_t>& idx) {
    std::vector<S> values(idx.size());
    for (size_t b = 0; b < idx.size(); ++b) {
        values[b] = static_cast<S>(ds.entries[idx[b]].label);
    }
    return Tensor<S>({static_cast<int>(idx.size()), 1}, std::move(values));
}

/// Infer-mode predictions for a whole dataset, in entry order.
template <typename S>
inline std::vector<double> predict_dataset(Model<S>& model, const WindowedDataset& ds,
                                           int batch_cap = 256) {
    std::vector<double> preds;
    preds.reserve(ds.size());
    const int64_t per = static_cast<int64_t>(model.window_size) * 3;
    std::vector<double> raw;
    for (size_t off = 0; off < ds.size(); off += static_cast<size_t>(batch_cap)) {
        const int b = static_cast<int>(std::min<size_t>(static_cast<size_t>(batch_cap), ds.size() - off));
        raw.resize(static_cast<size_t>(b) * static_cast<size_t>(per));
        for (int k = 0; k < b; ++k) {
            const auto& win = ds.entries[off + static_cast<size_t>(k)].window;
            std::copy(win.begin(), win.end(), raw.begin() + static_cast<int64_t>(k) * per);
        }
        const auto out = model.predict(raw.data(), b, model.window_size, 3);
        for (const S v : out) preds.push_back(static_cast<double>(v));
    }
    return preds;
}

/// Validation loss under the training objective (infer mode, clamped output).
template <typename S>
inline double eval_mse(Model<S>& model, const WindowedDataset& ds) {
    const auto preds = predict_dataset(model, ds);
    double sq = 0;
    for (size_t i = 0; i < ds.size(); ++i) {
        const double d = ds.entries[i].label - preds[i];
        sq += d * d;
    }
    return sq / (2.0 * static_cast<double>(ds.size()));
}

// ---------------------------------------------------------------------------
// fit loop

struct EpochStats {
    int epoch;
    double train_loss;
    double val_loss;
    double lr;
    double seconds;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    std::string stop_reason;
    int best_epoch = -1;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int64_t total_steps = 0;
};

/// Train with seed-driven shuffling, Adam and the exponential schedule,
/// monitoring validation loss with early stopping. The model is left holding
/// the best-validation weights.
template <typename S>
inline TrainHistory fit(Model<S>& model, const WindowedDataset& train, const WindowedDataset& val,
                        const TrainConfig& cfg,
                        const std::function<void(const EpochStats&)>& on_epoch = nullptr) {
    cfg.validate();
    if (train.empty() || val.empty()) throw InvalidInput("fit: empty train or validation split");
    if (train.window_size != model.window_size || val.window_size != model.window_size) {
        throw InvalidInput(strfmt("fit: model expects %d-sample windows, dataset has %d",
                                  model.window_size, train.window_size));
    }
    if (!model.norm.fitted) model.norm = standardize_fit(train);

    auto params = model.trainable_refs();
    AdamState<S> state;
    state.init(params);
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
    EarlyStopper stopper(cfg.patience, cfg.min_improvement);

    TrainHistory hist;
    std::vector<std::vector<S>> best = model.snapshot();
    std::vector<size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    int64_t gstep = 0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        shuffle_rng.shuffle(idx);
        double sq_sum = 0;
        for (size_t off = 0; off < idx.size(); off += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(idx.size(), off + static_cast<size_t>(cfg.batch_size));
            const std::vector<size_t> bidx(idx.begin() + static_cast<int64_t>(off),
                                           idx.begin() + static_cast<int64_t>(end));
            Tensor<S> x = standardized_batch<S>(train, bidx, model.norm);
            Tensor<S> y = label_batch<S>(train, bidx);
            Tape<S> tape;
            for (auto& p : params) tape.watch(*p.tensor);
            Tensor<S> pred = model.forward(&tape, x, LayerMode::train, &dropout_rng);
            Tensor<S> loss = mse_loss(&tape, pred, y);
            const double lval = static_cast<double>(loss.item());
            if (!std::isfinite(lval)) {
                throw InvalidInput(strfmt("fit: non-finite loss at epoch %d, step %lld", epoch,
                                          static_cast<long long>(gstep)));
            }
            sq_sum += lval * 2.0 * static_cast<double>(bidx.size());
            GradMap<S> gradmap = tape.backward(loss);
            std::vector<Tensor<S>> grads;
            grads.reserve(params.size());
            for (const auto& p : params) grads.push_back(std::move(gradmap.at(p.tensor->node)));
            if (cfg.clip_norm > 0) clip_global_norm(grads, cfg.clip_norm);
            adam_step(params, grads, state, lr_at(gstep, cfg), cfg);
            ++gstep;
        }
        const double train_loss = sq_sum / (2.0 * static_cast<double>(train.size()));
        const double val_loss = eval_mse(model, val);
        if (!std::isfinite(val_loss)) {
            throw InvalidInput(strfmt("fit: non-finite validation loss at epoch %d", epoch));
        }
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const EpochStats es{epoch, train_loss, val_loss, lr_at(gstep - 1, cfg), seconds};
        hist.epochs.push_back(es);
        if (on_epoch) on_epoch(es);

        const bool stop = stopper.observe(val_loss);
        if (stopper.improved_last()) {
            best = model.snapshot();
            hist.best_epoch = epoch;
            hist.best_val_loss = val_loss;
        }
        if (cfg.target_train_loss > 0 && train_loss < cfg.target_train_loss) {
            hist.stop_reason = "target_train_loss";
            break;
        }
        if (stop) {
            hist.stop_reason = "early_stopping";
            break;
        }
    }
    if (hist.stop_reason.empty()) hist.stop_reason = "max_epochs";
    hist.total_steps = gstep;
    model.restore(best);
    return hist;
}

/// History CSV: `epoch,train_loss,val_loss,lr,seconds`. Wall time is the one
/// non-reproducible column; zero_seconds replaces it for byte-stable output.
void write_history_csv(const std::string& path, const TrainHistory& hist, bool zero_seconds);

}  // namespace carspeed
