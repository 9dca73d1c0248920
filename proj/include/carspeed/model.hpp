#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "carspeed/dataset.hpp"
#include "carspeed/layers.hpp"
#include "carspeed/rng.hpp"
#include "carspeed/tensor.hpp"

namespace carspeed {

enum class LayerKind {
    dense,
    conv1d,
    lstm,
    bilstm,
    batchnorm,
    dropout,
    relu,
    take_last_step,
    residual_block,
};

std::string layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

struct LayerSpec {
    LayerKind kind;
    int units = 0;       // dense/lstm/bilstm units, conv and residual filters
    int kernel = 3;      // conv1d / residual_block
    int dilation = 1;    // conv1d
    double rate = 0.0;   // dropout
    bool return_sequences = false;
    Activation act = Activation::linear;  // dense
    double momentum = 0.99;               // batchnorm
    double epsilon = 1e-5;                // batchnorm

    bool operator==(const LayerSpec&) const = default;
};

// Convenience constructors for spec lists.
inline LayerSpec dense_spec(int units, Activation act) {
    LayerSpec s{LayerKind::dense};
    s.units = units;
    s.act = act;
    return s;
}
inline LayerSpec conv1d_spec(int filters, int kernel, int dilation = 1) {
    LayerSpec s{LayerKind::conv1d};
    s.units = filters;
    s.kernel = kernel;
    s.dilation = dilation;
    return s;
}
inline LayerSpec lstm_spec(int units, bool sequences) {
    LayerSpec s{LayerKind::lstm};
    s.units = units;
    s.return_sequences = sequences;
    return s;
}
inline LayerSpec bilstm_spec(int units, bool sequences) {
    LayerSpec s{LayerKind::bilstm};
    s.units = units;
    s.return_sequences = sequences;
    return s;
}
inline LayerSpec batchnorm_spec() { return LayerSpec{LayerKind::batchnorm}; }
inline LayerSpec dropout_spec(double rate) {
    LayerSpec s{LayerKind::dropout};
    s.rate = rate;
    return s;
}
inline LayerSpec relu_spec() { return LayerSpec{LayerKind::relu}; }
inline LayerSpec take_last_spec() { return LayerSpec{LayerKind::take_last_step}; }
inline LayerSpec residual_spec(int filters, int kernel) {
    LayerSpec s{LayerKind::residual_block};
    s.units = filters;
    s.kernel = kernel;
    return s;
}

/// Shape state threaded through a spec list when resolving layer inputs.
struct ShapeFlow {
    bool sequence = true;
    int width = 3;
};

/// Apply one spec to the flow, validating compatibility. Throws on a stack
/// that cannot be wired (e.g. conv after the sequence axis was dropped).
ShapeFlow advance_flow(const ShapeFlow& in, const LayerSpec& spec);

/// Closed-form trainable parameter count of one layer given its input width.
int64_t spec_param_count(const LayerSpec& spec, int in_width);

// ---------------------------------------------------------------------------

template <typename S>
struct ParamRef {
    std::string name;
    Tensor<S>* tensor;
};

inline const char* const kZooNames[] = {"carspeednet", "dnn_star", "lstm",
                                        "wavenet", "bilstm", "resnet"};

std::vector<std::string> zoo_model_names();

/// Trainable-parameter totals reported in the source publication, used as
/// soft comparison targets next to the achieved counts.
int64_t published_param_count(const std::string& name);

/// Layer stack for each zoo model. Throws on an unknown name.
std::vector<LayerSpec> zoo_layer_specs(const std::string& name);

/// Allocates and initializes the parameters for one layer.
template <typename S>
LayerParams<S> init_params(const LayerSpec& spec, int in_width, Rng& rng);

/// Allocates zero-filled parameters with the right shapes (for loading).
template <typename S>
LayerParams<S> alloc_params(const LayerSpec& spec, int in_width);

template <typename S>
struct Model {
    std::string name;
    int window_size = 0;
    std::vector<LayerSpec> specs;
    std::vector<LayerParams<S>> params;
    NormStats norm;

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& p : params) n += p.trainable_count();
        return n;
    }

    /// All trainable tensors in stable order, names qualified by layer index.
    std::vector<ParamRef<S>> trainable_refs() {
        std::vector<ParamRef<S>> refs;
        for (size_t i = 0; i < params.size(); ++i) {
            for (auto& [n, t] : params[i].trainable) {
                refs.push_back({strfmt("layer%02zu.%s", i, n.c_str()), &t});
            }
        }
        return refs;
    }

    /// Visit every tensor (trainable then state per layer) in stable order.
    void for_each_tensor(const std::function<void(const std::string&, Tensor<S>&)>& fn) {
        for (size_t i = 0; i < params.size(); ++i) {
            for (auto& [n, t] : params[i].trainable) fn(strfmt("layer%02zu.%s", i, n.c_str()), t);
            for (auto& [n, t] : params[i].state) fn(strfmt("layer%02zu.%s", i, n.c_str()), t);
        }
    }

    /// Deep copy of every parameter and state buffer, for best-weights
    /// snapshots during training.
    std::vector<std::vector<S>> snapshot() {
        std::vector<std::vector<S>> out;
        for_each_tensor([&](const std::string&, Tensor<S>& t) { out.push_back(*t.data); });
        return out;
    }

    void restore(const std::vector<std::vector<S>>& snap) {
        size_t i = 0;
        for_each_tensor([&](const std::string&, Tensor<S>& t) { *t.data = snap.at(i++); });
        if (i != snap.size()) throw InvalidInput("restore: snapshot does not match model");
    }

    Tensor<S> forward(Tape<S>* tape, const Tensor<S>& x, LayerMode mode, Rng* dropout_rng = nullptr);

    /// Standardize raw windows (row-major batch x window_size x 3, m/s^2),
    /// run the stack in infer mode, and clamp negatives to zero. Returns one
    /// speed in m/s per window.
    std::vector<S> predict(const double* raw, int batch, int window, int channels);
    std::vector<S> predict(const std::vector<double>& raw, int batch) {
        if (batch <= 0 || raw.size() % static_cast<size_t>(batch) != 0) {
            throw InvalidInput("predict: buffer does not divide into the batch");
        }
        const int64_t per = static_cast<int64_t>(raw.size()) / batch;
        if (per % 3 != 0) throw InvalidInput("predict: windows must have 3 channels");
        return predict(raw.data(), batch, static_cast<int>(per / 3), 3);
    }
};

template <typename S>
Model<S> build_model(const std::string& name, int window_size, uint64_t seed);

// ---------------------------------------------------------------------------
// implementation

inline std::string layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv1d: return "conv1d";
        case LayerKind::lstm: return "lstm";
        case LayerKind::bilstm: return "bilstm";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::dropout: return "dropout";
        case LayerKind::relu: return "relu";
        case LayerKind::take_last_step: return "take_last_step";
        case LayerKind::residual_block: return "residual_block";
    }
    throw InvalidInput("unknown layer kind");
}

inline LayerKind layer_kind_from_name(const std::string& name) {
    for (int k = 0; k <= static_cast<int>(LayerKind::residual_block); ++k) {
        if (layer_kind_name(static_cast<LayerKind>(k)) == name) return static_cast<LayerKind>(k);
    }
    throw InvalidInput("unknown layer kind: " + name);
}

inline ShapeFlow advance_flow(const ShapeFlow& in, const LayerSpec& spec) {
    ShapeFlow out = in;
    auto need_sequence = [&]() {
        if (!in.sequence) {
            throw InvalidInput(layer_kind_name(spec.kind) + ": needs a sequence input but the time axis was already dropped");
        }
    };
    switch (spec.kind) {
        case LayerKind::dense:
            out.width = spec.units;
            break;
        case LayerKind::conv1d:
            need_sequence();
            out.width = spec.units;
            break;
        case LayerKind::lstm:
            need_sequence();
            out.width = spec.units;
            out.sequence = spec.return_sequences;
            break;
        case LayerKind::bilstm:
            need_sequence();
            out.width = 2 * spec.units;
            out.sequence = spec.return_sequences;
            break;
        case LayerKind::batchnorm:
            need_sequence();
            break;
        case LayerKind::dropout:
        case LayerKind::relu:
            break;
        case LayerKind::take_last_step:
            need_sequence();
            out.sequence = false;
            break;
        case LayerKind::residual_block:
            need_sequence();
            out.width = spec.units;
            break;
    }
    return out;
}

inline int64_t spec_param_count(const LayerSpec& spec, int in_width) {
    switch (spec.kind) {
        case LayerKind::dense: return dense_param_count(in_width, spec.units);
        case LayerKind::conv1d: return conv1d_param_count(spec.kernel, in_width, spec.units);
        case LayerKind::lstm: return lstm_param_count(in_width, spec.units);
        case LayerKind::bilstm: return bilstm_param_count(in_width, spec.units);
        case LayerKind::batchnorm: return batchnorm_param_count(in_width);
        case LayerKind::residual_block:
            return conv1d_param_count(spec.kernel, in_width, spec.units) +
                   conv1d_param_count(spec.kernel, spec.units, spec.units) +
                   2 * batchnorm_param_count(spec.units) +
                   conv1d_param_count(1, in_width, spec.units);
        case LayerKind::dropout:
        case LayerKind::relu:
        case LayerKind::take_last_step:
            return 0;
    }
    throw InvalidInput("unknown layer kind");
}

inline std::vector<std::string> zoo_model_names() {
    return {std::begin(kZooNames), std::end(kZooNames)};
}

inline int64_t published_param_count(const std::string& name) {
    if (name == "carspeednet") return 178169;
    if (name == "dnn_star") return 13031;
    if (name == "lstm") return 17181;
    if (name == "wavenet") return 239937;
    if (name == "bilstm") return 26251;
    if (name == "resnet") return 95043;
    throw InvalidInput("unknown model name: " + name);
}

inline std::vector<LayerSpec> zoo_layer_specs(const std::string& name) {
    using A = Activation;
    if (name == "carspeednet") {
        return {
            bilstm_spec(100, true), batchnorm_spec(),
            lstm_spec(50, true),    batchnorm_spec(),
            lstm_spec(20, true),    batchnorm_spec(),
            lstm_spec(20, true),    batchnorm_spec(),
            lstm_spec(20, true),    batchnorm_spec(),
            conv1d_spec(64, 3),     relu_spec(),
            conv1d_spec(64, 3),     relu_spec(),
            conv1d_spec(32, 3),     relu_spec(),
            take_last_spec(),
            dense_spec(32, A::relu),
            dense_spec(1, A::linear),
        };
    }
    if (name == "dnn_star") {
        return {
            lstm_spec(16, true),
            bilstm_spec(16, true),
            bilstm_spec(16, false),
            dense_spec(1, A::linear),
        };
    }
    if (name == "lstm") {
        return {
            lstm_spec(32, true), batchnorm_spec(), dropout_spec(0.2),
            lstm_spec(24, true), batchnorm_spec(), dropout_spec(0.2),
            lstm_spec(16, false),
            dense_spec(1, A::linear),
        };
    }
    if (name == "wavenet") {
        std::vector<LayerSpec> specs;
        for (int dilation : {1, 2, 4, 8, 16, 32}) {
            specs.push_back(conv1d_spec(126, 3, dilation));
            specs.push_back(relu_spec());
        }
        specs.push_back(conv1d_spec(1, 1));
        specs.push_back(take_last_spec());
        return specs;
    }
    if (name == "bilstm") {
        return {
            bilstm_spec(32, true),
            dropout_spec(0.2),
            lstm_spec(24, false),
            dense_spec(1, A::linear),
        };
    }
    if (name == "resnet") {
        return {
            residual_spec(32, 3),
            residual_spec(32, 3),
            bilstm_spec(32, false),
            dense_spec(1, A::linear),
        };
    }
    throw InvalidInput("unknown model name: " + name);
}

template <typename S>
LayerParams<S> init_params(const LayerSpec& spec, int in_width, Rng& rng) {
    switch (spec.kind) {
        case LayerKind::dense:
            return make_dense_params<S>(in_width, spec.units, rng);
        case LayerKind::conv1d:
            return make_conv1d_params<S>(spec.kernel, in_width, spec.units, rng);
        case LayerKind::lstm:
            return make_lstm_params<S>(in_width, spec.units, rng);
        case LayerKind::bilstm: {
            LayerParams<S> p;
            LayerParams<S> fwd = make_lstm_params<S>(in_width, spec.units, rng);
            LayerParams<S> bwd = make_lstm_params<S>(in_width, spec.units, rng);
            for (auto& [n, t] : fwd.trainable) p.trainable.emplace_back("fwd_" + n, std::move(t));
            for (auto& [n, t] : bwd.trainable) p.trainable.emplace_back("bwd_" + n, std::move(t));
            return p;
        }
        case LayerKind::batchnorm:
            return make_batchnorm_params<S>(in_width);
        case LayerKind::residual_block: {
            LayerParams<S> p;
            auto merge = [&p](const std::string& prefix, LayerParams<S>&& sub) {
                for (auto& [n, t] : sub.trainable) p.trainable.emplace_back(prefix + n, std::move(t));
                for (auto& [n, t] : sub.state) p.state.emplace_back(prefix + n, std::move(t));
            };
            merge("conv1_", make_conv1d_params<S>(spec.kernel, in_width, spec.units, rng));
            merge("bn1_", make_batchnorm_params<S>(spec.units));
            merge("conv2_", make_conv1d_params<S>(spec.kernel, spec.units, spec.units, rng));
            merge("bn2_", make_batchnorm_params<S>(spec.units));
            merge("proj_", make_conv1d_params<S>(1, in_width, spec.units, rng));
            return p;
        }
        case LayerKind::dropout:
        case LayerKind::relu:
        case LayerKind::take_last_step:
            return {};
    }
    throw InvalidInput("unknown layer kind");
}

template <typename S>
LayerParams<S> alloc_params(const LayerSpec& spec, int in_width) {
    LayerParams<S> p;
    auto zeros = [](std::vector<int> shape) { return Tensor<S>::zeros(std::move(shape)); };
    auto add_lstm = [&](const std::string& prefix, int d, int h) {
        p.trainable.emplace_back(prefix + "W", zeros({d, 4 * h}));
        p.trainable.emplace_back(prefix + "U", zeros({h, 4 * h}));
        p.trainable.emplace_back(prefix + "b", zeros({4 * h}));
    };
    auto add_conv = [&](const std::string& prefix, int k, int cin, int cout) {
        p.trainable.emplace_back(prefix + "K", zeros({k, cin, cout}));
        p.trainable.emplace_back(prefix + "b", zeros({cout}));
    };
    auto add_bn = [&](const std::string& prefix, int c) {
        p.trainable.emplace_back(prefix + "gamma", zeros({c}));
        p.trainable.emplace_back(prefix + "beta", zeros({c}));
        p.state.emplace_back(prefix + "running_mean", zeros({c}));
        p.state.emplace_back(prefix + "running_var", zeros({c}));
        p.state.emplace_back(prefix + "steps", zeros({1}));
    };
    switch (spec.kind) {
        case LayerKind::dense:
            p.trainable.emplace_back("W", zeros({in_width, spec.units}));
            p.trainable.emplace_back("b", zeros({spec.units}));
            break;
        case LayerKind::conv1d:
            add_conv("", spec.kernel, in_width, spec.units);
            break;
        case LayerKind::lstm:
            add_lstm("", in_width, spec.units);
            break;
        case LayerKind::bilstm:
            add_lstm("fwd_", in_width, spec.units);
            add_lstm("bwd_", in_width, spec.units);
            break;
        case LayerKind::batchnorm:
            add_bn("", in_width);
            break;
        case LayerKind::residual_block:
            add_conv("conv1_", spec.kernel, in_width, spec.units);
            add_bn("bn1_", spec.units);
            add_conv("conv2_", spec.kernel, spec.units, spec.units);
            add_bn("bn2_", spec.units);
            add_conv("proj_", 1, in_width, spec.units);
            break;
        case LayerKind::dropout:
        case LayerKind::relu:
        case LayerKind::take_last_step:
            break;
    }
    return p;
}

namespace detail {

/// Borrow a prefixed subset of a layer's tensors as a standalone parameter
/// set; the copies share buffers and node ids with the originals.
template <typename S>
inline LayerParams<S> sub_params(const LayerParams<S>& p, const std::string& prefix) {
    LayerParams<S> out;
    for (const auto& [n, t] : p.trainable) {
        if (n.rfind(prefix, 0) == 0) out.trainable.emplace_back(n.substr(prefix.size()), t);
    }
    for (const auto& [n, t] : p.state) {
        if (n.rfind(prefix, 0) == 0) out.state.emplace_back(n.substr(prefix.size()), t);
    }
    return out;
}

/// Write mutated sub-param state (batchnorm running stats) back is not
/// needed: the borrowed tensors share data buffers with the originals.
template <typename S>
inline Tensor<S> residual_forward(Tape<S>* tape, const Tensor<S>& x, LayerParams<S>& p,
                                  const LayerSpec& spec, LayerMode mode) {
    LayerParams<S> conv1 = sub_params(p, "conv1_");
    LayerParams<S> bn1 = sub_params(p, "bn1_");
    LayerParams<S> conv2 = sub_params(p, "conv2_");
    LayerParams<S> bn2 = sub_params(p, "bn2_");
    LayerParams<S> proj = sub_params(p, "proj_");
    Tensor<S> h = conv1d_forward(tape, x, conv1, 1);
    h = batchnorm_forward(tape, h, bn1, mode, spec.momentum, spec.epsilon);
    h = relu(tape, h);
    h = conv1d_forward(tape, h, conv2, 1);
    h = batchnorm_forward(tape, h, bn2, mode, spec.momentum, spec.epsilon);
    Tensor<S> skip = conv1d_forward(tape, x, proj, 1);
    return relu(tape, add(tape, h, skip));
}

}  // namespace detail

template <typename S>
Tensor<S> Model<S>::forward(Tape<S>* tape, const Tensor<S>& x, LayerMode mode, Rng* dropout_rng) {
    if (x.rank() != 3 || x.dim(1) != window_size || x.dim(2) != 3) {
        throw InvalidInput(strfmt("%s: expected input [batch x %d x 3], got %s", name.c_str(),
                                  window_size, shape_str(x.shape).c_str()));
    }
    Tensor<S> h = x;
    for (size_t i = 0; i < specs.size(); ++i) {
        const LayerSpec& spec = specs[i];
        LayerParams<S>& p = params[i];
        switch (spec.kind) {
            case LayerKind::dense:
                h = dense_forward(tape, h, p, spec.act);
                break;
            case LayerKind::conv1d:
                h = conv1d_forward(tape, h, p, spec.dilation);
                break;
            case LayerKind::lstm:
                h = lstm_forward(tape, h, p, spec.return_sequences);
                break;
            case LayerKind::bilstm: {
                LayerParams<S> fwd = detail::sub_params(p, "fwd_");
                LayerParams<S> bwd = detail::sub_params(p, "bwd_");
                h = bilstm_forward(tape, h, fwd, bwd, spec.return_sequences);
                break;
            }
            case LayerKind::batchnorm:
                h = batchnorm_forward(tape, h, p, mode, spec.momentum, spec.epsilon);
                break;
            case LayerKind::dropout: {
                if (mode == LayerMode::train && dropout_rng == nullptr) {
                    throw InvalidInput("forward: train-mode dropout needs a random source");
                }
                static Rng unused(0);
                h = dropout_forward(tape, h, spec.rate, mode,
                                    dropout_rng != nullptr ? *dropout_rng : unused);
                break;
            }
            case LayerKind::relu:
                h = relu(tape, h);
                break;
            case LayerKind::take_last_step:
                h = time_slice(tape, h, h.dim(1) - 1);
                break;
            case LayerKind::residual_block:
                h = detail::residual_forward(tape, h, p, spec, mode);
                break;
        }
    }
    return h;
}

template <typename S>
std::vector<S> Model<S>::predict(const double* raw, int batch, int window, int channels) {
    if (window != window_size || channels != 3) {
        throw InvalidInput(strfmt("%s: expects %d x 3 windows, got %d x %d", name.c_str(),
                                  window_size, window, channels));
    }
    if (!norm.fitted) {
        throw InvalidInput("predict: normalization statistics missing (train or load weights first)");
    }
    const int64_t per = static_cast<int64_t>(window) * 3;
    std::vector<S> values(static_cast<size_t>(batch) * per);
    for (int b = 0; b < batch; ++b) {
        for (int64_t i = 0; i < per; ++i) {
            const int axis = static_cast<int>(i % 3);
            values[static_cast<size_t>(b * per + i)] = static_cast<S>(
                (raw[b * per + i] - norm.mean[static_cast<size_t>(axis)]) /
                norm.stddev[static_cast<size_t>(axis)]);
        }
    }
    Tensor<S> x({batch, window, 3}, std::move(values));
    Tensor<S> y = forward(nullptr, x, LayerMode::infer, nullptr);
    std::vector<S> out(static_cast<size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        const S v = y.at(b);
        out[static_cast<size_t>(b)] = v > S(0) ? v : S(0);
    }
    return out;
}

template <typename S>
Model<S> build_model(const std::string& name, int window_size, uint64_t seed) {
    if (window_size < 5) {
        throw InvalidInput(strfmt("build_model: window size %d below the minimum of 5", window_size));
    }
    Model<S> m;
    m.name = name;
    m.window_size = window_size;
    m.specs = zoo_layer_specs(name);
    Rng rng(derive_seed(seed, "init"));
    ShapeFlow flow;
    for (const auto& spec : m.specs) {
        m.params.push_back(init_params<S>(spec, flow.width, rng));
        if (m.params.back().trainable_count() != spec_param_count(spec, flow.width)) {
            throw InvalidInput("build_model: allocated parameters disagree with the closed form");
        }
        flow = advance_flow(flow, spec);
    }
    if (flow.sequence || flow.width != 1) {
        throw InvalidInput("build_model: stack does not end in a single scalar output");
    }
    return m;
}

}  // namespace carspeed
