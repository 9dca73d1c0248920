#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "carspeed/rng.hpp"
#include "carspeed/tensor.hpp"

namespace carspeed {

/// Named parameter set for one layer. `trainable` tensors receive gradients
/// and optimizer updates; `state` tensors (batchnorm running statistics and
/// the update counter) are carried along and serialized but never trained.
template <typename S>
struct LayerParams {
    std::vector<std::pair<std::string, Tensor<S>>> trainable;
    std::vector<std::pair<std::string, Tensor<S>>> state;

    Tensor<S>& get(const std::string& name) {
        for (auto& [n, t] : trainable) {
            if (n == name) return t;
        }
        for (auto& [n, t] : state) {
            if (n == name) return t;
        }
        throw InvalidInput("layer parameter not found: " + name);
    }
    const Tensor<S>& get(const std::string& name) const {
        return const_cast<LayerParams*>(this)->get(name);
    }

    int64_t trainable_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : trainable) n += t.numel();
        return n;
    }
};

// Closed-form trainable parameter counts.
inline int64_t dense_param_count(int d, int h) { return static_cast<int64_t>(d) * h + h; }
inline int64_t conv1d_param_count(int k, int cin, int cout) {
    return static_cast<int64_t>(k) * cin * cout + cout;
}
inline int64_t lstm_param_count(int d, int h) {
    return 4ll * (static_cast<int64_t>(h) * (d + h) + h);
}
inline int64_t bilstm_param_count(int d, int h) { return 2 * lstm_param_count(d, h); }
inline int64_t batchnorm_param_count(int c) { return 2ll * c; }

// ---------------------------------------------------------------------------
// initialization

namespace init {

/// Glorot-uniform values in +-sqrt(6 / (fan_in + fan_out)), drawn in double.
template <typename S>
inline Tensor<S> glorot_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    const int64_t n = numel_of(shape);
    std::vector<S> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
    return Tensor<S>(std::move(shape), std::move(v));
}

/// Random n x n orthogonal matrix (row-major, double). Modified Gram-Schmidt
/// with a second orthogonalization pass over a Gaussian draw.
inline std::vector<double> orthogonal_matrix(int n, Rng& rng) {
    std::vector<double> q(static_cast<size_t>(n) * n);
    for (auto& x : q) x = rng.normal();
    auto col_dot = [&](int a, int b) {
        double s = 0;
        for (int r = 0; r < n; ++r) s += q[static_cast<size_t>(r) * n + a] * q[static_cast<size_t>(r) * n + b];
        return s;
    };
    for (int pass = 0; pass < 2; ++pass) {
        for (int j = 0; j < n; ++j) {
            for (int i = 0; i < j; ++i) {
                const double proj = col_dot(i, j);
                for (int r = 0; r < n; ++r) {
                    q[static_cast<size_t>(r) * n + j] -= proj * q[static_cast<size_t>(r) * n + i];
                }
            }
            const double norm = std::sqrt(col_dot(j, j));
            for (int r = 0; r < n; ++r) q[static_cast<size_t>(r) * n + j] /= norm;
        }
    }
    return q;
}

}  // namespace init

template <typename S>
inline LayerParams<S> make_dense_params(int d, int h, Rng& rng) {
    LayerParams<S> p;
    p.trainable.emplace_back("W", init::glorot_uniform<S>({d, h}, d, h, rng));
    p.trainable.emplace_back("b", Tensor<S>::zeros({h}));
    return p;
}

template <typename S>
inline LayerParams<S> make_conv1d_params(int k, int cin, int cout, Rng& rng) {
    LayerParams<S> p;
    p.trainable.emplace_back("K", init::glorot_uniform<S>({k, cin, cout}, k * cin, k * cout, rng));
    p.trainable.emplace_back("b", Tensor<S>::zeros({cout}));
    return p;
}

/// LSTM parameters with gate order (input, forget, cell, output):
/// input kernel W [d x 4h] Glorot, recurrent kernel U [h x 4h] orthogonal
/// per gate block, bias zero except the forget gate block at 1.
template <typename S>
inline LayerParams<S> make_lstm_params(int d, int h, Rng& rng) {
    LayerParams<S> p;
    p.trainable.emplace_back("W", init::glorot_uniform<S>({d, 4 * h}, d, 4 * h, rng));
    std::vector<S> u(static_cast<size_t>(h) * 4 * h);
    for (int gate = 0; gate < 4; ++gate) {
        const auto q = init::orthogonal_matrix(h, rng);
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < h; ++c) {
                u[static_cast<size_t>(r) * 4 * h + gate * h + c] =
                    static_cast<S>(q[static_cast<size_t>(r) * h + c]);
            }
        }
    }
    p.trainable.emplace_back("U", Tensor<S>({h, 4 * h}, std::move(u)));
    std::vector<S> b(static_cast<size_t>(4) * h, S(0));
    for (int i = h; i < 2 * h; ++i) b[static_cast<size_t>(i)] = S(1);
    p.trainable.emplace_back("b", Tensor<S>({4 * h}, std::move(b)));
    return p;
}

template <typename S>
inline LayerParams<S> make_batchnorm_params(int c) {
    LayerParams<S> p;
    p.trainable.emplace_back("gamma", Tensor<S>::full({c}, S(1)));
    p.trainable.emplace_back("beta", Tensor<S>::zeros({c}));
    p.state.emplace_back("running_mean", Tensor<S>::zeros({c}));
    p.state.emplace_back("running_var", Tensor<S>::full({c}, S(1)));
    p.state.emplace_back("steps", Tensor<S>::zeros({1}));
    return p;
}

// ---------------------------------------------------------------------------
// forward ops

enum class Activation { linear, relu };

/// x [... x d] -> [... x h]: x.W + b over the last axis, then activation.
template <typename S>
inline Tensor<S> dense_forward(Tape<S>* tape, const Tensor<S>& x, const LayerParams<S>& p,
                               Activation act) {
    const Tensor<S>& W = p.get("W");
    const Tensor<S>& b = p.get("b");
    const int d = W.dim(0), h = W.dim(1);
    if (x.shape.empty() || x.shape.back() != d) {
        throw InvalidInput(strfmt("dense: input %s does not end in width %d",
                                  shape_str(x.shape).c_str(), d));
    }
    const bool flat = x.rank() == 2;
    Tensor<S> rows = flat ? x : reshape(tape, x, {static_cast<int>(x.numel() / d), d});
    Tensor<S> y = add(tape, matmul(tape, rows, W), b);
    if (act == Activation::relu) y = relu(tape, y);
    if (flat) return y;
    std::vector<int> oshape = x.shape;
    oshape.back() = h;
    return reshape(tape, y, std::move(oshape));
}

/// 1-D convolution over [B x T x Cin] with 'same' padding (odd kernel) and
/// optional dilation; out-of-range taps read zero. Output is [B x T x Cout].
template <typename S>
inline Tensor<S> conv1d_forward(Tape<S>* tape, const Tensor<S>& x, const LayerParams<S>& p,
                                int dilation = 1) {
    const Tensor<S>& K = p.get("K");
    const Tensor<S>& bias = p.get("b");
    if (x.rank() != 3) throw InvalidInput("conv1d: expected input [B x T x Cin]");
    const int B = x.dim(0), T = x.dim(1), Cin = x.dim(2);
    const int k = K.dim(0), Cout = K.dim(2);
    if (T < 1) throw InvalidInput("conv1d: sequence length must be at least 1");
    if (k % 2 == 0) throw InvalidInput("conv1d: kernel length must be odd for same padding");
    if (dilation < 1) throw InvalidInput("conv1d: dilation must be at least 1");
    if (K.dim(1) != Cin) {
        throw InvalidInput(strfmt("conv1d: kernel expects %d input channels, input has %d",
                                  K.dim(1), Cin));
    }
    const int half = (k - 1) / 2;

    Tensor<S> out = Tensor<S>::zeros({B, T, Cout});
    {
        const S* px = x.ptr();
        const S* pk = K.ptr();
        const S* pb = bias.ptr();
        S* po = out.mut();
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < T; ++t) {
                S* yrow = po + (static_cast<int64_t>(b) * T + t) * Cout;
                for (int co = 0; co < Cout; ++co) yrow[co] = pb[co];
                for (int j = 0; j < k; ++j) {
                    const int tau = t + (j - half) * dilation;
                    if (tau < 0 || tau >= T) continue;
                    const S* xrow = px + (static_cast<int64_t>(b) * T + tau) * Cin;
                    const S* krow = pk + static_cast<int64_t>(j) * Cin * Cout;
                    for (int ci = 0; ci < Cin; ++ci) {
                        const S xv = xrow[ci];
                        const S* kr = krow + static_cast<int64_t>(ci) * Cout;
                        for (int co = 0; co < Cout; ++co) yrow[co] += xv * kr[co];
                    }
                }
            }
        }
    }
    if (detail::setup_output(tape, out, {&x, &K, &bias})) {
        const auto xdata = x.data, kdata = K.data;
        const int xnode = x.node, knode = K.node, bnode = bias.node, onode = out.node;
        tape->record({xnode, knode, bnode}, onode, [=](Tape<S>& t) {
            const std::vector<S>& g = t.grad_ref(onode);
            if (bnode >= 0) {
                std::vector<S>& gb = t.grad_ref(bnode);
                for (int64_t r = 0; r < static_cast<int64_t>(B) * T; ++r) {
                    const S* grow = g.data() + r * Cout;
                    for (int co = 0; co < Cout; ++co) gb[static_cast<size_t>(co)] += grow[co];
                }
            }
            const S* px = xdata->data();
            const S* pk = kdata->data();
            for (int b = 0; b < B; ++b) {
                for (int ti = 0; ti < T; ++ti) {
                    const S* grow = g.data() + (static_cast<int64_t>(b) * T + ti) * Cout;
                    for (int j = 0; j < k; ++j) {
                        const int tau = ti + (j - half) * dilation;
                        if (tau < 0 || tau >= T) continue;
                        const S* xrow = px + (static_cast<int64_t>(b) * T + tau) * Cin;
                        for (int ci = 0; ci < Cin; ++ci) {
                            const int64_t kbase = (static_cast<int64_t>(j) * Cin + ci) * Cout;
                            if (knode >= 0) {
                                std::vector<S>& gk = t.grad_ref(knode);
                                const S xv = xrow[ci];
                                for (int co = 0; co < Cout; ++co) {
                                    gk[static_cast<size_t>(kbase + co)] += xv * grow[co];
                                }
                            }
                            if (xnode >= 0) {
                                S s = 0;
                                const S* kr = pk + kbase;
                                for (int co = 0; co < Cout; ++co) s += kr[co] * grow[co];
                                t.grad_ref(xnode)[static_cast<size_t>(
                                    (static_cast<int64_t>(b) * T + tau) * Cin + ci)] += s;
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

/// Standard LSTM over [B x T x d]. Gates i, f, o are sigmoid, the cell
/// candidate is tanh; c_t = f*c_{t-1} + i*g, h_t = o*tanh(c_t). Initial
/// h and c are zero. Returns [B x T x h] or the final [B x h].
template <typename S>
inline Tensor<S> lstm_forward(Tape<S>* tape, const Tensor<S>& x, const LayerParams<S>& p,
                              bool return_sequences) {
    const Tensor<S>& W = p.get("W");
    const Tensor<S>& U = p.get("U");
    const Tensor<S>& b = p.get("b");
    if (x.rank() != 3) throw InvalidInput("lstm: expected input [B x T x d]");
    const int B = x.dim(0), T = x.dim(1), d = x.dim(2);
    const int h = U.dim(0);
    if (T < 1) throw InvalidInput("lstm: empty sequence");
    if (W.dim(0) != d) {
        throw InvalidInput(strfmt("lstm: input width %d does not match kernel %s", d,
                                  shape_str(W.shape).c_str()));
    }
    Tensor<S> hidden = Tensor<S>::zeros({B, h});
    Tensor<S> cell = Tensor<S>::zeros({B, h});
    std::vector<Tensor<S>> seq;
    if (return_sequences) seq.reserve(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        Tensor<S> xt = time_slice(tape, x, t);
        Tensor<S> z = add(tape, add(tape, matmul(tape, xt, W), matmul(tape, hidden, U)), b);
        Tensor<S> gi = sigmoid(tape, slice_last(tape, z, 0, h));
        Tensor<S> gf = sigmoid(tape, slice_last(tape, z, h, h));
        Tensor<S> gg = tanh_op(tape, slice_last(tape, z, 2 * h, h));
        Tensor<S> go = sigmoid(tape, slice_last(tape, z, 3 * h, h));
        cell = add(tape, mul(tape, gf, cell), mul(tape, gi, gg));
        hidden = mul(tape, go, tanh_op(tape, cell));
        if (return_sequences) seq.push_back(hidden);
    }
    return return_sequences ? time_stack(tape, seq) : hidden;
}

/// Bidirectional LSTM: forward pass plus a pass over the time-reversed input
/// (re-reversed on output), concatenated on the feature axis.
template <typename S>
inline Tensor<S> bilstm_forward(Tape<S>* tape, const Tensor<S>& x, const LayerParams<S>& p_fwd,
                                const LayerParams<S>& p_bwd, bool return_sequences) {
    Tensor<S> rev = time_reverse(tape, x);
    if (return_sequences) {
        Tensor<S> fwd = lstm_forward(tape, x, p_fwd, true);
        Tensor<S> bwd = time_reverse(tape, lstm_forward(tape, rev, p_bwd, true));
        return concat(tape, fwd, bwd, 2);
    }
    Tensor<S> fwd = lstm_forward(tape, x, p_fwd, false);
    Tensor<S> bwd = lstm_forward(tape, rev, p_bwd, false);
    return concat(tape, fwd, bwd, 1);
}

enum class LayerMode { train, infer };

/// Temporal batch normalization over [B x T x C]: per-channel statistics
/// across the batch and time axes. Train mode normalizes with batch
/// statistics and folds them into the running estimates; infer mode uses
/// the running estimates and requires at least one prior update.
template <typename S>
inline Tensor<S> batchnorm_forward(Tape<S>* tape, const Tensor<S>& x, LayerParams<S>& p,
                                   LayerMode mode, double momentum = 0.99, double epsilon = 1e-5) {
    const Tensor<S>& gamma = p.get("gamma");
    const Tensor<S>& beta = p.get("beta");
    if (x.rank() != 3) throw InvalidInput("batchnorm: expected input [B x T x C]");
    const int B = x.dim(0), T = x.dim(1), C = x.dim(2);
    if (gamma.dim(0) != C) {
        throw InvalidInput(strfmt("batchnorm: %d channels but gamma has %d", C, gamma.dim(0)));
    }
    const int64_t M = static_cast<int64_t>(B) * T;

    std::vector<S> mean(static_cast<size_t>(C), S(0));
    std::vector<S> var(static_cast<size_t>(C), S(0));
    if (mode == LayerMode::train) {
        const S* px = x.ptr();
        for (int64_t r = 0; r < M; ++r) {
            const S* row = px + r * C;
            for (int c = 0; c < C; ++c) mean[static_cast<size_t>(c)] += row[c];
        }
        for (int c = 0; c < C; ++c) mean[static_cast<size_t>(c)] /= static_cast<S>(M);
        for (int64_t r = 0; r < M; ++r) {
            const S* row = px + r * C;
            for (int c = 0; c < C; ++c) {
                const S dmu = row[c] - mean[static_cast<size_t>(c)];
                var[static_cast<size_t>(c)] += dmu * dmu;
            }
        }
        for (int c = 0; c < C; ++c) var[static_cast<size_t>(c)] /= static_cast<S>(M);

        Tensor<S>& rmean = p.get("running_mean");
        Tensor<S>& rvar = p.get("running_var");
        Tensor<S>& steps = p.get("steps");
        const S mom = static_cast<S>(momentum);
        for (int c = 0; c < C; ++c) {
            rmean.mut()[c] = mom * rmean.at(c) + (S(1) - mom) * mean[static_cast<size_t>(c)];
            rvar.mut()[c] = mom * rvar.at(c) + (S(1) - mom) * var[static_cast<size_t>(c)];
        }
        steps.mut()[0] += S(1);
    } else {
        if (p.get("steps").at(0) == S(0)) {
            throw InvalidInput("batchnorm: inference before any training update (uninitialized running statistics)");
        }
        const Tensor<S>& rmean = p.get("running_mean");
        const Tensor<S>& rvar = p.get("running_var");
        for (int c = 0; c < C; ++c) {
            mean[static_cast<size_t>(c)] = rmean.at(c);
            var[static_cast<size_t>(c)] = rvar.at(c);
        }
    }

    std::vector<S> invstd(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        invstd[static_cast<size_t>(c)] = S(1) / std::sqrt(var[static_cast<size_t>(c)] + static_cast<S>(epsilon));
    }

    Tensor<S> out = Tensor<S>::zeros(x.shape);
    auto xhat = std::make_shared<std::vector<S>>(static_cast<size_t>(x.numel()));
    {
        const S* px = x.ptr();
        S* po = out.mut();
        S* ph = xhat->data();
        const S* pg = gamma.ptr();
        const S* pbeta = beta.ptr();
        for (int64_t r = 0; r < M; ++r) {
            const S* row = px + r * C;
            S* orow = po + r * C;
            S* hrow = ph + r * C;
            for (int c = 0; c < C; ++c) {
                const S xn = (row[c] - mean[static_cast<size_t>(c)]) * invstd[static_cast<size_t>(c)];
                hrow[c] = xn;
                orow[c] = xn * pg[c] + pbeta[c];
            }
        }
    }
    if (detail::setup_output(tape, out, {&x, &gamma, &beta})) {
        const auto gdata = gamma.data;
        const int xnode = x.node, gnode = gamma.node, bnode = beta.node, onode = out.node;
        const bool train = mode == LayerMode::train;
        tape->record({xnode, gnode, bnode}, onode, [=](Tape<S>& t) {
            const std::vector<S>& g = t.grad_ref(onode);
            std::vector<S> sum_g(static_cast<size_t>(C), S(0));
            std::vector<S> sum_gx(static_cast<size_t>(C), S(0));
            for (int64_t r = 0; r < M; ++r) {
                const S* grow = g.data() + r * C;
                const S* hrow = xhat->data() + r * C;
                for (int c = 0; c < C; ++c) {
                    sum_g[static_cast<size_t>(c)] += grow[c];
                    sum_gx[static_cast<size_t>(c)] += grow[c] * hrow[c];
                }
            }
            if (bnode >= 0) t.add_grad(bnode, sum_g.data(), C);
            if (gnode >= 0) t.add_grad(gnode, sum_gx.data(), C);
            if (xnode >= 0) {
                std::vector<S>& gx = t.grad_ref(xnode);
                const S* pg = gdata->data();
                const S m = static_cast<S>(M);
                for (int64_t r = 0; r < M; ++r) {
                    const S* grow = g.data() + r * C;
                    const S* hrow = xhat->data() + r * C;
                    S* gxrow = gx.data() + r * C;
                    for (int c = 0; c < C; ++c) {
                        const S scale_c = pg[c] * invstd[static_cast<size_t>(c)];
                        if (train) {
                            gxrow[c] += scale_c / m *
                                        (m * grow[c] - sum_g[static_cast<size_t>(c)] -
                                         hrow[c] * sum_gx[static_cast<size_t>(c)]);
                        } else {
                            gxrow[c] += scale_c * grow[c];
                        }
                    }
                }
            }
        });
    }
    return out;
}

/// Inverted dropout: train mode zeroes each element with probability `rate`
/// and rescales survivors by 1/(1-rate); infer mode is the identity.
template <typename S>
inline Tensor<S> dropout_forward(Tape<S>* tape, const Tensor<S>& x, double rate, LayerMode mode,
                                 Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw InvalidInput("dropout: rate must be in [0, 1)");
    if (mode == LayerMode::infer || rate == 0.0) return reshape(tape, x, x.shape);

    const double keep = 1.0 - rate;
    const S inv_keep = static_cast<S>(1.0 / keep);
    const int64_t n = x.numel();
    auto mask = std::make_shared<std::vector<S>>(static_cast<size_t>(n));
    Tensor<S> out = Tensor<S>::zeros(x.shape);
    {
        const S* px = x.ptr();
        S* po = out.mut();
        S* pm = mask->data();
        for (int64_t i = 0; i < n; ++i) {
            const S m = rng.uniform() < keep ? inv_keep : S(0);
            pm[i] = m;
            po[i] = px[i] * m;
        }
    }
    if (detail::setup_output(tape, out, {&x})) {
        const int xnode = x.node, onode = out.node;
        tape->record({xnode}, onode, [=](Tape<S>& t) {
            const std::vector<S>& g = t.grad_ref(onode);
            std::vector<S>& gx = t.grad_ref(xnode);
            for (int64_t i = 0; i < n; ++i) {
                gx[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * (*mask)[static_cast<size_t>(i)];
            }
        });
    }
    return out;
}

}  // namespace carspeed
