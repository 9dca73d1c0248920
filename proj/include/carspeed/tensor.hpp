#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "carspeed/util.hpp"

namespace carspeed {

// Dense row-major tensor over a scalar type S. Two widths are supported
// project-wide: float ("narrow", training/inference) and double ("wide",
// gradient checks and reproducibility runs). Data buffers are shared and
// treated as immutable once an op has produced them; `node` ties the tensor
// to the tape that recorded it (-1 = untracked).
template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<S>> data;
    bool requires_grad = false;
    int node = -1;
    int64_t tape_id = -1;  // which tape `node` belongs to

    Tensor() : data(std::make_shared<std::vector<S>>()) {}

    Tensor(std::vector<int> shape_, std::vector<S> values)
        : shape(std::move(shape_)), data(std::make_shared<std::vector<S>>(std::move(values))) {
        if (numel_of(shape) != static_cast<int64_t>(data->size())) {
            throw InvalidInput(strfmt("tensor: %lld values do not fill shape %s",
                                      static_cast<long long>(data->size()), shape_str(shape).c_str()));
        }
        for (int d : shape) {
            if (d <= 0) throw InvalidInput("tensor: shape dimensions must be positive");
        }
    }

    static Tensor zeros(std::vector<int> shape_) {
        const auto n = numel_of(shape_);
        return Tensor(std::move(shape_), std::vector<S>(static_cast<size_t>(n), S(0)));
    }

    static Tensor full(std::vector<int> shape_, S value) {
        const auto n = numel_of(shape_);
        return Tensor(std::move(shape_), std::vector<S>(static_cast<size_t>(n), value));
    }

    static Tensor scalar(S value) { return Tensor({1}, {value}); }

    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data->size()); }

    const S* ptr() const { return data->data(); }
    S* mut() { return data->data(); }
    S at(int64_t i) const { return (*data)[static_cast<size_t>(i)]; }
    S item() const {
        if (numel() != 1) throw InvalidInput("item(): tensor is not a scalar");
        return (*data)[0];
    }

    /// Deep copy of the buffer (shape and flags preserved, node detached).
    Tensor clone() const {
        Tensor t(shape, *data);
        t.requires_grad = requires_grad;
        return t;
    }
};

template <typename S>
using GradMap = std::unordered_map<int, Tensor<S>>;

// Reverse-mode tape for one forward pass. Operations append themselves in
// execution order, so the list is topologically sorted by construction;
// backward() replays it once in reverse and is then consumed — a second
// call is an error rather than silent re-accumulation.
template <typename S>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&)>;

    Tape() : id_(next_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    int64_t id() const { return id_; }

    /// Register a leaf tensor for gradient tracking. Leaves must be watched
    /// anew on every tape; node ids do not carry over between passes.
    int watch(Tensor<S>& t) {
        t.requires_grad = true;
        t.node = track(t.shape);
        t.tape_id = id_;
        return t.node;
    }

    /// Allocate a gradient slot for a tensor of the given shape.
    int track(const std::vector<int>& shape) {
        nodes_.push_back(Node{shape, std::vector<S>(static_cast<size_t>(numel_of(shape)), S(0))});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void record(std::vector<int> input_nodes, int output_node, BackwardFn fn) {
        ops_.push_back(Op{std::move(input_nodes), output_node, std::move(fn)});
    }

    std::vector<S>& grad_ref(int node) { return nodes_[static_cast<size_t>(node)].grad; }

    void add_grad(int node, const S* g, int64_t n) {
        auto& buf = nodes_[static_cast<size_t>(node)].grad;
        for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
    }

    size_t op_count() const { return ops_.size(); }
    size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    /// True if every recorded op only reads nodes created before its output.
    bool topologically_sorted() const {
        for (const auto& op : ops_) {
            for (int in : op.inputs) {
                if (in >= op.output) return false;
            }
        }
        return true;
    }

    /// Reverse sweep from a scalar loss. Returns the gradient of the loss
    /// with respect to every tracked tensor, keyed by node id. Gradients
    /// from multiple uses of a tensor accumulate by addition.
    GradMap<S> backward(const Tensor<S>& loss) {
        if (consumed_) {
            throw InvalidInput("backward: tape already consumed; re-record the forward pass");
        }
        if (loss.numel() != 1) {
            throw InvalidInput(strfmt("backward: loss must be scalar, got shape %s",
                                      shape_str(loss.shape).c_str()));
        }
        if (loss.node < 0 || loss.tape_id != id_ || loss.node >= static_cast<int>(nodes_.size())) {
            throw InvalidInput("backward: loss tensor is not on this tape");
        }
        consumed_ = true;
        nodes_[static_cast<size_t>(loss.node)].grad[0] = S(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            it->fn(*this);
        }
        GradMap<S> grads;
        grads.reserve(nodes_.size());
        for (size_t i = 0; i < nodes_.size(); ++i) {
            grads.emplace(static_cast<int>(i),
                          Tensor<S>(nodes_[i].shape, std::move(nodes_[i].grad)));
        }
        nodes_.clear();
        ops_.clear();
        return grads;
    }

private:
    struct Node {
        std::vector<int> shape;
        std::vector<S> grad;
    };
    struct Op {
        std::vector<int> inputs;
        int output;
        BackwardFn fn;
    };
    static int64_t next_id() {
        static std::atomic<int64_t> counter{0};
        return counter.fetch_add(1);
    }

    int64_t id_;
    std::vector<Node> nodes_;
    std::vector<Op> ops_;
    bool consumed_ = false;
};

namespace detail {

// Tracks the output of an op and rejects gradient-requiring inputs that were
// never put on the tape. Returns true if the op must record a backward rule.
template <typename S>
inline bool setup_output(Tape<S>* tape, Tensor<S>& out, std::initializer_list<const Tensor<S>*> inputs) {
    bool needs = false;
    for (const Tensor<S>* in : inputs) {
        if (!in->requires_grad) continue;
        if (tape != nullptr && (in->node < 0 || in->tape_id != tape->id())) {
            throw InvalidInput("op input requires grad but is not on the tape (call watch first)");
        }
        needs = true;
    }
    if (tape == nullptr || !needs) return false;
    out.requires_grad = true;
    out.node = tape->track(out.shape);
    out.tape_id = tape->id();
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

template <typename S>
inline Tensor<S> matmul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw InvalidInput(strfmt("matmul: incompatible shapes %s x %s",
                                  shape_str(a.shape).c_str(), shape_str(b.shape).c_str()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    {
        const S* pa = a.ptr();
        const S* pb = b.ptr();
        S* pc = out.mut();
        for (int i = 0; i < m; ++i) {
            for (int kk = 0; kk < k; ++kk) {
                const S aik = pa[i * k + kk];
                const S* brow = pb + kk * n;
                S* crow = pc + i * n;
                for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
            }
        }
    }
    if (detail::setup_output(tape, out, {&a, &b})) {
        const auto adata = a.data, bdata = b.data;
        const int anode = a.node, bnode = b.node, onode = out.node;
        tape->record({anode, bnode}, onode, [=](Tape<S>& t) {
            const std::vector<S>& gout = t.grad_ref(onode);
            if (anode >= 0) {
                // dA = dC · B^T
                std::vector<S>& ga = t.grad_ref(anode);
                const S* pb = bdata->data();
                for (int i = 0; i < m; ++i) {
                    for (int kk = 0; kk < k; ++kk) {
                        S s = 0;
                        const S* grow = gout.data() + i * n;
                        const S* brow = pb + kk * n;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ga[static_cast<size_t>(i * k + kk)] += s;
                    }
                }
            }
            if (bnode >= 0) {
                // dB = A^T · dC
                std::vector<S>& gb = t.grad_ref(bnode);
                const S* pa = adata->data();
                for (int i = 0; i < m; ++i) {
                    const S* grow = gout.data() + i * n;
                    for (int kk = 0; kk < k; ++kk) {
                        const S aik = pa[i * k + kk];
                        S* gbrow = gb.data() + kk * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise ops

enum class EwiseKind { add, sub, mul, sigmoid, tanh, relu };

namespace detail {

template <typename S>
inline S sigmoid_val(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

// Binary elementwise: equal shapes, or b a vector broadcast over the last
// axis of a (the bias-add case).
template <typename S>
inline Tensor<S> ewise_binary(Tape<S>* tape, EwiseKind kind, const Tensor<S>& a, const Tensor<S>& b) {
    const bool same = a.shape == b.shape;
    const bool bias = b.rank() == 1 && a.rank() >= 1 && a.shape.back() == b.dim(0);
    if (!same && !bias) {
        throw InvalidInput(strfmt("ewise: incompatible shapes %s and %s",
                                  shape_str(a.shape).c_str(), shape_str(b.shape).c_str()));
    }
    const int64_t n = a.numel();
    const int64_t c = same ? n : b.numel();
    Tensor<S> out = Tensor<S>::zeros(a.shape);
    const S* pa = a.ptr();
    const S* pb = b.ptr();
    S* po = out.mut();
    switch (kind) {
        case EwiseKind::add:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % c];
            break;
        case EwiseKind::sub:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i % c];
            break;
        case EwiseKind::mul:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i % c];
            break;
        default:
            throw InvalidInput("ewise: unary kind used with two operands");
    }
    if (setup_output(tape, out, {&a, &b})) {
        const auto adata = a.data, bdata = b.data;
        const int anode = a.node, bnode = b.node, onode = out.node;
        tape->record({anode, bnode}, onode, [=](Tape<S>& t) {
            const std::vector<S>& g = t.grad_ref(onode);
            if (anode >= 0) {
                std::vector<S>& ga = t.grad_ref(anode);
                if (kind == EwiseKind::mul) {
                    const S* pbv = bdata->data();
                    for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * pbv[i % c];
                } else {
                    for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
                }
            }
            if (bnode >= 0) {
                std::vector<S>& gb = t.grad_ref(bnode);
                const S sign = (kind == EwiseKind::sub) ? S(-1) : S(1);
                if (kind == EwiseKind::mul) {
                    const S* pav = adata->data();
                    for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i % c)] += g[static_cast<size_t>(i)] * pav[i];
                } else {
                    for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i % c)] += sign * g[static_cast<size_t>(i)];
                }
            }
        });
    }
    return out;
}

template <typename S>
inline Tensor<S> ewise_unary(Tape<S>* tape, EwiseKind kind, const Tensor<S>& a) {
    const int64_t n = a.numel();
    Tensor<S> out = Tensor<S>::zeros(a.shape);
    const S* pa = a.ptr();
    S* po = out.mut();
    switch (kind) {
        case EwiseKind::sigmoid:
            for (int64_t i = 0; i < n; ++i) po[i] = sigmoid_val(pa[i]);
            break;
        case EwiseKind::tanh:
            for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
            break;
        case EwiseKind::relu:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > S(0) ? pa[i] : S(0);
            break;
        default:
            throw InvalidInput("ewise: binary kind needs two operands");
    }
    if (setup_output(tape, out, {&a})) {
        const auto adata = a.data, odata = out.data;
        const int anode = a.node, onode = out.node;
        tape->record({anode}, onode, [=](Tape<S>& t) {
            const std::vector<S>& g = t.grad_ref(onode);
            std::vector<S>& ga = t.grad_ref(anode);
            const S* pav = adata->data();
            const S* pov = odata->data();
            switch (kind) {
                case EwiseKind::sigmoid:
                    for (int64_t i = 0; i < n; ++i) {
                        const S y = pov[i];
                        ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * y * (S(1) - y);
                    }
                    break;
                case EwiseKind::tanh:
                    for (int64_t i = 0; i < n; ++i) {
                        const S y = pov[i];
                        ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * (S(1) - y * y);
                    }
                    break;
                case EwiseKind::relu:
                    // gradient is 0 at input exactly 0
                    for (int64_t i = 0; i < n; ++i) {
                        if (pav[i] > S(0)) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
                    }
                    break;
                default:
                    break;
            }
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
inline Tensor<S> ewise(Tape<S>* tape, EwiseKind kind, const Tensor<S>& a, const Tensor<S>* b = nullptr) {
    const bool binary = kind == EwiseKind::add || kind == EwiseKind::sub || kind == EwiseKind::mul;
    if (binary) {
        if (b == nullptr) throw InvalidInput("ewise: binary kind needs two operands");
        return detail::ewise_binary(tape, kind, a, *b);
    }
    if (b != nullptr) throw InvalidInput("ewise: unary kind used with two operands");
    return detail::ewise_unary(tape, kind, a);
}

// clang-format off
template <typename S> inline Tensor<S> add(Tape<S>* t, const Tensor<S>& a, const Tensor<S>& b) { return detail::ewise_binary(t, EwiseKind::add, a, b); }
template <typename S> inline Tensor<S> sub(Tape<S>* t, const Tensor<S>& a, const Tensor<S>& b) { return detail::ewise_binary(t, EwiseKind::sub, a, b); }
template <typename S> inline Tensor<S> mul(Tape<S>* t, const Tensor<S>& a, const Tensor<S>& b) { return detail::ewise_binary(t, EwiseKind::mul, a, b); }
template <typename S> inline Tensor<S> sigmoid(Tape<S>* t, const Tensor<S>& a) { return detail::ewise_unary(t, EwiseKind::sigmoid, a); }
template <typename S> inline Tensor<S> tanh_op(Tape<S>* t, const Tensor<S>& a) { return detail::ewise_unary(t, EwiseKind::tanh, a); }
template <typename S> inline Tensor<S> relu(Tape<S>* t, const Tensor<S>& a) { return detail::ewise_unary(t, EwiseKind::relu, a); }
// clang-format on

// ---------------------------------------------------------------------------
// shape ops

template <typename S>
inline Tensor<S> concat(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b, int axis) {
    if (a.rank() != b.rank() || axis < 0 || axis >= a.rank()) {
        throw InvalidInput(strfmt("concat: axis %d invalid for shapes %s and %s", axis,
                                  shape_str(a.shape).c_str(), shape_str(b.shape).c_str()));
    }
    for (int i = 0; i < a.rank(); ++i) {
        if (i != axis && a.dim(i) != b.dim(i)) {
            throw InvalidInput(strfmt("concat: shapes %s and %s differ off axis %d",
                                      shape_str(a.shape).c_str(), shape_str(b.shape).c_str(), axis));
        }
    }
    std::vector<int> oshape = a.shape;
    oshape[static_cast<size_t>(axis)] += b.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const int64_t wa = a.dim(axis) * inner;
    const int64_t wb = b.dim(axis) * inner;

    Tensor<S> out = Tensor<S>::zeros(oshape);
    {
        const S* pa = a.ptr();
        const S* pb = b.ptr();
        S* po = out.mut();
        for (int64_t o = 0; o < outer; ++o) {
            std::copy(pa + o * wa, pa + (o + 1) * wa, po + o * (wa + wb));
            std::copy(pb + o * wb, pb + (o + 1) * wb, po + o * (wa + wb) + wa);
        }
    }
    if (detail::setup_output(tape, out, {&a, &b})) {
        const int anode = a.node, bnode = b.node, onode = out.node;
        tape->record({anode, bnode}, onode, [=](Tape<S>& t) {
            // split the incoming gradient back into each input's slot
            const std::vector<S>& g = t.grad_ref(onode);
            if (anode >= 0) {
                std::vector<S>& ga = t.grad_ref(anode);
                for (int64_t o = 0; o < outer; ++o) {
                    const S* gseg = g.data() + o * (wa + wb);
                    for (int64_t i = 0; i < wa; ++i) ga[static_cast<size_t>(o * wa + i)] += gseg[i];
                }
            }
            if (bnode >= 0) {
                std::vector<S>& gb = t.grad_ref(bnode);
                for (int64_t o = 0; o < outer; ++o) {
                    const S* gseg = g.data() + o * (wa + wb) + wa;
                    for (int64_t i = 0; i < wb; ++i) gb[static_cast<size_t>(o * wb + i)] += gseg[i];
                }
            }
        });
    }
    return out;
}

/// Contiguous range on the last axis: out[..., j] = x[..., start + j].
template <typename S>
inline Tensor<S> slice_last(Tape<S>* tape, const Tensor<S>& x, int start, int len) {
    const int last = x.shape.back();
    if (start < 0 || len <= 0 || start + len > last) {
        throw InvalidInput(strfmt("slice_last: range [%d, %d) outside axis of width %d", start, start + len, last));
    }
    std::vector<int> oshape = x.shape;
    oshape.back() = len;
    const int64_t rows = x.numel() / last;
    Tensor<S> out = Tensor<S>::zeros(oshape);
    {
        const S* px = x.ptr();
        S* po = out.mut();
        for (int64_t r = 0; r < rows; ++r) {
            std::copy(px + r * last + start, px + r * last + start + len, po + r * len);
        }
    }
    if (detail::setup_output(tape, out, {&x})) {
        const int xnode = x.node, onode = out.node;
        tape->record({xnode}, onode, [=](Tape<S>& t) {
            const std::vector<S>& g = t.grad_ref(onode);
            std::vector<S>& gx = t.grad_ref(xnode);
            for (int64_t r = 0; r < rows; ++r) {
                for (int64_t i = 0; i < len; ++i) {
                    gx[static_cast<size_t>(r * last + start + i)] += g[static_cast<size_t>(r * len + i)];
                }
            }
        });
    }
    return out;
}

/// [B x T x C] -> [B x C] at time index t.
template <typename S>
inline Tensor<S> time_slice(Tape<S>* tape, const Tensor<S>& x, int t_index) {
    if (x.rank() != 3) throw InvalidInput("time_slice: expected a [B x T x C] tensor");
    const int B = x.dim(0), T = x.dim(1), C = x.dim(2);
    if (t_index < 0 || t_index >= T) throw InvalidInput(strfmt("time_slice: index %d out of %d steps", t_index, T));
    Tensor<S> out = Tensor<S>::zeros({B, C});
    {
        const S* px = x.ptr();
        S* po = out.mut();
        for (int b = 0; b < B; ++b) {
            std::copy(px + (static_cast<int64_t>(b) * T + t_index) * C,
                      px + (static_cast<int64_t>(b) * T + t_index) * C + C, po + static_cast<int64_t>(b) * C);
        }
    }
    if (detail::setup_output(tape, out, {&x})) {
        const int xnode = x.node, onode = out.node;
        tape->record({xnode}, onode, [=](Tape<S>& t) {
            const std::vector<S>& g = t.grad_ref(onode);
            std::vector<S>& gx = t.grad_ref(xnode);
            for (int b = 0; b < B; ++b) {
                for (int c = 0; c < C; ++c) {
                    gx[static_cast<size_t>((static_cast<int64_t>(b) * T + t_index) * C + c)] +=
                        g[static_cast<size_t>(static_cast<int64_t>(b) * C + c)];
                }
            }
        });
    }
    return out;
}

/// Stack T step tensors [B x C] into a sequence [B x T x C].
template <typename S>
inline Tensor<S> time_stack(Tape<S>* tape, const std::vector<Tensor<S>>& steps) {
    if (steps.empty()) throw InvalidInput("time_stack: empty sequence");
    const int B = steps[0].dim(0), C = steps[0].dim(1);
    const int T = static_cast<int>(steps.size());
    for (const auto& s : steps) {
        if (s.rank() != 2 || s.dim(0) != B || s.dim(1) != C) {
            throw InvalidInput("time_stack: step shapes differ");
        }
    }
    Tensor<S> out = Tensor<S>::zeros({B, T, C});
    {
        S* po = out.mut();
        for (int t = 0; t < T; ++t) {
            const S* ps = steps[static_cast<size_t>(t)].ptr();
            for (int b = 0; b < B; ++b) {
                std::copy(ps + static_cast<int64_t>(b) * C, ps + static_cast<int64_t>(b) * C + C,
                          po + (static_cast<int64_t>(b) * T + t) * C);
            }
        }
    }
    bool needs = false;
    std::vector<int> in_nodes;
    for (const auto& s : steps) {
        if (s.requires_grad) {
            if (tape != nullptr && (s.node < 0 || s.tape_id != tape->id())) {
                throw InvalidInput("op input requires grad but is not on the tape (call watch first)");
            }
            needs = true;
        }
        in_nodes.push_back(s.node);
    }
    if (tape != nullptr && needs) {
        out.requires_grad = true;
        out.node = tape->track(out.shape);
        out.tape_id = tape->id();
        const int onode = out.node;
        tape->record(in_nodes, onode, [=](Tape<S>& t) {
            const std::vector<S>& g = t.grad_ref(onode);
            for (int ti = 0; ti < T; ++ti) {
                const int snode = in_nodes[static_cast<size_t>(ti)];
                if (snode < 0) continue;
                std::vector<S>& gs = t.grad_ref(snode);
                for (int b = 0; b < B; ++b) {
                    for (int c = 0; c < C; ++c) {
                        gs[static_cast<size_t>(static_cast<int64_t>(b) * C + c)] +=
                            g[static_cast<size_t>((static_cast<int64_t>(b) * T + ti) * C + c)];
                    }
                }
            }
        });
    }
    return out;
}

/// Reverse a sequence along the time axis.
template <typename S>
inline Tensor<S> time_reverse(Tape<S>* tape, const Tensor<S>& x) {
    if (x.rank() != 3) throw InvalidInput("time_reverse: expected a [B x T x C] tensor");
    const int B = x.dim(0), T = x.dim(1), C = x.dim(2);
    Tensor<S> out = Tensor<S>::zeros(x.shape);
    {
        const S* px = x.ptr();
        S* po = out.mut();
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < T; ++t) {
                std::copy(px + (static_cast<int64_t>(b) * T + t) * C,
                          px + (static_cast<int64_t>(b) * T + t) * C + C,
                          po + (static_cast<int64_t>(b) * T + (T - 1 - t)) * C);
            }
        }
    }
    if (detail::setup_output(tape, out, {&x})) {
        const int xnode = x.node, onode = out.node;
        tape->record({xnode}, onode, [=](Tape<S>& t) {
            const std::vector<S>& g = t.grad_ref(onode);
            std::vector<S>& gx = t.grad_ref(xnode);
            for (int b = 0; b < B; ++b) {
                for (int ti = 0; ti < T; ++ti) {
                    const int64_t src = (static_cast<int64_t>(b) * T + (T - 1 - ti)) * C;
                    const int64_t dst = (static_cast<int64_t>(b) * T + ti) * C;
                    for (int c = 0; c < C; ++c) gx[static_cast<size_t>(dst + c)] += g[static_cast<size_t>(src + c)];
                }
            }
        });
    }
    return out;
}

template <typename S>
inline Tensor<S> reshape(Tape<S>* tape, const Tensor<S>& x, std::vector<int> new_shape) {
    if (numel_of(new_shape) != x.numel()) {
        throw InvalidInput(strfmt("reshape: %s does not hold %lld elements",
                                  shape_str(new_shape).c_str(), static_cast<long long>(x.numel())));
    }
    Tensor<S> out(std::move(new_shape), *x.data);
    if (detail::setup_output(tape, out, {&x})) {
        const int xnode = x.node, onode = out.node;
        const int64_t n = x.numel();
        tape->record({xnode}, onode, [=](Tape<S>& t) {
            t.add_grad(xnode, t.grad_ref(onode).data(), n);
        });
    }
    return out;
}

template <typename S>
inline Tensor<S> sum_all(Tape<S>* tape, const Tensor<S>& x) {
    S acc = 0;
    const S* px = x.ptr();
    for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
    Tensor<S> out = Tensor<S>::scalar(acc);
    if (detail::setup_output(tape, out, {&x})) {
        const int xnode = x.node, onode = out.node;
        const int64_t n = x.numel();
        tape->record({xnode}, onode, [=](Tape<S>& t) {
            const S g = t.grad_ref(onode)[0];
            std::vector<S>& gx = t.grad_ref(xnode);
            for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
        });
    }
    return out;
}

/// Multiply by a compile-time constant (not a tracked tensor).
template <typename S>
inline Tensor<S> scale(Tape<S>* tape, const Tensor<S>& x, S factor) {
    Tensor<S> out = Tensor<S>::zeros(x.shape);
    const S* px = x.ptr();
    S* po = out.mut();
    for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * factor;
    if (detail::setup_output(tape, out, {&x})) {
        const int xnode = x.node, onode = out.node;
        const int64_t n = x.numel();
        tape->record({xnode}, onode, [=](Tape<S>& t) {
            const std::vector<S>& g = t.grad_ref(onode);
            std::vector<S>& gx = t.grad_ref(xnode);
            for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += factor * g[static_cast<size_t>(i)];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// gradient checking

template <typename S>
using ScalarFn = std::function<Tensor<S>(Tape<S>*, std::vector<Tensor<S>>&)>;

/// Central-difference check of reverse-mode gradients. Returns the maximum
/// over checked coordinates of |analytic - numeric| / max(1e-8, |analytic| +
/// |numeric|). Set max_coords_per_tensor > 0 to spot-check evenly spaced
/// coordinates instead of the full sweep (for large parameter sets).
template <typename S>
inline double grad_check(const ScalarFn<S>& f, const std::vector<Tensor<S>>& params_in, double epsilon,
                         int max_coords_per_tensor = 0) {
    if (!(epsilon > 0)) throw InvalidInput("grad_check: epsilon must be positive");
    std::vector<Tensor<S>> params;
    params.reserve(params_in.size());
    for (const auto& p : params_in) params.push_back(p.clone());

    Tape<S> tape;
    std::vector<int> nodes;
    for (auto& p : params) nodes.push_back(tape.watch(p));
    Tensor<S> loss = f(&tape, params);
    GradMap<S> grads = tape.backward(loss);

    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const Tensor<S>& analytic = grads.at(nodes[pi]);
        auto& buf = *params[pi].data;
        const int64_t size = static_cast<int64_t>(buf.size());
        int64_t n_checks = size;
        if (max_coords_per_tensor > 0 && max_coords_per_tensor < size) n_checks = max_coords_per_tensor;
        for (int64_t ci = 0; ci < n_checks; ++ci) {
            const int64_t i = (n_checks == size) ? ci : (ci * size) / n_checks;
            const S saved = buf[static_cast<size_t>(i)];
            buf[static_cast<size_t>(i)] = saved + static_cast<S>(epsilon);
            const double fp = static_cast<double>(f(nullptr, params).item());
            buf[static_cast<size_t>(i)] = saved - static_cast<S>(epsilon);
            const double fm = static_cast<double>(f(nullptr, params).item());
            buf[static_cast<size_t>(i)] = saved;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double a = static_cast<double>(analytic.at(i));
            const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            if (err > max_err) max_err = err;
        }
    }
    return max_err;
}

}  // namespace carspeed
