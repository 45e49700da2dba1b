#pragma once

// Reverse-mode differentiation over a recorded graph of coarse primitives.
//
// Every op returns a Var whose node keeps its inputs alive; backward() sorts
// the reachable nodes topologically and runs each node's adjoint exactly once.
// Nodes that do not (transitively) depend on a requires_grad leaf record no
// adjoint at all, so constant subgraphs cost nothing in the backward pass.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "refgen/kernels.hpp"
#include "refgen/tensor.hpp"

namespace refgen {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buffer() {
        if (grad.empty()) grad = Tensor(value.shape());
        return grad;
    }
};

class Var {
   public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }

    // Zero-filled when no gradient reached this node.
    const Tensor& grad() const { return node_->grad_buffer(); }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(0.0f);
    }

   private:
    std::shared_ptr<Node> node_;
};

inline Var parameter(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    return Var(std::move(n));
}

inline Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return Var(std::move(n));
}

namespace detail {

inline Var make_op(Tensor value, std::vector<Var> inputs, const char* op, std::function<void(Node&)> backward) {
    REFGEN_CHECK_FINITE(value, "non-finite value produced by op");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    n->is_leaf = false;
    for (const auto& v : inputs)
        if (v.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
        n->inputs.reserve(inputs.size());
        for (const auto& v : inputs) n->inputs.push_back(v.ptr());
        n->backward_fn = std::move(backward);
    }
    return Var(std::move(n));
}

// Gradient buffer of input i, or nullptr when that input needs no gradient.
inline float* grad_of(Node& self, std::size_t i) {
    if (i >= self.inputs.size()) return nullptr;
    Node* in = self.inputs[i].get();
    if (!in || !in->requires_grad) return nullptr;
    return in->grad_buffer().data();
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
}

inline float gelu_value(float x) {
    constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
    const float u = c * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_slope(float x) {
    constexpr float c = 0.7978845608028654f;
    const float u = c * (x + 0.044715f * x * x * x);
    const float t = std::tanh(u);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * c * (1.0f + 3.0f * 0.044715f * x * x);
}

}  // namespace detail

// Runs the adjoint of every node reachable from loss, in reverse topological order.
inline void backward(const Var& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ValidationError("backward requires a scalar loss, got shape " +
                              (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer().fill(1.0f);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->is_leaf || n->grad.empty() || !n->backward_fn) continue;
        n->backward_fn(*n);
        n->grad = Tensor();  // interior gradients are consumed exactly once
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = a.value();
    const float* bv = b.value().data();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return detail::make_op(std::move(out), {a, b}, "add", [](Node& self) {
        const float* g = self.grad.data();
        const std::size_t n = self.grad.numel();
        for (std::size_t k = 0; k < 2; ++k)
            if (float* ga = detail::grad_of(self, k))
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = a.value();
    const float* bv = b.value().data();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return detail::make_op(std::move(out), {a, b}, "sub", [](Node& self) {
        const float* g = self.grad.data();
        const std::size_t n = self.grad.numel();
        if (float* ga = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        if (float* gb = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = a.value();
    const float* bv = b.value().data();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return detail::make_op(std::move(out), {a, b}, "mul", [](Node& self) {
        const float* g = self.grad.data();
        const float* av = self.inputs[0]->value.data();
        const float* bv = self.inputs[1]->value.data();
        const std::size_t n = self.grad.numel();
        if (float* ga = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
        if (float* gb = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
    });
}

inline Var scale(const Var& a, float s) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v *= s;
    return detail::make_op(std::move(out), {a}, "scale", [s](Node& self) {
        const float* g = self.grad.data();
        float* ga = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.numel(); ++i) ga[i] += s * g[i];
    });
}

inline Var sum(const Var& a) {
    double acc = 0.0;
    for (float v : a.value().values()) acc += v;
    return detail::make_op(Tensor({1}, {static_cast<float>(acc)}), {a}, "sum", [](Node& self) {
        const float g = self.grad[0];
        float* ga = detail::grad_of(self, 0);
        const std::size_t n = self.inputs[0]->value.numel();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0f / static_cast<float>(a.numel())); }

// sum of squares of all elements
inline Var sum_sq(const Var& a) {
    double acc = 0.0;
    for (float v : a.value().values()) acc += static_cast<double>(v) * v;
    return detail::make_op(Tensor({1}, {static_cast<float>(acc)}), {a}, "sum_sq", [](Node& self) {
        const float g2 = 2.0f * self.grad[0];
        const float* av = self.inputs[0]->value.data();
        float* ga = detail::grad_of(self, 0);
        const std::size_t n = self.inputs[0]->value.numel();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g2 * av[i];
    });
}

// Forward: identity. Backward: zero gradient.
inline Var stop_gradient(const Var& a) { return constant(a.value()); }

// Forward value is exactly zq; the gradient reaches z unchanged and never reaches zq.
inline Var straight_through(const Var& z, const Var& zq) {
    detail::require_same_shape(z, zq, "straight_through");
    return detail::make_op(zq.value(), {z}, "straight_through", [](Node& self) {
        const float* g = self.grad.data();
        float* gz = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.numel(); ++i) gz[i] += g[i];
    });
}

inline Var relu(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v = v > 0.0f ? v : 0.0f;
    return detail::make_op(std::move(out), {a}, "relu", [](Node& self) {
        const float* g = self.grad.data();
        const float* av = self.inputs[0]->value.data();
        float* ga = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.numel(); ++i) ga[i] += av[i] > 0.0f ? g[i] : 0.0f;
    });
}

// tanh approximation
inline Var gelu(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v = detail::gelu_value(v);
    return detail::make_op(std::move(out), {a}, "gelu", [](Node& self) {
        const float* g = self.grad.data();
        const float* av = self.inputs[0]->value.data();
        float* ga = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.numel(); ++i) ga[i] += g[i] * detail::gelu_slope(av[i]);
    });
}

// Inverted dropout; identity when p == 0.
inline Var dropout(const Var& a, float p, std::mt19937_64& rng) {
    if (p <= 0.0f) return a;
    require(p < 1.0f, "dropout probability must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    const float s = 1.0f / (1.0f - p);
    Tensor mask(a.shape());
    for (auto& m : mask.storage()) m = keep(rng) ? s : 0.0f;
    return mul(a, constant(std::move(mask)));
}

// ---------------------------------------------------------------------------
// Shape ops

inline Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return detail::make_op(std::move(out), {a}, "reshape", [](Node& self) {
        const float* g = self.grad.data();
        float* ga = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.numel(); ++i) ga[i] += g[i];
    });
}

// [B, R, C] -> [B, C, R]; a rank-2 input is treated as B = 1.
inline Var transpose_last2(const Var& a) {
    const auto& s = a.shape();
    require(s.size() == 2 || s.size() == 3, "transpose_last2 expects rank 2 or 3");
    const std::size_t b = s.size() == 3 ? s[0] : 1;
    const std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
    Shape os = s;
    std::swap(os[os.size() - 1], os[os.size() - 2]);
    Tensor out(os);
    for (std::size_t i = 0; i < b; ++i) kernels::transpose(r, c, a.value().data() + i * r * c, out.data() + i * r * c);
    return detail::make_op(std::move(out), {a}, "transpose", [b, r, c](Node& self) {
        float* ga = detail::grad_of(self, 0);
        std::vector<float> tmp(r * c);
        for (std::size_t i = 0; i < b; ++i) {
            kernels::transpose(c, r, self.grad.data() + i * r * c, tmp.data());
            kernels::axpy(r * c, 1.0f, tmp.data(), ga + i * r * c);
        }
    });
}

// Rows [begin, end) of a rank-2 tensor.
inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
    require(a.shape().size() == 2 && begin < end && end <= a.shape()[0], "slice_rows: bad range");
    const std::size_t cols = a.shape()[1];
    std::vector<float> data(a.value().data() + begin * cols, a.value().data() + end * cols);
    return detail::make_op(Tensor({end - begin, cols}, std::move(data)), {a}, "slice_rows",
                           [begin, cols](Node& self) {
                               float* ga = detail::grad_of(self, 0);
                               kernels::axpy(self.grad.numel(), 1.0f, self.grad.data(), ga + begin * cols);
                           });
}

// table[V, d] gathered at ids -> [ids.size(), d]
inline Var embedding(const Var& table, const std::vector<int>& ids) {
    require(table.shape().size() == 2, "embedding table must be rank 2");
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    require(!ids.empty(), "embedding: no ids");
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw ValidationError("embedding id " + std::to_string(ids[i]) + " out of range [0," +
                                  std::to_string(vocab) + ")");
        std::copy_n(table.value().data() + ids[i] * d, d, out.data() + i * d);
    }
    return detail::make_op(std::move(out), {table}, "embedding", [ids, d](Node& self) {
        float* gt = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < ids.size(); ++i)
            kernels::axpy(d, 1.0f, self.grad.data() + i * d, gt + ids[i] * d);
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2, "matmul expects rank-2 operands");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw ValidationError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
    Tensor out({m, n});
    kernels::gemm_nn(m, n, k, a.value().data(), b.value().data(), out.data());
    return detail::make_op(std::move(out), {a, b}, "matmul", [m, n, k](Node& self) {
        const float* g = self.grad.data();
        if (float* ga = detail::grad_of(self, 0)) kernels::gemm_nt(m, k, n, g, self.inputs[1]->value.data(), ga);
        if (float* gb = detail::grad_of(self, 1)) kernels::gemm_tn(m, n, k, self.inputs[0]->value.data(), g, gb);
    });
}

// a[m,k] * b[n,k]^T -> [m,n]
inline Var matmul_bt(const Var& a, const Var& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2, "matmul_bt expects rank-2 operands");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    if (b.shape()[1] != k)
        throw ValidationError("matmul_bt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()) + "^T");
    Tensor out({m, n});
    kernels::gemm_nt(m, n, k, a.value().data(), b.value().data(), out.data());
    return detail::make_op(std::move(out), {a, b}, "matmul_bt", [m, n, k](Node& self) {
        const float* g = self.grad.data();
        if (float* ga = detail::grad_of(self, 0)) kernels::gemm_nn(m, k, n, g, self.inputs[1]->value.data(), ga);
        if (float* gb = detail::grad_of(self, 1)) kernels::gemm_tn(m, k, n, g, self.inputs[0]->value.data(), gb);
    });
}

// x[m,k] * w[k,n] + b[n]
inline Var affine(const Var& x, const Var& w, const Var& b) {
    require(x.shape().size() == 2 && w.shape().size() == 2, "affine expects rank-2 input and weight");
    const std::size_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
    if (w.shape()[0] != k) throw ValidationError("affine: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
    require(b.shape() == Shape{n}, "affine: bias shape");
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) std::copy_n(b.value().data(), n, out.data() + i * n);
    kernels::gemm_nn(m, n, k, x.value().data(), w.value().data(), out.data());
    return detail::make_op(std::move(out), {x, w, b}, "affine", [m, n, k](Node& self) {
        const float* g = self.grad.data();
        if (float* gx = detail::grad_of(self, 0)) kernels::gemm_nt(m, k, n, g, self.inputs[1]->value.data(), gx);
        if (float* gw = detail::grad_of(self, 1)) kernels::gemm_tn(m, n, k, self.inputs[0]->value.data(), g, gw);
        if (float* gb = detail::grad_of(self, 2))
            for (std::size_t i = 0; i < m; ++i) kernels::axpy(n, 1.0f, g + i * n, gb);
    });
}

// ---------------------------------------------------------------------------
// Convolutions. Cross-correlation convention, batched [B, C, L] layout.

inline std::size_t conv1d_out_len(std::size_t len, std::size_t kernel, std::size_t stride, std::size_t pad) {
    const long num = static_cast<long>(len) + 2 * static_cast<long>(pad) - static_cast<long>(kernel);
    if (stride == 0 || num < 0) throw ValidationError("conv1d: non-positive output length");
    return static_cast<std::size_t>(num) / stride + 1;
}

inline std::size_t conv1d_transpose_out_len(std::size_t len, std::size_t kernel, std::size_t stride, std::size_t pad) {
    const long out = (static_cast<long>(len) - 1) * static_cast<long>(stride) - 2 * static_cast<long>(pad) +
                     static_cast<long>(kernel);
    if (stride == 0 || out < 1) throw ValidationError("conv1d_transpose: invalid geometry");
    return static_cast<std::size_t>(out);
}

namespace detail {

// Polyphase copy of every length-g.in_len row of a [rows, in_len] buffer; shares src when stride == 1.
inline std::shared_ptr<const std::vector<float>> split_rows(const kernels::ConvGeom& g, const float* src,
                                                            std::size_t rows) {
    if (g.stride == 1) return std::make_shared<const std::vector<float>>(src, src + rows * g.in_len);
    auto out = std::make_shared<std::vector<float>>(rows * g.in_len);
    for (std::size_t r = 0; r < rows; ++r) kernels::split_phases(g, src + r * g.in_len, out->data() + r * g.in_len);
    return out;
}

// dst (rows x in_len) += un-split of split.
inline void merge_rows_add(const kernels::ConvGeom& g, const float* split, float* dst, std::size_t rows) {
    if (g.stride == 1) {
        kernels::axpy(rows * g.in_len, 1.0f, split, dst);
        return;
    }
    for (std::size_t r = 0; r < rows; ++r)
        kernels::merge_phases_add(g, split + r * g.in_len, dst + r * g.in_len);
}

}  // namespace detail

// x[B,Ci,L], w[Co,Ci,K], optional bias[Co] -> [B,Co,Lout]
inline Var conv1d(const Var& x, const Var& w, const Var& bias, std::size_t stride, std::size_t pad) {
    require(x.shape().size() == 3 && w.shape().size() == 3, "conv1d expects x[B,C,L] and w[Co,Ci,K]");
    const std::size_t batch = x.shape()[0], cin = x.shape()[1], len = x.shape()[2];
    const std::size_t cout = w.shape()[0], kernel = w.shape()[2];
    if (w.shape()[1] != cin)
        throw ValidationError("conv1d: input channels " + std::to_string(cin) + " vs weight " + shape_str(w.shape()));
    if (bias.defined()) require(bias.shape() == Shape{cout}, "conv1d: bias shape");
    const kernels::ConvGeom geom{len, conv1d_out_len(len, kernel, stride, pad), kernel, stride, pad};
    const std::size_t lout = geom.out_len;

    auto xs = detail::split_rows(geom, x.value().data(), batch * cin);
    Tensor out({batch, cout, lout});
    const float* wv = w.value().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t co = 0; co < cout; ++co) {
            float* y = out.data() + (b * cout + co) * lout;
            if (bias.defined()) std::fill_n(y, lout, bias.value()[co]);
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const float* xr = xs->data() + (b * cin + ci) * len;
                const float* wr = wv + (co * cin + ci) * kernel;
                for (std::size_t k = 0; k < kernel; ++k) kernels::conv_gather(geom, k, wr[k], xr, y);
            }
        }

    std::vector<Var> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_op(std::move(out), std::move(inputs), "conv1d", [=](Node& self) {
        const float* g = self.grad.data();
        const float* wv = self.inputs[1]->value.data();
        float* gx = detail::grad_of(self, 0);
        float* gw = detail::grad_of(self, 1);
        float* gb = detail::grad_of(self, 2);
        std::vector<float> gxs(gx ? batch * cin * len : 0, 0.0f);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t co = 0; co < cout; ++co) {
                const float* gy = g + (b * cout + co) * lout;
                if (gb) {
                    float s = 0.0f;
                    for (std::size_t t = 0; t < lout; ++t) s += gy[t];
                    gb[co] += s;
                }
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const float* xr = xs->data() + (b * cin + ci) * len;
                    const float* wr = wv + (co * cin + ci) * kernel;
                    for (std::size_t k = 0; k < kernel; ++k) {
                        if (gw) gw[(co * cin + ci) * kernel + k] += kernels::conv_tap_dot(geom, k, xr, gy);
                        if (gx) kernels::conv_scatter(geom, k, wr[k], gy, gxs.data() + (b * cin + ci) * len);
                    }
                }
            }
        if (gx) detail::merge_rows_add(geom, gxs.data(), gx, batch * cin);
    });
}

// Adjoint of conv1d with the same geometry. x[B,Ci,L], w[Ci,Co,K], optional bias[Co] -> [B,Co,Lout]
inline Var conv1d_transpose(const Var& x, const Var& w, const Var& bias, std::size_t stride, std::size_t pad) {
    require(x.shape().size() == 3 && w.shape().size() == 3, "conv1d_transpose expects x[B,C,L] and w[Ci,Co,K]");
    const std::size_t batch = x.shape()[0], cin = x.shape()[1], len = x.shape()[2];
    const std::size_t cout = w.shape()[1], kernel = w.shape()[2];
    if (w.shape()[0] != cin)
        throw ValidationError("conv1d_transpose: input channels " + std::to_string(cin) + " vs weight " +
                              shape_str(w.shape()));
    if (bias.defined()) require(bias.shape() == Shape{cout}, "conv1d_transpose: bias shape");
    const std::size_t lout = conv1d_transpose_out_len(len, kernel, stride, pad);
    // Geometry seen from the output side: the output plays the role of conv1d's input.
    const kernels::ConvGeom geom{lout, len, kernel, stride, pad};

    Tensor out({batch, cout, lout});
    std::vector<float> outs(batch * cout * lout, 0.0f);
    const float* xv = x.value().data();
    const float* wv = w.value().data();
    for (std::size_t b = 0; b < batch; ++b) {
        if (bias.defined())
            for (std::size_t co = 0; co < cout; ++co)
                std::fill_n(out.data() + (b * cout + co) * lout, lout, bias.value()[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const float* xr = xv + (b * cin + ci) * len;
            for (std::size_t co = 0; co < cout; ++co) {
                const float* wr = wv + (ci * cout + co) * kernel;
                float* y = outs.data() + (b * cout + co) * lout;
                for (std::size_t k = 0; k < kernel; ++k) kernels::conv_scatter(geom, k, wr[k], xr, y);
            }
        }
    }
    detail::merge_rows_add(geom, outs.data(), out.data(), batch * cout);

    std::vector<Var> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_op(std::move(out), std::move(inputs), "conv1d_transpose", [=](Node& self) {
        const float* xv = self.inputs[0]->value.data();
        const float* wv = self.inputs[1]->value.data();
        float* gx = detail::grad_of(self, 0);
        float* gw = detail::grad_of(self, 1);
        float* gb = detail::grad_of(self, 2);
        auto gs = detail::split_rows(geom, self.grad.data(), batch * cout);
        for (std::size_t b = 0; b < batch; ++b) {
            if (gb)
                for (std::size_t co = 0; co < cout; ++co) {
                    const float* gy = self.grad.data() + (b * cout + co) * lout;
                    float s = 0.0f;
                    for (std::size_t t = 0; t < lout; ++t) s += gy[t];
                    gb[co] += s;
                }
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const float* xr = xv + (b * cin + ci) * len;
                for (std::size_t co = 0; co < cout; ++co) {
                    const float* wr = wv + (ci * cout + co) * kernel;
                    const float* gy = gs->data() + (b * cout + co) * lout;
                    for (std::size_t k = 0; k < kernel; ++k) {
                        if (gw) gw[(ci * cout + co) * kernel + k] += kernels::conv_tap_dot(geom, k, gy, xr);
                        if (gx) kernels::conv_gather(geom, k, wr[k], gy, gx + (b * cin + ci) * len);
                    }
                }
            }
        }
    });
}

// x[B,C,L] -> [B,C], mean over L
inline Var mean_last(const Var& x) {
    require(x.shape().size() == 3, "mean_last expects [B,C,L]");
    const std::size_t rows = x.shape()[0] * x.shape()[1], len = x.shape()[2];
    Tensor out({x.shape()[0], x.shape()[1]});
    for (std::size_t r = 0; r < rows; ++r) {
        float s = 0.0f;
        for (std::size_t t = 0; t < len; ++t) s += x.value()[r * len + t];
        out[r] = s / static_cast<float>(len);
    }
    return detail::make_op(std::move(out), {x}, "mean_last", [rows, len](Node& self) {
        float* gx = detail::grad_of(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            const float g = self.grad[r] / static_cast<float>(len);
            for (std::size_t t = 0; t < len; ++t) gx[r * len + t] += g;
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization, softmax, losses

// Per-row layer normalization of x[m,d] with affine gamma[d], beta[d].
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f) {
    require(x.shape().size() == 2, "layer_norm expects [m,d]");
    const std::size_t m = x.shape()[0], d = x.shape()[1];
    require(gamma.shape() == Shape{d} && beta.shape() == Shape{d}, "layer_norm: gamma/beta shape");
    Tensor out({m, d});
    auto xhat = std::make_shared<std::vector<float>>(m * d);
    auto rstd = std::make_shared<std::vector<float>>(m);
    const float* xv = x.value().data();
    for (std::size_t i = 0; i < m; ++i) {
        const float* row = xv + i * d;
        float mu = 0.0f;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<float>(d);
        float var = 0.0f;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<float>(d);
        const float rs = 1.0f / std::sqrt(var + eps);
        (*rstd)[i] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            const float h = (row[j] - mu) * rs;
            (*xhat)[i * d + j] = h;
            out[i * d + j] = h * gamma.value()[j] + beta.value()[j];
        }
    }
    return detail::make_op(std::move(out), {x, gamma, beta}, "layer_norm", [=](Node& self) {
        const float* g = self.grad.data();
        const float* gm = self.inputs[1]->value.data();
        float* gx = detail::grad_of(self, 0);
        float* gg = detail::grad_of(self, 1);
        float* gbeta = detail::grad_of(self, 2);
        std::vector<float> dh(d);
        for (std::size_t i = 0; i < m; ++i) {
            const float* gi = g + i * d;
            const float* hi = xhat->data() + i * d;
            float mean_dh = 0.0f, mean_dh_h = 0.0f;
            for (std::size_t j = 0; j < d; ++j) {
                if (gg) gg[j] += gi[j] * hi[j];
                if (gbeta) gbeta[j] += gi[j];
                dh[j] = gi[j] * gm[j];
                mean_dh += dh[j];
                mean_dh_h += dh[j] * hi[j];
            }
            if (!gx) continue;
            mean_dh /= static_cast<float>(d);
            mean_dh_h /= static_cast<float>(d);
            const float rs = (*rstd)[i];
            for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += rs * (dh[j] - mean_dh - hi[j] * mean_dh_h);
        }
    });
}

// Stable row softmax of x[m,n] into out (max shift).
inline void softmax_row(const float* x, float* out, std::size_t n) {
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = std::exp(x[j] - mx);
        s += out[j];
    }
    const float inv = static_cast<float>(1.0 / s);
    for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
}

inline Var softmax_rows(const Var& x) {
    require(x.shape().size() == 2, "softmax_rows expects [m,n]");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) softmax_row(x.value().data() + i * n, out.data() + i * n, n);
    return detail::make_op(std::move(out), {x}, "softmax", [m, n](Node& self) {
        float* gx = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < m; ++i) {
            const float* p = self.value.data() + i * n;
            const float* g = self.grad.data() + i * n;
            const float pg = kernels::dot(n, p, g);
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += p[j] * (g[j] - pg);
        }
    });
}

// Mean over rows with target >= 0 of -log softmax(logits)[target]. Rows with target -1 are ignored.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int>& targets) {
    require(logits.shape().size() == 2, "softmax_cross_entropy expects [B,V] logits");
    const std::size_t m = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != m) throw ValidationError("softmax_cross_entropy: target count mismatch");
    std::size_t count = 0;
    for (int t : targets) {
        if (t == -1) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= v)
            throw ValidationError("softmax_cross_entropy: target " + std::to_string(t) + " out of range [0," +
                                  std::to_string(v) + ")");
        ++count;
    }
    require(count > 0, "softmax_cross_entropy: every target is ignored");
    auto probs = std::make_shared<std::vector<float>>(m * v);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] < 0) continue;
        const float* row = logits.value().data() + i * v;
        float* p = probs->data() + i * v;
        softmax_row(row, p, v);
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j] - mx));
        total += (std::log(s) + mx) - row[targets[i]];
    }
    const float inv_count = 1.0f / static_cast<float>(count);
    return detail::make_op(Tensor({1}, {static_cast<float>(total / count)}), {logits}, "cross_entropy",
                           [=](Node& self) {
                               float* gl = detail::grad_of(self, 0);
                               const float g = self.grad[0] * inv_count;
                               for (std::size_t i = 0; i < m; ++i) {
                                   if (targets[i] < 0) continue;
                                   const float* p = probs->data() + i * v;
                                   float* gi = gl + i * v;
                                   for (std::size_t j = 0; j < v; ++j) gi[j] += g * p[j];
                                   gi[targets[i]] -= g;
                               }
                           });
}

// Pairwise squared distances between rows: z[n,l], e[k,l] -> [n,k].
inline Var sq_distances(const Var& z, const Var& e) {
    require(z.shape().size() == 2 && e.shape().size() == 2 && z.shape()[1] == e.shape()[1],
            "sq_distances expects z[n,l] and e[k,l]");
    const std::size_t n = z.shape()[0], k = e.shape()[0], l = z.shape()[1];
    Tensor out({n, k});
    const float* zv = z.value().data();
    const float* ev = e.value().data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const float* zi = zv + i * l;
            const float* ej = ev + j * l;
            float s = 0.0f;
            for (std::size_t c = 0; c < l; ++c) {
                const float d = zi[c] - ej[c];
                s += d * d;
            }
            out[i * k + j] = s;
        }
    return detail::make_op(std::move(out), {z, e}, "sq_distances", [n, k, l](Node& self) {
        const float* g = self.grad.data();
        const float* zv = self.inputs[0]->value.data();
        const float* ev = self.inputs[1]->value.data();
        // dz_i = 2 (rowsum_i z_i - sum_j g_ij e_j); de_j = 2 (colsum_j e_j - sum_i g_ij z_i)
        if (float* gz = detail::grad_of(self, 0)) {
            std::vector<float> ge(n * l, 0.0f);
            kernels::gemm_nn(n, l, k, g, ev, ge.data());
            for (std::size_t i = 0; i < n; ++i) {
                float rs = 0.0f;
                for (std::size_t j = 0; j < k; ++j) rs += g[i * k + j];
                for (std::size_t c = 0; c < l; ++c) gz[i * l + c] += 2.0f * (rs * zv[i * l + c] - ge[i * l + c]);
            }
        }
        if (float* gev = detail::grad_of(self, 1)) {
            std::vector<float> gzt(k * l, 0.0f);
            kernels::gemm_tn(n, l, k, g, zv, gzt.data());
            std::vector<float> cs(k, 0.0f);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) cs[j] += g[i * k + j];
            for (std::size_t j = 0; j < k; ++j)
                for (std::size_t c = 0; c < l; ++c) gev[j * l + c] += 2.0f * (cs[j] * ev[j * l + c] - gzt[j * l + c]);
        }
    });
}

// Mean over rows of KL(softmax(a_i) || Uniform(1/k)) for a[n,k].
inline Var kl_to_uniform(const Var& a) {
    require(a.shape().size() == 2, "kl_to_uniform expects [n,k]");
    const std::size_t n = a.shape()[0], k = a.shape()[1];
    auto probs = std::make_shared<std::vector<float>>(n * k);
    auto logp = std::make_shared<std::vector<float>>(n * k);
    auto neg_ent = std::make_shared<std::vector<float>>(n);
    double total = 0.0;
    const double log_k = std::log(static_cast<double>(k));
    for (std::size_t i = 0; i < n; ++i) {
        const float* row = a.value().data() + i * k;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j] - mx));
        const double lse = std::log(s) + mx;
        double ne = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double lp = row[j] - lse;
            const double p = std::exp(lp);
            (*logp)[i * k + j] = static_cast<float>(lp);
            (*probs)[i * k + j] = static_cast<float>(p);
            ne += p * lp;
        }
        (*neg_ent)[i] = static_cast<float>(ne);
        total += ne + log_k;
    }
    return detail::make_op(Tensor({1}, {static_cast<float>(total / n)}), {a}, "kl_uniform", [=](Node& self) {
        float* ga = detail::grad_of(self, 0);
        const float g = self.grad[0] / static_cast<float>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t idx = i * k + j;
                ga[idx] += g * (*probs)[idx] * ((*logp)[idx] - (*neg_ent)[i]);
            }
    });
}

// Each row rescaled to Euclidean norm `radius`.
inline Var l2_normalize_rows(const Var& x, float radius, float eps = 1e-12f) {
    require(x.shape().size() == 2, "l2_normalize_rows expects [n,d]");
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    auto inv_norm = std::make_shared<std::vector<float>>(n);
    Tensor out({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const float* xi = x.value().data() + i * d;
        const float inv = 1.0f / std::sqrt(kernels::dot(d, xi, xi) + eps);
        (*inv_norm)[i] = inv;
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = radius * xi[j] * inv;
    }
    return detail::make_op(std::move(out), {x}, "l2_normalize_rows", [=](Node& self) {
        float* gx = detail::grad_of(self, 0);
        const float* g = self.grad.data();
        const float* y = self.value.data();
        for (std::size_t i = 0; i < n; ++i) {
            // dx = (r/|x|) (g - u (u.g)), u = y/r
            const float* yi = y + i * d;
            const float* gi = g + i * d;
            const float ug = kernels::dot(d, yi, gi) / (radius * radius);
            const float s = radius * (*inv_norm)[i];
            for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += s * (gi[j] - yi[j] * ug);
        }
    });
}

// Rows of a[n,k] form `groups` consecutive groups of n/groups rows. Per group,
// m = mean of softmax(a_i) over its rows; returns the mean over groups of KL(m || Uniform(1/k)).
inline Var kl_marginal_to_uniform(const Var& a, std::size_t groups) {
    require(a.shape().size() == 2, "kl_marginal_to_uniform expects [n,k]");
    const std::size_t n = a.shape()[0], k = a.shape()[1];
    require(groups > 0 && n % groups == 0, "kl_marginal_to_uniform: rows not divisible into groups");
    const std::size_t per = n / groups;
    auto probs = std::make_shared<std::vector<float>>(n * k);
    auto logm = std::make_shared<std::vector<float>>(groups * k);  // log(m_k * k)
    double total = 0.0;
    std::vector<double> m(k);
    for (std::size_t g = 0; g < groups; ++g) {
        std::fill(m.begin(), m.end(), 0.0);
        for (std::size_t r = g * per; r < (g + 1) * per; ++r) {
            float* p = probs->data() + r * k;
            softmax_row(a.value().data() + r * k, p, k);
            for (std::size_t j = 0; j < k; ++j) m[j] += p[j];
        }
        for (std::size_t j = 0; j < k; ++j) {
            const double mj = m[j] / static_cast<double>(per);
            const double lm = std::log(std::max(mj, 1e-30) * static_cast<double>(k));
            (*logm)[g * k + j] = static_cast<float>(lm);
            if (mj > 0) total += mj * lm;
        }
    }
    return detail::make_op(Tensor({1}, {static_cast<float>(total / groups)}), {a}, "kl_marginal_uniform",
                           [=](Node& self) {
                               float* ga = detail::grad_of(self, 0);
                               const float scale = self.grad[0] / static_cast<float>(groups * per);
                               for (std::size_t r = 0; r < n; ++r) {
                                   const float* p = probs->data() + r * k;
                                   const float* lm = logm->data() + (r / per) * k;
                                   const float mean_lm = kernels::dot(k, p, lm);
                                   for (std::size_t j = 0; j < k; ++j) ga[r * k + j] += scale * p[j] * (lm[j] - mean_lm);
                               }
                           });
}

// ---------------------------------------------------------------------------
// Causal multi-head scaled dot-product attention.
//
// qkv is [batch*seq, 3*d] with row layout [q | k | v]; head h owns columns
// [h*hd, (h+1)*hd) of each block. Output is [batch*seq, d]. Position i attends
// to positions j <= i only.

namespace detail {

struct HeadView {
    std::size_t seq, hd, row_stride;
};

inline void load_head_t(const float* base, std::size_t col, const HeadView& v, float* dst_t) {
    // dst_t[c * seq + t] = base[t * row_stride + col + c]
    for (std::size_t t = 0; t < v.seq; ++t)
        for (std::size_t c = 0; c < v.hd; ++c) dst_t[c * v.seq + t] = base[t * v.row_stride + col + c];
}

}  // namespace detail

inline Var causal_attention(const Var& qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
    require(qkv.shape().size() == 2 && qkv.shape()[0] == batch * seq && qkv.shape()[1] % 3 == 0,
            "causal_attention expects qkv[batch*seq, 3*d]");
    const std::size_t d = qkv.shape()[1] / 3;
    require(heads > 0 && d % heads == 0, "causal_attention: d_model must be divisible by heads");
    const std::size_t hd = d / heads;
    const std::size_t row = 3 * d;
    const float scale_f = 1.0f / std::sqrt(static_cast<float>(hd));
    const detail::HeadView view{seq, hd, row};

    auto probs = std::make_shared<std::vector<float>>(batch * heads * seq * seq, 0.0f);
    Tensor out({batch * seq, d});
    std::vector<float> kt(hd * seq), vt(hd * seq), s(seq);
    for (std::size_t b = 0; b < batch; ++b) {
        const float* base = qkv.value().data() + b * seq * row;
        for (std::size_t h = 0; h < heads; ++h) {
            detail::load_head_t(base, d + h * hd, view, kt.data());
            detail::load_head_t(base, 2 * d + h * hd, view, vt.data());
            float* pbh = probs->data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                const float* qi = base + i * row + h * hd;
                const std::size_t n = i + 1;
                std::fill_n(s.data(), n, 0.0f);
                for (std::size_t c = 0; c < hd; ++c) kernels::axpy(n, qi[c] * scale_f, kt.data() + c * seq, s.data());
                float* p = pbh + i * seq;
                softmax_row(s.data(), p, n);
                float* oi = out.data() + (b * seq + i) * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) oi[c] = kernels::dot(n, p, vt.data() + c * seq);
            }
        }
    }

    return detail::make_op(std::move(out), {qkv}, "causal_attention", [=](Node& self) {
        float* gq = detail::grad_of(self, 0);
        const float* g = self.grad.data();
        std::vector<float> qt(hd * seq), kt(hd * seq), vt(hd * seq);
        std::vector<float> dqt(hd * seq), dkt(hd * seq), dvt(hd * seq), dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
            const float* base = self.inputs[0]->value.data() + b * seq * row;
            float* gbase = gq + b * seq * row;
            for (std::size_t h = 0; h < heads; ++h) {
                detail::load_head_t(base, h * hd, view, qt.data());
                detail::load_head_t(base, d + h * hd, view, kt.data());
                detail::load_head_t(base, 2 * d + h * hd, view, vt.data());
                std::fill(dqt.begin(), dqt.end(), 0.0f);
                std::fill(dkt.begin(), dkt.end(), 0.0f);
                std::fill(dvt.begin(), dvt.end(), 0.0f);
                const float* pbh = probs->data() + (b * heads + h) * seq * seq;
                for (std::size_t i = 0; i < seq; ++i) {
                    const std::size_t n = i + 1;
                    const float* p = pbh + i * seq;
                    const float* go = g + (b * seq + i) * d + h * hd;
                    // dV_j += p_ij dO_i ; dP_ij = dO_i . V_j
                    std::fill_n(dp.data(), n, 0.0f);
                    for (std::size_t c = 0; c < hd; ++c) {
                        kernels::axpy(n, go[c], p, dvt.data() + c * seq);
                        kernels::axpy(n, go[c], vt.data() + c * seq, dp.data());
                    }
                    const float pdp = kernels::dot(n, p, dp.data());
                    for (std::size_t j = 0; j < n; ++j) dp[j] = p[j] * (dp[j] - pdp) * scale_f;
                    // dQ_i = sum_j dS_ij K_j ; dK_j += dS_ij Q_i
                    for (std::size_t c = 0; c < hd; ++c) {
                        dqt[c * seq + i] += kernels::dot(n, dp.data(), kt.data() + c * seq);
                        kernels::axpy(n, qt[c * seq + i], dp.data(), dkt.data() + c * seq);
                    }
                }
                for (std::size_t t = 0; t < seq; ++t)
                    for (std::size_t c = 0; c < hd; ++c) {
                        gbase[t * row + h * hd + c] += dqt[c * seq + t];
                        gbase[t * row + d + h * hd + c] += dkt[c * seq + t];
                        gbase[t * row + 2 * d + h * hd + c] += dvt[c * seq + t];
                    }
            }
        }
    });
}

}  // namespace refgen
