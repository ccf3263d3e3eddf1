#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "srr/tensor.hpp"

namespace srr {

// Reverse-mode tape. A Var wraps a graph node; ops are free functions that
// build new nodes with backward closures. Leaves (inputs, parameters) persist
// across graph builds, so finite-difference checks can perturb a leaf value
// in place and re-run the forward closure.
template <class S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    bool requires_grad = false;

    Tensor<S>& grad_ref() {
        if (grad.numel() != value.numel()) grad = Tensor<S>(value.shape());
        return grad;
    }
};

template <class S>
class Var {
  public:
    Var() = default;

    static Var leaf(Tensor<S> v, bool requires_grad = false) {
        Var r;
        r.node_ = std::make_shared<Node<S>>();
        r.node_->value = std::move(v);
        r.node_->requires_grad = requires_grad;
        return r;
    }

    static Var op(Tensor<S> v, std::vector<Var> parents, std::function<void(Node<S>&)> bw) {
        Var r;
        r.node_ = std::make_shared<Node<S>>();
        r.node_->value = std::move(v);
        for (const Var& p : parents) {
            r.node_->requires_grad = r.node_->requires_grad || p.node_->requires_grad;
            r.node_->parents.push_back(p.node_);
        }
        if (r.node_->requires_grad) r.node_->backward = std::move(bw);
        return r;
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<S>& val() const { return node_->value; }
    Tensor<S>& val() { return node_->value; }
    // A Var is a handle; perturbing a leaf through a const handle is how the
    // finite-difference oracle works.
    Tensor<S>& mutable_val() const { return node_->value; }
    Tensor<S>& grad() const { return node_->grad_ref(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    std::shared_ptr<Node<S>> node() const { return node_; }

  private:
    std::shared_ptr<Node<S>> node_;
};

namespace detail {
template <class S>
void topo_visit(Node<S>* n, std::unordered_set<Node<S>*>& seen, std::vector<Node<S>*>& order) {
    // Iterative DFS; graphs can be a few hundred nodes deep during training.
    struct Frame {
        Node<S>* node;
        size_t next_parent;
    };
    std::vector<Frame> stack{{n, 0}};
    seen.insert(n);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            Node<S>* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
}
}  // namespace detail

// Computes fresh gradients of a scalar root with respect to every reachable
// node that requires grad. Grads of reachable nodes are zeroed first, so a
// call always reflects exactly one backward pass.
template <class S>
void backward(const Var<S>& root) {
    check(root.val().numel() == 1, "backward requires a scalar root");
    if (!root.requires_grad()) return;
    std::unordered_set<Node<S>*> seen;
    std::vector<Node<S>*> order;
    detail::topo_visit(root.node().get(), seen, order);
    for (Node<S>* n : order) n->grad_ref().fill(S(0));
    root.node()->grad_ref()[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backward) n->backward(*n);
    }
}

namespace detail {
template <class S>
void acc(Tensor<S>& dst, const Tensor<S>& src) {
    dst.array() += src.array();
}
}  // namespace detail

// ---- elementwise ----

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    check(a.val().same_shape(b.val()), "add: shape mismatch");
    Tensor<S> y = Tensor<S>::uninit(a.val().shape());
    y.array() = a.val().array() + b.val().array();
    auto an = a.node(), bn = b.node();
    return Var<S>::op(std::move(y), {a, b}, [an, bn](Node<S>& n) {
        if (an->requires_grad) detail::acc(an->grad_ref(), n.grad);
        if (bn->requires_grad) detail::acc(bn->grad_ref(), n.grad);
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    check(a.val().same_shape(b.val()), "sub: shape mismatch");
    Tensor<S> y = Tensor<S>::uninit(a.val().shape());
    y.array() = a.val().array() - b.val().array();
    auto an = a.node(), bn = b.node();
    return Var<S>::op(std::move(y), {a, b}, [an, bn](Node<S>& n) {
        if (an->requires_grad) detail::acc(an->grad_ref(), n.grad);
        if (bn->requires_grad) bn->grad_ref().array() -= n.grad.array();
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    check(a.val().same_shape(b.val()), "mul: shape mismatch");
    Tensor<S> y = Tensor<S>::uninit(a.val().shape());
    y.array() = a.val().array() * b.val().array();
    auto an = a.node(), bn = b.node();
    return Var<S>::op(std::move(y), {a, b}, [an, bn](Node<S>& n) {
        if (an->requires_grad) an->grad_ref().array() += n.grad.array() * bn->value.array();
        if (bn->requires_grad) bn->grad_ref().array() += n.grad.array() * an->value.array();
    });
}

template <class S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
    check(a.val().same_shape(b.val()), "div: shape mismatch");
    Tensor<S> y = Tensor<S>::uninit(a.val().shape());
    y.array() = a.val().array() / b.val().array();
    auto an = a.node(), bn = b.node();
    return Var<S>::op(std::move(y), {a, b}, [an, bn](Node<S>& n) {
        if (an->requires_grad) an->grad_ref().array() += n.grad.array() / bn->value.array();
        if (bn->requires_grad)
            bn->grad_ref().array() -= n.grad.array() * an->value.array() /
                                      (bn->value.array() * bn->value.array());
    });
}

template <class S>
Var<S> scale(const Var<S>& a, S c) {
    Tensor<S> y = Tensor<S>::uninit(a.val().shape());
    y.array() = a.val().array() * c;
    auto an = a.node();
    return Var<S>::op(std::move(y), {a}, [an, c](Node<S>& n) {
        if (an->requires_grad) an->grad_ref().array() += n.grad.array() * c;
    });
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S c) {
    Tensor<S> y = Tensor<S>::uninit(a.val().shape());
    y.array() = a.val().array() + c;
    auto an = a.node();
    return Var<S>::op(std::move(y), {a}, [an](Node<S>& n) {
        if (an->requires_grad) detail::acc(an->grad_ref(), n.grad);
    });
}

template <class S>
Var<S> abs_op(const Var<S>& a) {
    Tensor<S> y = Tensor<S>::uninit(a.val().shape());
    y.array() = a.val().array().abs();
    auto an = a.node();
    return Var<S>::op(std::move(y), {a}, [an](Node<S>& n) {
        if (!an->requires_grad) return;
        // Subgradient sign(0) = 0; callers keep grad checks away from zeros.
        an->grad_ref().array() += n.grad.array() * an->value.array().sign();
    });
}

template <class S>
Var<S> square(const Var<S>& a) {
    return mul(a, a);
}

// Exact GELU, 0.5 x (1 + erf(x / sqrt(2))).
template <class S>
Var<S> gelu(const Var<S>& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    Tensor<S> y = Tensor<S>::uninit(a.val().shape());
    for (int64_t i = 0; i < y.numel(); ++i) {
        double x = static_cast<double>(a.val()[i]);
        y[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    auto an = a.node();
    return Var<S>::op(std::move(y), {a}, [an](Node<S>& n) {
        if (!an->requires_grad) return;
        Tensor<S>& g = an->grad_ref();
        for (int64_t i = 0; i < g.numel(); ++i) {
            double x = static_cast<double>(an->value[i]);
            double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                       x * inv_sqrt2pi * std::exp(-0.5 * x * x);
            g[i] += n.grad[i] * static_cast<S>(d);
        }
    });
}

// Identity value, no gradient flow.
template <class S>
Var<S> detach(const Var<S>& a) {
    return Var<S>::leaf(a.val(), false);
}

// Forward takes the quantized value, backward copies the gradient to the
// pre-quantization path unchanged.
template <class S>
Var<S> straight_through(const Var<S>& pre, const Tensor<S>& quantized) {
    check(pre.val().same_shape(quantized), "straight_through: shape mismatch");
    auto pn = pre.node();
    return Var<S>::op(Tensor<S>(quantized), {pre}, [pn](Node<S>& n) {
        if (pn->requires_grad) detail::acc(pn->grad_ref(), n.grad);
    });
}

// ---- reductions ----

template <class S>
Var<S> sum_all(const Var<S>& a) {
    Tensor<S> y({1});
    // Fixed-order accumulation; vectorized reductions peel differently
    // depending on heap alignment, which breaks run-to-run determinism.
    S acc = 0;
    for (int64_t i = 0; i < a.val().numel(); ++i) acc += a.val()[i];
    y[0] = acc;
    auto an = a.node();
    return Var<S>::op(std::move(y), {a}, [an](Node<S>& n) {
        if (an->requires_grad) an->grad_ref().array() += n.grad[0];
    });
}

template <class S>
Var<S> mean_all(const Var<S>& a) {
    const S inv = S(1) / static_cast<S>(a.val().numel());
    return scale(sum_all(a), inv);
}

// Weighted sum with a fixed tensor of weights (used by grad checks to probe
// the full Jacobian through a scalar loss).
template <class S>
Var<S> dot_const(const Var<S>& a, const Tensor<S>& w) {
    check(a.val().same_shape(w), "dot_const: shape mismatch");
    Tensor<S> y({1});
    S acc = 0;
    for (int64_t i = 0; i < a.val().numel(); ++i) acc += a.val()[i] * w[i];
    y[0] = acc;
    auto an = a.node();
    Tensor<S> wc = w;
    return Var<S>::op(std::move(y), {a}, [an, wc](Node<S>& n) {
        if (an->requires_grad) an->grad_ref().array() += n.grad[0] * wc.array();
    });
}

// Sum over all axes except the channel axis of an NCHW tensor -> (N, C).
template <class S>
Var<S> sum_spatial(const Var<S>& a) {
    check(a.val().rank() == 4, "sum_spatial: rank-4 input required");
    const int N = a.val().dim(0), C = a.val().dim(1);
    const int64_t hw = static_cast<int64_t>(a.val().dim(2)) * a.val().dim(3);
    Tensor<S> y = Tensor<S>::uninit({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* p = a.val().data() + (static_cast<int64_t>(n) * C + c) * hw;
            S s = 0;
            for (int64_t i = 0; i < hw; ++i) s += p[i];
            y.at(n, c) = s;
        }
    auto an = a.node();
    return Var<S>::op(std::move(y), {a}, [an, N, C, hw](Node<S>& n) {
        if (!an->requires_grad) return;
        Tensor<S>& g = an->grad_ref();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                S gv = n.grad.at(b, c);
                S* p = g.data() + (static_cast<int64_t>(b) * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) p[i] += gv;
            }
    });
}

// ---- shape ops ----

template <class S>
Var<S> reshape(const Var<S>& a, std::vector<int> shape) {
    Tensor<S> y = a.val().reshaped(shape);
    auto an = a.node();
    return Var<S>::op(std::move(y), {a}, [an](Node<S>& n) {
        if (an->requires_grad) an->grad_ref().array() += n.grad.array();
    });
}

template <class S>
Var<S> concat_channels(const Var<S>& a, const Var<S>& b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    check(av.rank() == 4 && bv.rank() == 4, "concat_channels: rank-4 inputs required");
    check(av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
          "concat_channels: shape mismatch");
    const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;
    Tensor<S> y = Tensor<S>::uninit({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(av.data() + static_cast<int64_t>(n) * Ca * hw, Ca * hw,
                    y.data() + static_cast<int64_t>(n) * (Ca + Cb) * hw);
        std::copy_n(bv.data() + static_cast<int64_t>(n) * Cb * hw, Cb * hw,
                    y.data() + static_cast<int64_t>(n) * (Ca + Cb) * hw + Ca * hw);
    }
    auto an = a.node(), bn = b.node();
    return Var<S>::op(std::move(y), {a, b}, [an, bn, N, Ca, Cb, hw](Node<S>& n) {
        for (int b2 = 0; b2 < N; ++b2) {
            const S* g = n.grad.data() + static_cast<int64_t>(b2) * (Ca + Cb) * hw;
            if (an->requires_grad) {
                S* ga = an->grad_ref().data() + static_cast<int64_t>(b2) * Ca * hw;
                for (int64_t i = 0; i < Ca * hw; ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                S* gb = bn->grad_ref().data() + static_cast<int64_t>(b2) * Cb * hw;
                for (int64_t i = 0; i < Cb * hw; ++i) gb[i] += g[Ca * hw + i];
            }
        }
    });
}

template <class S>
Var<S> slice_channels(const Var<S>& a, int c0, int c1) {
    const auto& av = a.val();
    check(av.rank() == 4 && 0 <= c0 && c0 < c1 && c1 <= av.dim(1), "slice_channels: bad range");
    const int N = av.dim(0), C = av.dim(1), H = av.dim(2), W = av.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;
    Tensor<S> y = Tensor<S>::uninit({N, c1 - c0, H, W});
    for (int n = 0; n < N; ++n)
        std::copy_n(av.data() + (static_cast<int64_t>(n) * C + c0) * hw, (c1 - c0) * hw,
                    y.data() + static_cast<int64_t>(n) * (c1 - c0) * hw);
    auto an = a.node();
    return Var<S>::op(std::move(y), {a}, [an, N, C, c0, c1, hw](Node<S>& n) {
        if (!an->requires_grad) return;
        Tensor<S>& g = an->grad_ref();
        for (int b = 0; b < N; ++b) {
            const S* gs = n.grad.data() + static_cast<int64_t>(b) * (c1 - c0) * hw;
            S* gd = g.data() + (static_cast<int64_t>(b) * C + c0) * hw;
            for (int64_t i = 0; i < (c1 - c0) * hw; ++i) gd[i] += gs[i];
        }
    });
}

// Tile an (N, C, H, W) tensor `times` times along the channel axis.
// Backward sums the tiles, i.e. each tile sees an identity gradient map.
template <class S>
Var<S> repeat_channels(const Var<S>& a, int times) {
    const auto& av = a.val();
    check(av.rank() == 4, "repeat_channels: rank-4 input required");
    const int N = av.dim(0), C = av.dim(1), H = av.dim(2), W = av.dim(3);
    const int64_t chw = static_cast<int64_t>(C) * H * W;
    Tensor<S> y = Tensor<S>::uninit({N, C * times, H, W});
    for (int n = 0; n < N; ++n)
        for (int t = 0; t < times; ++t)
            std::copy_n(av.data() + n * chw, chw,
                        y.data() + (static_cast<int64_t>(n) * times + t) * chw);
    auto an = a.node();
    return Var<S>::op(std::move(y), {a}, [an, N, times, chw](Node<S>& n) {
        if (!an->requires_grad) return;
        Tensor<S>& g = an->grad_ref();
        for (int b = 0; b < N; ++b)
            for (int t = 0; t < times; ++t) {
                const S* gs = n.grad.data() + (static_cast<int64_t>(b) * times + t) * chw;
                S* gd = g.data() + b * chw;
                for (int64_t i = 0; i < chw; ++i) gd[i] += gs[i];
            }
    });
}

// ---- broadcast multiplies ----

// x: (N, C, H, W) scaled per channel by w: (C).
template <class S>
Var<S> scale_channels(const Var<S>& x, const Var<S>& w) {
    const auto& xv = x.val();
    check(xv.rank() == 4 && w.val().rank() == 1 && w.val().dim(0) == xv.dim(1),
          "scale_channels: weight length must equal channel count");
    const int N = xv.dim(0), C = xv.dim(1);
    const int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    Tensor<S> y = Tensor<S>::uninit(xv.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* p = xv.data() + (static_cast<int64_t>(n) * C + c) * hw;
            S* q = y.data() + (static_cast<int64_t>(n) * C + c) * hw;
            const S s = w.val()[c];
            for (int64_t i = 0; i < hw; ++i) q[i] = p[i] * s;
        }
    auto xn = x.node(), wn = w.node();
    return Var<S>::op(std::move(y), {x, w}, [xn, wn, N, C, hw](Node<S>& n) {
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const S* g = n.grad.data() + (static_cast<int64_t>(b) * C + c) * hw;
                const S* xp = xn->value.data() + (static_cast<int64_t>(b) * C + c) * hw;
                if (xn->requires_grad) {
                    S* gx = xn->grad_ref().data() + (static_cast<int64_t>(b) * C + c) * hw;
                    const S s = wn->value[c];
                    for (int64_t i = 0; i < hw; ++i) gx[i] += g[i] * s;
                }
                if (wn->requires_grad) {
                    S acc = 0;
                    for (int64_t i = 0; i < hw; ++i) acc += g[i] * xp[i];
                    wn->grad_ref()[c] += acc;
                }
            }
    });
}

// x: (N, C, H, W) scaled per image and channel by w: (N, C).
template <class S>
Var<S> scale_channels_batched(const Var<S>& x, const Var<S>& w) {
    const auto& xv = x.val();
    check(xv.rank() == 4 && w.val().rank() == 2 && w.val().dim(0) == xv.dim(0) &&
              w.val().dim(1) == xv.dim(1),
          "scale_channels_batched: weights must be (N, C)");
    const int N = xv.dim(0), C = xv.dim(1);
    const int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    Tensor<S> y = Tensor<S>::uninit(xv.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* p = xv.data() + (static_cast<int64_t>(n) * C + c) * hw;
            S* q = y.data() + (static_cast<int64_t>(n) * C + c) * hw;
            const S s = w.val().at(n, c);
            for (int64_t i = 0; i < hw; ++i) q[i] = p[i] * s;
        }
    auto xn = x.node(), wn = w.node();
    return Var<S>::op(std::move(y), {x, w}, [xn, wn, N, C, hw](Node<S>& n) {
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const S* g = n.grad.data() + (static_cast<int64_t>(b) * C + c) * hw;
                const S* xp = xn->value.data() + (static_cast<int64_t>(b) * C + c) * hw;
                if (xn->requires_grad) {
                    S* gx = xn->grad_ref().data() + (static_cast<int64_t>(b) * C + c) * hw;
                    const S s = wn->value.at(b, c);
                    for (int64_t i = 0; i < hw; ++i) gx[i] += g[i] * s;
                }
                if (wn->requires_grad) {
                    S acc = 0;
                    for (int64_t i = 0; i < hw; ++i) acc += g[i] * xp[i];
                    wn->grad_ref().at(b, c) += acc;
                }
            }
    });
}

// x: (N, C, H, W) multiplied per pixel by a single-channel map m: (N, 1, H, W).
template <class S>
Var<S> mul_broadcast_channel(const Var<S>& x, const Var<S>& m) {
    const auto& xv = x.val();
    const auto& mv = m.val();
    check(xv.rank() == 4 && mv.rank() == 4 && mv.dim(1) == 1 && mv.dim(0) == xv.dim(0) &&
              mv.dim(2) == xv.dim(2) && mv.dim(3) == xv.dim(3),
          "mul_broadcast_channel: map must be (N, 1, H, W)");
    const int N = xv.dim(0), C = xv.dim(1);
    const int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    Tensor<S> y = Tensor<S>::uninit(xv.shape());
    for (int n = 0; n < N; ++n) {
        const S* mp = mv.data() + static_cast<int64_t>(n) * hw;
        for (int c = 0; c < C; ++c) {
            const S* xp = xv.data() + (static_cast<int64_t>(n) * C + c) * hw;
            S* yp = y.data() + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) yp[i] = xp[i] * mp[i];
        }
    }
    auto xn = x.node(), mn = m.node();
    return Var<S>::op(std::move(y), {x, m}, [xn, mn, N, C, hw](Node<S>& node) {
        for (int b = 0; b < N; ++b) {
            const S* mp = mn->value.data() + static_cast<int64_t>(b) * hw;
            S* gm = mn->requires_grad ? mn->grad_ref().data() + static_cast<int64_t>(b) * hw
                                      : nullptr;
            for (int c = 0; c < C; ++c) {
                const int64_t off = (static_cast<int64_t>(b) * C + c) * hw;
                const S* g = node.grad.data() + off;
                const S* xp = xn->value.data() + off;
                if (xn->requires_grad) {
                    S* gx = xn->grad_ref().data() + off;
                    for (int64_t i = 0; i < hw; ++i) gx[i] += g[i] * mp[i];
                }
                if (gm)
                    for (int64_t i = 0; i < hw; ++i) gm[i] += g[i] * xp[i];
            }
        }
    });
}

// Elementwise multiply by a fixed mask/constant tensor.
template <class S>
Var<S> mul_const(const Var<S>& x, const Tensor<S>& m) {
    check(x.val().same_shape(m), "mul_const: shape mismatch");
    Tensor<S> y = Tensor<S>::uninit(x.val().shape());
    y.array() = x.val().array() * m.array();
    auto xn = x.node();
    Tensor<S> mc = m;
    return Var<S>::op(std::move(y), {x}, [xn, mc](Node<S>& n) {
        if (xn->requires_grad) xn->grad_ref().array() += n.grad.array() * mc.array();
    });
}

// ---- softmax over an arbitrary axis ----

template <class S>
Var<S> softmax_axis(const Var<S>& x, int axis) {
    const auto& xv = x.val();
    check(axis >= 0 && axis < xv.rank(), "softmax_axis: axis out of range");
    check(xv.all_finite(), "softmax_axis: non-finite input");
    int64_t outer = 1, inner = 1;
    const int L = xv.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
    for (int i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
    Tensor<S> y = Tensor<S>::uninit(xv.shape());
    const S* src = xv.data();
    S* dst = y.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * L * inner + in;
            S m = src[base];
            for (int l = 1; l < L; ++l) m = std::max(m, src[base + l * inner]);
            S sum = 0;
            for (int l = 0; l < L; ++l) {
                S e = std::exp(src[base + l * inner] - m);
                dst[base + l * inner] = e;
                sum += e;
            }
            const S inv = S(1) / sum;
            for (int l = 0; l < L; ++l) dst[base + l * inner] *= inv;
        }
    auto xn = x.node();
    return Var<S>::op(std::move(y), {x}, [xn, outer, inner, L](Node<S>& n) {
        if (!xn->requires_grad) return;
        Tensor<S>& g = xn->grad_ref();
        const S* yv = n.value.data();
        const S* gy = n.grad.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * L * inner + in;
                S dot = 0;
                for (int l = 0; l < L; ++l) dot += gy[base + l * inner] * yv[base + l * inner];
                for (int l = 0; l < L; ++l)
                    g[base + l * inner] += yv[base + l * inner] * (gy[base + l * inner] - dot);
            }
    });
}

}  // namespace srr
