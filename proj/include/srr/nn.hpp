#pragma once

#include <string>

#include "srr/autograd.hpp"

namespace srr {

template <class S>
using NamedParams = std::vector<std::pair<std::string, Var<S>>>;

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

// im2col for stride-1, zero-padded k x k convolution. Row (c*k + kh)*k + kw
// holds channel c sampled at tap (kh, kw); columns are output pixels.
template <class S>
void im2col(const S* x, int C, int H, int W, int k, RowMat<S>& cols) {
    const int pad = k / 2;
    const int64_t hw = static_cast<int64_t>(H) * W;
    cols.resize(static_cast<Eigen::Index>(C) * k * k, hw);
    for (int c = 0; c < C; ++c)
        for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) {
                S* row = cols.data() + static_cast<int64_t>((c * k + kh) * k + kw) * hw;
                for (int h = 0; h < H; ++h) {
                    const int sh = h + kh - pad;
                    S* dst = row + static_cast<int64_t>(h) * W;
                    if (sh < 0 || sh >= H) {
                        std::fill_n(dst, W, S(0));
                        continue;
                    }
                    const S* src = x + (static_cast<int64_t>(c) * H + sh) * W;
                    for (int w = 0; w < W; ++w) {
                        const int sw = w + kw - pad;
                        dst[w] = (sw < 0 || sw >= W) ? S(0) : src[sw];
                    }
                }
            }
}

template <class S>
void col2im_acc(const RowMat<S>& cols, int C, int H, int W, int k, S* gx) {
    const int pad = k / 2;
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int c = 0; c < C; ++c)
        for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) {
                const S* row = cols.data() + static_cast<int64_t>((c * k + kh) * k + kw) * hw;
                for (int h = 0; h < H; ++h) {
                    const int sh = h + kh - pad;
                    if (sh < 0 || sh >= H) continue;
                    S* dst = gx + (static_cast<int64_t>(c) * H + sh) * W;
                    const S* src = row + static_cast<int64_t>(h) * W;
                    for (int w = 0; w < W; ++w) {
                        const int sw = w + kw - pad;
                        if (sw >= 0 && sw < W) dst[sw] += src[w];
                    }
                }
            }
}

// y = W * cols (+ bias per output row). Both the standard and the deformable
// 3x3 paths funnel through this one product, which is what makes the
// zero-offset deformable case bit-identical to conv2d.
template <class S>
void gemm_conv(const Tensor<S>& w, const RowMat<S>& cols, const Tensor<S>* bias, int out_ch,
               S* y) {
    const int64_t hw = cols.cols();
    Eigen::Map<const RowMat<S>> wm(w.data(), out_ch, cols.rows());
    Eigen::Map<RowMat<S>> ym(y, out_ch, hw);
    ym.noalias() = wm * cols;
    if (bias)
        for (int o = 0; o < out_ch; ++o) ym.row(o).array() += (*bias)[o];
}

}  // namespace detail

// Dense stride-1 convolution, kernel 1 or 3, zero padding k/2 so spatial
// size is preserved. Weights (out, in, k, k); bias (out) optional.
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    const auto& xv = x.val();
    check(xv.rank() == 4, "conv2d: rank-4 input required");
    check(w.val().rank() == 4, "conv2d: rank-4 weights required");
    const int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int out_ch = w.val().dim(0), k = w.val().dim(2);
    check(k == 1 || k == 3, "conv2d: kernel must be 1 or 3");
    check(w.val().dim(1) == Cin, "conv2d: input channel mismatch");
    const bool has_bias = b.defined();
    const int64_t hw = static_cast<int64_t>(H) * W;

    Tensor<S> y = Tensor<S>::uninit({N, out_ch, H, W});
    parallel_for(N, [&](int n) {
        const S* xp = xv.data() + static_cast<int64_t>(n) * Cin * hw;
        S* yp = y.data() + static_cast<int64_t>(n) * out_ch * hw;
        if (k == 1) {
            Eigen::Map<const RowMat<S>> cols(xp, Cin, hw);
            Eigen::Map<const RowMat<S>> wm(w.val().data(), out_ch, Cin);
            Eigen::Map<RowMat<S>> ym(yp, out_ch, hw);
            ym.noalias() = wm * cols;
            if (has_bias)
                for (int o = 0; o < out_ch; ++o) ym.row(o).array() += b.val()[o];
        } else {
            RowMat<S> cols;
            detail::im2col(xp, Cin, H, W, k, cols);
            detail::gemm_conv(w.val(), cols, has_bias ? &b.val() : nullptr, out_ch, yp);
        }
    });

    auto xn = x.node(), wn = w.node();
    auto bn = has_bias ? b.node() : nullptr;
    std::vector<Var<S>> parents = has_bias ? std::vector<Var<S>>{x, w, b} : std::vector<Var<S>>{x, w};
    return Var<S>::op(std::move(y), std::move(parents),
                      [xn, wn, bn, N, Cin, H, W, k, out_ch, hw](Node<S>& node) {
        const int R = Cin * k * k;
        std::vector<Tensor<S>> dw_part;
        std::vector<Tensor<S>> db_part;
        if (wn->requires_grad) dw_part.assign(N, Tensor<S>(wn->value.shape()));
        if (bn && bn->requires_grad) db_part.assign(N, Tensor<S>(bn->value.shape()));
        parallel_for(N, [&](int n) {
            Eigen::Map<const RowMat<S>> gy(node.grad.data() + static_cast<int64_t>(n) * out_ch * hw,
                                           out_ch, hw);
            const S* xp = xn->value.data() + static_cast<int64_t>(n) * Cin * hw;
            RowMat<S> cols;
            if (k == 3 && (wn->requires_grad || xn->requires_grad))
                detail::im2col(xp, Cin, H, W, k, cols);
            if (wn->requires_grad) {
                Eigen::Map<RowMat<S>> dwm(dw_part[n].data(), out_ch, R);
                if (k == 1) {
                    Eigen::Map<const RowMat<S>> xm(xp, Cin, hw);
                    dwm.noalias() = gy * xm.transpose();
                } else {
                    dwm.noalias() = gy * cols.transpose();
                }
            }
            if (bn && bn->requires_grad) {
                for (int o = 0; o < out_ch; ++o) {
                    S acc = 0;
                    for (int64_t i = 0; i < hw; ++i) acc += gy(o, i);
                    db_part[n][o] = acc;
                }
            }
            if (xn->requires_grad) {
                Eigen::Map<const RowMat<S>> wm(wn->value.data(), out_ch, R);
                S* gx = xn->grad_ref().data() + static_cast<int64_t>(n) * Cin * hw;
                if (k == 1) {
                    Eigen::Map<RowMat<S>> gxm(gx, Cin, hw);
                    gxm.noalias() += wm.transpose() * gy;
                } else {
                    RowMat<S> dcols = wm.transpose() * gy;
                    detail::col2im_acc(dcols, Cin, H, W, k, gx);
                }
            }
        });
        for (int n = 0; n < N; ++n) {
            if (wn->requires_grad) detail::acc(wn->grad_ref(), dw_part[n]);
            if (bn && bn->requires_grad) detail::acc(bn->grad_ref(), db_part[n]);
        }
    });
}

// Depthwise stride-1 convolution with odd (possibly rectangular) kernel and
// zero padding. Weights (C, 1, kh, kw); bias (C) optional.
template <class S>
Var<S> depthwise_conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    const auto& xv = x.val();
    check(xv.rank() == 4 && w.val().rank() == 4, "depthwise_conv2d: rank-4 tensors required");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int kh = w.val().dim(2), kw = w.val().dim(3);
    check(w.val().dim(0) == C && w.val().dim(1) == 1, "depthwise_conv2d: one filter per channel");
    check(kh % 2 == 1 && kw % 2 == 1, "depthwise_conv2d: odd kernel required");
    const int ph = kh / 2, pw = kw / 2;
    const bool has_bias = b.defined();

    Tensor<S> y = Tensor<S>::uninit({N, C, H, W});
    parallel_for(N, [&](int n) {
        for (int c = 0; c < C; ++c) {
            const S* xp = &xv.at(n, c, 0, 0);
            const S* wp = &w.val().at(c, 0, 0, 0);
            S* yp = &y.at(n, c, 0, 0);
            const S bias = has_bias ? b.val()[c] : S(0);
            for (int h = 0; h < H; ++h)
                for (int wo = 0; wo < W; ++wo) {
                    S acc = bias;
                    for (int i = 0; i < kh; ++i) {
                        const int sh = h + i - ph;
                        if (sh < 0 || sh >= H) continue;
                        for (int j = 0; j < kw; ++j) {
                            const int sw = wo + j - pw;
                            if (sw < 0 || sw >= W) continue;
                            acc += wp[i * kw + j] * xp[static_cast<int64_t>(sh) * W + sw];
                        }
                    }
                    yp[static_cast<int64_t>(h) * W + wo] = acc;
                }
        }
    });

    auto xn = x.node(), wn = w.node();
    auto bn = has_bias ? b.node() : nullptr;
    std::vector<Var<S>> parents = has_bias ? std::vector<Var<S>>{x, w, b} : std::vector<Var<S>>{x, w};
    return Var<S>::op(std::move(y), std::move(parents),
                      [xn, wn, bn, N, C, H, W, kh, kw](Node<S>& node) {
        const int ph = kh / 2, pw = kw / 2;
        std::vector<Tensor<S>> dw_part, db_part;
        if (wn->requires_grad) dw_part.assign(N, Tensor<S>(wn->value.shape()));
        if (bn && bn->requires_grad) db_part.assign(N, Tensor<S>(bn->value.shape()));
        parallel_for(N, [&](int n) {
            for (int c = 0; c < C; ++c) {
                const S* gy = &node.grad.at(n, c, 0, 0);
                const S* xp = &xn->value.at(n, c, 0, 0);
                const S* wp = &wn->value.at(c, 0, 0, 0);
                S* gx = xn->requires_grad ? &xn->grad_ref().at(n, c, 0, 0) : nullptr;
                S* gw = wn->requires_grad ? &dw_part[n].at(c, 0, 0, 0) : nullptr;
                if (bn && bn->requires_grad) {
                    S acc = 0;
                    for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) acc += gy[i];
                    db_part[n][c] = acc;
                }
                for (int h = 0; h < H; ++h)
                    for (int wo = 0; wo < W; ++wo) {
                        const S g = gy[static_cast<int64_t>(h) * W + wo];
                        for (int i = 0; i < kh; ++i) {
                            const int sh = h + i - ph;
                            if (sh < 0 || sh >= H) continue;
                            for (int j = 0; j < kw; ++j) {
                                const int sw = wo + j - pw;
                                if (sw < 0 || sw >= W) continue;
                                if (gw) gw[i * kw + j] += g * xp[static_cast<int64_t>(sh) * W + sw];
                                if (gx) gx[static_cast<int64_t>(sh) * W + sw] += g * wp[i * kw + j];
                            }
                        }
                    }
            }
        });
        for (int n = 0; n < N; ++n) {
            if (wn->requires_grad) detail::acc(wn->grad_ref(), dw_part[n]);
            if (bn && bn->requires_grad) detail::acc(bn->grad_ref(), db_part[n]);
        }
    });
}

// Per-pixel layer normalization over the channel axis, followed by a learned
// per-channel affine. Variance is the biased estimate; epsilon sits under
// the root.
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-6)) {
    const auto& xv = x.val();
    check(xv.rank() == 4 && xv.dim(1) >= 1, "layer_norm: rank-4 input required");
    const int N = xv.dim(0), C = xv.dim(1);
    const int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    check(gamma.val().numel() == C && beta.val().numel() == C, "layer_norm: affine size mismatch");

    Tensor<S> y = Tensor<S>::uninit(xv.shape());
    Tensor<S> xhat(xv.shape());
    Tensor<S> inv_sigma({static_cast<int>(N * hw)});
    for (int n = 0; n < N; ++n)
        for (int64_t p = 0; p < hw; ++p) {
            S mean = 0;
            for (int c = 0; c < C; ++c) mean += xv[(static_cast<int64_t>(n) * C + c) * hw + p];
            mean /= static_cast<S>(C);
            S var = 0;
            for (int c = 0; c < C; ++c) {
                const S d = xv[(static_cast<int64_t>(n) * C + c) * hw + p] - mean;
                var += d * d;
            }
            var /= static_cast<S>(C);
            const S is = S(1) / std::sqrt(var + eps);
            inv_sigma[n * hw + p] = is;
            for (int c = 0; c < C; ++c) {
                const int64_t i = (static_cast<int64_t>(n) * C + c) * hw + p;
                const S xh = (xv[i] - mean) * is;
                xhat[i] = xh;
                y[i] = gamma.val()[c] * xh + beta.val()[c];
            }
        }

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return Var<S>::op(std::move(y), {x, gamma, beta},
                      [xn, gn, bn, xhat, inv_sigma, N, C, hw](Node<S>& node) {
        for (int n = 0; n < N; ++n)
            for (int64_t p = 0; p < hw; ++p) {
                S sum_g = 0, sum_gx = 0;
                for (int c = 0; c < C; ++c) {
                    const int64_t i = (static_cast<int64_t>(n) * C + c) * hw + p;
                    const S gh = node.grad[i] * gn->value[c];
                    sum_g += gh;
                    sum_gx += gh * xhat[i];
                }
                const S inv_c = S(1) / static_cast<S>(C);
                for (int c = 0; c < C; ++c) {
                    const int64_t i = (static_cast<int64_t>(n) * C + c) * hw + p;
                    if (gn->requires_grad) gn->grad_ref()[c] += node.grad[i] * xhat[i];
                    if (bn->requires_grad) bn->grad_ref()[c] += node.grad[i];
                    if (xn->requires_grad) {
                        const S gh = node.grad[i] * gn->value[c];
                        xn->grad_ref()[i] +=
                            inv_sigma[n * hw + p] * (gh - inv_c * sum_g - xhat[i] * inv_c * sum_gx);
                    }
                }
            }
    });
}

// Batched matrix products over rank-3 tensors (G, rows, cols).
// bmm_nt: A (G, d, P) x B (G, e, P)^T -> (G, d, e)
template <class S>
Var<S> bmm_nt(const Var<S>& a, const Var<S>& b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    check(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2),
          "bmm_nt: shape mismatch");
    const int G = av.dim(0), d = av.dim(1), e = bv.dim(1);
    const int64_t P = av.dim(2);
    Tensor<S> y = Tensor<S>::uninit({G, d, e});
    for (int g = 0; g < G; ++g) {
        Eigen::Map<const RowMat<S>> am(av.data() + static_cast<int64_t>(g) * d * P, d, P);
        Eigen::Map<const RowMat<S>> bm(bv.data() + static_cast<int64_t>(g) * e * P, e, P);
        Eigen::Map<RowMat<S>> ym(y.data() + static_cast<int64_t>(g) * d * e, d, e);
        ym.noalias() = am * bm.transpose();
    }
    auto an = a.node(), bn = b.node();
    return Var<S>::op(std::move(y), {a, b}, [an, bn, G, d, e, P](Node<S>& n) {
        for (int g = 0; g < G; ++g) {
            Eigen::Map<const RowMat<S>> gy(n.grad.data() + static_cast<int64_t>(g) * d * e, d, e);
            Eigen::Map<const RowMat<S>> am(an->value.data() + static_cast<int64_t>(g) * d * P, d, P);
            Eigen::Map<const RowMat<S>> bm(bn->value.data() + static_cast<int64_t>(g) * e * P, e, P);
            if (an->requires_grad) {
                Eigen::Map<RowMat<S>> ga(an->grad_ref().data() + static_cast<int64_t>(g) * d * P, d,
                                         P);
                ga.noalias() += gy * bm;
            }
            if (bn->requires_grad) {
                Eigen::Map<RowMat<S>> gb(bn->grad_ref().data() + static_cast<int64_t>(g) * e * P, e,
                                         P);
                gb.noalias() += gy.transpose() * am;
            }
        }
    });
}

// bmm_nn: A (G, d, e) x B (G, e, P) -> (G, d, P)
template <class S>
Var<S> bmm_nn(const Var<S>& a, const Var<S>& b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    check(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(1),
          "bmm_nn: shape mismatch");
    const int G = av.dim(0), d = av.dim(1), e = av.dim(2);
    const int64_t P = bv.dim(2);
    Tensor<S> y = Tensor<S>::uninit({G, d, static_cast<int>(P)});
    for (int g = 0; g < G; ++g) {
        Eigen::Map<const RowMat<S>> am(av.data() + static_cast<int64_t>(g) * d * e, d, e);
        Eigen::Map<const RowMat<S>> bm(bv.data() + static_cast<int64_t>(g) * e * P, e, P);
        Eigen::Map<RowMat<S>> ym(y.data() + static_cast<int64_t>(g) * d * P, d, P);
        ym.noalias() = am * bm;
    }
    auto an = a.node(), bn = b.node();
    return Var<S>::op(std::move(y), {a, b}, [an, bn, G, d, e, P](Node<S>& n) {
        for (int g = 0; g < G; ++g) {
            Eigen::Map<const RowMat<S>> gy(n.grad.data() + static_cast<int64_t>(g) * d * P, d, P);
            Eigen::Map<const RowMat<S>> am(an->value.data() + static_cast<int64_t>(g) * d * e, d, e);
            Eigen::Map<const RowMat<S>> bm(bn->value.data() + static_cast<int64_t>(g) * e * P, e, P);
            if (an->requires_grad) {
                Eigen::Map<RowMat<S>> ga(an->grad_ref().data() + static_cast<int64_t>(g) * d * e, d,
                                         e);
                ga.noalias() += gy * bm.transpose();
            }
            if (bn->requires_grad) {
                Eigen::Map<RowMat<S>> gb(bn->grad_ref().data() + static_cast<int64_t>(g) * e * P, e,
                                         P);
                gb.noalias() += am.transpose() * gy;
            }
        }
    });
}

// ---- parameter containers ----

// Convolution parameter block. Kernel 1 or 3, optionally depthwise,
// Kaiming fan-in initialization.
template <class S>
struct Conv2d {
    int in_ch = 0, out_ch = 0, k = 1;
    bool depthwise = false, has_bias = true;
    Var<S> w, b;

    Conv2d() = default;
    Conv2d(int in, int out, int kernel, Rng& rng, bool dw = false, bool bias = true)
        : in_ch(in), out_ch(out), k(kernel), depthwise(dw), has_bias(bias) {
        check_config(kernel == 1 || kernel == 3, "conv kernel must be 1 or 3");
        if (dw) {
            check_config(in == out, "depthwise conv requires in_channels == out_channels");
            w = Var<S>::leaf(random_normal<S>({out, 1, k, k}, rng, 0.0,
                                              std::sqrt(2.0 / (k * k))),
                             true);
        } else {
            w = Var<S>::leaf(random_normal<S>({out, in, k, k}, rng, 0.0,
                                              std::sqrt(2.0 / (static_cast<double>(in) * k * k))),
                             true);
        }
        if (bias) b = Var<S>::leaf(Tensor<S>({out}), true);
    }

    Var<S> operator()(const Var<S>& x) const {
        check(x.val().rank() == 4 && x.val().dim(1) == in_ch, "conv: input channel mismatch");
        return depthwise ? depthwise_conv2d(x, w, b) : conv2d(x, w, b);
    }

    void collect(NamedParams<S>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        if (has_bias) out.emplace_back(prefix + ".b", b);
    }
};

template <class S>
struct LayerNorm {
    Var<S> gamma, beta;
    LayerNorm() = default;
    explicit LayerNorm(int channels) {
        gamma = Var<S>::leaf(Tensor<S>::full({channels}, S(1)), true);
        beta = Var<S>::leaf(Tensor<S>({channels}), true);
    }
    Var<S> operator()(const Var<S>& x) const { return layer_norm(x, gamma, beta); }
    void collect(NamedParams<S>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".gamma", gamma);
        out.emplace_back(prefix + ".beta", beta);
    }
};

}  // namespace srr
