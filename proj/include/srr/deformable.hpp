#pragma once

#include "srr/nn.hpp"

namespace srr {

namespace detail {

// Bilinear read with zero extension outside the grid.
template <class S>
inline S bilinear_at(const S* plane, int H, int W, S y, S x) {
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const S dy = y - static_cast<S>(y0);
    const S dx = x - static_cast<S>(x0);
    auto v = [&](int yy, int xx) -> S {
        return (yy < 0 || yy >= H || xx < 0 || xx >= W) ? S(0)
                                                        : plane[static_cast<int64_t>(yy) * W + xx];
    };
    const S v00 = v(y0, x0), v01 = v(y0, x0 + 1), v10 = v(y0 + 1, x0), v11 = v(y0 + 1, x0 + 1);
    return v00 * ((S(1) - dy) * (S(1) - dx)) + v01 * ((S(1) - dy) * dx) +
           v10 * (dy * (S(1) - dx)) + v11 * (dy * dx);
}

// Scatter gradient g into the input plane and return (d/dy, d/dx) of the read.
template <class S>
inline void bilinear_backward(const S* plane, S* gplane, int H, int W, S y, S x, S g, S& gy,
                              S& gx) {
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const S dy = y - static_cast<S>(y0);
    const S dx = x - static_cast<S>(x0);
    auto in = [&](int yy, int xx) { return yy >= 0 && yy < H && xx >= 0 && xx < W; };
    auto v = [&](int yy, int xx) -> S {
        return in(yy, xx) ? plane[static_cast<int64_t>(yy) * W + xx] : S(0);
    };
    const S v00 = v(y0, x0), v01 = v(y0, x0 + 1), v10 = v(y0 + 1, x0), v11 = v(y0 + 1, x0 + 1);
    if (gplane) {
        auto scatter = [&](int yy, int xx, S w) {
            if (in(yy, xx)) gplane[static_cast<int64_t>(yy) * W + xx] += g * w;
        };
        scatter(y0, x0, (S(1) - dy) * (S(1) - dx));
        scatter(y0, x0 + 1, (S(1) - dy) * dx);
        scatter(y0 + 1, x0, dy * (S(1) - dx));
        scatter(y0 + 1, x0 + 1, dy * dx);
    }
    gy += g * ((v10 - v00) * (S(1) - dx) + (v11 - v01) * dx);
    gx += g * ((v01 - v00) * (S(1) - dy) + (v11 - v10) * dy);
}

}  // namespace detail

// Samples x at per-location real coordinates. coords is (N, 2, Ho, Wo) with
// channel 0 = row and channel 1 = column; out-of-grid contributions read as
// zero. Differentiable in x and coords away from integer-coordinate corners.
template <class S>
Var<S> bilinear_sample(const Var<S>& x, const Var<S>& coords) {
    const auto& xv = x.val();
    const auto& cv = coords.val();
    check(xv.rank() == 4 && cv.rank() == 4 && cv.dim(1) == 2 && cv.dim(0) == xv.dim(0),
          "bilinear_sample: coords must be (N, 2, Ho, Wo)");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Ho = cv.dim(2), Wo = cv.dim(3);
    const int64_t ohw = static_cast<int64_t>(Ho) * Wo;
    Tensor<S> y = Tensor<S>::uninit({N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* plane = &xv.at(n, c, 0, 0);
            S* out = &y.at(n, c, 0, 0);
            const S* cy = &cv.at(n, 0, 0, 0);
            const S* cx = &cv.at(n, 1, 0, 0);
            for (int64_t p = 0; p < ohw; ++p)
                out[p] = detail::bilinear_at(plane, H, W, cy[p], cx[p]);
        }
    auto xn = x.node(), cn = coords.node();
    return Var<S>::op(std::move(y), {x, coords}, [xn, cn, N, C, H, W, ohw](Node<S>& n) {
        for (int b = 0; b < N; ++b) {
            const S* cy = cn->value.data() + static_cast<int64_t>(b) * 2 * ohw;
            const S* cx = cy + ohw;
            S* gcy = cn->requires_grad ? cn->grad_ref().data() + static_cast<int64_t>(b) * 2 * ohw
                                       : nullptr;
            S* gcx = gcy ? gcy + ohw : nullptr;
            for (int c = 0; c < C; ++c) {
                const int64_t off = (static_cast<int64_t>(b) * C + c) * H * W;
                const S* plane = xn->value.data() + off;
                S* gplane = xn->requires_grad ? xn->grad_ref().data() + off : nullptr;
                const S* g = n.grad.data() + (static_cast<int64_t>(b) * C + c) * ohw;
                for (int64_t p = 0; p < ohw; ++p) {
                    S gy = 0, gx = 0;
                    detail::bilinear_backward(plane, gplane, H, W, cy[p], cx[p], g[p], gy, gx);
                    if (gcy) {
                        gcy[p] += gy;
                        gcx[p] += gx;
                    }
                }
            }
        }
    });
}

namespace detail {

// Builds the deformable analogue of im2col: row (c*3 + kh)*3 + kw holds
// channel c sampled at the tap's regular position plus its predicted offset.
// With zero offsets this reproduces im2col exactly, so the downstream GEMM
// matches conv2d bit for bit. Sampling positions depend only on the tap and
// pixel, so neighbour indices and weights are computed once per tap and
// reused across channels.
template <class S>
struct SampleGeom {
    // One entry per (tap, pixel): top-left neighbour, the four weights, and
    // the fractional parts for coordinate gradients.
    std::vector<int32_t> y0, x0;
    std::vector<S> w00, w01, w10, w11, dy, dx;
    int H = 0, W = 0;

    void build(const S* off, int H_, int W_) {
        H = H_;
        W = W_;
        const int64_t hw = static_cast<int64_t>(H) * W;
        const size_t total = static_cast<size_t>(9) * hw;
        y0.resize(total);
        x0.resize(total);
        w00.resize(total);
        w01.resize(total);
        w10.resize(total);
        w11.resize(total);
        dy.resize(total);
        dx.resize(total);
        for (int tap = 0; tap < 9; ++tap) {
            const int kh = tap / 3, kw = tap % 3;
            const S* oy = off + static_cast<int64_t>(2 * tap) * hw;
            const S* ox = off + static_cast<int64_t>(2 * tap + 1) * hw;
            const size_t base = static_cast<size_t>(tap) * hw;
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const int64_t p = static_cast<int64_t>(h) * W + w;
                    const S sy = static_cast<S>(h + kh - 1) + oy[p];
                    const S sx = static_cast<S>(w + kw - 1) + ox[p];
                    const S fy = std::floor(sy), fx = std::floor(sx);
                    const S py = sy - fy, px = sx - fx;
                    y0[base + p] = static_cast<int32_t>(fy);
                    x0[base + p] = static_cast<int32_t>(fx);
                    dy[base + p] = py;
                    dx[base + p] = px;
                    w00[base + p] = (S(1) - py) * (S(1) - px);
                    w01[base + p] = (S(1) - py) * px;
                    w10[base + p] = py * (S(1) - px);
                    w11[base + p] = py * px;
                }
        }
    }

    S read(const S* plane, size_t i) const {
        const int yy = y0[i], xx = x0[i];
        auto v = [&](int a, int b) -> S {
            return (a < 0 || a >= H || b < 0 || b >= W) ? S(0)
                                                        : plane[static_cast<int64_t>(a) * W + b];
        };
        return v(yy, xx) * w00[i] + v(yy, xx + 1) * w01[i] + v(yy + 1, xx) * w10[i] +
               v(yy + 1, xx + 1) * w11[i];
    }
};

template <class S>
void deform_cols(const S* x, const S* off, int C, int H, int W, RowMat<S>& cols) {
    const int64_t hw = static_cast<int64_t>(H) * W;
    cols.resize(static_cast<Eigen::Index>(C) * 9, hw);
    SampleGeom<S> geom;
    geom.build(off, H, W);
    for (int c = 0; c < C; ++c) {
        const S* plane = x + static_cast<int64_t>(c) * hw;
        for (int tap = 0; tap < 9; ++tap) {
            S* row = cols.data() + (static_cast<int64_t>(c) * 9 + tap) * hw;
            const size_t base = static_cast<size_t>(tap) * hw;
            // Interior rows avoid the per-neighbour bounds checks.
            for (int64_t p = 0; p < hw; ++p) {
                const size_t i = base + static_cast<size_t>(p);
                const int yy = geom.y0[i], xx = geom.x0[i];
                if (yy >= 0 && yy + 1 < H && xx >= 0 && xx + 1 < W) {
                    const S* q = plane + static_cast<int64_t>(yy) * W + xx;
                    row[p] = q[0] * geom.w00[i] + q[1] * geom.w01[i] + q[W] * geom.w10[i] +
                             q[W + 1] * geom.w11[i];
                } else {
                    row[p] = geom.read(plane, i);
                }
            }
        }
    }
}

}  // namespace detail

// Deformable 3x3 convolution (offset-only formulation). offsets is
// (N, 18, H, W): channels (2t, 2t+1) are the (row, col) offset of tap t.
template <class S>
Var<S> deformable_conv3x3(const Var<S>& x, const Var<S>& w, const Var<S>& b,
                          const Var<S>& offsets) {
    const auto& xv = x.val();
    const auto& ov = offsets.val();
    check(xv.rank() == 4 && w.val().rank() == 4 && w.val().dim(2) == 3,
          "deformable_conv3x3: 3x3 weights required");
    check_config(ov.rank() == 4 && ov.dim(1) == 18,
                 "deformable_conv3x3: offsets must carry 2 channels per kernel tap");
    check(ov.dim(0) == xv.dim(0) && ov.dim(2) == xv.dim(2) && ov.dim(3) == xv.dim(3),
          "deformable_conv3x3: offset spatial shape mismatch");
    const int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int out_ch = w.val().dim(0);
    check(w.val().dim(1) == Cin, "deformable_conv3x3: input channel mismatch");
    const bool has_bias = b.defined();
    const int64_t hw = static_cast<int64_t>(H) * W;

    Tensor<S> y = Tensor<S>::uninit({N, out_ch, H, W});
    parallel_for(N, [&](int n) {
        RowMat<S> cols;
        detail::deform_cols(xv.data() + static_cast<int64_t>(n) * Cin * hw,
                            ov.data() + static_cast<int64_t>(n) * 18 * hw, Cin, H, W, cols);
        detail::gemm_conv(w.val(), cols, has_bias ? &b.val() : nullptr, out_ch,
                          y.data() + static_cast<int64_t>(n) * out_ch * hw);
    });

    auto xn = x.node(), wn = w.node(), on = offsets.node();
    auto bn = has_bias ? b.node() : nullptr;
    std::vector<Var<S>> parents{x, w, offsets};
    if (has_bias) parents.push_back(b);
    return Var<S>::op(std::move(y), std::move(parents),
                      [xn, wn, bn, on, N, Cin, H, W, out_ch, hw](Node<S>& node) {
        const int R = Cin * 9;
        std::vector<Tensor<S>> dw_part;
        std::vector<Tensor<S>> db_part;
        if (wn->requires_grad) dw_part.assign(N, Tensor<S>(wn->value.shape()));
        if (bn && bn->requires_grad) db_part.assign(N, Tensor<S>(bn->value.shape()));
        parallel_for(N, [&](int n) {
            const S* xp = xn->value.data() + static_cast<int64_t>(n) * Cin * hw;
            const S* op = on->value.data() + static_cast<int64_t>(n) * 18 * hw;
            Eigen::Map<const RowMat<S>> gy(node.grad.data() + static_cast<int64_t>(n) * out_ch * hw,
                                           out_ch, hw);
            RowMat<S> cols;
            if (wn->requires_grad) {
                detail::deform_cols(xp, op, Cin, H, W, cols);
                Eigen::Map<RowMat<S>> dwm(dw_part[n].data(), out_ch, R);
                dwm.noalias() = gy * cols.transpose();
            }
            if (bn && bn->requires_grad) {
                for (int o = 0; o < out_ch; ++o) {
                    S acc = 0;
                    for (int64_t i = 0; i < hw; ++i) acc += gy(o, i);
                    db_part[n][o] = acc;
                }
            }
            if (xn->requires_grad || on->requires_grad) {
                Eigen::Map<const RowMat<S>> wm(wn->value.data(), out_ch, R);
                RowMat<S> dcols = wm.transpose() * gy;
                S* gx = xn->requires_grad
                            ? xn->grad_ref().data() + static_cast<int64_t>(n) * Cin * hw
                            : nullptr;
                S* go = on->requires_grad
                            ? on->grad_ref().data() + static_cast<int64_t>(n) * 18 * hw
                            : nullptr;
                detail::SampleGeom<S> geom;
                geom.build(op, H, W);
                for (int c = 0; c < Cin; ++c) {
                    const S* plane = xp + static_cast<int64_t>(c) * hw;
                    S* gplane = gx ? gx + static_cast<int64_t>(c) * hw : nullptr;
                    for (int tap = 0; tap < 9; ++tap) {
                        const S* grow = dcols.data() + (static_cast<int64_t>(c) * 9 + tap) * hw;
                        const size_t base = static_cast<size_t>(tap) * hw;
                        S* goy = go ? go + static_cast<int64_t>(2 * tap) * hw : nullptr;
                        S* gox = go ? go + static_cast<int64_t>(2 * tap + 1) * hw : nullptr;
                        for (int64_t p = 0; p < hw; ++p) {
                            const S g = grow[p];
                            const size_t i = base + static_cast<size_t>(p);
                            const int yy = geom.y0[i], xx = geom.x0[i];
                            S v00 = 0, v01 = 0, v10 = 0, v11 = 0;
                            if (yy >= 0 && yy + 1 < H && xx >= 0 && xx + 1 < W) {
                                const S* q = plane + static_cast<int64_t>(yy) * W + xx;
                                v00 = q[0];
                                v01 = q[1];
                                v10 = q[W];
                                v11 = q[W + 1];
                                if (gplane) {
                                    S* gq = gplane + static_cast<int64_t>(yy) * W + xx;
                                    gq[0] += g * geom.w00[i];
                                    gq[1] += g * geom.w01[i];
                                    gq[W] += g * geom.w10[i];
                                    gq[W + 1] += g * geom.w11[i];
                                }
                            } else {
                                auto in = [&](int a, int b) {
                                    return a >= 0 && a < H && b >= 0 && b < W;
                                };
                                auto v = [&](int a, int b) -> S {
                                    return in(a, b) ? plane[static_cast<int64_t>(a) * W + b] : S(0);
                                };
                                v00 = v(yy, xx);
                                v01 = v(yy, xx + 1);
                                v10 = v(yy + 1, xx);
                                v11 = v(yy + 1, xx + 1);
                                if (gplane) {
                                    auto scatter = [&](int a, int b, S w2) {
                                        if (in(a, b))
                                            gplane[static_cast<int64_t>(a) * W + b] += g * w2;
                                    };
                                    scatter(yy, xx, geom.w00[i]);
                                    scatter(yy, xx + 1, geom.w01[i]);
                                    scatter(yy + 1, xx, geom.w10[i]);
                                    scatter(yy + 1, xx + 1, geom.w11[i]);
                                }
                            }
                            if (go) {
                                const S py = geom.dy[i], px = geom.dx[i];
                                goy[p] += g * ((v10 - v00) * (S(1) - px) + (v11 - v01) * px);
                                gox[p] += g * ((v01 - v00) * (S(1) - py) + (v11 - v10) * py);
                            }
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

// Deformable conv parameter block: the 3x3 base conv plus the offset
// predictor. Offset weights start at zero so the layer begins as a standard
// convolution.
template <class S>
struct DeformableConv2d {
    Conv2d<S> base;
    Conv2d<S> offset_pred;

    DeformableConv2d() = default;
    DeformableConv2d(int in, int out, Rng& rng) : base(in, out, 3, rng) {
        offset_pred = Conv2d<S>(in, 18, 3, rng);
        offset_pred.w.val().fill(S(0));
        offset_pred.b.val().fill(S(0));
    }

    Var<S> operator()(const Var<S>& x) const {
        return deformable_conv3x3(x, base.w, base.b, offset_pred(x));
    }

    void collect(NamedParams<S>& out, const std::string& prefix) const {
        base.collect(out, prefix + ".base");
        offset_pred.collect(out, prefix + ".offset");
    }
};

}  // namespace srr
