#pragma once

#include <algorithm>
#include <memory>
#include <numeric>

#include "srr/autograd.hpp"

namespace srr::refine {

// Invertible per-pixel reordering shared between spectral and RGB features.
struct SortPermutation {
    int height = 0, width = 0;
    std::vector<int32_t> forward;  // source pixel -> destination pixel
    std::vector<int32_t> inverse;  // destination pixel -> source pixel

    bool is_identity() const {
        for (size_t i = 0; i < forward.size(); ++i)
            if (forward[i] != static_cast<int32_t>(i)) return false;
        return true;
    }
};

using Perms = std::shared_ptr<const std::vector<SortPermutation>>;

inline SortPermutation identity_permutation(int h, int w) {
    SortPermutation p;
    p.height = h;
    p.width = w;
    p.forward.resize(static_cast<size_t>(h) * w);
    std::iota(p.forward.begin(), p.forward.end(), 0);
    p.inverse = p.forward;
    return p;
}

inline Perms identity_perms(int n, int h, int w) {
    return std::make_shared<std::vector<SortPermutation>>(
        static_cast<size_t>(n), identity_permutation(h, w));
}

// Sort key: mean absolute intensity over channels.
template <class S>
std::vector<double> sort_keys(const Tensor<S>& x, int n) {
    const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;
    std::vector<double> key(static_cast<size_t>(hw), 0.0);
    for (int c = 0; c < C; ++c) {
        const S* p = x.data() + (static_cast<int64_t>(n) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) key[static_cast<size_t>(i)] += std::abs(static_cast<double>(p[i]));
    }
    for (double& v : key) v /= C;
    return key;
}

// Two-pass lane sort: each column sorted along the height by descending key
// (stable), then each resulting row sorted along the width (stable). The
// composed permutation leaves every row non-increasing in key and clusters
// high-intensity pixels toward the top-left corner.
template <class S>
SortPermutation sort_permutation_for(const Tensor<S>& x, int n) {
    const int H = x.dim(2), W = x.dim(3);
    const std::vector<double> key = sort_keys(x, n);

    // Pass 1: per column, gather1[dst_h] = src_h.
    std::vector<int32_t> gather1(static_cast<size_t>(H) * W);
    std::vector<int> order(static_cast<size_t>(H));
    for (int w = 0; w < W; ++w) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return key[static_cast<size_t>(a) * W + w] > key[static_cast<size_t>(b) * W + w];
        });
        for (int h = 0; h < H; ++h)
            gather1[static_cast<size_t>(h) * W + w] = static_cast<int32_t>(order[static_cast<size_t>(h)] * W + w);
    }
    // Pass 2: per row of the column-sorted keys.
    std::vector<double> key1(static_cast<size_t>(H) * W);
    for (size_t i = 0; i < key1.size(); ++i) key1[i] = key[static_cast<size_t>(gather1[i])];
    std::vector<int32_t> gather(static_cast<size_t>(H) * W);
    std::vector<int> worder(static_cast<size_t>(W));
    for (int h = 0; h < H; ++h) {
        std::iota(worder.begin(), worder.end(), 0);
        std::stable_sort(worder.begin(), worder.end(), [&](int a, int b) {
            return key1[static_cast<size_t>(h) * W + a] > key1[static_cast<size_t>(h) * W + b];
        });
        for (int w = 0; w < W; ++w)
            gather[static_cast<size_t>(h) * W + w] =
                gather1[static_cast<size_t>(h) * W + worder[static_cast<size_t>(w)]];
    }

    SortPermutation p;
    p.height = H;
    p.width = W;
    p.inverse.assign(gather.begin(), gather.end());
    p.forward.resize(gather.size());
    for (size_t dst = 0; dst < gather.size(); ++dst)
        p.forward[static_cast<size_t>(gather[dst])] = static_cast<int32_t>(dst);
    return p;
}

template <class S>
Perms sort_permutations(const Tensor<S>& x) {
    check(x.rank() == 4, "spatial_sort: rank-4 input required");
    auto perms = std::make_shared<std::vector<SortPermutation>>();
    perms->reserve(static_cast<size_t>(x.dim(0)));
    for (int n = 0; n < x.dim(0); ++n) perms->push_back(sort_permutation_for(x, n));
    return perms;
}

enum class Direction { Forward, Inverse };

// Channel-wise gather by the permutation. The ordering itself is data
// dependent but fixed; gradients flow through the gathered values only.
template <class S>
Var<S> apply_permutation(const Var<S>& x, const Perms& perms, Direction dir) {
    const auto& xv = x.val();
    check(xv.rank() == 4, "apply_permutation: rank-4 input required");
    check(perms && perms->size() == static_cast<size_t>(xv.dim(0)),
          "apply_permutation: one permutation per batch image required");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (const auto& p : *perms)
        check(p.height == H && p.width == W, "apply_permutation: spatial size mismatch");

    Tensor<S> y = Tensor<S>::uninit(xv.shape());
    for (int n = 0; n < N; ++n) {
        // Forward sorts (dst <- inverse map); Inverse restores the original
        // order (dst <- forward map).
        const auto& gmap = dir == Direction::Forward ? (*perms)[static_cast<size_t>(n)].inverse
                                                     : (*perms)[static_cast<size_t>(n)].forward;
        for (int c = 0; c < C; ++c) {
            const S* src = xv.data() + (static_cast<int64_t>(n) * C + c) * hw;
            S* dst = y.data() + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] = src[gmap[static_cast<size_t>(i)]];
        }
    }
    auto xn = x.node();
    return Var<S>::op(std::move(y), {x}, [xn, perms, dir, N, C, hw](Node<S>& node) {
        if (!xn->requires_grad) return;
        Tensor<S>& g = xn->grad_ref();
        for (int n = 0; n < N; ++n) {
            const auto& gmap = dir == Direction::Forward
                                   ? (*perms)[static_cast<size_t>(n)].inverse
                                   : (*perms)[static_cast<size_t>(n)].forward;
            for (int c = 0; c < C; ++c) {
                const S* gy = node.grad.data() + (static_cast<int64_t>(n) * C + c) * hw;
                S* gx = g.data() + (static_cast<int64_t>(n) * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) gx[gmap[static_cast<size_t>(i)]] += gy[i];
            }
        }
    });
}

template <class S>
struct Sorted {
    Var<S> value;
    Perms order;  // null means natural (unsorted) pixel order
};

template <class S>
std::pair<Sorted<S>, Perms> spatial_sort(const Var<S>& x) {
    Perms perms = sort_permutations(x.val());
    return {Sorted<S>{apply_permutation(x, perms, Direction::Forward), perms}, perms};
}

// Anti-diagonal membership using the pixel-center rule
// (h + 0.5) / H + (w + 0.5) / W < 1, well defined for non-square grids.
struct DiagonalMask {
    int height = 0, width = 0;
    std::vector<uint8_t> tl;  // 1 where the pixel belongs to the top-left region

    static DiagonalMask make(int h, int w) {
        DiagonalMask m;
        m.height = h;
        m.width = w;
        m.tl.resize(static_cast<size_t>(h) * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                m.tl[static_cast<size_t>(y) * w + x] =
                    ((y + 0.5) / h + (x + 0.5) / w < 1.0) ? 1 : 0;
        return m;
    }
    int64_t tl_count() const {
        int64_t c = 0;
        for (uint8_t v : tl) c += v;
        return c;
    }
    // Whole grid as one region (the tokenizer's no-split mode).
    static DiagonalMask all(int h, int w) {
        DiagonalMask m;
        m.height = h;
        m.width = w;
        m.tl.assign(static_cast<size_t>(h) * w, 1);
        return m;
    }
};

// x * mask broadcast over batch and channels; `invert` selects the
// complementary (bottom-right) region. Zero-filled full-size output, so
// tl + br == x exactly.
template <class S>
Var<S> mask_region(const Var<S>& x, const DiagonalMask& mask, bool invert) {
    const auto& xv = x.val();
    check(xv.rank() == 4 && xv.dim(2) == mask.height && xv.dim(3) == mask.width,
          "mask_region: mask size mismatch");
    const int N = xv.dim(0), C = xv.dim(1);
    const int64_t hw = static_cast<int64_t>(mask.height) * mask.width;
    Tensor<S> y = Tensor<S>::uninit(xv.shape());
    for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
        const S* src = xv.data() + nc * hw;
        S* dst = y.data() + nc * hw;
        for (int64_t i = 0; i < hw; ++i)
            dst[i] = (mask.tl[static_cast<size_t>(i)] != invert) ? src[i] : S(0);
    }
    auto xn = x.node();
    auto m = std::make_shared<DiagonalMask>(mask);
    return Var<S>::op(std::move(y), {x}, [xn, m, invert, N, C, hw](Node<S>& node) {
        if (!xn->requires_grad) return;
        Tensor<S>& g = xn->grad_ref();
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
            const S* gy = node.grad.data() + nc * hw;
            S* gx = g.data() + nc * hw;
            for (int64_t i = 0; i < hw; ++i)
                if (m->tl[static_cast<size_t>(i)] != invert) gx[i] += gy[i];
        }
    });
}

template <class S>
struct DiagonalSplit {
    Var<S> tl, br;
    DiagonalMask mask;
};

template <class S>
DiagonalSplit<S> diagonal_split(const Var<S>& x) {
    const DiagonalMask mask = DiagonalMask::make(x.val().dim(2), x.val().dim(3));
    return {mask_region(x, mask, false), mask_region(x, mask, true), mask};
}

// (N, B) row-wise multiply by a length-B vector.
template <class S>
Var<S> mul_rows(const Var<S>& x, const Var<S>& v) {
    check(x.val().rank() == 2 && v.val().rank() == 1 && x.val().dim(1) == v.val().dim(0),
          "mul_rows: shape mismatch");
    const int N = x.val().dim(0), B = x.val().dim(1);
    Tensor<S> y = Tensor<S>::uninit({N, B});
    for (int n = 0; n < N; ++n)
        for (int b = 0; b < B; ++b) y.at(n, b) = x.val().at(n, b) * v.val()[b];
    auto xn = x.node(), vn = v.node();
    return Var<S>::op(std::move(y), {x, v}, [xn, vn, N, B](Node<S>& node) {
        for (int n = 0; n < N; ++n)
            for (int b = 0; b < B; ++b) {
                if (xn->requires_grad) xn->grad_ref().at(n, b) += node.grad.at(n, b) * vn->value[b];
                if (vn->requires_grad) vn->grad_ref()[b] += node.grad.at(n, b) * xn->value.at(n, b);
            }
    });
}

template <class S>
struct SdrsResult {
    Var<S> refined;       // re-scaled spectrum, same order as the input
    Var<S> weights;       // (N, B), softmax output, rows sum to 1
    Var<S> differences;   // (N, B), per-band |sum tl - sum br|
};

// Spectral diagonal re-scaling. D_i is the absolute difference of the
// anti-diagonal region sums per band; W = softmax(D * alpha) across bands;
// the spectrum is multiplied channel-wise by W.
template <class S>
SdrsResult<S> sdrs(const Var<S>& spectrum, const Var<S>& alpha, bool normalize_by_area = false) {
    const auto& sv = spectrum.val();
    check(sv.rank() == 4, "sdrs: rank-4 spectrum required");
    check_config(alpha.val().rank() == 1 && alpha.val().dim(0) == sv.dim(1),
                 "sdrs: alpha length must equal the band count");
    const DiagonalMask mask = DiagonalMask::make(sv.dim(2), sv.dim(3));

    Var<S> tl_sum = sum_spatial(mask_region(spectrum, mask, false));
    Var<S> br_sum = sum_spatial(mask_region(spectrum, mask, true));
    if (normalize_by_area) {
        const int64_t hw = static_cast<int64_t>(sv.dim(2)) * sv.dim(3);
        const int64_t tl_n = std::max<int64_t>(1, mask.tl_count());
        const int64_t br_n = std::max<int64_t>(1, hw - mask.tl_count());
        tl_sum = scale(tl_sum, S(1) / static_cast<S>(tl_n));
        br_sum = scale(br_sum, S(1) / static_cast<S>(br_n));
    }
    SdrsResult<S> out;
    out.differences = abs_op(sub(tl_sum, br_sum));
    out.weights = softmax_axis(mul_rows(out.differences, alpha), 1);
    out.refined = scale_channels_batched(spectrum, out.weights);
    return out;
}

}  // namespace srr::refine
