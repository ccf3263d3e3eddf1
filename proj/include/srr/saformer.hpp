#pragma once

#include "srr/deformable.hpp"
#include "srr/sort_refine.hpp"

namespace srr::saformer {

using refine::DiagonalMask;
using refine::Direction;
using refine::Sorted;

// Query/key/value tokens for one region: rank-3 (N * heads, m/heads, H*W).
// Queries come from the spectral features, keys and values from RGB.
template <class S>
struct TokenSet {
    Var<S> q, k, v;
    DiagonalMask region;
    int batch = 1, heads = 1;
};

// Per-region DST projections: a bias-free 1x1 channel aggregation followed
// by a bias-free 3x3 depthwise convolution.
template <class S>
struct DstProjection {
    Conv2d<S> point, depth;
    DstProjection() = default;
    DstProjection(int in, int m, Rng& rng)
        : point(in, m, 1, rng, false, false), depth(m, m, 3, rng, true, false) {}
    Var<S> operator()(const Var<S>& x) const { return depth(point(x)); }
    void collect(NamedParams<S>& out, const std::string& prefix) const {
        point.collect(out, prefix + ".point");
        depth.collect(out, prefix + ".depth");
    }
};

// Q and K exist only when attention runs; the value path is present in the
// projection-only variant too.
template <class S>
struct DstRegionParams {
    DstProjection<S> q, k, v;
    bool with_attention = true;
    DstRegionParams() = default;
    DstRegionParams(int spectrum_ch, int feature_ch, int m, bool attention, Rng& rng)
        : with_attention(attention) {
        if (attention) {
            q = DstProjection<S>(spectrum_ch, m, rng);
            k = DstProjection<S>(feature_ch, m, rng);
        }
        v = DstProjection<S>(feature_ch, m, rng);
    }
};

namespace detail {

template <class S>
Var<S> to_tokens(const Var<S>& x, int heads) {
    const int N = x.val().dim(0), m = x.val().dim(1);
    const int64_t hw = static_cast<int64_t>(x.val().dim(2)) * x.val().dim(3);
    check_config(m % heads == 0, "token dimension must be divisible by the head count");
    return reshape(x, {N * heads, m / heads, static_cast<int>(hw)});
}

template <class S>
Var<S> from_tokens(const Var<S>& t, int batch, int h, int w) {
    const int g = t.val().dim(0), d = t.val().dim(1);
    return reshape(t, {batch, g / batch * d, h, w});
}

// Mask, project (1x1 then 3x3 depthwise on the zero-filled grid), re-mask.
template <class S>
Var<S> project_region(const Var<S>& x, const DstProjection<S>& proj, const DiagonalMask& mask,
                      bool invert) {
    return refine::mask_region(proj(refine::mask_region(x, mask, invert)), mask, invert);
}

}  // namespace detail

// Tokenizes one region: Q from the (normalized) spectrum, K and V from the
// (normalized) RGB features. Inputs must share the sorted pixel order.
template <class S>
TokenSet<S> dst_tokenize_region(const Sorted<S>& features, const Sorted<S>& spectrum,
                                const DstRegionParams<S>& params, const DiagonalMask& mask,
                                bool invert, int heads) {
    check_contract(features.order != nullptr && spectrum.order != nullptr,
                   "dst_tokenize: inputs carry no sort permutation tag");
    check_contract(features.order == spectrum.order,
                   "dst_tokenize: features and spectrum sorted with different permutations");
    const auto& fv = features.value.val();
    const auto& sv = spectrum.value.val();
    check(fv.dim(2) == sv.dim(2) && fv.dim(3) == sv.dim(3),
          "dst_tokenize: spatial shape mismatch");
    TokenSet<S> t;
    t.region = mask;
    t.batch = fv.dim(0);
    t.heads = heads;
    t.q = detail::to_tokens(detail::project_region(spectrum.value, params.q, mask, invert), heads);
    t.k = detail::to_tokens(detail::project_region(features.value, params.k, mask, invert), heads);
    t.v = detail::to_tokens(detail::project_region(features.value, params.v, mask, invert), heads);
    return t;
}

template <class S>
struct DstOutput {
    TokenSet<S> tl, br;
    bool split = true;  // false when the tokenizer ran on the whole grid
};

template <class S>
DstOutput<S> dst_tokenize(const Sorted<S>& features, const Sorted<S>& spectrum,
                          const DstRegionParams<S>& tl, const DstRegionParams<S>& br, int heads) {
    const DiagonalMask mask =
        DiagonalMask::make(features.value.val().dim(2), features.value.val().dim(3));
    DstOutput<S> out;
    out.tl = dst_tokenize_region(features, spectrum, tl, mask, false, heads);
    out.br = dst_tokenize_region(features, spectrum, br, mask, true, heads);
    return out;
}

// Channel attention over the token dimension: A = softmax(Q K^T / sqrt(d))
// is (m/heads) x (m/heads) per head, pixels are the contraction axis, and
// the output A V returns to feature-map shape. Zero-filled pixel columns in
// V stay zero, so a region's output keeps its support.
template <class S>
Var<S> cg_msa(const TokenSet<S>& tokens, int h, int w) {
    const auto& qv = tokens.q.val();
    check_config(qv.same_shape(tokens.k.val()) && qv.same_shape(tokens.v.val()),
                 "cg_msa: per-head token shapes disagree");
    const int d = qv.dim(1);
    Var<S> logits = scale(bmm_nt(tokens.q, tokens.k), S(1.0 / std::sqrt(static_cast<double>(d))));
    Var<S> attn = softmax_axis(logits, 2);
    return detail::from_tokens(bmm_nn(attn, tokens.v), tokens.batch, h, w);
}

// Exposed for attention-contract tests.
template <class S>
Var<S> attention_matrix(const TokenSet<S>& tokens) {
    const int d = tokens.q.val().dim(1);
    return softmax_axis(scale(bmm_nt(tokens.q, tokens.k), S(1.0 / std::sqrt(static_cast<double>(d)))),
                        2);
}

// Contextual compensation: deformable local features from the pre-sorting
// input, fused with the attention output through a 2-way softmax gate.
template <class S>
struct CcFfn {
    DeformableConv2d<S> local;
    Conv2d<S> fusion;

    CcFfn() = default;
    CcFfn(int channels, Rng& rng)
        : local(channels, channels, rng), fusion(2 * channels, 2, 1, rng) {}

    // f_in and f_hat must share the same (natural) pixel order.
    Var<S> operator()(const Sorted<S>& f_in, const Sorted<S>& f_hat) const {
        check_contract(f_in.order == f_hat.order,
                       "cc_ffn: inputs are in different pixel orders");
        check(f_in.value.val().same_shape(f_hat.value.val()), "cc_ffn: shape mismatch");
        Var<S> f_local = local(f_in.value);
        Var<S> gates = softmax_axis(fusion(concat_channels(f_local, f_hat.value)), 1);
        Var<S> theta = slice_channels(gates, 0, 1);
        Var<S> one_minus = slice_channels(gates, 1, 2);
        return add(mul_broadcast_channel(f_hat.value, theta),
                   mul_broadcast_channel(f_local, one_minus));
    }

    void collect(NamedParams<S>& out, const std::string& prefix) const {
        local.collect(out, prefix + ".local");
        fusion.collect(out, prefix + ".fusion");
    }
};

struct SaformerToggles {
    bool dst = true;
    bool cg_msa = true;
    bool cc_ffn = true;
    bool shared_region_params = false;
};

// One Spectrum-Aware Transformer block. Operates on sorted-order features
// with the refined spectrum as the query source; CC-FFN runs in the
// original pixel order against the block's pre-sorting input.
template <class S>
struct SaformerBlock {
    int channels = 0, spectrum_channels = 0, heads = 1;
    SaformerToggles toggles;
    LayerNorm<S> ln_f, ln_s;
    DstRegionParams<S> tl, br;
    CcFfn<S> ffn;

    SaformerBlock() = default;
    SaformerBlock(int channels_, int spectrum_channels_, int heads_, SaformerToggles toggles_,
                  Rng& rng)
        : channels(channels_), spectrum_channels(spectrum_channels_), heads(heads_),
          toggles(toggles_) {
        check_config(channels_ % heads_ == 0, "channels must be divisible by heads");
        if (toggles.cg_msa) {
            ln_f = LayerNorm<S>(channels_);
            ln_s = LayerNorm<S>(spectrum_channels_);
        }
        if (toggles.cg_msa || toggles.dst) {
            tl = DstRegionParams<S>(spectrum_channels_, channels_, channels_, toggles.cg_msa, rng);
            if (toggles.dst && !toggles.shared_region_params)
                br = DstRegionParams<S>(spectrum_channels_, channels_, channels_, toggles.cg_msa,
                                        rng);
        }
        if (toggles.cc_ffn) ffn = CcFfn<S>(channels_, rng);
    }

    Var<S> operator()(const Sorted<S>& f_sorted, const Sorted<S>& s_r) const {
        check_contract(f_sorted.order != nullptr, "saformer_block: input carries no sort tag");
        const int h = f_sorted.value.val().dim(2), w = f_sorted.value.val().dim(3);

        Var<S> f_hat;
        if (toggles.cg_msa) {
            Sorted<S> f_n{ln_f(f_sorted.value), f_sorted.order};
            Sorted<S> s_n{ln_s(s_r.value), s_r.order};
            if (toggles.dst) {
                const DstRegionParams<S>& br_params = toggles.shared_region_params ? tl : br;
                const DiagonalMask mask = DiagonalMask::make(h, w);
                TokenSet<S> t_tl = dst_tokenize_region(f_n, s_n, tl, mask, false, heads);
                TokenSet<S> t_br = dst_tokenize_region(f_n, s_n, br_params, mask, true, heads);
                Var<S> o_tl = add(cg_msa(t_tl, h, w),
                                  refine::mask_region(f_sorted.value, mask, false));
                Var<S> o_br = add(cg_msa(t_br, h, w),
                                  refine::mask_region(f_sorted.value, mask, true));
                f_hat = add(o_tl, o_br);
            } else {
                const DiagonalMask whole = DiagonalMask::all(h, w);
                TokenSet<S> t = dst_tokenize_region(f_n, s_n, tl, whole, false, heads);
                f_hat = add(cg_msa(t, h, w), f_sorted.value);
            }
        } else if (toggles.dst) {
            // Separable projections without attention: per-region value path
            // plus the residual.
            const DstRegionParams<S>& br_params = toggles.shared_region_params ? tl : br;
            const DiagonalMask mask = DiagonalMask::make(h, w);
            Var<S> p_tl = detail::project_region(f_sorted.value, tl.v, mask, false);
            Var<S> p_br = detail::project_region(f_sorted.value, br_params.v, mask, true);
            f_hat = add(add(p_tl, p_br), f_sorted.value);
        } else {
            f_hat = f_sorted.value;
        }

        if (!toggles.cc_ffn) return f_hat;
        Sorted<S> f_in_nat{apply_permutation(f_sorted.value, f_sorted.order, Direction::Inverse),
                           nullptr};
        Sorted<S> f_hat_nat{apply_permutation(f_hat, f_sorted.order, Direction::Inverse), nullptr};
        Var<S> fused = ffn(f_in_nat, f_hat_nat);
        return apply_permutation(fused, f_sorted.order, Direction::Forward);
    }

    void collect(NamedParams<S>& out, const std::string& prefix) const {
        if (toggles.cg_msa) {
            ln_f.collect(out, prefix + ".ln_f");
            ln_s.collect(out, prefix + ".ln_s");
        }
        auto collect_region = [&](const DstRegionParams<S>& r, const std::string& name) {
            if (r.with_attention) {
                r.q.collect(out, prefix + "." + name + ".q");
                r.k.collect(out, prefix + "." + name + ".k");
            }
            r.v.collect(out, prefix + "." + name + ".v");
        };
        if (toggles.cg_msa || toggles.dst) {
            collect_region(tl, "tl");
            if (toggles.dst && !toggles.shared_region_params) collect_region(br, "br");
        }
        if (toggles.cc_ffn) ffn.collect(out, prefix + ".ffn");
    }
};

}  // namespace srr::saformer
