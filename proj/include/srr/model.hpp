#pragma once

#include "srr/codebook.hpp"
#include "srr/config.hpp"
#include "srr/io.hpp"
#include "srr/saformer.hpp"

namespace srr::pipeline {

using refine::Perms;
using refine::Sorted;

struct ModelConfig {
    config::ModelSection arch;
    uint64_t seed = 7;

    // The spectral prior participates whenever some enabled component needs
    // the reconstructed spectrum. The rgb stream ignores every spectral
    // toggle; the spectrum stream always reconstructs.
    bool spectrum_active() const {
        if (arch.stream == config::Stream::Rgb) return false;
        if (arch.stream == config::Stream::Spectrum) return true;
        return arch.toggles.sss || arch.toggles.sdrs || arch.toggles.dst || arch.toggles.cg_msa;
    }
    config::ModelToggles effective_toggles() const {
        if (arch.stream == config::Stream::Rgb) return {false, false, false, false, false};
        return arch.toggles;
    }
    bool saformer_stages() const {
        const auto t = effective_toggles();
        return t.dst || t.cg_msa || t.cc_ffn;
    }
    int vq_partitions() const {
        return arch.vq_mode == config::VqMode::BandWise ? codebook::kBands : 1;
    }
    int vq_codes_per_partition() const {
        return arch.vq_mode == config::VqMode::BandWise ? arch.codes_per_band
                                                        : codebook::kBands * arch.codes_per_band;
    }
};

template <class S>
struct ResBlock {
    Conv2d<S> c1, c2;
    ResBlock() = default;
    ResBlock(int channels, Rng& rng)
        : c1(channels, channels, 3, rng), c2(channels, channels, 3, rng) {}
    Var<S> operator()(const Var<S>& x) const { return add(x, c2(gelu(c1(x)))); }
    void collect(NamedParams<S>& out, const std::string& prefix) const {
        c1.collect(out, prefix + ".c1");
        c2.collect(out, prefix + ".c2");
    }
};

template <class S>
struct ForwardResult {
    Var<S> restored;            // unclamped (N, 3, H, W)
    Perms order;                // permutation used by the trunk
    Tensor<S> sdrs_weights;     // (N, B) when SDRS ran, empty otherwise
    Tensor<S> sdrs_differences; // (N, B)
    Tensor<int32_t> code_indices;  // (N, P, H, W) when the prior ran
};

// Encoder -> spectral prior reconstruction (frozen codebook) -> sorting and
// re-scaling -> trunk (SAFormer blocks or residual conv blocks) -> decoder,
// with a global residual from the degraded input.
template <class S>
struct RemovalModel {
    ModelConfig cfg;
    Conv2d<S> enc1, enc2;
    Conv2d<S> adapter;                    // 1x1 bridge C -> n_z into the frozen codebook
    codebook::CodebookModel<S> prior;     // frozen after load_prior
    bool prior_loaded = false;
    Var<S> sdrs_alpha;
    Conv2d<S> fusion;     // 1x1 (C + 31) -> C, spectrum injection without attention
    Conv2d<S> spec_proj;  // 1x1 31 -> C, spectrum-stream trunk input
    std::vector<saformer::SaformerBlock<S>> sa_blocks;
    std::vector<ResBlock<S>> res_blocks;
    Conv2d<S> dec1, dec2;

    RemovalModel() = default;

    explicit RemovalModel(const ModelConfig& cfg_) : cfg(cfg_) {
        Rng rng(derive_seed(cfg.seed, 0x30de1));
        const int c = cfg.arch.channels;
        const auto t = cfg.effective_toggles();
        enc1 = Conv2d<S>(3, c, 3, rng);
        enc2 = Conv2d<S>(c, c, 3, rng);
        if (cfg.spectrum_active()) {
            adapter = Conv2d<S>(c, cfg.arch.latent_dim, 1, rng);
            if (t.sdrs) sdrs_alpha = Var<S>::leaf(Tensor<S>::full({codebook::kBands}, S(1)), true);
            if (cfg.arch.stream == config::Stream::Spectrum)
                spec_proj = Conv2d<S>(codebook::kBands, c, 1, rng);
            else if (!t.cg_msa)
                fusion = Conv2d<S>(c + codebook::kBands, c, 1, rng);
        }
        if (cfg.saformer_stages()) {
            saformer::SaformerToggles st{t.dst, t.cg_msa, t.cc_ffn,
                                         cfg.arch.shared_region_params};
            for (int b = 0; b < cfg.arch.blocks; ++b)
                sa_blocks.emplace_back(c, codebook::kBands, cfg.arch.heads, st, rng);
        } else {
            for (int b = 0; b < cfg.arch.blocks; ++b) res_blocks.emplace_back(c, rng);
        }
        dec1 = Conv2d<S>(c, c, 3, rng);
        dec2 = Conv2d<S>(c, 3, 3, rng);
        // Damped output projection: with the global residual the untrained
        // model starts close to the identity mapping.
        dec2.w.mutable_val().array() *= S(0.1);
    }

    // Installs the pre-trained spectral prior and freezes it.
    void load_prior(codebook::CodebookModel<S> p) {
        check_config(p.partitions == cfg.vq_partitions() &&
                         p.k == cfg.vq_codes_per_partition() && p.n_z == cfg.arch.latent_dim,
                     "codebook prior does not match the model configuration");
        prior = std::move(p);
        NamedParams<S> frozen;
        prior.collect(frozen, "prior");
        for (auto& [name, v] : frozen) v.node()->requires_grad = false;
        prior_loaded = true;
    }

    ForwardResult<S> forward(const Var<S>& input) const {
        check(input.val().rank() == 4 && input.val().dim(1) == 3,
              "removal forward: (N, 3, H, W) input required");
        const auto t = cfg.effective_toggles();
        const int h = input.val().dim(2), w = input.val().dim(3);
        const int n = input.val().dim(0);
        ForwardResult<S> out;

        Var<S> features = enc2(gelu(enc1(input)));

        Var<S> spectrum;
        if (cfg.spectrum_active()) {
            if (!prior_loaded)
                throw PriorUnavailable(
                    "spectral prior requested but no codebook checkpoint is loaded");
            auto q = codebook::quantize_straight_through(adapter(features), prior.book);
            spectrum = prior.decode(q.st);
            out.code_indices = std::move(q.raw.indices);
        }

        out.order = t.sss ? refine::sort_permutations(spectrum.val())
                          : refine::identity_perms(n, h, w);
        Var<S> x = apply_permutation(features, out.order, refine::Direction::Forward);

        Var<S> spectrum_sorted;
        if (cfg.spectrum_active()) {
            spectrum_sorted = apply_permutation(spectrum, out.order, refine::Direction::Forward);
            if (t.sdrs) {
                auto refined = refine::sdrs(spectrum_sorted, sdrs_alpha,
                                            cfg.arch.normalize_region_sums);
                spectrum_sorted = refined.refined;
                out.sdrs_weights = refined.weights.val();
                out.sdrs_differences = refined.differences.val();
            }
            if (cfg.arch.stream == config::Stream::Spectrum)
                x = spec_proj(spectrum_sorted);
            else if (!t.cg_msa)
                x = fusion(concat_channels(x, spectrum_sorted));
        }

        if (!sa_blocks.empty()) {
            for (const auto& block : sa_blocks)
                x = block(Sorted<S>{x, out.order}, Sorted<S>{spectrum_sorted, out.order});
        } else {
            for (const auto& block : res_blocks) x = block(x);
        }

        Var<S> natural = apply_permutation(x, out.order, refine::Direction::Inverse);
        out.restored = add(input, dec2(gelu(dec1(natural))));
        return out;
    }

    // Inference entry point: clamped to [0, 1].
    Tensor<S> infer(const Tensor<S>& input) const {
        ForwardResult<S> r = forward(Var<S>::leaf(input));
        Tensor<S> y = r.restored.val();
        for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::min(S(1), std::max(S(0), y[i]));
        return y;
    }

    void collect_trainable(NamedParams<S>& out) const {
        const auto t = cfg.effective_toggles();
        enc1.collect(out, "removal.enc1");
        enc2.collect(out, "removal.enc2");
        if (cfg.spectrum_active()) {
            adapter.collect(out, "removal.adapter");
            if (t.sdrs) out.emplace_back("removal.sdrs_alpha", sdrs_alpha);
            if (cfg.arch.stream == config::Stream::Spectrum)
                spec_proj.collect(out, "removal.spec_proj");
            else if (!t.cg_msa)
                fusion.collect(out, "removal.fusion");
        }
        for (size_t b = 0; b < sa_blocks.size(); ++b)
            sa_blocks[b].collect(out, "removal.block" + std::to_string(b));
        for (size_t b = 0; b < res_blocks.size(); ++b)
            res_blocks[b].collect(out, "removal.block" + std::to_string(b));
        dec1.collect(out, "removal.dec1");
        dec2.collect(out, "removal.dec2");
    }

    void collect_frozen(NamedParams<S>& out) const {
        if (prior_loaded) prior.collect(out, "prior");
    }
};

// ---- losses ----

namespace detail {

// The Gaussian window is separable; two 1-D depthwise passes replace the
// 121-tap kernel.
template <class S>
struct SsimKernels {
    Var<S> col, row;  // (C, 1, 11, 1) and (C, 1, 1, 11)
};

template <class S>
SsimKernels<S> ssim_kernels(int channels) {
    double win[11];
    double sum = 0;
    for (int i = 0; i < 11; ++i) {
        const double d = (i - 5) / 1.5;
        win[i] = std::exp(-0.5 * d * d);
        sum += win[i];
    }
    Tensor<S> col({channels, 1, 11, 1});
    Tensor<S> row({channels, 1, 1, 11});
    for (int c = 0; c < channels; ++c)
        for (int i = 0; i < 11; ++i) {
            col.at(c, 0, i, 0) = static_cast<S>(win[i] / sum);
            row[static_cast<int64_t>(c) * 11 + i] = static_cast<S>(win[i] / sum);
        }
    return {Var<S>::leaf(std::move(col)), Var<S>::leaf(std::move(row))};
}

template <class S>
Var<S> ssim_blur(const Var<S>& x, const SsimKernels<S>& k) {
    return depthwise_conv2d(depthwise_conv2d(x, k.row, Var<S>()), k.col, Var<S>());
}

}  // namespace detail

// Differentiable SSIM, averaged over the window centers that stay clear of
// the zero padding; matches the valid-window metric definition.
template <class S>
Var<S> ssim_loss(const Var<S>& a, const Var<S>& b) {
    const auto& av = a.val();
    check(av.same_shape(b.val()), "ssim_loss: shape mismatch");
    const int n = av.dim(0), c = av.dim(1), h = av.dim(2), w = av.dim(3);
    check(h >= 11 && w >= 11, "ssim_loss: image smaller than the 11x11 window");
    detail::SsimKernels<S> kernel = detail::ssim_kernels<S>(c);
    const S c1 = S(0.01 * 0.01), c2 = S(0.03 * 0.03);

    Var<S> mu_a = detail::ssim_blur(a, kernel);
    Var<S> mu_b = detail::ssim_blur(b, kernel);
    Var<S> s_aa = sub(detail::ssim_blur(mul(a, a), kernel), mul(mu_a, mu_a));
    Var<S> s_bb = sub(detail::ssim_blur(mul(b, b), kernel), mul(mu_b, mu_b));
    Var<S> s_ab = sub(detail::ssim_blur(mul(a, b), kernel), mul(mu_a, mu_b));

    Var<S> num = mul(add_scalar(scale(mul(mu_a, mu_b), S(2)), c1),
                     add_scalar(scale(s_ab, S(2)), c2));
    Var<S> den = mul(add_scalar(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), c1),
                     add_scalar(add(s_aa, s_bb), c2));
    Var<S> ssim_map = div(num, den);

    Tensor<S> interior({n, c, h, w});
    for (int bi = 0; bi < n; ++bi)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 5; y < h - 5; ++y)
                for (int x = 5; x < w - 5; ++x) interior.at(bi, ci, y, x) = S(1);
    const S inv_count = S(1) / static_cast<S>(static_cast<int64_t>(n) * c * (h - 10) * (w - 10));
    return scale(sum_all(mul_const(ssim_map, interior)), inv_count);
}

template <class S>
struct RemovalLoss {
    Var<S> total;
    S l1 = 0, ssim_term = 0;
};

// L1 + 0.2 * (1 - SSIM).
template <class S>
RemovalLoss<S> removal_loss(const Var<S>& restored, const Var<S>& target) {
    check(restored.val().same_shape(target.val()), "removal_loss: shape mismatch");
    RemovalLoss<S> out;
    Var<S> l1 = mean_all(abs_op(sub(restored, target)));
    Var<S> ssim_term = add_scalar(scale(ssim_loss(restored, target), S(-1)), S(1));
    out.total = add(l1, scale(ssim_term, S(0.2)));
    out.l1 = l1.val()[0];
    out.ssim_term = ssim_term.val()[0];
    return out;
}

}  // namespace srr::pipeline
