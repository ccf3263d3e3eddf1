#pragma once

#include <iostream>

#include "srr/nn.hpp"
#include "srr/optimizer.hpp"

namespace srr::codebook {

constexpr int kBands = 31;

// The quantization dictionary: `partitions` equal blocks of K vectors of
// dimension n_z. Band-wise operation uses 31 partitions, one per visible
// band (400-410nm, 410-420nm, ...); the vanilla ablation collapses them
// into a single flat partition.
template <class S>
struct SpectralCodebook {
    Var<S> codes;  // (partitions, K, n_z)

    SpectralCodebook() = default;
    SpectralCodebook(int partitions, int k, int n_z, bool trainable = true) {
        check_config(partitions >= 1 && k >= 1 && n_z >= 1, "codebook: empty partition");
        codes = Var<S>::leaf(Tensor<S>({partitions, k, n_z}), trainable);
    }

    int partitions() const { return codes.val().dim(0); }
    int codes_per_partition() const { return codes.val().dim(1); }
    int latent_dim() const { return codes.val().dim(2); }

    // Wavelength label of partition i under the band-wise layout.
    static std::pair<int, int> band_range_nm(int i) { return {400 + 10 * i, 410 + 10 * i}; }
};

template <class S>
struct QuantizeResult {
    Tensor<S> quantized;       // (N, partitions * n_z, H, W), selected code vectors
    Tensor<int32_t> indices;   // (N, partitions, H, W), in [0, K)
    Tensor<S> distances;       // (N, partitions, H, W), L2 to the selected code
};

// Nearest-neighbour quantization of every pixel feature against each
// partition, ties broken toward the lowest index. Scores come from the
// expanded form |g|^2 - 2 g.x per partition (one GEMM); the reported
// distance is recomputed directly for the winner so an exact feature/code
// match reports exactly zero.
template <class S>
QuantizeResult<S> band_quantize(const Tensor<S>& zhat, const Tensor<S>& codes) {
    check(zhat.rank() == 4, "band_quantize: rank-4 features required");
    check(codes.rank() == 3, "band_quantize: rank-3 codebook required");
    check_config(codes.dim(0) >= 1 && codes.dim(1) >= 1, "band_quantize: empty partition");
    check(zhat.dim(1) == codes.dim(2), "band_quantize: feature dim must equal code dim");
    const int N = zhat.dim(0), n_z = zhat.dim(1), H = zhat.dim(2), W = zhat.dim(3);
    const int P = codes.dim(0), K = codes.dim(1);
    const int64_t hw = static_cast<int64_t>(H) * W;

    QuantizeResult<S> out;
    out.quantized = Tensor<S>({N, P * n_z, H, W});
    out.indices = Tensor<int32_t>({N, P, H, W});
    out.distances = Tensor<S>({N, P, H, W});

    std::vector<S> code_norms(static_cast<size_t>(P) * K);
    for (int p = 0; p < P; ++p)
        for (int k = 0; k < K; ++k) {
            const S* g = codes.data() + (static_cast<int64_t>(p) * K + k) * n_z;
            S s = 0;
            for (int d = 0; d < n_z; ++d) s += g[d] * g[d];
            code_norms[static_cast<size_t>(p) * K + k] = s;
        }

    parallel_for(N, [&](int n) {
        Eigen::Map<const RowMat<S>> x(zhat.data() + static_cast<int64_t>(n) * n_z * hw, n_z, hw);
        RowMat<S> dots(K, hw);
        for (int p = 0; p < P; ++p) {
            Eigen::Map<const RowMat<S>> g(codes.data() + static_cast<int64_t>(p) * K * n_z, K, n_z);
            dots.noalias() = g * x;
            int32_t* idx = out.indices.data() + (static_cast<int64_t>(n) * P + p) * hw;
            S* dist = out.distances.data() + (static_cast<int64_t>(n) * P + p) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                int best = 0;
                S best_score = code_norms[static_cast<size_t>(p) * K] - S(2) * dots(0, i);
                for (int k = 1; k < K; ++k) {
                    const S score = code_norms[static_cast<size_t>(p) * K + k] - S(2) * dots(k, i);
                    if (score < best_score) {
                        best_score = score;
                        best = k;
                    }
                }
                idx[i] = best;
                const S* gv = codes.data() + (static_cast<int64_t>(p) * K + best) * n_z;
                S d2 = 0;
                for (int d = 0; d < n_z; ++d) {
                    const S diff = zhat[(static_cast<int64_t>(n) * n_z + d) * hw + i] - gv[d];
                    d2 += diff * diff;
                }
                dist[i] = std::sqrt(d2);
                for (int d = 0; d < n_z; ++d)
                    out.quantized[(static_cast<int64_t>(n) * P * n_z + p * n_z + d) * hw + i] =
                        gv[d];
            }
        }
    });
    return out;
}

// The selected code vectors as a differentiable function of the codebook:
// backward scatter-adds into the code gradients. Used by the codebook loss.
template <class S>
Var<S> gather_codes(const Var<S>& codes, const Tensor<int32_t>& indices, int h, int w) {
    const int P = codes.val().dim(0), n_z = codes.val().dim(2);
    const int N = indices.dim(0);
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor<S> y = Tensor<S>::uninit({N, P * n_z, h, w});
    for (int n = 0; n < N; ++n)
        for (int p = 0; p < P; ++p) {
            const int32_t* idx = indices.data() + (static_cast<int64_t>(n) * P + p) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                const S* g = codes.val().data() +
                             (static_cast<int64_t>(p) * codes.val().dim(1) + idx[i]) * n_z;
                for (int d = 0; d < n_z; ++d)
                    y[(static_cast<int64_t>(n) * P * n_z + p * n_z + d) * hw + i] = g[d];
            }
        }
    auto cn = codes.node();
    Tensor<int32_t> idx_copy = indices;
    return Var<S>::op(std::move(y), {codes}, [cn, idx_copy, N, P, n_z, hw](Node<S>& node) {
        if (!cn->requires_grad) return;
        const int K = cn->value.dim(1);
        Tensor<S>& g = cn->grad_ref();
        for (int n = 0; n < N; ++n)
            for (int p = 0; p < P; ++p) {
                const int32_t* idx = idx_copy.data() + (static_cast<int64_t>(n) * P + p) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    S* gr = g.data() + (static_cast<int64_t>(p) * K + idx[i]) * n_z;
                    for (int d = 0; d < n_z; ++d)
                        gr[d] += node.grad[(static_cast<int64_t>(n) * P * n_z + p * n_z + d) * hw + i];
                }
            }
    });
}

template <class S>
struct QuantizeVars {
    Var<S> st;             // straight-through decoder input (value = quantized)
    Var<S> code_vectors;   // differentiable w.r.t. the codebook
    QuantizeResult<S> raw;
};

template <class S>
QuantizeVars<S> quantize_straight_through(const Var<S>& zhat, const SpectralCodebook<S>& book) {
    QuantizeVars<S> out;
    out.raw = band_quantize(zhat.val(), book.codes.val());
    Var<S> tiled = repeat_channels(zhat, book.partitions());
    out.st = straight_through(tiled, out.raw.quantized);
    out.code_vectors = gather_codes(book.codes, out.raw.indices, zhat.val().dim(2),
                                    zhat.val().dim(3));
    return out;
}

// ---- k-means initialization ----

// Seeded Lloyd iterations over encoder outputs. Each partition runs with its
// own derived seed so partitions land in different local optima of the same
// feature distribution. Empty clusters re-seed from the farthest point;
// fewer samples than K falls back to duplicate-with-jitter (logged).
template <class S>
Tensor<S> kmeans_partition(const Tensor<S>& features, int k, uint64_t seed, int iters = 20,
                           std::ostream* log = nullptr) {
    check(features.rank() == 2, "kmeans: (samples, dim) features required");
    const int m = features.dim(0), d = features.dim(1);
    Rng rng(seed);
    Tensor<S> centroids({k, d});

    if (m < k) {
        if (log) *log << "kmeans: only " << m << " samples for " << k
                      << " clusters; duplicating with jitter\n";
        for (int c = 0; c < k; ++c) {
            const int src = c % m;
            for (int j = 0; j < d; ++j)
                centroids.at(c, j) =
                    features.at(src, j) + static_cast<S>(rng.normal(0.0, 1e-3));
        }
        return centroids;
    }

    // Distinct random samples as initial centroids.
    std::vector<int> pick(static_cast<size_t>(m));
    std::iota(pick.begin(), pick.end(), 0);
    for (int i = 0; i < k; ++i)
        std::swap(pick[static_cast<size_t>(i)],
                  pick[static_cast<size_t>(i + rng.index(m - i))]);
    for (int c = 0; c < k; ++c)
        for (int j = 0; j < d; ++j) centroids.at(c, j) = features.at(pick[static_cast<size_t>(c)], j);

    std::vector<int> assign(static_cast<size_t>(m));
    std::vector<double> best_dist(static_cast<size_t>(m));
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < m; ++i) {
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                double dist = 0;
                for (int j = 0; j < d; ++j) {
                    const double diff = static_cast<double>(features.at(i, j)) -
                                        static_cast<double>(centroids.at(c, j));
                    dist += diff * diff;
                }
                if (dist < bd) {
                    bd = dist;
                    best = c;
                }
            }
            assign[static_cast<size_t>(i)] = best;
            best_dist[static_cast<size_t>(i)] = bd;
        }
        std::vector<int> count(static_cast<size_t>(k), 0);
        for (int i = 0; i < m; ++i) ++count[static_cast<size_t>(assign[static_cast<size_t>(i)])];
        for (int c = 0; c < k; ++c) {
            if (count[static_cast<size_t>(c)] > 0) continue;
            // Re-seed from the farthest point.
            int far = 0;
            for (int i = 1; i < m; ++i)
                if (best_dist[static_cast<size_t>(i)] > best_dist[static_cast<size_t>(far)]) far = i;
            --count[static_cast<size_t>(assign[static_cast<size_t>(far)])];
            assign[static_cast<size_t>(far)] = c;
            count[static_cast<size_t>(c)] = 1;
            best_dist[static_cast<size_t>(far)] = 0.0;
        }
        std::vector<double> sums(static_cast<size_t>(k) * d, 0.0);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j)
                sums[static_cast<size_t>(assign[static_cast<size_t>(i)]) * d + j] +=
                    static_cast<double>(features.at(i, j));
        for (int c = 0; c < k; ++c)
            for (int j = 0; j < d; ++j)
                centroids.at(c, j) =
                    static_cast<S>(sums[static_cast<size_t>(c) * d + j] / count[static_cast<size_t>(c)]);
    }
    return centroids;
}

template <class S>
Tensor<S> kmeans_init(const Tensor<S>& features, int partitions, int k, uint64_t seed,
                      std::ostream* log = nullptr) {
    const int d = features.dim(1);
    Tensor<S> codes({partitions, k, d});
    for (int p = 0; p < partitions; ++p) {
        Tensor<S> centroids =
            kmeans_partition(features, k, derive_seed(seed, static_cast<uint64_t>(p), 0xC), 20, log);
        std::copy_n(centroids.data(), static_cast<int64_t>(k) * d,
                    codes.data() + static_cast<int64_t>(p) * k * d);
    }
    return codes;
}

// ---- usage analytics ----

struct UsageHistogram {
    int partitions = 0, codes = 0;
    std::vector<int64_t> counts;  // (partitions * codes)

    UsageHistogram() = default;
    UsageHistogram(int p, int k) : partitions(p), codes(k), counts(static_cast<size_t>(p) * k, 0) {}

    void accumulate(const Tensor<int32_t>& indices) {
        check(indices.rank() == 4 && indices.dim(1) == partitions,
              "usage histogram: partition count mismatch");
        const int64_t hw = static_cast<int64_t>(indices.dim(2)) * indices.dim(3);
        for (int n = 0; n < indices.dim(0); ++n)
            for (int p = 0; p < partitions; ++p) {
                const int32_t* idx = indices.data() + (static_cast<int64_t>(n) * partitions + p) * hw;
                for (int64_t i = 0; i < hw; ++i)
                    ++counts[static_cast<size_t>(p) * codes + idx[i]];
            }
    }

    int64_t total() const {
        int64_t t = 0;
        for (int64_t c : counts) t += c;
        return t;
    }
};

// Symmetrized KL divergence between two usage distributions with Jeffreys
// (+0.5) smoothing so empty bins stay finite.
inline double symmetrized_kl(const UsageHistogram& a, const UsageHistogram& b) {
    check(a.counts.size() == b.counts.size() && !a.counts.empty(),
          "symmetrized_kl: histogram shape mismatch");
    const double alpha = 0.5;
    const double za = static_cast<double>(a.total()) + alpha * static_cast<double>(a.counts.size());
    const double zb = static_cast<double>(b.total()) + alpha * static_cast<double>(b.counts.size());
    double kl_ab = 0, kl_ba = 0;
    for (size_t i = 0; i < a.counts.size(); ++i) {
        const double pa = (static_cast<double>(a.counts[i]) + alpha) / za;
        const double pb = (static_cast<double>(b.counts[i]) + alpha) / zb;
        kl_ab += pa * std::log(pa / pb);
        kl_ba += pb * std::log(pb / pa);
    }
    return kl_ab + kl_ba;
}

// ---- encoder / decoder / training ----

// Four-layer stride-1 conv stacks around the quantizer: E_s maps RGB to the
// n_z latent grid, D_s maps the concatenated band codes back to 31 bands.
template <class S>
struct CodebookModel {
    int hidden = 32, n_z = 64, partitions = kBands, k = 256;
    Conv2d<S> e1, e2, e3, e4;
    Conv2d<S> d1, d2, d3, d4;
    SpectralCodebook<S> book;

    CodebookModel() = default;
    CodebookModel(int partitions_, int k_, int n_z_, int hidden_, Rng& rng)
        : hidden(hidden_), n_z(n_z_), partitions(partitions_), k(k_) {
        e1 = Conv2d<S>(3, hidden, 3, rng);
        e2 = Conv2d<S>(hidden, hidden, 3, rng);
        e3 = Conv2d<S>(hidden, hidden, 3, rng);
        e4 = Conv2d<S>(hidden, n_z, 3, rng);
        d1 = Conv2d<S>(partitions_ * n_z_, hidden, 1, rng);
        d2 = Conv2d<S>(hidden, hidden, 3, rng);
        d3 = Conv2d<S>(hidden, hidden, 3, rng);
        d4 = Conv2d<S>(hidden, kBands, 3, rng);
        book = SpectralCodebook<S>(partitions_, k_, n_z_);
    }

    Var<S> encode(const Var<S>& rgb) const {
        check(rgb.val().dim(1) == 3, "codebook encoder: RGB input required");
        return e4(gelu(e3(gelu(e2(gelu(e1(rgb)))))));
    }

    Var<S> decode(const Var<S>& zq) const { return d4(gelu(d3(gelu(d2(gelu(d1(zq))))))); }

    // S = D_s(q(E_s(x))): full reconstruction path for a (N, 3, H, W) input.
    Var<S> reconstruct(const Var<S>& rgb) const {
        auto q = quantize_straight_through(encode(rgb), book);
        return decode(q.st);
    }

    void collect(NamedParams<S>& out, const std::string& prefix) const {
        e1.collect(out, prefix + ".e1");
        e2.collect(out, prefix + ".e2");
        e3.collect(out, prefix + ".e3");
        e4.collect(out, prefix + ".e4");
        d1.collect(out, prefix + ".d1");
        d2.collect(out, prefix + ".d2");
        d3.collect(out, prefix + ".d3");
        d4.collect(out, prefix + ".d4");
        out.emplace_back(prefix + ".codes", book.codes);
    }
};

template <class S>
struct CodebookLosses {
    S total = 0, reconstruction = 0, vq = 0, commitment = 0;
};

// One optimizer step on a paired (RGB, spectral cube) batch: L1
// reconstruction plus the standard VQ codebook and commitment terms
// (commitment weight 0.25), straight-through gradients to the encoder.
template <class S>
CodebookLosses<S> codebook_train_step(CodebookModel<S>& model, const NamedParams<S>& params,
                                      Adam<S>& opt, const Tensor<S>& rgb, const Tensor<S>& cube,
                                      QuantizeResult<S>* qr_out = nullptr) {
    check(rgb.rank() == 4 && cube.rank() == 4, "codebook_train_step: rank-4 batch required");
    check(rgb.dim(2) == cube.dim(2) && rgb.dim(3) == cube.dim(3),
          "codebook_train_step: paired sample size mismatch");
    auto rgb_v = Var<S>::leaf(rgb);
    auto zhat = model.encode(rgb_v);
    auto q = quantize_straight_through(zhat, model.book);
    auto recon = model.decode(q.st);

    Var<S> l_rec = mean_all(abs_op(sub(recon, Var<S>::leaf(cube))));
    Var<S> tiled = repeat_channels(zhat, model.partitions);
    Var<S> l_vq = mean_all(square(sub(q.code_vectors, detach(tiled))));
    Var<S> l_commit = mean_all(square(sub(tiled, Var<S>::leaf(q.raw.quantized))));
    Var<S> total = add(l_rec, add(l_vq, scale(l_commit, S(0.25))));

    CodebookLosses<S> losses;
    losses.total = total.val()[0];
    losses.reconstruction = l_rec.val()[0];
    losses.vq = l_vq.val()[0];
    losses.commitment = l_commit.val()[0];
    if (!std::isfinite(static_cast<double>(losses.total)))
        throw Error("codebook training diverged: non-finite loss");

    backward(total);
    opt.step(params);
    if (qr_out) *qr_out = std::move(q.raw);
    return losses;
}

}  // namespace srr::codebook
