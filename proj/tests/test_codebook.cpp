#include <doctest.h>

#include <cstring>

#include "srr/codebook.hpp"
#include "srr/synth.hpp"

using namespace srr;
using namespace srr::codebook;

namespace {

// Exhaustive nearest-neighbour oracle: direct L2 scan over every code of
// the queried partition, lowest index wins ties.
template <class S>
int scan_nearest(const Tensor<S>& zhat, int n, int64_t pixel, const Tensor<S>& codes, int p) {
    const int n_z = zhat.dim(1), K = codes.dim(1);
    const int64_t hw = static_cast<int64_t>(zhat.dim(2)) * zhat.dim(3);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
        double d = 0;
        for (int dch = 0; dch < n_z; ++dch) {
            const double diff =
                static_cast<double>(zhat[(static_cast<int64_t>(n) * n_z + dch) * hw + pixel]) -
                static_cast<double>(codes.at(p, k, dch));
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

Tensor<float> batch_of(const Tensor<float>& chw) {
    Tensor<float> out({1, chw.dim(0), chw.dim(1), chw.dim(2)});
    std::copy_n(chw.data(), chw.numel(), out.data());
    return out;
}

}  // namespace

TEST_CASE("band_quantize: singleton partitions always pick index 0") {
    Rng rng(50);
    Tensor<double> zhat = random_normal<double>({1, 4, 3, 3}, rng);
    Tensor<double> codes = random_normal<double>({5, 1, 4}, rng);
    auto qr = band_quantize(zhat, codes);
    for (int64_t i = 0; i < qr.indices.numel(); ++i) CHECK(qr.indices[i] == 0);
}

TEST_CASE("band_quantize: exact match reports its index with distance zero") {
    Rng rng(51);
    Tensor<double> codes = random_normal<double>({8, 6, 4}, rng);
    Tensor<double> zhat = random_normal<double>({1, 4, 2, 2}, rng);
    // Plant code 3 of partition 7 at pixel (1, 0).
    for (int d = 0; d < 4; ++d) zhat.at(0, d, 1, 0) = codes.at(7, 3, d);
    auto qr = band_quantize(zhat, codes);
    CHECK(qr.indices.at(0, 7, 1, 0) == 3);
    CHECK(qr.distances.at(0, 7, 1, 0) == 0.0);
}

TEST_CASE("band_quantize: matches the exhaustive scan oracle") {
    Rng rng(52);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<double> zhat = random_normal<double>({1, 4, 2, 2}, rng);
        Tensor<double> codes = random_normal<double>({31, 8, 4}, rng);
        auto qr = band_quantize(zhat, codes);
        for (int p = 0; p < 31; ++p)
            for (int64_t pix = 0; pix < 4; ++pix)
                CHECK(qr.indices[(static_cast<int64_t>(p)) * 4 + pix] ==
                      scan_nearest(zhat, 0, pix, codes, p));
    }
}

TEST_CASE("band_quantize: duplicate codes resolve to the lowest index") {
    Tensor<double> codes({1, 4, 2});
    // Codes 1 and 2 identical; both nearer than 0 and 3.
    codes.at(0, 0, 0) = 5.0;
    codes.at(0, 1, 0) = 1.0;
    codes.at(0, 2, 0) = 1.0;
    codes.at(0, 3, 0) = -7.0;
    Tensor<double> zhat({1, 2, 1, 1});
    zhat.at(0, 0, 0, 0) = 1.2;
    auto qr = band_quantize(zhat, codes);
    CHECK(qr.indices[0] == 1);
}

TEST_CASE("band_quantize: indices stay inside the queried partition") {
    Rng rng(53);
    Tensor<double> zhat = random_normal<double>({2, 3, 4, 4}, rng);
    Tensor<double> codes = random_normal<double>({31, 5, 3}, rng);
    auto qr = band_quantize(zhat, codes);
    for (int64_t i = 0; i < qr.indices.numel(); ++i) {
        CHECK(qr.indices[i] >= 0);
        CHECK(qr.indices[i] < 5);
    }
    // The quantized block of band p holds vectors from partition p only.
    const int64_t hw = 16;
    for (int p = 0; p < 31; ++p)
        for (int64_t pix = 0; pix < hw; ++pix) {
            const int32_t k = qr.indices[(static_cast<int64_t>(p)) * hw + pix];
            for (int d = 0; d < 3; ++d)
                CHECK(qr.quantized[(static_cast<int64_t>(p * 3 + d)) * hw + pix] ==
                      codes.at(p, k, d));
        }
}

TEST_CASE("band_quantize: idempotent on tensors composed of code vectors") {
    Rng rng(54);
    Tensor<double> codes = random_normal<double>({3, 6, 4}, rng);
    Tensor<double> zhat({1, 4, 2, 3});
    std::vector<int> planted(6);
    for (int64_t pix = 0; pix < 6; ++pix) {
        const int k = static_cast<int>(rng.index(6));
        planted[static_cast<size_t>(pix)] = k;
        for (int d = 0; d < 4; ++d) zhat[static_cast<int64_t>(d) * 6 + pix] = codes.at(0, k, d);
    }
    auto qr = band_quantize(zhat, codes);
    for (int64_t pix = 0; pix < 6; ++pix) {
        // Band 0 returns the planted vectors unchanged (distance may tie in
        // other partitions; band 0 contains the exact match).
        CHECK(qr.distances[pix] == 0.0);
        for (int d = 0; d < 4; ++d)
            CHECK(qr.quantized[static_cast<int64_t>(d) * 6 + pix] ==
                  codes.at(0, planted[static_cast<size_t>(pix)], d));
    }
}

TEST_CASE("band_quantize rejects empty or mismatched configurations") {
    Tensor<double> zhat({1, 4, 2, 2});
    CHECK_THROWS_AS(band_quantize(zhat, Tensor<double>({2, 3, 5})), InvalidInput);
}

TEST_CASE("vanilla flat partition selects differently from band-wise") {
    Rng rng(55);
    const int K = 6, n_z = 4, P = 31;
    Tensor<double> band_codes = random_normal<double>({P, K, n_z}, rng);
    Tensor<double> flat_codes = band_codes.reshaped({1, P * K, n_z});
    Tensor<double> zhat = random_normal<double>({1, n_z, 3, 3}, rng);
    auto band_qr = band_quantize(zhat, band_codes);
    auto flat_qr = band_quantize(zhat, flat_codes);
    // The flat quantizer picks the global nearest; at least one band-wise
    // block must differ from it on generic inputs.
    bool any_diff = false;
    for (int p = 0; p < P && !any_diff; ++p)
        for (int64_t i = 0; i < 9 && !any_diff; ++i)
            if (band_qr.indices[static_cast<int64_t>(p) * 9 + i] % K !=
                flat_qr.indices[i] % K)
                any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("straight-through: quantized gradient maps to the encoder as identity") {
    Rng rng(56);
    SpectralCodebook<double> book(3, 5, 4);
    book.codes.mutable_val() = random_normal<double>({3, 5, 4}, rng);
    auto zhat = Var<double>::leaf(random_normal<double>({1, 4, 2, 2}, rng), true);
    auto q = quantize_straight_through(zhat, book);
    Tensor<double> w = random_normal<double>(q.st.val().shape(), rng);
    backward(dot_const(q.st, w));
    // d(loss)/d(zhat) must be the per-band sum of the projection weights.
    for (int d = 0; d < 4; ++d)
        for (int64_t pix = 0; pix < 4; ++pix) {
            double expect = 0;
            for (int p = 0; p < 3; ++p) expect += w[(static_cast<int64_t>(p) * 4 + d) * 4 + pix];
            CHECK(zhat.grad()[static_cast<int64_t>(d) * 4 + pix] == doctest::Approx(expect));
        }
}

TEST_CASE("commitment term vanishes when encoder outputs equal the codes") {
    Rng rng(57);
    SpectralCodebook<double> book(2, 4, 3);
    book.codes.mutable_val() = random_normal<double>({2, 4, 3}, rng);
    Tensor<double> zv({1, 3, 2, 2});
    for (int64_t pix = 0; pix < 4; ++pix)
        for (int d = 0; d < 3; ++d) zv[static_cast<int64_t>(d) * 4 + pix] = book.codes.val().at(0, 2, d);
    // Partition 0 matches exactly; the commitment residual against partition
    // 0 blocks must be zero.
    auto q = quantize_straight_through(Var<double>::leaf(zv), book);
    for (int64_t pix = 0; pix < 4; ++pix) {
        CHECK(q.raw.distances[pix] == 0.0);
        for (int d = 0; d < 3; ++d)
            CHECK(q.raw.quantized[static_cast<int64_t>(d) * 4 + pix] == zv[static_cast<int64_t>(d) * 4 + pix]);
    }
}

TEST_CASE("codebook encoder: zero input and zero bias give zero features") {
    Rng rng(58);
    CodebookModel<double> model(4, 3, 6, 8, rng);
    auto z = model.encode(Var<double>::leaf(Tensor<double>({1, 3, 8, 8})));
    for (int64_t i = 0; i < z.val().numel(); ++i) CHECK(z.val()[i] == 0.0);
}

TEST_CASE("codebook encoder: output channels echo the configured latent dim") {
    Rng rng(59);
    CodebookModel<double> model(31, 4, 64, 8, rng);
    auto z = model.encode(Var<double>::leaf(Tensor<double>({1, 3, 8, 8})));
    CHECK(z.val().dim(1) == 64);
    CHECK(z.val().dim(2) == 8);
    CHECK(z.val().dim(3) == 8);
}

TEST_CASE("codebook reconstruction: 31 bands, deterministic") {
    Rng rng(60);
    CodebookModel<double> model(31, 4, 6, 8, rng);
    model.book.codes.mutable_val() = random_normal<double>({31, 4, 6}, rng);
    Tensor<double> rgb = random_uniform<double>({1, 3, 8, 8}, rng);
    auto s1 = model.reconstruct(Var<double>::leaf(rgb));
    auto s2 = model.reconstruct(Var<double>::leaf(rgb));
    CHECK(s1.val().dim(1) == 31);
    CHECK(std::memcmp(s1.val().data(), s2.val().data(),
                      sizeof(double) * static_cast<size_t>(s1.val().numel())) == 0);
}

TEST_CASE("kmeans: K samples and K clusters reproduce the samples") {
    Rng rng(61);
    Tensor<double> feats = random_normal<double>({5, 3}, rng);
    Tensor<double> centroids = kmeans_partition(feats, 5, 99);
    // Every sample appears exactly once among the centroids.
    std::vector<bool> used(5, false);
    for (int c = 0; c < 5; ++c) {
        bool found = false;
        for (int i = 0; i < 5 && !found; ++i) {
            if (used[static_cast<size_t>(i)]) continue;
            bool eq = true;
            for (int j = 0; j < 3; ++j)
                if (centroids.at(c, j) != feats.at(i, j)) eq = false;
            if (eq) {
                used[static_cast<size_t>(i)] = true;
                found = true;
            }
        }
        CHECK(found);
    }
}

TEST_CASE("kmeans: two well-separated blobs land on the blob means") {
    Rng rng(62);
    const int per = 60;
    Tensor<double> feats({2 * per, 2});
    for (int i = 0; i < per; ++i) {
        feats.at(i, 0) = rng.normal(-3.0, 0.05);
        feats.at(i, 1) = rng.normal(0.0, 0.05);
        feats.at(per + i, 0) = rng.normal(3.0, 0.05);
        feats.at(per + i, 1) = rng.normal(1.0, 0.05);
    }
    Tensor<double> centroids = kmeans_partition(feats, 2, 7);
    auto near = [&](double x, double y) {
        for (int c = 0; c < 2; ++c)
            if (std::abs(centroids.at(c, 0) - x) < 0.1 && std::abs(centroids.at(c, 1) - y) < 0.1)
                return true;
        return false;
    };
    CHECK(near(-3.0, 0.0));
    CHECK(near(3.0, 1.0));
}

TEST_CASE("kmeans: seeded runs are byte-identical; short sample sets fall back") {
    Rng rng(63);
    Tensor<double> feats = random_normal<double>({40, 4}, rng);
    Tensor<double> a = kmeans_init(feats, 3, 8, 1234);
    Tensor<double> b = kmeans_init(feats, 3, 8, 1234);
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0);

    std::ostringstream log;
    Tensor<double> few = random_normal<double>({3, 4}, rng);
    Tensor<double> c = kmeans_partition(few, 8, 5, 20, &log);
    CHECK(c.dim(0) == 8);
    CHECK(log.str().find("duplicating") != std::string::npos);
}

TEST_CASE("usage histogram: forced usage and conservation") {
    Rng rng(64);
    Tensor<double> zhat = random_normal<double>({1, 3, 4, 5}, rng);
    Tensor<double> codes = random_normal<double>({31, 1, 3}, rng);
    auto qr = band_quantize(zhat, codes);
    UsageHistogram hist(31, 1);
    hist.accumulate(qr.indices);
    for (int p = 0; p < 31; ++p) CHECK(hist.counts[static_cast<size_t>(p)] == 20);
    CHECK(hist.total() == 31 * 20);

    Tensor<double> codes8 = random_normal<double>({31, 8, 3}, rng);
    UsageHistogram hist2(31, 8);
    for (int img = 0; img < 3; ++img) {
        Tensor<double> z = random_normal<double>({1, 3, 4, 5}, rng);
        hist2.accumulate(band_quantize(z, codes8).indices);
    }
    CHECK(hist2.total() == 31 * 20 * 3);
}

TEST_CASE("usage histograms: distinct selections give positive symmetrized KL") {
    UsageHistogram a(2, 4), b(2, 4);
    a.counts = {10, 0, 0, 0, 0, 10, 0, 0};
    b.counts = {0, 0, 10, 0, 0, 0, 0, 10};
    CHECK(symmetrized_kl(a, b) > 0.0);
    CHECK(symmetrized_kl(a, a) == doctest::Approx(0.0));
}

TEST_CASE("codebook smoke training: loss decreases on a small synthetic set") {
    Rng rng(65);
    CodebookModel<float> model(31, 16, 8, 8, rng);

    synth::DatasetParams dp;
    dp.samples = 16;
    dp.height = 16;
    dp.width = 16;
    auto pairs = synth::generate_dataset(dp, 77);

    // Initialize codes from encoder features over a few samples.
    {
        std::vector<float> feats;
        for (int i = 0; i < 4; ++i) {
            auto z = model.encode(Var<float>::leaf(batch_of(pairs[static_cast<size_t>(i)].clean_rgb)));
            const int64_t hw = 256;
            for (int64_t p = 0; p < hw; ++p)
                for (int d = 0; d < 8; ++d) feats.push_back(z.val()[static_cast<int64_t>(d) * hw + p]);
        }
        Tensor<float> fm({static_cast<int>(feats.size() / 8), 8});
        std::copy(feats.begin(), feats.end(), fm.data());
        model.book.codes.mutable_val() = kmeans_init(fm, 31, 16, 42);
    }

    NamedParams<float> params;
    model.collect(params, "cb");
    Adam<float> opt;
    opt.lr = 1e-3;
    opt.init(params);

    Rng batch_rng(5);
    double first = 0, last = 0;
    for (int step = 0; step < 200; ++step) {
        const auto& pair = pairs[static_cast<size_t>(batch_rng.index(16))];
        Tensor<float> rgb = batch_of(pair.clean_rgb);
        Tensor<float> cube = batch_of(pair.t_cube);
        auto losses = codebook_train_step(model, params, opt, rgb, cube);
        if (step < 20) first += losses.total;
        if (step >= 180) last += losses.total;
    }
    CHECK(last < first);
}
