#include <doctest.h>

#include <cstring>
#include <thread>

#include "srr/grad_check.hpp"
#include "srr/saformer.hpp"

using namespace srr;
using namespace srr::saformer;
using refine::Direction;
using refine::Perms;
using refine::Sorted;

namespace {

template <class S>
TokenSet<S> leaf_tokens(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int batch,
                        int heads) {
    TokenSet<S> t;
    t.q = Var<S>::leaf(q);
    t.k = Var<S>::leaf(k);
    t.v = Var<S>::leaf(v);
    t.batch = batch;
    t.heads = heads;
    return t;
}

Tensor<double> int_valued(std::vector<int> shape, Rng& rng) {
    Tensor<double> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(rng.index(7)) - 3.0;
    return t;
}

}  // namespace

TEST_CASE("dst_tokenize: zero spectrum projects to zero queries in both regions") {
    Rng rng(70);
    DstRegionParams<double> tl(31, 8, 8, true, rng), br(31, 8, 8, true, rng);
    Perms perms = refine::identity_perms(1, 6, 6);
    Sorted<double> f{Var<double>::leaf(random_normal<double>({1, 8, 6, 6}, rng)), perms};
    Sorted<double> s{Var<double>::leaf(Tensor<double>({1, 31, 6, 6})), perms};
    auto out = dst_tokenize(f, s, tl, br, 2);
    for (int64_t i = 0; i < out.tl.q.val().numel(); ++i) CHECK(out.tl.q.val()[i] == 0.0);
    for (int64_t i = 0; i < out.br.q.val().numel(); ++i) CHECK(out.br.q.val()[i] == 0.0);
}

TEST_CASE("dst_tokenize: token shapes are (heads, m/heads, H*W)") {
    Rng rng(71);
    const int m = 64, heads = 4, h = 8, w = 8;
    DstRegionParams<double> tl(31, m, m, true, rng), br(31, m, m, true, rng);
    Perms perms = refine::identity_perms(1, h, w);
    Sorted<double> f{Var<double>::leaf(random_normal<double>({1, m, h, w}, rng)), perms};
    Sorted<double> s{Var<double>::leaf(random_normal<double>({1, 31, h, w}, rng)), perms};
    auto out = dst_tokenize(f, s, tl, br, heads);
    CHECK(out.tl.q.val().shape() == std::vector<int>{heads, m / heads, h * w});
    CHECK(out.br.k.val().shape() == std::vector<int>{heads, m / heads, h * w});
    CHECK(out.br.v.val().shape() == std::vector<int>{heads, m / heads, h * w});
}

TEST_CASE("dst_tokenize: tokenizing an already-masked tensor changes nothing") {
    Rng rng(72);
    DstRegionParams<double> params(31, 6, 6, true, rng);
    const DiagonalMask mask = DiagonalMask::make(5, 5);
    Perms perms = refine::identity_perms(1, 5, 5);
    Tensor<double> fv = random_normal<double>({1, 6, 5, 5}, rng);
    Tensor<double> sv = random_normal<double>({1, 31, 5, 5}, rng);
    auto masked_f = refine::mask_region(Var<double>::leaf(fv), mask, false);
    auto masked_s = refine::mask_region(Var<double>::leaf(sv), mask, false);

    auto full = dst_tokenize_region(Sorted<double>{Var<double>::leaf(fv), perms},
                                    Sorted<double>{Var<double>::leaf(sv), perms}, params, mask,
                                    false, 2);
    auto pre = dst_tokenize_region(Sorted<double>{masked_f, perms},
                                   Sorted<double>{masked_s, perms}, params, mask, false, 2);
    for (int64_t i = 0; i < full.k.val().numel(); ++i) CHECK(full.k.val()[i] == pre.k.val()[i]);
    for (int64_t i = 0; i < full.q.val().numel(); ++i) CHECK(full.q.val()[i] == pre.q.val()[i]);
}

TEST_CASE("dst_tokenize: missing or mismatched sort tags are contract violations") {
    Rng rng(73);
    DstRegionParams<double> params(31, 4, 4, true, rng);
    const DiagonalMask mask = DiagonalMask::make(4, 4);
    Sorted<double> f{Var<double>::leaf(random_normal<double>({1, 4, 4, 4}, rng)), nullptr};
    Sorted<double> s{Var<double>::leaf(random_normal<double>({1, 31, 4, 4}, rng)),
                     refine::identity_perms(1, 4, 4)};
    CHECK_THROWS_AS(dst_tokenize_region(f, s, params, mask, false, 2), ContractViolation);
    f.order = refine::identity_perms(1, 4, 4);  // distinct object from s.order
    CHECK_THROWS_AS(dst_tokenize_region(f, s, params, mask, false, 2), ContractViolation);
}

TEST_CASE("cg_msa: single token channel returns V exactly") {
    Rng rng(74);
    Tensor<double> q = random_normal<double>({2, 1, 9}, rng);
    Tensor<double> k = random_normal<double>({2, 1, 9}, rng);
    Tensor<double> v = random_normal<double>({2, 1, 9}, rng);
    auto out = cg_msa(leaf_tokens(q, k, v, 1, 2), 3, 3);
    REQUIRE(out.val().numel() == v.numel());
    CHECK(std::memcmp(out.val().data(), v.data(), sizeof(double) * 18) == 0);
}

TEST_CASE("cg_msa: zero queries average the value token-channels") {
    Rng rng(75);
    const int d = 5;
    Tensor<double> q({1, d, 8});
    Tensor<double> k = random_normal<double>({1, d, 8}, rng);
    Tensor<double> v = random_normal<double>({1, d, 8}, rng);
    auto out = cg_msa(leaf_tokens(q, k, v, 1, 1), 2, 4);
    for (int64_t p = 0; p < 8; ++p) {
        double mean = 0;
        for (int j = 0; j < d; ++j) mean += v.at(0, j, static_cast<int>(p));
        mean /= d;
        for (int i = 0; i < d; ++i)
            CHECK(out.val()[static_cast<int64_t>(i) * 8 + p] == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("cg_msa: matches a dense matrix-product oracle") {
    Rng rng(76);
    const int d = 2;
    Tensor<double> q = random_normal<double>({1, d, 4}, rng);
    Tensor<double> k = random_normal<double>({1, d, 4}, rng);
    Tensor<double> v = random_normal<double>({1, d, 4}, rng);
    auto out = cg_msa(leaf_tokens(q, k, v, 1, 1), 2, 2);

    // Explicit 64-bit oracle.
    double logits[d][d];
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double s = 0;
            for (int p = 0; p < 4; ++p) s += q.at(0, i, p) * k.at(0, j, p);
            logits[i][j] = s / std::sqrt(2.0);
        }
    for (int i = 0; i < d; ++i) {
        const double m = std::max(logits[i][0], logits[i][1]);
        const double e0 = std::exp(logits[i][0] - m), e1 = std::exp(logits[i][1] - m);
        const double z = e0 + e1;
        const double a0 = e0 / z, a1 = e1 / z;
        for (int p = 0; p < 4; ++p) {
            const double expect = a0 * v.at(0, 0, p) + a1 * v.at(0, 1, p);
            CHECK(out.val()[static_cast<int64_t>(i) * 4 + p] ==
                  doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("cg_msa: attention rows sum to one") {
    Rng rng(77);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<double> q = random_normal<double>({4, 6, 12}, rng);
        Tensor<double> k = random_normal<double>({4, 6, 12}, rng);
        auto attn = attention_matrix(leaf_tokens(q, k, q, 2, 2));
        for (int g = 0; g < 4; ++g)
            for (int i = 0; i < 6; ++i) {
                double s = 0;
                for (int j = 0; j < 6; ++j) s += attn.val().at(g, i, j);
                CHECK(std::abs(s - 1.0) < 1e-12);
            }
    }
}

TEST_CASE("cg_msa: pixel-permutation equivariance is exact on integer inputs") {
    Rng rng(78);
    const int d = 4, P = 12;
    Tensor<double> q = int_valued({1, d, P}, rng);
    Tensor<double> k = int_valued({1, d, P}, rng);
    Tensor<double> v = int_valued({1, d, P}, rng);
    auto base = cg_msa(leaf_tokens(q, k, v, 1, 1), 3, 4);

    // A fixed permutation of the pixel axis applied to Q, K, V jointly.
    std::vector<int> perm(P);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    auto permute = [&](const Tensor<double>& t) {
        Tensor<double> out(t.shape());
        for (int i = 0; i < d; ++i)
            for (int p = 0; p < P; ++p) out.at(0, i, p) = t.at(0, i, perm[static_cast<size_t>(p)]);
        return out;
    };
    auto permuted = cg_msa(leaf_tokens(permute(q), permute(k), permute(v), 1, 1), 3, 4);
    for (int i = 0; i < d; ++i)
        for (int p = 0; p < P; ++p)
            CHECK(permuted.val()[static_cast<int64_t>(i) * P + p] ==
                  base.val()[static_cast<int64_t>(i) * P + perm[static_cast<size_t>(p)]]);
}

TEST_CASE("cg_msa rejects head-dimension mismatch") {
    Rng rng(79);
    Tensor<double> q = random_normal<double>({2, 3, 8}, rng);
    Tensor<double> k = random_normal<double>({2, 4, 8}, rng);
    CHECK_THROWS_AS(cg_msa(leaf_tokens(q, k, k, 1, 2), 2, 4), ConfigError);
}

TEST_CASE("region outputs keep their zero-filled support and cover the grid") {
    Rng rng(80);
    DstRegionParams<double> tl(31, 6, 6, true, rng), br(31, 6, 6, true, rng);
    Perms perms = refine::identity_perms(1, 6, 6);
    Sorted<double> f{Var<double>::leaf(random_normal<double>({1, 6, 6, 6}, rng)), perms};
    Sorted<double> s{Var<double>::leaf(random_normal<double>({1, 31, 6, 6}, rng)), perms};
    auto out = dst_tokenize(f, s, tl, br, 2);
    auto att_tl = cg_msa(out.tl, 6, 6);
    auto att_br = cg_msa(out.br, 6, 6);
    const DiagonalMask mask = DiagonalMask::make(6, 6);
    for (int c = 0; c < 6; ++c)
        for (int64_t p = 0; p < 36; ++p) {
            const bool in_tl = mask.tl[static_cast<size_t>(p)] != 0;
            if (!in_tl) CHECK(att_tl.val()[static_cast<int64_t>(c) * 36 + p] == 0.0);
            if (in_tl) CHECK(att_br.val()[static_cast<int64_t>(c) * 36 + p] == 0.0);
        }
}

TEST_CASE("cc_ffn: saturated gate returns the attention features") {
    Rng rng(81);
    CcFfn<double> ffn(5, rng);
    ffn.fusion.w.val().fill(0.0);
    ffn.fusion.b.val()[0] = 10.0;
    ffn.fusion.b.val()[1] = -10.0;
    Sorted<double> f_in{Var<double>::leaf(random_normal<double>({1, 5, 4, 4}, rng)), nullptr};
    Sorted<double> f_hat{Var<double>::leaf(random_normal<double>({1, 5, 4, 4}, rng)), nullptr};
    auto out = ffn(f_in, f_hat);
    for (int64_t i = 0; i < out.val().numel(); ++i)
        CHECK(std::abs(out.val()[i] - f_hat.value.val()[i]) < 1e-8);
}

TEST_CASE("cc_ffn: symmetric gate averages both paths") {
    Rng rng(82);
    CcFfn<double> ffn(4, rng);
    ffn.fusion.w.val().fill(0.0);
    ffn.fusion.b.val().fill(0.0);
    Sorted<double> f_in{Var<double>::leaf(random_normal<double>({1, 4, 5, 5}, rng)), nullptr};
    Sorted<double> f_hat{Var<double>::leaf(random_normal<double>({1, 4, 5, 5}, rng)), nullptr};
    auto out = ffn(f_in, f_hat);
    auto f_local = ffn.local(f_in.value);
    for (int64_t i = 0; i < out.val().numel(); ++i)
        CHECK(out.val()[i] ==
              doctest::Approx(0.5 * (f_hat.value.val()[i] + f_local.val()[i])).epsilon(1e-12));
}

TEST_CASE("cc_ffn: gate stays in (0, 1) and the two channels sum to one") {
    Rng rng(83);
    CcFfn<double> ffn(4, rng);
    Sorted<double> f_in{Var<double>::leaf(random_normal<double>({1, 4, 5, 5}, rng)), nullptr};
    Sorted<double> f_hat{Var<double>::leaf(random_normal<double>({1, 4, 5, 5}, rng)), nullptr};
    auto gates = softmax_axis(ffn.fusion(concat_channels(ffn.local(f_in.value), f_hat.value)), 1);
    for (int64_t p = 0; p < 25; ++p) {
        const double theta = gates.val()[p];
        CHECK(theta > 0.0);
        CHECK(theta < 1.0);
        CHECK(theta + gates.val()[25 + p] == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("cc_ffn: mismatched pixel orders are a contract violation") {
    Rng rng(84);
    CcFfn<double> ffn(3, rng);
    Sorted<double> f_in{Var<double>::leaf(random_normal<double>({1, 3, 4, 4}, rng)), nullptr};
    Sorted<double> f_hat{Var<double>::leaf(random_normal<double>({1, 3, 4, 4}, rng)),
                         refine::identity_perms(1, 4, 4)};
    CHECK_THROWS_AS(ffn(f_in, f_hat), ContractViolation);
}

TEST_CASE("grad_check: cc_ffn through the deformable path") {
    Rng rng(85);
    CcFfn<double> ffn(3, rng);
    ffn.local.offset_pred.w.val() = random_normal<double>({18, 3, 3, 3}, rng, 0.0, 0.05);
    ffn.local.offset_pred.b.val() = random_normal<double>({18}, rng, 0.03, 0.05);
    auto f_in = Var<double>::leaf(random_normal<double>({1, 3, 5, 5}, rng), true);
    auto f_hat = Var<double>::leaf(random_normal<double>({1, 3, 5, 5}, rng), true);
    auto report = grad_check(
        [&] {
            return ffn(Sorted<double>{f_in, nullptr}, Sorted<double>{f_hat, nullptr});
        },
        {{"f_in", f_in}, {"f_hat", f_hat}, {"fusion_w", ffn.fusion.w}}, 1e-4);
    INFO(report.summary());
    CHECK(report.pass);
}

TEST_CASE("saformer_block: zero spectrum degenerates to uniform attention") {
    Rng rng(86);
    SaformerToggles toggles;
    SaformerBlock<double> block(8, 31, 2, toggles, rng);
    Perms perms = refine::identity_perms(1, 6, 6);
    Sorted<double> f{Var<double>::leaf(random_normal<double>({1, 8, 6, 6}, rng)), perms};
    Sorted<double> s{Var<double>::leaf(Tensor<double>({1, 31, 6, 6})), perms};
    // LN(0) with zero beta stays zero, so the queries vanish and every
    // attention row is uniform.
    Sorted<double> f_n{block.ln_f(f.value), perms};
    Sorted<double> s_n{block.ln_s(s.value), perms};
    const DiagonalMask mask = DiagonalMask::make(6, 6);
    auto tokens = dst_tokenize_region(f_n, s_n, block.tl, mask, false, 2);
    auto attn = attention_matrix(tokens);
    for (int64_t i = 0; i < attn.val().numel(); ++i)
        CHECK(attn.val()[i] == doctest::Approx(0.25).epsilon(1e-12));
    auto out = block(f, s);
    CHECK(out.val().all_finite());
}

TEST_CASE("saformer_block: output shape equals input shape") {
    Rng rng(87);
    SaformerToggles toggles;
    for (auto [c, h, w] : {std::tuple{8, 6, 6}, std::tuple{4, 5, 9}, std::tuple{8, 12, 7}}) {
        SaformerBlock<double> block(c, 31, 2, toggles, rng);
        Tensor<double> keys = random_normal<double>({1, 31, h, w}, rng);
        Perms perms = refine::sort_permutations(keys);
        Sorted<double> f{Var<double>::leaf(random_normal<double>({1, c, h, w}, rng)), perms};
        Sorted<double> s{Var<double>::leaf(keys), perms};
        auto out = block(f, s);
        CHECK(out.val().shape() == std::vector<int>{1, c, h, w});
    }
}

TEST_CASE("saformer_block: stacked blocks are deterministic under a fixed seed") {
    auto run = [] {
        Rng rng(88);
        SaformerToggles toggles;
        SaformerBlock<double> b1(6, 31, 2, toggles, rng), b2(6, 31, 2, toggles, rng);
        Rng drng(89);
        Tensor<double> keys = random_normal<double>({1, 31, 6, 6}, drng);
        Perms perms = refine::sort_permutations(keys);
        Sorted<double> f{Var<double>::leaf(random_normal<double>({1, 6, 6, 6}, drng)), perms};
        Sorted<double> s{Var<double>::leaf(keys), perms};
        auto mid = b1(f, s);
        return b2(Sorted<double>{mid, perms}, s).val();
    };
    Tensor<double> a = run(), b = run();
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0);
}

TEST_CASE("saformer_block: concurrent evaluation matches sequential") {
    Rng rng(90);
    SaformerToggles toggles;
    SaformerBlock<double> block(6, 31, 2, toggles, rng);
    Rng drng(91);
    Tensor<double> keys = random_normal<double>({1, 31, 6, 6}, drng);
    Perms perms = refine::sort_permutations(keys);
    Tensor<double> f1 = random_normal<double>({1, 6, 6, 6}, drng);
    Tensor<double> f2 = random_normal<double>({1, 6, 6, 6}, drng);

    auto serial1 = block(Sorted<double>{Var<double>::leaf(f1), perms},
                         Sorted<double>{Var<double>::leaf(keys), perms});
    auto serial2 = block(Sorted<double>{Var<double>::leaf(f2), perms},
                         Sorted<double>{Var<double>::leaf(keys), perms});

    Tensor<double> out1, out2;
    std::thread t1([&] {
        out1 = block(Sorted<double>{Var<double>::leaf(f1), perms},
                     Sorted<double>{Var<double>::leaf(keys), perms})
                   .val();
    });
    std::thread t2([&] {
        out2 = block(Sorted<double>{Var<double>::leaf(f2), perms},
                     Sorted<double>{Var<double>::leaf(keys), perms})
                   .val();
    });
    t1.join();
    t2.join();
    CHECK(std::memcmp(out1.data(), serial1.val().data(), sizeof(double) * 216) == 0);
    CHECK(std::memcmp(out2.data(), serial2.val().data(), sizeof(double) * 216) == 0);
}

TEST_CASE("grad_check: dst_tokenize and cg_msa") {
    Rng rng(92);
    DstRegionParams<double> params(31, 6, 6, true, rng);
    Perms perms = refine::identity_perms(1, 5, 5);
    const DiagonalMask mask = DiagonalMask::make(5, 5);
    auto f = Var<double>::leaf(random_normal<double>({1, 6, 5, 5}, rng), true);
    auto s = Var<double>::leaf(random_normal<double>({1, 31, 5, 5}, rng), true);
    auto report = grad_check(
        [&] {
            auto tokens = dst_tokenize_region(Sorted<double>{f, perms}, Sorted<double>{s, perms},
                                              params, mask, false, 2);
            return cg_msa(tokens, 5, 5);
        },
        {{"f", f},
         {"s", s},
         {"q_point", params.q.point.w},
         {"k_depth", params.k.depth.w},
         {"v_point", params.v.point.w}},
        1e-5);
    INFO(report.summary());
    CHECK(report.pass);
}

TEST_CASE("grad_check: full saformer block end to end") {
    Rng rng(93);
    SaformerToggles toggles;
    SaformerBlock<double> block(4, 31, 2, toggles, rng);
    block.ffn.local.offset_pred.w.val() = random_normal<double>({18, 4, 3, 3}, rng, 0.0, 0.05);
    block.ffn.local.offset_pred.b.val() = random_normal<double>({18}, rng, 0.03, 0.05);

    Tensor<double> keys = random_normal<double>({1, 31, 5, 5}, rng);
    Perms perms = refine::sort_permutations(keys);
    auto f = Var<double>::leaf(random_normal<double>({1, 4, 5, 5}, rng), true);
    auto s = Var<double>::leaf(keys, true);

    NamedParams<double> params;
    block.collect(params, "block");
    std::vector<std::pair<std::string, Var<double>>> wrt{{"f", f}, {"s", s}};
    for (const auto& [name, v] : params) wrt.emplace_back(name, v);

    auto report = grad_check(
        [&] {
            auto f_sorted = refine::apply_permutation(f, perms, Direction::Forward);
            auto s_sorted = refine::apply_permutation(s, perms, Direction::Forward);
            return block(Sorted<double>{f_sorted, perms}, Sorted<double>{s_sorted, perms});
        },
        wrt, 1e-4);
    INFO(report.summary());
    CHECK(report.pass);
}
