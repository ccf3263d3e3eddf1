#include <doctest.h>

#include <cstring>

#include "srr/deformable.hpp"
#include "srr/grad_check.hpp"
#include "srr/nn.hpp"

using namespace srr;

namespace {

// Direct-summation convolution oracle: plain nested loops, no GEMM.
template <class S>
Tensor<S> conv_oracle(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int k) {
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int out_ch = w.dim(0), pad = k / 2;
    Tensor<S> y({N, out_ch, H, W});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < out_ch; ++o)
            for (int h = 0; h < H; ++h)
                for (int wo = 0; wo < W; ++wo) {
                    S acc = b.numel() ? b[o] : S(0);
                    for (int c = 0; c < Cin; ++c)
                        for (int kh = 0; kh < k; ++kh)
                            for (int kw = 0; kw < k; ++kw) {
                                const int sh = h + kh - pad, sw = wo + kw - pad;
                                if (sh < 0 || sh >= H || sw < 0 || sw >= W) continue;
                                acc += w.at(o, c, kh, kw) * x.at(n, c, sh, sw);
                            }
                    y.at(n, o, h, wo) = acc;
                }
    return y;
}

// Closed-form bilinear read with zero extension, written independently of
// the implementation.
double bilinear_oracle(const Tensor<double>& x, int n, int c, double y, double xx) {
    const int H = x.dim(2), W = x.dim(3);
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(xx));
    const double dy = y - y0, dx = xx - x0;
    auto v = [&](int a, int b) -> double {
        if (a < 0 || a >= H || b < 0 || b >= W) return 0.0;
        return x.at(n, c, a, b);
    };
    return v(y0, x0) * (1 - dy) * (1 - dx) + v(y0, x0 + 1) * (1 - dy) * dx +
           v(y0 + 1, x0) * dy * (1 - dx) + v(y0 + 1, x0 + 1) * dy * dx;
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity weights reproduce the input") {
    Rng rng(1);
    Tensor<double> xv = random_normal<double>({1, 3, 4, 5}, rng);
    Tensor<double> w({3, 3, 1, 1});
    for (int i = 0; i < 3; ++i) w.at(i, i, 0, 0) = 1.0;
    auto x = Var<double>::leaf(xv);
    auto y = conv2d(x, Var<double>::leaf(w), Var<double>::leaf(Tensor<double>({3})));
    for (int64_t i = 0; i < xv.numel(); ++i) CHECK(y.val()[i] == doctest::Approx(xv[i]));
}

TEST_CASE("conv2d: all-ones 3x3 kernel on constant input counts the taps") {
    Tensor<double> xv = Tensor<double>::full({1, 1, 5, 6}, 1.0);
    Tensor<double> w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(Var<double>::leaf(xv), Var<double>::leaf(w), Var<double>());
    // Frozen from the direct-summation oracle: interior 9, corners 4.
    Tensor<double> expect = conv_oracle(xv, w, Tensor<double>(), 3);
    CHECK(expect.at(0, 0, 2, 3) == 9.0);
    CHECK(expect.at(0, 0, 0, 0) == 4.0);
    for (int64_t i = 0; i < expect.numel(); ++i) CHECK(y.val()[i] == doctest::Approx(expect[i]));
}

TEST_CASE("conv2d: random case matches the direct-summation oracle") {
    Rng rng(2);
    Tensor<double> xv = random_normal<double>({2, 3, 6, 5}, rng);
    Tensor<double> wv = random_normal<double>({4, 3, 3, 3}, rng);
    Tensor<double> bv = random_normal<double>({4}, rng);
    auto y = conv2d(Var<double>::leaf(xv), Var<double>::leaf(wv), Var<double>::leaf(bv));
    Tensor<double> expect = conv_oracle(xv, wv, bv, 3);
    for (int64_t i = 0; i < expect.numel(); ++i)
        CHECK(y.val()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("depthwise conv: centered delta kernel is the identity") {
    Rng rng(3);
    Tensor<double> xv = random_normal<double>({1, 4, 5, 5}, rng);
    Tensor<double> w({4, 1, 3, 3});
    for (int c = 0; c < 4; ++c) w.at(c, 0, 1, 1) = 1.0;
    auto y = depthwise_conv2d(Var<double>::leaf(xv), Var<double>::leaf(w), Var<double>());
    for (int64_t i = 0; i < xv.numel(); ++i) CHECK(y.val()[i] == xv[i]);
}

TEST_CASE("conv2d rejects channel mismatch") {
    Rng rng(4);
    Conv2d<double> conv(3, 4, 3, rng);
    auto x = Var<double>::leaf(Tensor<double>({1, 2, 4, 4}));
    CHECK_THROWS_AS(conv(x), InvalidInput);
}

TEST_CASE("conv2d is linear in its input for zero bias") {
    Rng rng(5);
    Tensor<double> wv = random_normal<double>({3, 2, 3, 3}, rng);
    Tensor<double> av = random_normal<double>({1, 2, 4, 4}, rng);
    Tensor<double> bv = random_normal<double>({1, 2, 4, 4}, rng);
    auto w = Var<double>::leaf(wv);
    const double ca = 1.7, cb = -0.6;
    Tensor<double> mix(av.shape());
    mix.array() = ca * av.array() + cb * bv.array();
    auto y_mix = conv2d(Var<double>::leaf(mix), w, Var<double>());
    auto ya = conv2d(Var<double>::leaf(av), w, Var<double>());
    auto yb = conv2d(Var<double>::leaf(bv), w, Var<double>());
    for (int64_t i = 0; i < y_mix.val().numel(); ++i)
        CHECK(y_mix.val()[i] ==
              doctest::Approx(ca * ya.val()[i] + cb * yb.val()[i]).epsilon(1e-12));
}

TEST_CASE("bilinear_sample: integer coordinates read exact grid values") {
    Rng rng(6);
    Tensor<double> xv = random_normal<double>({1, 2, 4, 5}, rng);
    Tensor<double> cv({1, 2, 2, 2});
    cv.at(0, 0, 0, 0) = 1;  cv.at(0, 1, 0, 0) = 2;
    cv.at(0, 0, 0, 1) = 3;  cv.at(0, 1, 0, 1) = 4;
    cv.at(0, 0, 1, 0) = 0;  cv.at(0, 1, 1, 0) = 0;
    cv.at(0, 0, 1, 1) = 2;  cv.at(0, 1, 1, 1) = 1;
    auto y = bilinear_sample(Var<double>::leaf(xv), Var<double>::leaf(cv));
    CHECK(y.val().at(0, 0, 0, 0) == xv.at(0, 0, 1, 2));
    CHECK(y.val().at(0, 1, 0, 1) == xv.at(0, 1, 3, 4));
    CHECK(y.val().at(0, 0, 1, 0) == xv.at(0, 0, 0, 0));
}

TEST_CASE("bilinear_sample: 2x2 grid center is the closed-form blend") {
    Tensor<double> xv({1, 1, 2, 2});
    xv.at(0, 0, 0, 0) = 0; xv.at(0, 0, 0, 1) = 1;
    xv.at(0, 0, 1, 0) = 2; xv.at(0, 0, 1, 1) = 3;
    Tensor<double> cv({1, 2, 1, 1});
    cv.at(0, 0, 0, 0) = 0.5;
    cv.at(0, 1, 0, 0) = 0.5;
    auto y = bilinear_sample(Var<double>::leaf(xv), Var<double>::leaf(cv));
    CHECK(y.val()[0] == doctest::Approx(bilinear_oracle(xv, 0, 0, 0.5, 0.5)));
    CHECK(y.val()[0] == doctest::Approx(1.5));
}

TEST_CASE("bilinear_sample: far out-of-grid coordinates read zero") {
    Rng rng(7);
    Tensor<double> xv = random_normal<double>({1, 1, 3, 3}, rng);
    Tensor<double> cv({1, 2, 1, 1});
    cv.at(0, 0, 0, 0) = -5.0;
    cv.at(0, 1, 0, 0) = -5.0;
    auto y = bilinear_sample(Var<double>::leaf(xv), Var<double>::leaf(cv));
    CHECK(y.val()[0] == 0.0);
}

TEST_CASE("deformable conv: zeroed offset predictor equals standard conv bit-for-bit") {
    Rng rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        DeformableConv2d<double> dconv(3, 4, rng);
        Tensor<double> xv = random_normal<double>({2, 3, 5, 6}, rng);
        auto x = Var<double>::leaf(xv);
        auto y = dconv(x);
        auto ref = conv2d(x, dconv.base.w, dconv.base.b);
        REQUIRE(y.val().numel() == ref.val().numel());
        CHECK(std::memcmp(y.val().data(), ref.val().data(),
                          sizeof(double) * static_cast<size_t>(y.val().numel())) == 0);
    }
}

TEST_CASE("deformable conv: constant field is offset-invariant in the interior") {
    Rng rng(9);
    DeformableConv2d<double> dconv(1, 1, rng);
    Tensor<double> xv = Tensor<double>::full({1, 1, 6, 6}, 3.25);
    auto x = Var<double>::leaf(xv);
    auto ref = dconv(x);  // zero offsets

    Tensor<double> off({1, 18, 6, 6});
    Rng orng(10);
    for (int64_t i = 0; i < off.numel(); ++i) off[i] = orng.uniform(-0.4, 0.4);
    auto y = deformable_conv3x3(x, dconv.base.w, dconv.base.b, Var<double>::leaf(off));
    for (int h = 2; h < 4; ++h)
        for (int w = 2; w < 4; ++w)
            CHECK(y.val().at(0, 0, h, w) == doctest::Approx(ref.val().at(0, 0, h, w)).epsilon(1e-12));
}

TEST_CASE("deformable conv: fixed (0.5, 0) offsets match a per-tap bilinear oracle") {
    Rng rng(11);
    Tensor<double> xv = random_normal<double>({1, 1, 4, 4}, rng);
    Tensor<double> wv = random_normal<double>({1, 1, 3, 3}, rng);
    Tensor<double> off({1, 18, 4, 4});
    for (int t = 0; t < 9; ++t)
        for (int64_t p = 0; p < 16; ++p) off[(2 * t) * 16 + p] = 0.5;  // row offset only

    auto y = deformable_conv3x3(Var<double>::leaf(xv), Var<double>::leaf(wv), Var<double>(),
                                Var<double>::leaf(off));
    for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) {
            double acc = 0;
            for (int kh = 0; kh < 3; ++kh)
                for (int kw = 0; kw < 3; ++kw)
                    acc += wv.at(0, 0, kh, kw) *
                           bilinear_oracle(xv, 0, 0, h + kh - 1 + 0.5, w + kw - 1);
            CHECK(y.val().at(0, 0, h, w) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("deformable conv rejects wrong offset channel count") {
    Rng rng(12);
    Tensor<double> xv = random_normal<double>({1, 2, 4, 4}, rng);
    Tensor<double> wv = random_normal<double>({2, 2, 3, 3}, rng);
    Tensor<double> off({1, 16, 4, 4});
    CHECK_THROWS_AS(deformable_conv3x3(Var<double>::leaf(xv), Var<double>::leaf(wv),
                                       Var<double>(), Var<double>::leaf(off)),
                    ConfigError);
}

TEST_CASE("softmax_axis: symmetry, closed form, shift invariance") {
    Tensor<double> eq = Tensor<double>::full({1, 5}, 2.5);
    auto y = softmax_axis(Var<double>::leaf(eq), 1);
    for (int i = 0; i < 5; ++i) CHECK(y.val()[i] == doctest::Approx(0.2));

    Tensor<double> two({2});
    two[0] = 0.0;
    two[1] = std::log(3.0);
    auto y2 = softmax_axis(Var<double>::leaf(two), 0);
    CHECK(y2.val()[0] == doctest::Approx(0.25));
    CHECK(y2.val()[1] == doctest::Approx(0.75));

    Rng rng(13);
    Tensor<double> a = random_normal<double>({7}, rng);
    Tensor<double> b = a;
    b.array() += 123.0;
    auto ya = softmax_axis(Var<double>::leaf(a), 0);
    auto yb = softmax_axis(Var<double>::leaf(b), 0);
    for (int i = 0; i < 7; ++i) CHECK(ya.val()[i] == doctest::Approx(yb.val()[i]).epsilon(1e-12));
}

TEST_CASE("softmax_axis sums to one along the axis") {
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> x = random_normal<double>({3, 6, 4}, rng, 0.0, 3.0);
        auto y = softmax_axis(Var<double>::leaf(x), 1);
        for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 4; ++k) {
                double s = 0;
                for (int j = 0; j < 6; ++j) s += y.val().at(i, j, k);
                CHECK(std::abs(s - 1.0) < 1e-12);
            }
    }
}

TEST_CASE("layer_norm: constant channels vanish before the affine") {
    Tensor<double> xv = Tensor<double>::full({1, 6, 3, 3}, 4.0);
    LayerNorm<double> ln(6);
    auto y = ln(Var<double>::leaf(xv));
    for (int64_t i = 0; i < y.val().numel(); ++i) CHECK(y.val()[i] == doctest::Approx(0.0));
}

TEST_CASE("layer_norm: [1, 3] normalizes to [-1, 1]") {
    Tensor<double> xv({1, 2, 1, 1});
    xv.at(0, 0, 0, 0) = 1.0;
    xv.at(0, 1, 0, 0) = 3.0;
    // By hand: mean 2, biased variance 1.
    LayerNorm<double> ln(2);
    auto y = ln(Var<double>::leaf(xv));
    CHECK(y.val()[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(y.val()[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("layer_norm: idempotent on already-normalized input") {
    Rng rng(15);
    Tensor<double> xv = random_normal<double>({1, 8, 4, 4}, rng);
    LayerNorm<double> ln(8);
    auto once = ln(Var<double>::leaf(xv));
    auto twice = ln(once);
    for (int64_t i = 0; i < once.val().numel(); ++i)
        CHECK(twice.val()[i] == doctest::Approx(once.val()[i]).epsilon(1e-5));
}

TEST_CASE("grad_check: linear layer gradients are exact to round-off") {
    Rng rng(16);
    Conv2d<double> conv(2, 1, 1, rng);
    // Small case: for a linear map the central difference is exact, so the
    // only error left is round-off on a loss of order one.
    auto x = Var<double>::leaf(random_normal<double>({1, 2, 2, 2}, rng, 0.0, 0.5), true);
    auto report = grad_check([&] { return conv(x); },
                             {{"x", x}, {"w", conv.w}, {"b", conv.b}}, 1e-9);
    INFO(report.summary());
    CHECK(report.pass);
}

TEST_CASE("grad_check: conv stack with GELU") {
    Rng rng(17);
    Conv2d<double> c1(2, 4, 3, rng), c2(4, 2, 3, rng);
    auto x = Var<double>::leaf(random_normal<double>({1, 2, 5, 5}, rng), true);
    auto report = grad_check([&] { return c2(gelu(c1(x))); },
                             {{"x", x}, {"w1", c1.w}, {"w2", c2.w}}, 1e-6);
    INFO(report.summary());
    CHECK(report.pass);
}

TEST_CASE("grad_check: deformable conv on a random 4x4 input") {
    Rng rng(18);
    DeformableConv2d<double> dconv(2, 3, rng);
    // Random offsets keep the check away from integer-coordinate corners.
    dconv.offset_pred.w.val() = random_normal<double>({18, 2, 3, 3}, rng, 0.0, 0.05);
    dconv.offset_pred.b.val() = random_normal<double>({18}, rng, 0.05, 0.05);
    auto x = Var<double>::leaf(random_normal<double>({1, 2, 4, 4}, rng), true);
    auto report = grad_check([&] { return dconv(x); },
                             {{"x", x},
                              {"w", dconv.base.w},
                              {"b", dconv.base.b},
                              {"offset_w", dconv.offset_pred.w},
                              {"offset_b", dconv.offset_pred.b}},
                             1e-4);
    INFO(report.summary());
    CHECK(report.pass);
    CHECK(report.max_rel_err() < 1e-4);
}

TEST_CASE("grad_check: bilinear_sample in both arguments") {
    Rng rng(19);
    auto x = Var<double>::leaf(random_normal<double>({1, 2, 4, 4}, rng), true);
    Tensor<double> cv({1, 2, 3, 3});
    for (int64_t i = 0; i < cv.numel(); ++i) cv[i] = rng.uniform(-0.7, 3.7);
    auto coords = Var<double>::leaf(cv, true);
    auto report = grad_check([&] { return bilinear_sample(x, coords); },
                             {{"x", x}, {"coords", coords}}, 1e-5);
    INFO(report.summary());
    CHECK(report.pass);
}

TEST_CASE("softmax gradient sums to zero along the axis") {
    Rng rng(20);
    auto x = Var<double>::leaf(random_normal<double>({4, 6}, rng), true);
    auto loss = dot_const(softmax_axis(x, 1), random_normal<double>({4, 6}, rng));
    backward(loss);
    for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int j = 0; j < 6; ++j) s += x.grad().at(i, j);
        CHECK(std::abs(s) < 1e-12);
    }
}

TEST_CASE("grad_check: layer_norm and softmax compose") {
    Rng rng(21);
    LayerNorm<double> ln(5);
    auto x = Var<double>::leaf(random_normal<double>({1, 5, 3, 3}, rng), true);
    auto report = grad_check([&] { return softmax_axis(ln(x), 1); },
                             {{"x", x}, {"gamma", ln.gamma}, {"beta", ln.beta}}, 1e-6);
    INFO(report.summary());
    CHECK(report.pass);
}

TEST_CASE("substrate outputs stay finite") {
    Rng rng(22);
    Conv2d<double> conv(3, 8, 3, rng);
    auto y = conv(Var<double>::leaf(random_normal<double>({2, 3, 8, 8}, rng)));
    CHECK(y.val().all_finite());
}
