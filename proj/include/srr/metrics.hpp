#pragma once

#include "srr/tensor.hpp"

namespace srr::metrics {

// PSNR in dB, capped at 100 for identical inputs. Accepts any matching
// shapes; accumulates in double.
template <class S>
double psnr(const Tensor<S>& a, const Tensor<S>& b, double peak = 1.0) {
    check(a.same_shape(b), "psnr: shape mismatch");
    double mse = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(peak * peak / mse));
}

namespace detail {
inline const std::vector<double>& ssim_window() {
    static const std::vector<double> w = [] {
        std::vector<double> k(11);
        double sum = 0.0;
        for (int i = 0; i < 11; ++i) {
            const double d = (i - 5) / 1.5;
            k[static_cast<size_t>(i)] = std::exp(-0.5 * d * d);
            sum += k[static_cast<size_t>(i)];
        }
        for (double& v : k) v /= sum;
        return k;
    }();
    return w;
}
}  // namespace detail

// SSIM with the standard constants (k1 = 0.01, k2 = 0.03, 11x11 Gaussian
// window, sigma 1.5), averaged over channels and over the centers whose
// window lies fully inside the image. Input rank 3 (C, H, W) or 4 with
// batch; values expected in [0, peak].
template <class S>
double ssim(const Tensor<S>& a, const Tensor<S>& b, double peak = 1.0) {
    check(a.same_shape(b), "ssim: shape mismatch");
    check(a.rank() == 3 || a.rank() == 4, "ssim: rank-3 or rank-4 input required");
    const int rank = a.rank();
    const int n = rank == 4 ? a.dim(0) : 1;
    const int c = a.dim(rank - 3), h = a.dim(rank - 2), w = a.dim(rank - 1);
    check(h >= 11 && w >= 11, "ssim: image smaller than the 11x11 window");
    const auto& win = detail::ssim_window();
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    const int64_t hw = static_cast<int64_t>(h) * w;

    // Separable weighted sums over valid windows; everything in double.
    auto filter_valid = [&](const std::vector<double>& img, std::vector<double>& out) {
        const int vw = w - 10;
        std::vector<double> rows(static_cast<size_t>(h) * vw);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < vw; ++x) {
                double acc = 0;
                for (int i = 0; i < 11; ++i) acc += win[static_cast<size_t>(i)] * img[static_cast<size_t>(y) * w + x + i];
                rows[static_cast<size_t>(y) * vw + x] = acc;
            }
        const int vh = h - 10;
        out.assign(static_cast<size_t>(vh) * vw, 0.0);
        for (int y = 0; y < vh; ++y)
            for (int x = 0; x < vw; ++x) {
                double acc = 0;
                for (int i = 0; i < 11; ++i) acc += win[static_cast<size_t>(i)] * rows[static_cast<size_t>(y + i) * vw + x];
                out[static_cast<size_t>(y) * vw + x] = acc;
            }
    };

    double total = 0.0;
    int64_t count = 0;
    std::vector<double> xa(static_cast<size_t>(hw)), xb(static_cast<size_t>(hw)), xx(static_cast<size_t>(hw)),
        yy(static_cast<size_t>(hw)), xy(static_cast<size_t>(hw));
    std::vector<double> mu_a, mu_b, m_xx, m_yy, m_xy;
    for (int bi = 0; bi < n; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const int64_t off = (static_cast<int64_t>(bi) * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                const double va = static_cast<double>(a[off + i]);
                const double vb = static_cast<double>(b[off + i]);
                xa[static_cast<size_t>(i)] = va;
                xb[static_cast<size_t>(i)] = vb;
                xx[static_cast<size_t>(i)] = va * va;
                yy[static_cast<size_t>(i)] = vb * vb;
                xy[static_cast<size_t>(i)] = va * vb;
            }
            filter_valid(xa, mu_a);
            filter_valid(xb, mu_b);
            filter_valid(xx, m_xx);
            filter_valid(yy, m_yy);
            filter_valid(xy, m_xy);
            for (size_t i = 0; i < mu_a.size(); ++i) {
                const double ma = mu_a[i], mb = mu_b[i];
                const double va = m_xx[i] - ma * ma;
                const double vb = m_yy[i] - mb * mb;
                const double cov = m_xy[i] - ma * mb;
                const double val = ((2 * ma * mb + c1) * (2 * cov + c2)) /
                                   ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += val;
                ++count;
            }
        }
    return total / static_cast<double>(count);
}

}  // namespace srr::metrics
