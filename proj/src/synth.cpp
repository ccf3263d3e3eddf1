#include "srr/synth.hpp"

#include <Eigen/Dense>

namespace srr::synth {

const char* illuminant_name(IlluminantKind k) {
    switch (k) {
        case IlluminantKind::GaussianPeak: return "gaussian_peak";
        case IlluminantKind::Flat: return "flat";
        case IlluminantKind::TwoPeak: return "two_peak";
    }
    return "?";
}

IlluminantKind illuminant_from_name(const std::string& name) {
    if (name == "gaussian_peak") return IlluminantKind::GaussianPeak;
    if (name == "flat") return IlluminantKind::Flat;
    if (name == "two_peak") return IlluminantKind::TwoPeak;
    throw ConfigError("unknown illuminant kind: " + name);
}

namespace {

void add_gaussian_lobe(std::vector<double>& curve, double center_nm, double width_nm,
                       double amplitude) {
    check(center_nm >= 400.0 && center_nm < 710.0, "illuminant peak outside 400-710 nm");
    check(width_nm > 0.0, "illuminant width must be positive");
    const double peak_band = static_cast<double>(band_of_nm(center_nm));
    const double sigma_bands = width_nm / 10.0;
    for (int i = 0; i < kBands; ++i) {
        const double d = (static_cast<double>(i) - peak_band) / sigma_bands;
        curve[static_cast<size_t>(i)] += amplitude * std::exp(-0.5 * d * d);
    }
}

}  // namespace

Tensor<float> make_illuminant_spd(IlluminantKind kind, const IlluminantParams& params,
                                  uint64_t seed) {
    std::vector<double> curve(kBands, 0.0);
    switch (kind) {
        case IlluminantKind::Flat:
            std::fill(curve.begin(), curve.end(), 1.0);
            break;
        case IlluminantKind::GaussianPeak:
            add_gaussian_lobe(curve, params.center_nm, params.width_nm, 1.0);
            break;
        case IlluminantKind::TwoPeak:
            add_gaussian_lobe(curve, params.center_nm, params.width_nm, 1.0);
            add_gaussian_lobe(curve, params.center2_nm, params.width2_nm, params.ratio);
            break;
    }
    // Unit-mean normalization keeps the rendered RGB energy comparable
    // across narrow and broad curves (the sum-normalized camera maps a flat
    // unit SPD to (1, 1, 1)).
    double mean = 0.0;
    for (double v : curve) mean += v;
    mean /= kBands;
    Rng rng(derive_seed(seed, 0x111));
    const double amp = params.level * rng.uniform(0.9, 1.1) / mean;
    Tensor<float> spd({kBands});
    for (int i = 0; i < kBands; ++i) spd[i] = static_cast<float>(curve[static_cast<size_t>(i)] * amp);
    return spd;
}

CameraResponse default_camera() {
    const double peaks[3] = {450.0, 550.0, 610.0};
    const double sigma = 40.0;
    CameraResponse cam;
    cam.m = Tensor<float>({3, kBands});
    for (int r = 0; r < 3; ++r) {
        double sum = 0.0;
        std::vector<double> row(kBands);
        for (int i = 0; i < kBands; ++i) {
            const double nm = 405.0 + 10.0 * i;  // bin center
            const double d = (nm - peaks[r]) / sigma;
            row[static_cast<size_t>(i)] = std::exp(-0.5 * d * d);
            sum += row[static_cast<size_t>(i)];
        }
        for (int i = 0; i < kBands; ++i)
            cam.m.at(r, i) = static_cast<float>(row[static_cast<size_t>(i)] / sum);
    }
    return cam;
}

Tensor<float> spd_to_rgb(const Tensor<float>& cube, const CameraResponse& cam) {
    check(cube.rank() == 3, "spd_to_rgb: rank-3 (bands, H, W) cube required");
    check(cube.dim(0) == cam.m.dim(1), "spd_to_rgb: band count mismatch with camera response");
    const int b = cube.dim(0), h = cube.dim(1), w = cube.dim(2);
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor<float> rgb({3, h, w});
    using RM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RM> cm(cam.m.data(), 3, b);
    Eigen::Map<const RM> xm(cube.data(), b, hw);
    Eigen::Map<RM> ym(rgb.data(), 3, hw);
    ym.noalias() = cm * xm;
    return rgb;
}

Tensor<float> clamp01(const Tensor<float>& t) {
    Tensor<float> out = t;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(1.0f, std::max(0.0f, out[i]));
    return out;
}

namespace {

// Smooth random reflectance in (0, 1]: a base level plus a few Gaussian
// bumps over the band axis.
std::vector<double> random_reflectance(Rng& rng) {
    std::vector<double> r(kBands, rng.uniform(0.05, 0.4));
    const int lobes = static_cast<int>(rng.index(3)) + 1;
    for (int l = 0; l < lobes; ++l) {
        const double c = rng.uniform(0.0, 30.0);
        const double w = rng.uniform(1.5, 6.0);
        const double a = rng.uniform(-0.5, 0.9);
        for (int i = 0; i < kBands; ++i) {
            const double d = (i - c) / w;
            r[static_cast<size_t>(i)] += a * std::exp(-0.5 * d * d);
        }
    }
    for (double& v : r) v = std::min(1.0, std::max(0.02, v));
    return r;
}

IlluminantParams random_illuminant_params(Rng& rng, IlluminantKind kind) {
    IlluminantParams p;
    p.level = rng.uniform(0.7, 1.0);
    if (kind == IlluminantKind::GaussianPeak) {
        p.center_nm = rng.uniform(430.0, 680.0);
        p.width_nm = rng.uniform(8.0, 22.0);
    } else if (kind == IlluminantKind::TwoPeak) {
        p.center_nm = rng.uniform(540.0, 690.0);
        p.width_nm = rng.uniform(20.0, 45.0);
        p.center2_nm = rng.uniform(410.0, 500.0);
        p.width2_nm = rng.uniform(15.0, 35.0);
        p.ratio = rng.uniform(0.4, 0.9);
    }
    return p;
}

}  // namespace

Tensor<float> render_scene(uint64_t seed, int h, int w, const SceneParams& params) {
    check(h >= 16 && w >= 16, "render_scene: size must be at least 16x16");
    Rng rng(derive_seed(seed, 0x5ce, 0xe));

    const IlluminantParams ip = random_illuminant_params(rng, params.illuminant);
    const Tensor<float> illum = make_illuminant_spd(params.illuminant, ip, derive_seed(seed, 1));

    std::vector<std::vector<double>> materials;
    if (params.white_background)
        materials.emplace_back(kBands, 1.0);
    else
        materials.push_back(random_reflectance(rng));

    struct Shape {
        bool ellipse;
        double cy, cx, ry, rx;
        size_t material;
    };
    std::vector<Shape> shapes;
    const int n_shapes =
        params.min_shapes +
        static_cast<int>(params.max_shapes > params.min_shapes
                             ? rng.index(params.max_shapes - params.min_shapes + 1)
                             : 0);
    for (int s = 0; s < n_shapes; ++s) {
        materials.push_back(random_reflectance(rng));
        Shape sh;
        sh.ellipse = rng.uniform(0.0, 1.0) < 0.5;
        sh.cy = rng.uniform(0.0, h - 1.0);
        sh.cx = rng.uniform(0.0, w - 1.0);
        sh.ry = rng.uniform(0.08, 0.45) * h;
        sh.rx = rng.uniform(0.08, 0.45) * w;
        sh.material = materials.size() - 1;
        shapes.push_back(sh);
    }

    double slope_y = 0.0, slope_x = 0.0;
    if (params.shading) {
        slope_y = rng.uniform(-0.35, 0.35);
        slope_x = rng.uniform(-0.35, 0.35);
    }

    Tensor<float> cube({kBands, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            size_t material = 0;
            for (const Shape& sh : shapes) {
                const double dy = (y - sh.cy) / sh.ry;
                const double dx = (x - sh.cx) / sh.rx;
                const bool inside = sh.ellipse ? (dy * dy + dx * dx <= 1.0)
                                               : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
                if (inside) material = sh.material;
            }
            const double shade =
                1.0 - 0.5 * (slope_y * (y / std::max(1.0, h - 1.0)) +
                             slope_x * (x / std::max(1.0, w - 1.0))) -
                0.5 * std::max(std::abs(slope_y), std::abs(slope_x));
            const auto& refl = materials[material];
            for (int b = 0; b < kBands; ++b)
                cube[(static_cast<int64_t>(b) * h + y) * w + x] =
                    illum[b] * static_cast<float>(refl[static_cast<size_t>(b)] * shade);
        }
    return cube;
}

Tensor<float> gaussian_blur(const Tensor<float>& cube, float radius) {
    if (radius <= 0.0f) return cube;
    const int b = cube.dim(0), h = cube.dim(1), w = cube.dim(2);
    const int r = static_cast<int>(std::ceil(3.0 * radius));
    std::vector<float> kernel(static_cast<size_t>(2 * r + 1));
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        const double v = std::exp(-0.5 * (static_cast<double>(i) / radius) * (static_cast<double>(i) / radius));
        kernel[static_cast<size_t>(i + r)] = static_cast<float>(v);
        sum += v;
    }
    for (float& v : kernel) v = static_cast<float>(v / sum);

    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    Tensor<float> tmp(cube.shape()), out(cube.shape());
    for (int band = 0; band < b; ++band) {
        const float* src = cube.data() + static_cast<int64_t>(band) * h * w;
        float* mid = tmp.data() + static_cast<int64_t>(band) * h * w;
        float* dst = out.data() + static_cast<int64_t>(band) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float acc = 0;
                for (int i = -r; i <= r; ++i)
                    acc += kernel[static_cast<size_t>(i + r)] *
                           src[static_cast<int64_t>(y) * w + clampi(x + i, 0, w - 1)];
                mid[static_cast<int64_t>(y) * w + x] = acc;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float acc = 0;
                for (int i = -r; i <= r; ++i)
                    acc += kernel[static_cast<size_t>(i + r)] *
                           mid[static_cast<int64_t>(clampi(y + i, 0, h - 1)) * w + x];
                dst[static_cast<int64_t>(y) * w + x] = acc;
            }
    }
    return out;
}

ReflectionPair compose_reflection(const Tensor<float>& t_cube, const Tensor<float>& r_cube,
                                  float weight, float blur_radius) {
    check(t_cube.rank() == 3 && t_cube.same_shape(r_cube), "compose_reflection: size mismatch");
    check(weight >= 0.0f && weight <= 1.0f, "compose_reflection: weight must lie in [0, 1]");
    const Tensor<float> r_blur = gaussian_blur(r_cube, blur_radius);
    Tensor<float> i_cube(t_cube.shape());
    for (int64_t i = 0; i < i_cube.numel(); ++i) i_cube[i] = t_cube[i] + weight * r_blur[i];

    const CameraResponse cam = default_camera();
    ReflectionPair pair;
    pair.input_rgb = clamp01(spd_to_rgb(i_cube, cam));
    pair.clean_rgb = clamp01(spd_to_rgb(t_cube, cam));
    pair.t_cube = t_cube;
    pair.r_cube = r_cube;
    pair.meta.height = t_cube.dim(1);
    pair.meta.width = t_cube.dim(2);
    pair.meta.weight = weight;
    pair.meta.blur_radius = blur_radius;
    return pair;
}

ReflectionPair make_pair(const PairMeta& meta) {
    SceneParams t_scene;
    t_scene.illuminant = meta.t_illuminant;
    SceneParams r_scene;
    r_scene.illuminant = meta.r_illuminant;
    const Tensor<float> t_cube =
        render_scene(derive_seed(meta.seed, 0x7), meta.height, meta.width, t_scene);
    const Tensor<float> r_cube =
        render_scene(derive_seed(meta.seed, 0x8), meta.height, meta.width, r_scene);
    ReflectionPair pair = compose_reflection(t_cube, r_cube, meta.weight, meta.blur_radius);
    pair.meta = meta;
    return pair;
}

PairMeta sample_meta(const DatasetParams& params, uint64_t base_seed, int index) {
    Rng rng(derive_seed(base_seed, static_cast<uint64_t>(index), 0x3));
    PairMeta meta;
    meta.seed = derive_seed(base_seed, static_cast<uint64_t>(index), 0x4);
    meta.height = params.height;
    meta.width = params.width;
    meta.t_illuminant = params.t_illuminant;
    meta.r_illuminant = params.r_illuminant;
    meta.weight = static_cast<float>(rng.uniform(params.weight_min, params.weight_max));
    meta.blur_radius = static_cast<float>(rng.uniform(params.blur_min, params.blur_max));
    return meta;
}

std::vector<ReflectionPair> generate_dataset(const DatasetParams& params, uint64_t base_seed) {
    std::vector<ReflectionPair> pairs(static_cast<size_t>(params.samples));
    parallel_for(params.samples,
                 [&](int i) { pairs[static_cast<size_t>(i)] = make_pair(sample_meta(params, base_seed, i)); });
    return pairs;
}

}  // namespace srr::synth
