#pragma once

#include <string>
#include <vector>

#include "srr/tensor.hpp"

namespace srr::synth {

// 31 visible bands; band i covers [400 + 10*i, 410 + 10*i) nm.
constexpr int kBands = 31;

inline int band_of_nm(double nm) { return static_cast<int>(std::floor((nm - 400.0) / 10.0)); }

enum class IlluminantKind { GaussianPeak, Flat, TwoPeak };
const char* illuminant_name(IlluminantKind k);
IlluminantKind illuminant_from_name(const std::string& name);

struct IlluminantParams {
    double center_nm = 550.0;
    double width_nm = 30.0;
    // second lobe, two_peak only
    double center2_nm = 460.0;
    double width2_nm = 20.0;
    double ratio = 0.6;
    double level = 1.0;
};

// Nonnegative length-31 curve. Peak centers are mapped onto the band-index
// axis (band_of_nm), so the curve's argmax is the band containing the peak.
// The seed only jitters the overall amplitude.
Tensor<float> make_illuminant_spd(IlluminantKind kind, const IlluminantParams& params,
                                  uint64_t seed);

struct CameraResponse {
    Tensor<float> m;  // (3, 31) nonnegative sensitivities, rows R/G/B
};
// Three shifted Gaussian sensitivities (450/550/610 nm), each row normalized
// to sum 1 so a flat unit SPD renders as (1, 1, 1).
CameraResponse default_camera();

// Per-pixel 3x31 matrix product; linear, not clamped.
Tensor<float> spd_to_rgb(const Tensor<float>& cube, const CameraResponse& cam);

Tensor<float> clamp01(const Tensor<float>& t);

struct SceneParams {
    IlluminantKind illuminant = IlluminantKind::TwoPeak;
    int min_shapes = 4;
    int max_shapes = 9;
    bool white_background = false;
    bool shading = true;
};

// Piecewise random colored shapes with smooth per-material reflectance
// curves under one scene illuminant. Output (31, H, W), nonnegative.
Tensor<float> render_scene(uint64_t seed, int h, int w, const SceneParams& params);

struct PairMeta {
    uint64_t seed = 0;
    int height = 0, width = 0;
    IlluminantKind t_illuminant = IlluminantKind::TwoPeak;
    IlluminantKind r_illuminant = IlluminantKind::GaussianPeak;
    float weight = 0.5f;
    float blur_radius = 1.5f;
};

struct ReflectionPair {
    Tensor<float> input_rgb;  // degraded I, (3, H, W) in [0, 1]
    Tensor<float> clean_rgb;  // transmission T, (3, H, W) in [0, 1]
    Tensor<float> t_cube;     // (31, H, W)
    Tensor<float> r_cube;     // (31, H, W), pre-blur
    PairMeta meta;
};

// Separable Gaussian blur (sigma = radius, replicate padding); radius 0 is
// the identity.
Tensor<float> gaussian_blur(const Tensor<float>& cube, float radius);

// I = T + weight * blur(R), rendered to RGB via the default camera and
// clamped. weight must lie in [0, 1].
ReflectionPair compose_reflection(const Tensor<float>& t_cube, const Tensor<float>& r_cube,
                                  float weight, float blur_radius);

// Regenerates a pair bit-exactly from its metadata.
ReflectionPair make_pair(const PairMeta& meta);

struct DatasetParams {
    int samples = 64;
    int height = 64, width = 64;
    IlluminantKind t_illuminant = IlluminantKind::TwoPeak;
    IlluminantKind r_illuminant = IlluminantKind::GaussianPeak;
    float weight_min = 0.35f, weight_max = 0.75f;
    float blur_min = 0.8f, blur_max = 2.2f;
};

PairMeta sample_meta(const DatasetParams& params, uint64_t base_seed, int index);
std::vector<ReflectionPair> generate_dataset(const DatasetParams& params, uint64_t base_seed);

}  // namespace srr::synth
