#pragma once

#include <cstdint>
#include <string>

#include "srr/synth.hpp"

namespace srr::config {

enum class VqMode { BandWise, Vanilla };
enum class Stream { Rgb, Spectrum, Dual };

struct DataConfig {
    int samples = 64;
    int height = 64, width = 64;
    synth::IlluminantKind transmission_illuminant = synth::IlluminantKind::TwoPeak;
    synth::IlluminantKind reflection_illuminant = synth::IlluminantKind::GaussianPeak;
    double weight_min = 0.35, weight_max = 0.75;
    double blur_min = 0.8, blur_max = 2.2;
    std::string save_cubes = "transmission";  // transmission | both | none
};

struct ModelToggles {
    bool sss = true;
    bool sdrs = true;
    bool dst = true;
    bool cg_msa = true;
    bool cc_ffn = true;
};

struct ModelSection {
    int channels = 32;
    int blocks = 2;
    int heads = 4;
    int codes_per_band = 256;  // K
    int latent_dim = 64;       // n_z
    int codebook_hidden = 32;
    ModelToggles toggles;
    VqMode vq_mode = VqMode::BandWise;
    Stream stream = Stream::Dual;
    bool shared_region_params = false;
    bool normalize_region_sums = false;
};

struct TrainSection {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int batch = 2;
    int steps = 3000;
    int holdout = 16;
    int eval_every = 500;
    int checkpoint_every = 500;
    int log_every = 50;
};

// Whole-run configuration. Everything that affects results lives here (the
// CLI only takes paths and verbosity); unknown keys are rejected at every
// level, and each run embeds the resolved form in its output.
struct RunConfig {
    uint64_t seed = 7;
    int threads = 1;
    DataConfig data;
    ModelSection model;
    TrainSection train;

    void validate() const;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
std::string to_json(const RunConfig& cfg);

const char* vq_mode_name(VqMode m);
const char* stream_name(Stream s);

}  // namespace srr::config
