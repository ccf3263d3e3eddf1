#include "srr/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

#include "srr/io.hpp"

namespace srr::config {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const char* where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError(std::string("unknown config key '") + it.key() + "' in " + where);
}

template <class T>
void get_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

VqMode vq_from_name(const std::string& s) {
    if (s == "band_wise") return VqMode::BandWise;
    if (s == "vanilla") return VqMode::Vanilla;
    throw ConfigError("vq_mode must be band_wise or vanilla, got " + s);
}

Stream stream_from_name(const std::string& s) {
    if (s == "rgb") return Stream::Rgb;
    if (s == "spectrum") return Stream::Spectrum;
    if (s == "dual") return Stream::Dual;
    throw ConfigError("stream must be rgb, spectrum or dual, got " + s);
}

}  // namespace

const char* vq_mode_name(VqMode m) { return m == VqMode::BandWise ? "band_wise" : "vanilla"; }

const char* stream_name(Stream s) {
    switch (s) {
        case Stream::Rgb: return "rgb";
        case Stream::Spectrum: return "spectrum";
        case Stream::Dual: return "dual";
    }
    return "?";
}

void RunConfig::validate() const {
    check_config(threads >= 1, "threads must be >= 1");
    check_config(data.samples >= 1, "data.samples must be >= 1");
    check_config(data.height >= 16 && data.width >= 16, "data size must be at least 16x16");
    check_config(data.weight_min >= 0.0 && data.weight_max <= 1.0 &&
                     data.weight_min <= data.weight_max,
                 "data.weight range must lie in [0, 1]");
    check_config(data.blur_min >= 0.0 && data.blur_min <= data.blur_max,
                 "data.blur range invalid");
    check_config(data.save_cubes == "transmission" || data.save_cubes == "both" ||
                     data.save_cubes == "none",
                 "data.save_cubes must be transmission, both or none");
    check_config(model.channels >= 1 && model.blocks >= 1, "model.channels/blocks must be >= 1");
    check_config(model.heads >= 1 && model.channels % model.heads == 0,
                 "model.channels must be divisible by model.heads");
    check_config(model.codes_per_band >= 1, "model.codes_per_band must be >= 1");
    check_config(model.latent_dim >= 1 && model.codebook_hidden >= 1,
                 "model.latent_dim/codebook_hidden must be >= 1");
    check_config(train.lr > 0.0 && train.beta1 >= 0.0 && train.beta1 < 1.0 &&
                     train.beta2 >= 0.0 && train.beta2 < 1.0,
                 "optimizer hyperparameters out of range");
    check_config(train.batch >= 1 && train.steps >= 1, "train.batch/steps must be >= 1");
    check_config(train.holdout >= 0 && train.holdout < data.samples,
                 "train.holdout must leave at least one training sample");
    check_config(train.eval_every >= 1 && train.checkpoint_every >= 1 && train.log_every >= 1,
                 "train cadence values must be >= 1");
}

RunConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig cfg;
    reject_unknown(j, {"seed", "threads", "data", "model", "train"}, "top level");
    get_to(j, "seed", cfg.seed);
    get_to(j, "threads", cfg.threads);

    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown(d,
                       {"samples", "height", "width", "transmission_illuminant",
                        "reflection_illuminant", "weight_min", "weight_max", "blur_min",
                        "blur_max", "save_cubes"},
                       "data");
        get_to(d, "samples", cfg.data.samples);
        get_to(d, "height", cfg.data.height);
        get_to(d, "width", cfg.data.width);
        if (d.contains("transmission_illuminant"))
            cfg.data.transmission_illuminant =
                synth::illuminant_from_name(d.at("transmission_illuminant").get<std::string>());
        if (d.contains("reflection_illuminant"))
            cfg.data.reflection_illuminant =
                synth::illuminant_from_name(d.at("reflection_illuminant").get<std::string>());
        get_to(d, "weight_min", cfg.data.weight_min);
        get_to(d, "weight_max", cfg.data.weight_max);
        get_to(d, "blur_min", cfg.data.blur_min);
        get_to(d, "blur_max", cfg.data.blur_max);
        get_to(d, "save_cubes", cfg.data.save_cubes);
    }

    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m,
                       {"channels", "blocks", "heads", "codes_per_band", "latent_dim",
                        "codebook_hidden", "sss", "sdrs", "dst", "cg_msa", "cc_ffn", "vq_mode",
                        "stream", "shared_region_params", "normalize_region_sums"},
                       "model");
        get_to(m, "channels", cfg.model.channels);
        get_to(m, "blocks", cfg.model.blocks);
        get_to(m, "heads", cfg.model.heads);
        get_to(m, "codes_per_band", cfg.model.codes_per_band);
        get_to(m, "latent_dim", cfg.model.latent_dim);
        get_to(m, "codebook_hidden", cfg.model.codebook_hidden);
        get_to(m, "sss", cfg.model.toggles.sss);
        get_to(m, "sdrs", cfg.model.toggles.sdrs);
        get_to(m, "dst", cfg.model.toggles.dst);
        get_to(m, "cg_msa", cfg.model.toggles.cg_msa);
        get_to(m, "cc_ffn", cfg.model.toggles.cc_ffn);
        if (m.contains("vq_mode")) cfg.model.vq_mode = vq_from_name(m.at("vq_mode").get<std::string>());
        if (m.contains("stream")) cfg.model.stream = stream_from_name(m.at("stream").get<std::string>());
        get_to(m, "shared_region_params", cfg.model.shared_region_params);
        get_to(m, "normalize_region_sums", cfg.model.normalize_region_sums);
    }

    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t,
                       {"lr", "beta1", "beta2", "batch", "steps", "holdout", "eval_every",
                        "checkpoint_every", "log_every"},
                       "train");
        get_to(t, "lr", cfg.train.lr);
        get_to(t, "beta1", cfg.train.beta1);
        get_to(t, "beta2", cfg.train.beta2);
        get_to(t, "batch", cfg.train.batch);
        get_to(t, "steps", cfg.train.steps);
        get_to(t, "holdout", cfg.train.holdout);
        get_to(t, "eval_every", cfg.train.eval_every);
        get_to(t, "checkpoint_every", cfg.train.checkpoint_every);
        get_to(t, "log_every", cfg.train.log_every);
    }

    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) { return parse_config(io::read_text_file(path)); }

std::string to_json(const RunConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    j["data"] = {
        {"samples", cfg.data.samples},
        {"height", cfg.data.height},
        {"width", cfg.data.width},
        {"transmission_illuminant", synth::illuminant_name(cfg.data.transmission_illuminant)},
        {"reflection_illuminant", synth::illuminant_name(cfg.data.reflection_illuminant)},
        {"weight_min", cfg.data.weight_min},
        {"weight_max", cfg.data.weight_max},
        {"blur_min", cfg.data.blur_min},
        {"blur_max", cfg.data.blur_max},
        {"save_cubes", cfg.data.save_cubes},
    };
    j["model"] = {
        {"channels", cfg.model.channels},
        {"blocks", cfg.model.blocks},
        {"heads", cfg.model.heads},
        {"codes_per_band", cfg.model.codes_per_band},
        {"latent_dim", cfg.model.latent_dim},
        {"codebook_hidden", cfg.model.codebook_hidden},
        {"sss", cfg.model.toggles.sss},
        {"sdrs", cfg.model.toggles.sdrs},
        {"dst", cfg.model.toggles.dst},
        {"cg_msa", cfg.model.toggles.cg_msa},
        {"cc_ffn", cfg.model.toggles.cc_ffn},
        {"vq_mode", vq_mode_name(cfg.model.vq_mode)},
        {"stream", stream_name(cfg.model.stream)},
        {"shared_region_params", cfg.model.shared_region_params},
        {"normalize_region_sums", cfg.model.normalize_region_sums},
    };
    j["train"] = {
        {"lr", cfg.train.lr},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"batch", cfg.train.batch},
        {"steps", cfg.train.steps},
        {"holdout", cfg.train.holdout},
        {"eval_every", cfg.train.eval_every},
        {"checkpoint_every", cfg.train.checkpoint_every},
        {"log_every", cfg.train.log_every},
    };
    return j.dump(2) + "\n";
}

}  // namespace srr::config
