#pragma once

#include <cmath>
#include <iomanip>
#include <sstream>

#include "srr/metrics.hpp"
#include "srr/model.hpp"
#include "srr/synth.hpp"

namespace srr::train {

using synth::ReflectionPair;

// Stateless per-step batch sampling: resuming from step t reproduces the
// exact index stream of an uninterrupted run.
inline std::vector<int> batch_indices(uint64_t seed, int64_t step, int train_count, int batch) {
    Rng rng(derive_seed(seed, 0xba7c4, static_cast<uint64_t>(step)));
    std::vector<int> idx(static_cast<size_t>(batch));
    for (int i = 0; i < batch; ++i) idx[static_cast<size_t>(i)] = static_cast<int>(rng.index(train_count));
    return idx;
}

inline Tensor<float> stack_rgb(const std::vector<ReflectionPair>& pairs,
                               const std::vector<int>& idx, bool degraded) {
    const auto& first = degraded ? pairs[static_cast<size_t>(idx[0])].input_rgb
                                 : pairs[static_cast<size_t>(idx[0])].clean_rgb;
    const int h = first.dim(1), w = first.dim(2);
    Tensor<float> out({static_cast<int>(idx.size()), 3, h, w});
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto& img = degraded ? pairs[static_cast<size_t>(idx[i])].input_rgb
                                   : pairs[static_cast<size_t>(idx[i])].clean_rgb;
        std::copy_n(img.data(), img.numel(), out.data() + static_cast<int64_t>(i) * img.numel());
    }
    return out;
}

inline Tensor<float> stack_cubes(const std::vector<ReflectionPair>& pairs,
                                 const std::vector<int>& idx) {
    const auto& first = pairs[static_cast<size_t>(idx[0])].t_cube;
    const int h = first.dim(1), w = first.dim(2);
    Tensor<float> out({static_cast<int>(idx.size()), codebook::kBands, h, w});
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto& cube = pairs[static_cast<size_t>(idx[i])].t_cube;
        std::copy_n(cube.data(), cube.numel(), out.data() + static_cast<int64_t>(i) * cube.numel());
    }
    return out;
}

struct LogRow {
    int64_t step = 0;
    double total = 0, l1 = 0, ssim_term = 0;
    double psnr = std::numeric_limits<double>::quiet_NaN();
    double ssim = std::numeric_limits<double>::quiet_NaN();
};

inline std::string log_csv(const std::vector<LogRow>& rows) {
    std::ostringstream os;
    os << "step,loss,l1,ssim_term,psnr,ssim\n";
    os << std::setprecision(9);
    for (const auto& r : rows) {
        os << r.step << ',' << r.total << ',' << r.l1 << ',' << r.ssim_term << ',';
        if (std::isnan(r.psnr))
            os << ',';
        else
            os << r.psnr << ',' << r.ssim;
        os << '\n';
    }
    return os.str();
}

// ---- codebook training ----

struct CodebookRun {
    codebook::CodebookModel<float> model;
    NamedParams<float> params;
    Adam<float> opt;
    int64_t next_step = 0;
    Tensor<float> last_used;  // (P, K) step of last selection, for dead-code reseeding
    std::vector<LogRow> log;
};

inline CodebookRun init_codebook_run(const config::RunConfig& cfg,
                                     const std::vector<ReflectionPair>& pairs,
                                     std::ostream* console = nullptr) {
    const pipeline::ModelConfig mc{cfg.model, cfg.seed};
    CodebookRun run;
    Rng rng(derive_seed(cfg.seed, 0xcb));
    run.model = codebook::CodebookModel<float>(mc.vq_partitions(), mc.vq_codes_per_partition(),
                                               cfg.model.latent_dim, cfg.model.codebook_hidden,
                                               rng);

    // Codebook init: k-means over encoder outputs of a few training images.
    const int sample_images = std::min<int>(16, cfg.data.samples - cfg.train.holdout);
    std::vector<float> feats;
    for (int i = 0; i < sample_images; ++i) {
        std::vector<int> one{i};
        auto z = run.model.encode(Var<float>::leaf(stack_rgb(pairs, one, false)));
        const int n_z = z.val().dim(1);
        const int64_t hw = static_cast<int64_t>(z.val().dim(2)) * z.val().dim(3);
        for (int64_t p = 0; p < hw; ++p)
            for (int d = 0; d < n_z; ++d)
                feats.push_back(z.val()[static_cast<int64_t>(d) * hw + p]);
    }
    const int n_z = cfg.model.latent_dim;
    Tensor<float> fm({static_cast<int>(feats.size()) / n_z, n_z});
    std::copy(feats.begin(), feats.end(), fm.data());
    run.model.book.codes.mutable_val() =
        codebook::kmeans_init(fm, run.model.partitions, run.model.k,
                              derive_seed(cfg.seed, 0x6ea5), console);

    run.model.collect(run.params, "codebook");
    run.opt.lr = cfg.train.lr;
    run.opt.beta1 = cfg.train.beta1;
    run.opt.beta2 = cfg.train.beta2;
    run.opt.init(run.params);
    run.last_used = Tensor<float>({run.model.partitions, run.model.k});
    return run;
}

inline double eval_codebook_psnr(const codebook::CodebookModel<float>& model,
                                 const std::vector<ReflectionPair>& pairs, int from, int to) {
    double sum = 0;
    for (int i = from; i < to; ++i) {
        std::vector<int> one{i};
        auto recon = model.reconstruct(Var<float>::leaf(stack_rgb(pairs, one, false)));
        Tensor<float> cube = stack_cubes(pairs, one);
        sum += metrics::psnr(recon.val(), cube);
    }
    return sum / std::max(1, to - from);
}

// Re-seed codes unused for 500 consecutive steps from a random encoder
// output of the current batch.
inline constexpr int kDeadCodeSteps = 500;

inline void reseed_dead_codes(CodebookRun& run, const Tensor<float>& zhat, int64_t step,
                              uint64_t seed, std::ostream* console) {
    const int P = run.model.partitions, K = run.model.k, n_z = run.model.n_z;
    Rng rng(derive_seed(seed, 0xdead, static_cast<uint64_t>(step)));
    const int64_t hw = static_cast<int64_t>(zhat.dim(2)) * zhat.dim(3);
    int reseeded = 0;
    for (int p = 0; p < P; ++p)
        for (int k = 0; k < K; ++k) {
            if (static_cast<double>(step) - run.last_used.at(p, k) < kDeadCodeSteps) continue;
            const int n = static_cast<int>(rng.index(zhat.dim(0)));
            const int64_t pix = rng.index(hw);
            float* code = run.model.book.codes.mutable_val().data() +
                          (static_cast<int64_t>(p) * K + k) * n_z;
            for (int d = 0; d < n_z; ++d)
                code[d] = zhat[(static_cast<int64_t>(n) * n_z + d) * hw + pix];
            run.last_used.at(p, k) = static_cast<float>(step);
            ++reseeded;
        }
    if (reseeded && console)
        *console << "step " << step << ": reseeded " << reseeded << " dead codes\n";
}

struct TrainOptions {
    int64_t steps = 0;  // target total step count
    std::string checkpoint_path;
    std::string log_path;
    std::ostream* console = nullptr;
    std::string config_snapshot;
};

inline void save_codebook_checkpoint(const std::string& path, const CodebookRun& run,
                                     const std::string& config_snapshot) {
    io::Checkpoint ck;
    for (const auto& [name, v] : run.params) ck.add(name, v.val());
    for (size_t i = 0; i < run.params.size(); ++i) {
        ck.add("opt.m." + run.params[i].first, run.opt.m[i]);
        ck.add("opt.v." + run.params[i].first, run.opt.v[i]);
    }
    ck.add("opt.step", Tensor<float>::full({1}, static_cast<float>(run.opt.step_count)));
    ck.add("state.next_step", Tensor<float>::full({1}, static_cast<float>(run.next_step)));
    ck.add("state.last_used", run.last_used);
    ck.config_snapshot = config_snapshot;
    io::write_checkpoint(path, ck);
}

inline void restore_params(const io::Checkpoint& ck, NamedParams<float>& params, Adam<float>& opt) {
    for (auto& [name, v] : params) {
        const Tensor<float>* t = ck.find(name);
        check_config(t != nullptr, "checkpoint is missing a model tensor");
        check_config(t->shape() == v.val().shape(), "checkpoint tensor shape mismatch");
        v.mutable_val() = *t;
    }
    opt.init(params);
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensor<float>* m = ck.find("opt.m." + params[i].first);
        const Tensor<float>* mv = ck.find("opt.v." + params[i].first);
        if (m && m->shape() == opt.m[i].shape()) opt.m[i] = *m;
        if (mv && mv->shape() == opt.v[i].shape()) opt.v[i] = *mv;
    }
    if (const Tensor<float>* s = ck.find("opt.step"))
        opt.step_count = static_cast<int64_t>((*s)[0]);
}

inline CodebookRun load_codebook_run(const std::string& path, const config::RunConfig& cfg,
                                     const std::vector<ReflectionPair>& pairs) {
    io::Checkpoint ck = io::read_checkpoint(path);
    CodebookRun run = init_codebook_run(cfg, pairs);
    restore_params(ck, run.params, run.opt);
    if (const Tensor<float>* s = ck.find("state.next_step"))
        run.next_step = static_cast<int64_t>((*s)[0]);
    if (const Tensor<float>* lu = ck.find("state.last_used"))
        if (lu->shape() == run.last_used.shape()) run.last_used = *lu;
    return run;
}

// Builds just the codebook model from a checkpoint (the removal trainer's
// frozen prior).
inline codebook::CodebookModel<float> load_codebook_model(const std::string& path) {
    io::Checkpoint ck = io::read_checkpoint(path);
    const config::RunConfig cfg = config::parse_config(ck.config_snapshot);
    const pipeline::ModelConfig mc{cfg.model, cfg.seed};
    Rng rng(derive_seed(cfg.seed, 0xcb));
    codebook::CodebookModel<float> model(mc.vq_partitions(), mc.vq_codes_per_partition(),
                                         cfg.model.latent_dim, cfg.model.codebook_hidden, rng);
    NamedParams<float> params;
    model.collect(params, "codebook");
    for (auto& [name, v] : params) {
        const Tensor<float>* t = ck.find(name);
        check_config(t != nullptr && t->shape() == v.val().shape(),
                     "codebook checkpoint does not match its config snapshot");
        v.mutable_val() = *t;
    }
    return model;
}

inline void train_codebook(CodebookRun& run, const std::vector<ReflectionPair>& pairs,
                           const config::RunConfig& cfg, const TrainOptions& opts) {
    const int train_count = cfg.data.samples - cfg.train.holdout;
    check_config(train_count >= 1, "no training samples left after the holdout split");
    for (int64_t step = run.next_step; step < opts.steps; ++step) {
        const auto idx = batch_indices(cfg.seed, step, train_count, cfg.train.batch);
        Tensor<float> rgb = stack_rgb(pairs, idx, false);
        Tensor<float> cube = stack_cubes(pairs, idx);

        auto rgb_leaf = Var<float>::leaf(rgb);
        auto zhat = run.model.encode(rgb_leaf);
        auto q = codebook::quantize_straight_through(zhat, run.model.book);
        auto recon = run.model.decode(q.st);

        auto l_rec = mean_all(abs_op(sub(recon, Var<float>::leaf(cube))));
        auto tiled = repeat_channels(zhat, run.model.partitions);
        auto l_vq = mean_all(square(sub(q.code_vectors, detach(tiled))));
        auto l_commit = mean_all(square(sub(tiled, Var<float>::leaf(q.raw.quantized))));
        auto total = add(l_rec, add(l_vq, scale(l_commit, 0.25f)));
        if (!std::isfinite(static_cast<double>(total.val()[0])))
            throw Error("codebook training diverged at step " + std::to_string(step) +
                        " (last checkpoint retained)");
        backward(total);
        run.opt.step(run.params);

        // Usage bookkeeping for Fig.-style analytics and dead-code handling.
        {
            const int P = run.model.partitions;
            const int64_t hw = static_cast<int64_t>(q.raw.indices.dim(2)) * q.raw.indices.dim(3);
            for (int n = 0; n < q.raw.indices.dim(0); ++n)
                for (int p = 0; p < P; ++p) {
                    const int32_t* ip =
                        q.raw.indices.data() + (static_cast<int64_t>(n) * P + p) * hw;
                    for (int64_t i = 0; i < hw; ++i)
                        run.last_used.at(p, ip[i]) = static_cast<float>(step);
                }
        }
        if (step >= kDeadCodeSteps)
            reseed_dead_codes(run, zhat.val(), step, cfg.seed, opts.console);

        LogRow row{step, total.val()[0], l_rec.val()[0], l_vq.val()[0], {}, {}};
        if ((step + 1) % cfg.train.eval_every == 0 && cfg.train.holdout > 0) {
            row.psnr = eval_codebook_psnr(run.model, pairs, train_count, cfg.data.samples);
            if (opts.console)
                *opts.console << "step " << step << " holdout spectral psnr " << row.psnr << "\n";
        }
        if (step % cfg.train.log_every == 0 || !std::isnan(row.psnr)) run.log.push_back(row);
        run.next_step = step + 1;
        if (!opts.checkpoint_path.empty() && (step + 1) % cfg.train.checkpoint_every == 0)
            save_codebook_checkpoint(opts.checkpoint_path, run, opts.config_snapshot);
    }
    if (!opts.checkpoint_path.empty())
        save_codebook_checkpoint(opts.checkpoint_path, run, opts.config_snapshot);
    if (!opts.log_path.empty()) io::write_text_file(opts.log_path, log_csv(run.log));
}

// ---- removal training ----

struct RemovalRun {
    pipeline::RemovalModel<float> model;
    NamedParams<float> params;
    Adam<float> opt;
    int64_t next_step = 0;
    std::vector<LogRow> log;
};

inline RemovalRun init_removal_run(const config::RunConfig& cfg,
                                   codebook::CodebookModel<float> prior, bool has_prior) {
    RemovalRun run;
    run.model = pipeline::RemovalModel<float>(pipeline::ModelConfig{cfg.model, cfg.seed});
    if (run.model.cfg.spectrum_active()) {
        check_config(has_prior,
                     "spectrum stream enabled but no codebook checkpoint was provided");
        run.model.load_prior(std::move(prior));
    }
    run.model.collect_trainable(run.params);
    run.opt.lr = cfg.train.lr;
    run.opt.beta1 = cfg.train.beta1;
    run.opt.beta2 = cfg.train.beta2;
    run.opt.init(run.params);
    return run;
}

struct EvalResult {
    double psnr = 0, ssim = 0;
    double input_psnr = 0, input_ssim = 0;
};

inline EvalResult evaluate_removal(const pipeline::RemovalModel<float>& model,
                                   const std::vector<ReflectionPair>& pairs, int from, int to) {
    EvalResult r;
    const int count = std::max(1, to - from);
    for (int i = from; i < to; ++i) {
        std::vector<int> one{i};
        Tensor<float> input = stack_rgb(pairs, one, true);
        Tensor<float> target = stack_rgb(pairs, one, false);
        Tensor<float> restored = model.infer(input);
        r.psnr += metrics::psnr(restored, target);
        r.ssim += metrics::ssim(restored, target);
        r.input_psnr += metrics::psnr(input, target);
        r.input_ssim += metrics::ssim(input, target);
    }
    r.psnr /= count;
    r.ssim /= count;
    r.input_psnr /= count;
    r.input_ssim /= count;
    return r;
}

inline void save_removal_checkpoint(const std::string& path, const RemovalRun& run,
                                    const std::string& config_snapshot) {
    io::Checkpoint ck;
    for (const auto& [name, v] : run.params) ck.add(name, v.val());
    NamedParams<float> frozen;
    run.model.collect_frozen(frozen);
    for (const auto& [name, v] : frozen) ck.add(name, v.val());
    for (size_t i = 0; i < run.params.size(); ++i) {
        ck.add("opt.m." + run.params[i].first, run.opt.m[i]);
        ck.add("opt.v." + run.params[i].first, run.opt.v[i]);
    }
    ck.add("opt.step", Tensor<float>::full({1}, static_cast<float>(run.opt.step_count)));
    ck.add("state.next_step", Tensor<float>::full({1}, static_cast<float>(run.next_step)));
    ck.config_snapshot = config_snapshot;
    io::write_checkpoint(path, ck);
}

inline RemovalRun load_removal_run(const std::string& path, const config::RunConfig& cfg) {
    io::Checkpoint ck = io::read_checkpoint(path);
    pipeline::ModelConfig mc{cfg.model, cfg.seed};
    RemovalRun run;
    run.model = pipeline::RemovalModel<float>(mc);
    if (run.model.cfg.spectrum_active()) {
        // The prior is embedded in the removal checkpoint.
        Rng scratch(0);
        codebook::CodebookModel<float> prior(mc.vq_partitions(), mc.vq_codes_per_partition(),
                                             cfg.model.latent_dim, cfg.model.codebook_hidden,
                                             scratch);
        NamedParams<float> pp;
        prior.collect(pp, "prior");
        for (auto& [name, v] : pp) {
            const Tensor<float>* t = ck.find(name);
            check_config(t != nullptr && t->shape() == v.val().shape(),
                         "removal checkpoint is missing its embedded codebook prior");
            v.mutable_val() = *t;
        }
        run.model.load_prior(std::move(prior));
    }
    run.model.collect_trainable(run.params);
    restore_params(ck, run.params, run.opt);
    if (const Tensor<float>* s = ck.find("state.next_step"))
        run.next_step = static_cast<int64_t>((*s)[0]);
    return run;
}

inline void train_removal(RemovalRun& run, const std::vector<ReflectionPair>& pairs,
                          const config::RunConfig& cfg, const TrainOptions& opts) {
    const int train_count = cfg.data.samples - cfg.train.holdout;
    check_config(train_count >= 1, "no training samples left after the holdout split");
    for (int64_t step = run.next_step; step < opts.steps; ++step) {
        const auto idx = batch_indices(cfg.seed, step, train_count, cfg.train.batch);
        Tensor<float> input = stack_rgb(pairs, idx, true);
        Tensor<float> target = stack_rgb(pairs, idx, false);

        auto fwd = run.model.forward(Var<float>::leaf(input));
        auto loss = pipeline::removal_loss(fwd.restored, Var<float>::leaf(target));
        if (!std::isfinite(static_cast<double>(loss.total.val()[0])))
            throw Error("removal training diverged at step " + std::to_string(step) +
                        " (last checkpoint retained)");
        backward(loss.total);
        run.opt.step(run.params);

        LogRow row{step, loss.total.val()[0], loss.l1, loss.ssim_term, {}, {}};
        if ((step + 1) % cfg.train.eval_every == 0 && cfg.train.holdout > 0) {
            EvalResult ev = evaluate_removal(run.model, pairs, train_count, cfg.data.samples);
            row.psnr = ev.psnr;
            row.ssim = ev.ssim;
            if (opts.console)
                *opts.console << "step " << step << " holdout psnr " << ev.psnr << " ssim "
                              << ev.ssim << " (input psnr " << ev.input_psnr << ")\n";
        }
        if (step % cfg.train.log_every == 0 || !std::isnan(row.psnr)) run.log.push_back(row);
        run.next_step = step + 1;
        if (!opts.checkpoint_path.empty() && (step + 1) % cfg.train.checkpoint_every == 0)
            save_removal_checkpoint(opts.checkpoint_path, run, opts.config_snapshot);
    }
    if (!opts.checkpoint_path.empty())
        save_removal_checkpoint(opts.checkpoint_path, run, opts.config_snapshot);
    if (!opts.log_path.empty()) io::write_text_file(opts.log_path, log_csv(run.log));
}

// ---- ablation ----

struct AblationRow {
    std::string name;
    config::ModelToggles toggles;
    double psnr = 0, ssim = 0;
};

inline std::vector<std::pair<std::string, config::ModelToggles>> tab3_rows() {
    using T = config::ModelToggles;
    return {
        {"base", T{false, false, false, false, false}},
        {"base+SSS", T{true, false, false, false, false}},
        {"base+SSS+SDRS", T{true, true, false, false, false}},
        {"base+DST+CG-MSA+CC-FFN", T{false, false, true, true, true}},
        {"base+SSS+SDRS+DST", T{true, true, true, false, false}},
        {"base+SSS+SDRS+DST+CG-MSA", T{true, true, true, true, false}},
        {"full", T{true, true, true, true, true}},
    };
}

// Trains one model per toggle row under an identical seed and budget and
// reports held-out metrics.
inline std::vector<AblationRow> run_ablation(
    const config::RunConfig& base, const std::vector<std::pair<std::string, config::ModelToggles>>& rows,
    const std::vector<ReflectionPair>& pairs, const codebook::CodebookModel<float>& prior,
    std::ostream* console = nullptr) {
    std::vector<AblationRow> out;
    const int train_count = base.data.samples - base.train.holdout;
    for (const auto& [name, toggles] : rows) {
        config::RunConfig cfg = base;
        cfg.model.toggles = toggles;
        RemovalRun run = init_removal_run(cfg, prior, true);
        TrainOptions opts;
        opts.steps = cfg.train.steps;
        train_removal(run, pairs, cfg, opts);
        EvalResult ev = evaluate_removal(run.model, pairs, train_count, base.data.samples);
        out.push_back({name, toggles, ev.psnr, ev.ssim});
        if (console)
            *console << name << ": psnr " << ev.psnr << " ssim " << ev.ssim << "\n";
    }
    return out;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "configuration,sss,sdrs,dst,cg_msa,cc_ffn,psnr,ssim\n" << std::setprecision(6);
    for (const auto& r : rows)
        os << r.name << ',' << r.toggles.sss << ',' << r.toggles.sdrs << ',' << r.toggles.dst
           << ',' << r.toggles.cg_msa << ',' << r.toggles.cc_ffn << ',' << r.psnr << ','
           << r.ssim << '\n';
    return os.str();
}

}  // namespace srr::train
