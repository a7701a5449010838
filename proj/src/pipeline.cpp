#include "cascade/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cascade/checkpoint.hpp"

namespace cascade::pipeline {

namespace G = cascade::graph;
namespace fs = std::filesystem;

CascadePlan plan(std::array<int, 2> base, std::array<int, 2> target) {
    if (base[0] < 1 || base[1] < 1) throw std::invalid_argument("plan: bad base extents");
    const int64_t p0 = (int64_t)base[0] * base[1];
    const int64_t pr = (int64_t)target[0] * target[1];
    if (pr < p0)
        throw std::invalid_argument("plan: target " + std::to_string(target[0]) + "x" +
                                    std::to_string(target[1]) + " is smaller than the base");
    if (target[0] < base[0] || target[1] < base[1])
        throw std::invalid_argument("plan: aspect ratio unreachable, an axis would shrink");

    int R = 0;
    while (p0 << (2 * R) < pr) ++R;  // smallest R with ratio <= 4^R
    if ((int64_t)base[0] << R < target[0] || (int64_t)base[1] << R < target[1])
        throw std::invalid_argument(
            "plan: aspect ratio unreachable within " + std::to_string(R) +
            " stages of at most 2x per axis");

    CascadePlan out;
    for (int r = 0; r <= R; ++r)
        out.stages.push_back({(int)std::min<int64_t>(target[0], (int64_t)base[0] << r),
                              (int)std::min<int64_t>(target[1], (int64_t)base[1] << r)});
    return out;
}

namespace {
// sampling never needs gradients; silence every parameter for the duration
struct FreezeGuard {
    graph::ParamStore<float>* store;
    std::vector<bool> saved;
    explicit FreezeGuard(graph::ParamStore<float>& s) : store(&s) {
        for (auto& p : store->params()) {
            saved.push_back(p.var.requires_grad());
            p.var.set_requires_grad(false);
        }
    }
    ~FreezeGuard() {
        size_t i = 0;
        for (auto& p : store->params()) p.var.set_requires_grad(saved[i++]);
    }
};
}  // namespace

Tensorf sample_ddim(denoiser::Denoiser<float>& model, int n, std::array<int, 2> hw,
                    const std::vector<int>& labels, const schedule::NoiseSchedule& s,
                    const schedule::DdimPlan& dplan, uint64_t seed, const Tensorf* z_start,
                    const StepInjector* inject) {
    if (n < 1) throw std::invalid_argument("sample_ddim: batch must be >= 1");
    if (dplan.step_indices.empty()) throw std::invalid_argument("sample_ddim: empty plan");
    if (!z_start && dplan.start_step != s.T)
        throw std::invalid_argument(
            "sample_ddim: sampling from pure noise requires a full [1, T] plan");

    FreezeGuard guard(model.params());
    Rng rng(seed);
    Tensorf z;
    if (z_start) {
        if (z_start->dim(0) != n)
            throw std::invalid_argument("sample_ddim: z_start batch mismatch");
        z = z_start->clone();
    } else {
        z = randn<float>({n, model.config().in_channels, hw[0], hw[1]}, rng);
    }

    // step_indices run high to low; the final hop lands on t=0 (clean image)
    for (size_t i = 0; i < dplan.step_indices.size(); ++i) {
        const int t = dplan.step_indices[i];
        const int t_prev = i + 1 < dplan.step_indices.size() ? dplan.step_indices[i + 1] : 0;
        const std::vector<int> tv((size_t)n, t);
        std::vector<G::Var<float>> deltas;
        if (inject) deltas = (*inject)(tv);
        auto eps = model.denoise(G::leaf(z), tv, labels, inject ? &deltas : nullptr);
        Tensorf noise;
        if (dplan.eta > 0.0) noise = randn<float>(z.shape(), rng);
        z = schedule::ddim_step(z, eps.eps.value(), t, t_prev, s, dplan.eta, noise);
    }
    return z;
}

CascadeResult sample_cascade(denoiser::Denoiser<float>& model,
                             const std::vector<const upsampler::UpsamplerStack<float>*>& stacks,
                             const CascadePlan& cplan, int n, const std::vector<int>& labels,
                             const schedule::NoiseSchedule& s, const SampleOptions& opt) {
    const int R = cplan.R();
    if (cplan.stages.empty()) throw std::invalid_argument("sample_cascade: empty plan");
    const bool tuned = !stacks.empty();
    if (tuned && (int)stacks.size() != R)
        throw std::invalid_argument("sample_cascade: " + std::to_string(stacks.size()) +
                                    " stacks for " + std::to_string(R) + " stage transitions");
    if (tuned)
        for (const auto* st : stacks)
            if (!st) throw std::invalid_argument("sample_cascade: missing stack in tuned mode");

    CascadeResult res;
    auto base_plan = schedule::make_ddim_plan(s.T, opt.ddim_steps, opt.eta);
    res.stage_outputs.push_back(sample_ddim(model, n, cplan.stages[0], labels, s, base_plan,
                                            opt.seed));

    for (int r = 1; r <= R; ++r) {
        const auto cur = cplan.stages[r];
        const auto prev = cplan.stages[r - 1];
        const Tensorf& pivot = res.stage_outputs.back();
        const uint64_t stage_seed = mix_seed(opt.seed, (uint64_t)r);
        Rng rng(stage_seed);

        Tensorf zK = schedule::pivot_replace(pivot, s, cur[0], cur[1], rng.raw());
        auto stage_plan = schedule::make_ddim_plan(s.K, opt.ddim_steps, opt.eta);

        StepInjector injector;
        std::vector<G::Var<float>> feat_vars;
        if (tuned) {
            const auto* stack = stacks[r - 1];
            const int f = stack->config().factor;
            if (cur[0] != prev[0] * f || cur[1] != prev[1] * f)
                throw std::invalid_argument(
                    "sample_cascade: stage " + std::to_string(r) + " grows " +
                    std::to_string(prev[0]) + "x" + std::to_string(prev[1]) + " to " +
                    std::to_string(cur[0]) + "x" + std::to_string(cur[1]) +
                    " but the stack upsamples by " + std::to_string(f));
            FreezeGuard guard(model.params());
            auto feats = model.extract_pivot_features(pivot, opt.t_probe, labels);
            for (auto& ft : feats) feat_vars.push_back(G::leaf(ft));
            injector = [stack, &feat_vars](const std::vector<int>& tv) {
                return stack->apply(feat_vars, tv);
            };
        }

        res.stage_outputs.push_back(sample_ddim(model, n, cur, labels, s, stage_plan,
                                                rng.raw(), &zK,
                                                injector ? &injector : nullptr));
    }
    return res;
}

double tune_step(const upsampler::Composite<float>& comp, const Tensorf& x0,
                 const std::vector<int>& labels, const schedule::NoiseSchedule& s, int t_probe,
                 Rng& rng, bool pivot_noise) {
    auto& model = *comp.model;
    auto& stack = *comp.stack;
    const int f = stack.config().factor;
    if (x0.rank() != 4)
        throw std::invalid_argument("tune_step: batch must be NCHW");
    if (x0.dim(2) % f != 0 || x0.dim(3) % f != 0)
        throw std::invalid_argument("tune_step: batch extents " + shape_str(x0.shape()) +
                                    " are not a multiple of the stage factor " +
                                    std::to_string(f));
    const int n = x0.dim(0);

    // ground-truth pivot: the same image at the previous stage's resolution
    Tensorf z0_prev = kernels::avg_pool_fwd(x0, f);
    if (pivot_noise) {
        // optional augmentation: a light diffusion of the pivot narrows the
        // gap to the generated pivots seen at inference
        const int t_aug = (int)rng.uniform_int(1, std::max(1, s.K / 20));
        z0_prev = schedule::forward_diffuse(z0_prev, t_aug,
                                            randn<float>(z0_prev.shape(), rng), s);
    }

    std::vector<int> t(n);
    for (int i = 0; i < n; ++i) t[i] = (int)rng.uniform_int(1, s.K);
    Tensorf eps = randn<float>(x0.shape(), rng);
    Tensorf z_t = schedule::forward_diffuse(x0, t, eps, s);

    std::vector<G::Var<float>> feat_vars;
    {
        FreezeGuard guard(model.params());
        for (auto& ft : model.extract_pivot_features(z0_prev, t_probe, labels))
            feat_vars.push_back(G::leaf(ft));
    }
    auto deltas = stack.apply(feat_vars, t);
    auto out = model.denoise(G::leaf(z_t), t, labels, &deltas);
    auto loss = G::mean_square(G::sub(G::leaf(eps), out.eps));
    G::backward(loss);
    return (double)loss.value()[0];
}

double diffusion_loss_step(denoiser::Denoiser<float>& model, const Tensorf& x0,
                           const std::vector<int>& labels, const schedule::NoiseSchedule& s,
                           Rng& rng) {
    if (x0.rank() != 4) throw std::invalid_argument("diffusion_loss_step: batch must be NCHW");
    const int n = x0.dim(0);
    std::vector<int> t(n);
    for (int i = 0; i < n; ++i) t[i] = (int)rng.uniform_int(1, s.T);
    Tensorf eps = randn<float>(x0.shape(), rng);
    Tensorf z_t = schedule::forward_diffuse(x0, t, eps, s);
    auto out = model.denoise(G::leaf(z_t), t, labels, nullptr);
    auto loss = G::mean_square(G::sub(G::leaf(eps), out.eps));
    G::backward(loss);
    return (double)loss.value()[0];
}

TrainResult train_loop(graph::ParamStore<float>& store, const data::Dataset& dataset,
                       const StepFn& step, const TrainOptions& opt, const EvalFn& eval_hook) {
    if (dataset.size() < 1) throw std::invalid_argument("train_loop: empty dataset");
    TrainResult res;
    optim::Adam<float> adam(store, opt.adam);
    Rng rng(opt.seed);

    std::ofstream csv;
    std::vector<std::string> metric_names;
    bool header_written = false;
    const bool writing = !opt.out_dir.empty();
    if (writing) fs::create_directories(opt.out_dir);

    auto write_header = [&](const std::vector<std::pair<std::string, double>>& metrics) {
        res.csv_path = (fs::path(opt.out_dir) / opt.csv_name).string();
        csv.open(res.csv_path, std::ios::trunc);
        csv << "step,loss";
        for (const auto& [k, v] : metrics) {
            metric_names.push_back(k);
            csv << "," << k;
        }
        csv << "\n";
        header_written = true;
    };

    auto log_row = [&](int64_t at, double loss,
                       const std::vector<std::pair<std::string, double>>* metrics) {
        if (!writing) return;
        if (!header_written) write_header(metrics ? *metrics : std::vector<std::pair<std::string, double>>{});
        csv << at << ",";
        if (std::isfinite(loss)) csv << loss;
        for (size_t i = 0; i < metric_names.size(); ++i) {
            csv << ",";
            if (metrics && i < metrics->size()) csv << (*metrics)[i].second;
        }
        csv << "\n";
        csv.flush();
    };

    auto checkpoint_at = [&](int64_t at, const std::string& name) {
        if (!writing) return;
        const std::string path = (fs::path(opt.out_dir) / name).string();
        ckpt::save(path, store, opt.config_hash, at);
        res.checkpoints.push_back(path);
    };

    if (writing && eval_hook) {
        auto m0 = eval_hook(0);
        write_header(m0);
        log_row(0, std::nan(""), &m0);
    }

    for (int64_t it = 1; it <= opt.steps; ++it) {
        std::vector<int> idx((size_t)opt.batch);
        for (auto& i : idx) i = (int)rng.uniform_int(0, dataset.size() - 1);
        data::Batch b = dataset.get(idx, opt.resolution);

        double loss;
        try {
            loss = step(b.x0, b.labels, rng);
            if (!std::isfinite(loss)) throw std::runtime_error("loss is not finite");
        } catch (const std::exception& e) {
            if (writing) {
                nlohmann::json diag;
                diag["step"] = it;
                diag["error"] = e.what();
                diag["recent_losses"] = std::vector<double>(
                    res.losses.end() - (int64_t)std::min<size_t>(res.losses.size(), 20),
                    res.losses.end());
                std::ofstream d(fs::path(opt.out_dir) / "diagnostic.json");
                d << diag.dump(2) << "\n";
            }
            throw std::runtime_error("training aborted at step " + std::to_string(it) + ": " +
                                     e.what());
        }
        adam.step();
        res.losses.push_back(loss);

        const bool last = it == opt.steps;
        if (it % opt.log_every == 0 || last) {
            std::vector<std::pair<std::string, double>> metrics;
            const bool do_eval = eval_hook && (it % opt.eval_every == 0 || last);
            if (do_eval) metrics = eval_hook(it);
            log_row(it, loss, do_eval ? &metrics : nullptr);
        }
        if (it % opt.checkpoint_every == 0 && !last)
            checkpoint_at(it, "ckpt_step" + std::to_string(it) + ".ckpt");
    }
    checkpoint_at(opt.steps, "ckpt_final.ckpt");
    return res;
}

}  // namespace cascade::pipeline
