#include "cascade/baselines.hpp"

#include <cmath>
#include <map>
#include <memory>

namespace cascade::baselines {

namespace G = cascade::graph;

Tensorf direct_inference(denoiser::Denoiser<float>& model, int n, std::array<int, 2> hw,
                         const std::vector<int>& labels, const schedule::NoiseSchedule& s,
                         int ddim_steps, double eta, uint64_t seed) {
    auto dplan = schedule::make_ddim_plan(s.T, ddim_steps, eta);
    return pipeline::sample_ddim(model, n, hw, labels, s, dplan, seed);
}

double full_finetune_step(denoiser::Denoiser<float>& model, const Tensorf& x0,
                          const std::vector<int>& labels, const schedule::NoiseSchedule& s,
                          Rng& rng) {
    return pipeline::diffusion_loss_step(model, x0, labels, s, rng);
}

LowRankAdapter attach_lowrank(denoiser::Denoiser<float>& model, int rank,
                              const std::vector<std::string>& filter) {
    if (rank < 1) throw std::invalid_argument("lowrank: rank must be >= 1");
    if (model.has_weight_hook())
        throw std::invalid_argument("lowrank: the model already carries an adapter");
    auto& store = model.params();

    struct Factors {
        G::Var<float> A, B;
        Shape w_shape;
    };
    // keyed by the wrapped weight's node so the hook can recognize it
    auto table = std::make_shared<std::map<const void*, Factors>>();

    auto selected = [&filter](const std::string& name) {
        if (filter.empty()) return true;
        for (const auto& part : filter)
            if (name.find(part) != std::string::npos) return true;
        return false;
    };

    // snapshot first; adding adapter parameters grows the store we iterate
    std::vector<std::string> targets;
    for (const auto& p : store.params())
        if (p.group == "base" && p.name.size() > 2 &&
            p.name.compare(p.name.size() - 2, 2, ".w") == 0 && p.var.shape().size() >= 2 &&
            selected(p.name))
            targets.push_back(p.name);
    if (targets.empty()) throw std::invalid_argument("lowrank: the filter selects no weights");

    LowRankAdapter ad;
    ad.rank = rank;
    Rng rng(mix_seed(0x10adab1e5ull, (uint64_t)rank));
    for (const auto& name : targets) {
        // copy the Var up front; add() below may reallocate the param vector
        G::Var<float> w = store.at(name).var;
        const Shape ws = w.shape();
        const int out = ws[0];
        int64_t in_flat = 1;
        for (size_t d = 1; d < ws.size(); ++d) in_flat *= ws[d];
        if (rank > std::min<int64_t>(out, in_flat))
            throw std::invalid_argument("lowrank: rank " + std::to_string(rank) +
                                        " exceeds min(" + std::to_string(out) + ", " +
                                        std::to_string(in_flat) + ") of layer " + name);

        Tensorf a0 = randn<float>({out, rank}, rng);
        for (int64_t i = 0; i < a0.size(); ++i) a0[i] *= 0.02f;
        auto A = store.add("adapter." + name + ".A", "adapter", a0);
        auto B = store.add("adapter." + name + ".B", "adapter",
                           Tensorf::zeros({rank, (int)in_flat}));
        (*table)[w.node_ptr().get()] = Factors{A, B, ws};
        ad.adapted.push_back(name);
        ad.trainable_params += (int64_t)rank * (out + in_flat);
    }

    const float inv_rank = 1.0f / (float)rank;
    model.set_weight_hook([table, inv_rank](const G::Var<float>& w) -> G::Var<float> {
        auto it = table->find(w.node_ptr().get());
        if (it == table->end()) return w;
        const auto& f = it->second;
        auto delta = G::reshape(G::matmul(f.A, f.B), f.w_shape);
        return G::add(w, G::scale(delta, inv_rank));
    });

    store.set_group_trainable("base", false);
    store.set_group_trainable("adapter", true);
    return ad;
}

void detach_lowrank(denoiser::Denoiser<float>& model) {
    model.set_weight_hook(nullptr);
    auto& store = model.params();
    store.set_group_trainable("base", true);
    const auto groups = store.groups();
    for (const auto& g : groups)
        if (g == "adapter") store.set_group_trainable("adapter", false);
}

}  // namespace cascade::baselines
