#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cascade/upsampler.hpp"
#include "fd.hpp"

using namespace cascade;
namespace D = cascade::denoiser;
namespace U = cascade::upsampler;
namespace G = cascade::graph;

namespace {
D::UNetConfig tiny_cfg() {
    D::UNetConfig c;
    c.in_channels = 2;
    c.base_channels = 8;
    c.levels = 2;
    c.blocks_per_level = 1;
    c.time_embed_dim = 8;
    c.num_classes = 3;
    c.groupnorm_groups = 2;
    return c;
}

std::vector<int> tap_channels(const D::UNetConfig& c) {
    std::vector<int> out;
    for (int l = 0; l < c.levels; ++l) out.push_back(c.channels_at(l));
    return out;
}

std::vector<Tensorf> random_pivot(const D::Denoiser<float>& net, int n, int h, int w,
                                  uint64_t seed) {
    std::vector<Tensorf> out;
    int l = 0;
    for (auto& s : net.skip_shapes(n, h, w))
        out.push_back(randn_seeded<float>(s, mix_seed(seed, l++)));
    return out;
}

template <class T>
void nudge_exit_convs(graph::ParamStore<T>& store, const std::string& group, T mag,
                      uint64_t seed) {
    for (auto& p : store.params())
        if (p.group == group && p.name.find(".out.w") != std::string::npos) {
            auto& w = p.var.mutable_value();
            auto r = randn_seeded<T>(w.shape(), seed++);
            for (int64_t i = 0; i < w.size(); ++i) w[i] = mag * r[i];
        }
}
}  // namespace

TEST_CASE("a fresh stack is a no-op at every timestep") {
    D::Denoiser<float> net(tiny_cfg(), 3);
    U::UpsamplerStack<float> stack(net.params(), "stage2", {}, tap_channels(tiny_cfg()), 5);
    auto pivot = random_pivot(net, 2, 8, 8, 41);
    for (int t : {1, 500}) {
        auto deltas = stack.apply(pivot, t);
        auto want = net.skip_shapes(2, 16, 16);
        REQUIRE(deltas.size() == want.size());
        for (size_t l = 0; l < deltas.size(); ++l) {
            REQUIRE(deltas[l].shape() == want[l]);
            for (int64_t i = 0; i < deltas[l].size(); ++i) REQUIRE(deltas[l][i] == 0.0f);
        }
    }
}

TEST_CASE("timestep conditioning reaches the output") {
    D::Denoiser<float> net(tiny_cfg(), 3);
    U::UpsamplerStack<float> stack(net.params(), "stage2", {}, tap_channels(tiny_cfg()), 5);
    nudge_exit_convs(net.params(), "stage2", 0.2f, 43);
    auto pivot = random_pivot(net, 1, 8, 8, 47);
    auto early = stack.apply(pivot, 1);
    auto late = stack.apply(pivot, 900);
    double diff = 0;
    for (size_t l = 0; l < early.size(); ++l)
        for (int64_t i = 0; i < early[l].size(); ++i)
            diff = std::max(diff, std::abs((double)early[l][i] - (double)late[l][i]));
    CHECK(diff > 1e-6);
}

TEST_CASE("attach freezes the base and leaves only the stack trainable") {
    D::Denoiser<float> net(tiny_cfg(), 7);
    U::UpsamplerStack<float> stack(net.params(), "stage2", {}, tap_channels(tiny_cfg()), 9);
    auto comp = U::freeze_base_attach(net, stack);
    CHECK(comp.model == &net);
    CHECK(comp.stack == &stack);

    auto c = net.census();
    CHECK(c.trainable == c.per_group.at("stage2"));
    CHECK(c.total == c.per_group.at("base") + c.per_group.at("stage2"));
    for (auto& p : net.params().params())
        CHECK(p.var.requires_grad() == (p.group == "stage2"));
}

TEST_CASE("attach rejects a stack built for a different depth") {
    D::Denoiser<float> net(tiny_cfg(), 7);
    U::UpsamplerStack<float> stack(net.params(), "stage2", {}, {8, 16, 32}, 9);
    CHECK_THROWS_WITH_AS(U::freeze_base_attach(net, stack), doctest::Contains("3 levels"),
                         std::invalid_argument);
}

TEST_CASE("upsampler stays under one percent of the base parameter count") {
    D::UNetConfig big;  // library defaults, the size the stacks ride on
    big.num_classes = 4;
    D::Denoiser<float> net(big, 11);
    U::UpsamplerStack<float> stack(net.params(), "stage2", {}, tap_channels(big), 13);
    auto c = net.census();
    CHECK((double)c.per_group.at("stage2") / (double)c.per_group.at("base") < 0.01);
}

TEST_CASE("validation rejects mismatched inputs") {
    D::Denoiser<float> net(tiny_cfg(), 3);
    U::UpsamplerStack<float> stack(net.params(), "s", {}, tap_channels(tiny_cfg()), 5);
    auto pivot = random_pivot(net, 1, 8, 8, 53);

    auto short_pivot = pivot;
    short_pivot.pop_back();
    CHECK_THROWS_AS(stack.apply(short_pivot, 1), std::invalid_argument);

    auto fat = pivot;
    fat[0] = randn_seeded<float>({1, fat[0].dim(1) + 1, fat[0].dim(2), fat[0].dim(3)}, 59);
    CHECK_THROWS_WITH_AS(stack.apply(fat, 1), doctest::Contains("level 0"),
                         std::invalid_argument);

    CHECK_THROWS_AS(stack.apply(pivot, 0), std::invalid_argument);

    std::vector<G::Var<float>> vars;
    for (auto& p : pivot) vars.push_back(G::leaf(p));
    CHECK_THROWS_AS(stack.apply(vars, {1, 2}), std::invalid_argument);  // batch 1, two t

    U::UpsamplerConfig bad;
    bad.factor = 1;
    CHECK_THROWS_AS(
        U::UpsamplerStack<float>(net.params(), "s2", bad, tap_channels(tiny_cfg()), 5),
        std::invalid_argument);
    U::UpsamplerConfig odd;
    odd.width = 3;
    CHECK_THROWS_AS(
        U::UpsamplerStack<float>(net.params(), "s3", odd, tap_channels(tiny_cfg()), 5),
        std::invalid_argument);
}

TEST_CASE("stack gradients match finite differences") {
    D::UNetConfig c = tiny_cfg();
    c.base_channels = 4;
    D::Denoiser<double> net(c, 61);
    U::UpsamplerStack<double> stack(net.params(), "s2", {}, tap_channels(c), 67);
    U::freeze_base_attach(net, stack);
    nudge_exit_convs(net.params(), "s2", 0.3, 71);

    std::vector<Tensor<double>> pivot;
    int l = 0;
    for (auto& s : net.skip_shapes(1, 4, 4))
        pivot.push_back(randn_seeded<double>(s, mix_seed(73, l++)));
    std::vector<G::Var<double>> vars;
    for (auto& p : pivot) vars.push_back(G::leaf(p));

    std::vector<G::Var<double>> leaves;
    for (auto& p : net.params().params())
        if (p.group == "s2") leaves.push_back(p.var);
    double err = max_grad_rel_err(leaves, [&] {
        auto deltas = stack.apply(vars, std::vector<int>{300});
        auto loss = G::mean_square(deltas[0]);
        for (size_t i = 1; i < deltas.size(); ++i)
            loss = G::add(loss, G::mean_square(deltas[i]));
        return loss;
    });
    CHECK(err < 1e-4);
}
