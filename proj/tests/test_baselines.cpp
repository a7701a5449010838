#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cascade/baselines.hpp"

using namespace cascade;
namespace B = cascade::baselines;
namespace D = cascade::denoiser;
namespace P = cascade::pipeline;
namespace S = cascade::schedule;

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

void shake(graph::ParamStore<float>& store, float mag, uint64_t seed) {
    Rng rng(seed);
    for (auto& p : store.params()) {
        auto& t = p.var.mutable_value();
        for (int64_t i = 0; i < t.size(); ++i) t[i] += mag * (float)rng.normal();
    }
}

bool same_bits(const Tensorf& a, const Tensorf& b) {
    if (!(a.shape() == b.shape())) return false;
    for (int64_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

double max_abs_diff(const Tensorf& a, const Tensorf& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, (double)std::abs(a[i] - b[i]));
    return m;
}

// closed-form adapter size: sum of rank*(out + flattened in) over every
// conv and linear weight in the net
int64_t lowrank_count(const D::UNetConfig& c, int rank) {
    graph::ParamStore<float> probe;
    D::Denoiser<float> net(c, 1);
    int64_t n = 0;
    for (const auto& p : net.params().params()) {
        const auto& name = p.name;
        if (name.size() < 2 || name.compare(name.size() - 2, 2, ".w") != 0) continue;
        if (p.var.shape().size() < 2) continue;
        int64_t in_flat = 1;
        for (size_t d = 1; d < p.var.shape().size(); ++d) in_flat *= p.var.shape()[d];
        n += (int64_t)rank * (p.var.shape()[0] + in_flat);
    }
    return n;
}

Tensorf fake_batch(int n, int c, int h, int w, uint64_t seed) {
    auto x = randn_seeded<float>({n, c, h, w}, seed);
    for (int64_t i = 0; i < x.size(); ++i) x[i] = std::tanh(x[i]);
    return x;
}

}  // namespace

TEST_CASE("direct inference at the base resolution is standard sampling") {
    D::Denoiser<float> net(tiny_cfg(), 3);
    shake(net.params(), 0.02f, 4);
    auto s = S::make_schedule(S::Kind::linear, 40, 25);
    std::vector<int> labels{0, 2};

    auto a = B::direct_inference(net, 2, {8, 8}, labels, s, 6, 0.0, 17);
    auto b = P::sample_ddim(net, 2, {8, 8}, labels, s, S::make_ddim_plan(40, 6, 0.0), 17);
    CHECK(same_bits(a, b));

    auto big = B::direct_inference(net, 1, {16, 16}, {1}, s, 6, 0.0, 18);
    CHECK(big.shape() == Shape{1, 2, 16, 16});
    CHECK_THROWS_AS(B::direct_inference(net, 1, {9, 9}, {1}, s, 6, 0.0, 18),
                    std::invalid_argument);
}

TEST_CASE("full fine-tune step reaches every weight") {
    D::Denoiser<float> net(tiny_cfg(), 5);
    shake(net.params(), 0.02f, 6);
    auto c = net.census();
    CHECK(c.trainable == c.total);

    auto s = S::make_schedule(S::Kind::linear, 40, 25);
    Rng rng(7);
    const double loss = B::full_finetune_step(net, fake_batch(2, 2, 16, 16, 8), {0, 1}, s, rng);
    CHECK(std::isfinite(loss));
    CHECK(loss > 0.0);

    // applying the gradients moves parameters across the whole depth
    optim::AdamConfig ocfg;
    ocfg.lr = 1e-3;
    optim::Adam<float> adam(net.params(), ocfg);
    std::vector<Tensorf> before;
    for (const auto& p : net.params().params()) before.push_back(p.var.value().clone());
    adam.step();
    int moved = 0;
    size_t k = 0;
    for (const auto& p : net.params().params())
        if (!same_bits(p.var.value(), before[k++])) ++moved;
    CHECK(moved > (int)before.size() / 2);
}

TEST_CASE("zero-init adapter is the identity at attach time") {
    D::Denoiser<float> net(tiny_cfg(), 9);
    shake(net.params(), 0.02f, 10);
    auto s = S::make_schedule(S::Kind::linear, 40, 25);
    std::vector<int> labels{1};

    auto plain = P::sample_ddim(net, 1, {8, 8}, labels, s, S::make_ddim_plan(40, 5, 0.0), 23);
    auto ad = B::attach_lowrank(net, 2);
    CHECK(ad.rank == 2);
    auto adapted = P::sample_ddim(net, 1, {8, 8}, labels, s, S::make_ddim_plan(40, 5, 0.0), 23);
    CHECK(max_abs_diff(plain, adapted) <= 1e-6);

    B::detach_lowrank(net);
    auto detached = P::sample_ddim(net, 1, {8, 8}, labels, s, S::make_ddim_plan(40, 5, 0.0), 23);
    CHECK(same_bits(plain, detached));
}

TEST_CASE("adapter parameter count matches the layer arithmetic") {
    D::Denoiser<float> net(tiny_cfg(), 11);
    auto ad = B::attach_lowrank(net, 2);
    CHECK(ad.trainable_params == lowrank_count(tiny_cfg(), 2));
    CHECK(ad.trainable_params == net.params().group_size("adapter"));
    CHECK(net.params().trainable_size() == ad.trainable_params);  // base frozen
    CHECK_FALSE(ad.adapted.empty());
    for (const auto& name : ad.adapted)
        CHECK(name.compare(name.size() - 2, 2, ".w") == 0);
}

TEST_CASE("adapter size scales linearly in the rank") {
    D::Denoiser<float> tinyA(tiny_cfg(), 12);
    D::Denoiser<float> tinyB(tiny_cfg(), 12);
    auto r1 = B::attach_lowrank(tinyA, 1);
    auto r2 = B::attach_lowrank(tinyB, 2);
    CHECK(r2.trainable_params == 2 * r1.trainable_params);
    CHECK(r2.adapted == r1.adapted);
}

TEST_CASE("oversized ranks are refused with the first offending layer named") {
    D::Denoiser<float> net(tiny_cfg(), 13);
    // stem.w maps 2 channels to 8: min(out, in*k*k) = 8, and it sits first
    CHECK_THROWS_WITH_AS(B::attach_lowrank(net, 64), doctest::Contains("stem.w"),
                         std::invalid_argument);
    // rank 4 clears the stem but not the 8 -> 2 output conv
    CHECK_THROWS_WITH_AS(B::attach_lowrank(net, 4), doctest::Contains("head.w"),
                         std::invalid_argument);
    CHECK_THROWS_AS(B::attach_lowrank(net, 0), std::invalid_argument);

    D::Denoiser<float> ok(tiny_cfg(), 13);
    B::attach_lowrank(ok, 2);
    CHECK_THROWS_WITH_AS(B::attach_lowrank(ok, 2), doctest::Contains("already"),
                         std::invalid_argument);
}

TEST_CASE("a layer filter narrows the adapted set and unlocks higher ranks") {
    D::Denoiser<float> net(tiny_cfg(), 21);
    // rank 4 is refused on the full set (head.w is 8 -> 2) but fine on the
    // interior convs alone
    auto ad = B::attach_lowrank(net, 4, {"conv1.w", "conv2.w"});
    CHECK(ad.rank == 4);
    CHECK_FALSE(ad.adapted.empty());
    for (const auto& name : ad.adapted) {
        const bool interior = name.find("conv1.w") != std::string::npos ||
                              name.find("conv2.w") != std::string::npos;
        CHECK(interior);
    }
    B::detach_lowrank(net);
    CHECK_THROWS_WITH_AS(B::attach_lowrank(net, 2, {"no_such_layer"}),
                         doctest::Contains("selects no weights"), std::invalid_argument);
}

TEST_CASE("training an attached adapter changes samples without touching base weights") {
    D::Denoiser<float> net(tiny_cfg(), 14);
    shake(net.params(), 0.02f, 15);
    auto s = S::make_schedule(S::Kind::linear, 40, 25);
    std::vector<int> labels{0};

    auto plain = P::sample_ddim(net, 1, {16, 16}, labels, s, S::make_ddim_plan(40, 5, 0.0), 31);
    B::attach_lowrank(net, 2);

    std::vector<Tensorf> base_before;
    for (const auto& p : net.params().params())
        if (p.group == "base") base_before.push_back(p.var.value().clone());

    optim::AdamConfig ocfg;
    ocfg.lr = 1e-2;
    optim::Adam<float> adam(net.params(), ocfg);
    Rng rng(16);
    for (int i = 0; i < 3; ++i) {
        const double loss =
            P::diffusion_loss_step(net, fake_batch(2, 2, 16, 16, 60 + i), {0, 1}, s, rng);
        REQUIRE(std::isfinite(loss));
        adam.step();
    }

    size_t k = 0;
    for (const auto& p : net.params().params())
        if (p.group == "base") REQUIRE(same_bits(p.var.value(), base_before[k++]));

    auto tuned = P::sample_ddim(net, 1, {16, 16}, labels, s, S::make_ddim_plan(40, 5, 0.0), 31);
    CHECK(max_abs_diff(plain, tuned) > 1e-5);
}
