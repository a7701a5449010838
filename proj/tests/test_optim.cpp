#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cascade/graph.hpp"
#include "cascade/optim.hpp"

using namespace cascade;
namespace G = cascade::graph;
namespace O = cascade::optim;

namespace {

// hand-rolled Adam reference, double arithmetic throughout
struct RefAdam {
    double lr, b1, b2, eps;
    std::vector<double> m, v;
    int t = 0;

    RefAdam(int n, O::AdamConfig c) : lr(c.lr), b1(c.beta1), b2(c.beta2), eps(c.eps), m(n), v(n) {}

    void step(std::vector<double>& w, const std::vector<double>& g) {
        ++t;
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(b1, t));
            const double vh = v[i] / (1 - std::pow(b2, t));
            w[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
};

}  // namespace

TEST_CASE("ten steps match an independent reference trajectory") {
    G::ParamStore<double> store;
    Tensord init({3}, {0.5, -1.2, 2.0});
    auto w = store.add("w", "base", init.clone());

    O::AdamConfig cfg;
    cfg.lr = 0.01;
    O::Adam<double> adam(store, cfg);

    std::vector<double> ref_w{0.5, -1.2, 2.0};
    RefAdam ref(3, cfg);

    // deterministic but varied gradient stream
    auto grad_at = [](int step, int i) { return std::sin(0.7 * step + i) + 0.1 * i; };

    for (int step = 0; step < 10; ++step) {
        // mean_square(w - c) has gradient 2(w - c)/n; pick c so that equals g
        Tensord c({3});
        std::vector<double> gv(3);
        for (int i = 0; i < 3; ++i) {
            gv[i] = grad_at(step, i);
            c[i] = w.value()[i] - gv[i] * 3.0 / 2.0;
        }
        auto loss = G::mean_square(G::sub(w, G::leaf(c)));
        G::backward(loss);
        adam.step();
        ref.step(ref_w, gv);
        for (int i = 0; i < 3; ++i)
            REQUIRE(std::abs(w.value()[i] - ref_w[i]) <= 1e-12);
    }
    CHECK(adam.steps_taken() == 10);
}

TEST_CASE("first update is close to lr in magnitude") {
    // with bias correction the first step is lr * g/(|g| + eps)
    G::ParamStore<float> store;
    auto w = store.add("w", "base", Tensorf({2}, {1.0f, -1.0f}));
    O::AdamConfig cfg;
    cfg.lr = 0.05;
    O::Adam<float> adam(store, cfg);

    // gradient of mean_square(w - c) over 2 elements is (w - c); target +3, -0.25
    Tensorf c({2}, {1.0f - 3.0f, -1.0f + 0.25f});
    auto loss = G::mean_square(G::sub(w, G::leaf(c)));
    G::backward(loss);
    adam.step();
    CHECK(std::abs(w.value()[0] - (1.0f - 0.05f)) <= 1e-5);
    CHECK(std::abs(w.value()[1] - (-1.0f + 0.05f)) <= 1e-5);
}

TEST_CASE("descends a quadratic to its minimum") {
    G::ParamStore<double> store;
    auto w = store.add("w", "base", Tensord({1}, {-4.0}));
    O::AdamConfig cfg;
    cfg.lr = 0.1;
    O::Adam<double> adam(store, cfg);

    double last = 1e30;
    for (int i = 0; i < 400; ++i) {
        auto diff = G::sub(w, G::leaf(Tensord({1}, {3.0})));
        auto loss = G::mean_square(diff);
        G::backward(loss);
        adam.step();
        if (i % 100 == 99) {
            const double cur = std::pow(w.value()[0] - 3.0, 2);
            CHECK(cur < last);
            last = cur;
        }
    }
    CHECK(std::abs(w.value()[0] - 3.0) <= 1e-2);
}

TEST_CASE("frozen and gradient-free parameters stay untouched") {
    G::ParamStore<float> store;
    auto a = store.add("a", "ga", Tensorf({1}, {1.0f}));
    auto b = store.add("b", "gb", Tensorf({1}, {2.0f}));
    auto c = store.add("c", "gc", Tensorf({1}, {3.0f}));
    store.set_group_trainable("gb", false);

    O::Adam<float> adam(store, {});
    // loss touches a and b only; b is frozen, c never gets a gradient
    auto loss = G::mean_square(G::add(a, G::scale(b, 2.0f)));
    G::backward(loss);
    CHECK(a.has_grad());
    CHECK_FALSE(b.has_grad());  // requires_grad off, backward skips it
    adam.step();

    CHECK(a.value()[0] != 1.0f);
    CHECK(b.value()[0] == 2.0f);
    CHECK(c.value()[0] == 3.0f);
    CHECK_FALSE(a.has_grad());  // step clears gradients
}

TEST_CASE("rejects bad hyperparameters") {
    G::ParamStore<float> store;
    store.add("w", "base", Tensorf({1}, {0.0f}));
    O::AdamConfig bad;
    bad.lr = 0.0;
    CHECK_THROWS_AS(O::Adam<float>(store, bad), std::invalid_argument);
    bad.lr = 1e-3;
    bad.beta1 = 1.0;
    CHECK_THROWS_AS(O::Adam<float>(store, bad), std::invalid_argument);
    bad.beta1 = 0.9;
    bad.beta2 = -0.1;
    CHECK_THROWS_AS(O::Adam<float>(store, bad), std::invalid_argument);
}

TEST_CASE("defaults match the training recipe") {
    O::AdamConfig cfg;
    CHECK(cfg.lr == 5e-5);
    CHECK(cfg.beta1 == 0.9);
    CHECK(cfg.beta2 == 0.999);
    CHECK(cfg.eps == 1e-8);
}
