#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "cascade/config.hpp"

using namespace cascade;
namespace C = cascade::config;

TEST_CASE("empty text yields the documented defaults") {
    auto c = C::parse("", {});
    CHECK(c.sched.T == 1000);
    CHECK(c.sched.K == 700);
    CHECK(c.sched.kind == schedule::Kind::linear);
    CHECK(c.base == std::array<int, 2>{32, 32});
    CHECK(c.target == std::array<int, 2>{64, 64});
    CHECK(c.train.lr == 5e-5);
    CHECK(c.train.batch == 16);
    CHECK(c.ups.t_probe == 1);
    CHECK(c.ups.pivot_noise == false);
    CHECK(c.eval.eta == 0.0);
    CHECK(c.eval.ddim_steps == 50);
    CHECK(c.arm == C::Arm::ours_tf);
    CHECK(c.lowrank_rank == 2);
    auto d = C::defaults();
    CHECK(C::config_hash(c) == C::config_hash(d));
}

TEST_CASE("partial documents keep defaults elsewhere") {
    auto c = C::parse(R"({"schedule": {"T": 500, "K": 350}, "train": {"batch": 4}})", {});
    CHECK(c.sched.T == 500);
    CHECK(c.sched.K == 350);
    CHECK(c.train.batch == 4);
    CHECK(c.train.lr == 5e-5);
    CHECK(c.eval.n_samples == 1000);
}

TEST_CASE("canonical json round-trips to the same hash") {
    auto c = C::parse(R"({"unet": {"base_channels": 24}, "arm": "direct"})", {});
    auto again = C::parse(C::canonical_json(c), {});
    CHECK(C::config_hash(c) == C::config_hash(again));
    CHECK(C::config_hash(c).size() == 16);
    CHECK(C::config_hash(c) != C::config_hash(C::defaults()));
}

TEST_CASE("key order does not change the hash") {
    auto a = C::parse(R"({"schedule": {"T": 800, "K": 500}, "train": {"batch": 8}})", {});
    auto b = C::parse(R"({"train": {"batch": 8}, "schedule": {"K": 500, "T": 800}})", {});
    CHECK(C::config_hash(a) == C::config_hash(b));
}

TEST_CASE("unknown fields are named in the error") {
    CHECK_THROWS_WITH_AS(C::parse(R"({"schedule": {"Tee": 5}})", {}),
                         doctest::Contains("schedule.Tee"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(C::parse(R"({"bogus": 1})", {}), doctest::Contains("config.bogus"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(C::parse(R"({"train": {"lr": "fast"}})", {}),
                         doctest::Contains("train.lr"), std::invalid_argument);
    CHECK_THROWS_AS(C::parse("{nope", {}), std::invalid_argument);
}

TEST_CASE("semantic validation names the offending field") {
    CHECK_THROWS_WITH_AS(C::parse(R"({"schedule": {"T": 1}})", {}), doctest::Contains("schedule.T"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(C::parse(R"({"schedule": {"K": 2000}})", {}),
                         doctest::Contains("schedule.K"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(C::parse(R"({"train": {"lr": -1.0}})", {}), doctest::Contains("train.lr"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(C::parse(R"({"cascade": {"base": [30, 32]}})", {}),
                         doctest::Contains("cascade.base"), std::invalid_argument);
    CHECK_THROWS_AS(C::parse(R"({"arm": "theirs"})", {}), std::invalid_argument);
    CHECK_THROWS_WITH_AS(C::parse(R"({"upsampler": {"t_probe": 0}})", {}),
                         doctest::Contains("t_probe"), std::invalid_argument);
}

TEST_CASE("overrides walk dotted paths and parse values as JSON") {
    auto c = C::parse("", {"train.lr=0.001", "schedule.T=800", "schedule.K=600", "arm=lowrank",
                           "upsampler.pivot_noise=true", "data.png_dir=/tmp/shapes"});
    CHECK(c.train.lr == 0.001);
    CHECK(c.sched.T == 800);
    CHECK(c.arm == C::Arm::lowrank);
    CHECK(c.ups.pivot_noise == true);
    CHECK(c.data.png_dir == "/tmp/shapes");  // not JSON, taken verbatim
}

TEST_CASE("overrides beat the document and bad ones are refused") {
    auto c = C::parse(R"({"train": {"batch": 4}})", {"train.batch=12"});
    CHECK(c.train.batch == 12);
    CHECK_THROWS_AS(C::parse("", {"no_equals_sign"}), std::invalid_argument);
    CHECK_THROWS_AS(C::parse("", {"=5"}), std::invalid_argument);
    CHECK_THROWS_WITH_AS(C::parse("", {"train.lrr=1"}), doctest::Contains("train.lrr"),
                         std::invalid_argument);
}

TEST_CASE("config files load like strings") {
    const std::string path = "/tmp/cfg_test_roundtrip.json";
    {
        std::ofstream out(path);
        out << R"({"eval": {"n_samples": 64}})";
    }
    auto c = C::parse_file(path, {"eval.patch=8"});
    CHECK(c.eval.n_samples == 64);
    CHECK(c.eval.patch == 8);
    CHECK_THROWS_AS(C::parse_file("/tmp/definitely_missing_cfg.json", {}), std::invalid_argument);
    std::remove(path.c_str());
}

TEST_CASE("arm names round trip") {
    for (auto a : {C::Arm::ours_tf, C::Arm::ours_t, C::Arm::direct, C::Arm::full_ft,
                   C::Arm::lowrank})
        CHECK(C::arm_from_string(C::arm_to_string(a)) == a);
}

TEST_CASE("upsampler run settings map onto the module config") {
    auto c = C::defaults();
    auto u = c.upsampler_config();
    CHECK(u.width == c.ups.width);
    CHECK(u.emb_dim == c.ups.emb_dim);
    CHECK(u.factor == 2);
    u.validate();
}
