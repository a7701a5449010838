#pragma once

#include <array>
#include <string>
#include <vector>

#include "cascade/denoiser.hpp"
#include "cascade/schedule.hpp"
#include "cascade/upsampler.hpp"

namespace cascade::config {

enum class Arm { ours_tf, ours_t, direct, full_ft, lowrank };

Arm arm_from_string(const std::string& s);
std::string arm_to_string(Arm a);

struct ScheduleConfig {
    schedule::Kind kind = schedule::Kind::linear;
    int T = 1000;
    int K = 700;
};

struct TrainConfig {
    double lr = 5e-5;
    int batch = 16;
    int steps = 2000;
    uint64_t seed = 1;
    int eval_every = 500;
    int log_every = 50;
    int checkpoint_every = 1000;
};

struct DataConfig {
    uint64_t corpus_seed = 7;
    int n_train = 20000;
    int n_eval = 2000;
    std::string png_dir;  // nonempty switches the source to PNG ingestion
};

struct EvalConfig {
    uint64_t extractor_seed = 17;
    int n_samples = 1000;
    int ddim_steps = 50;
    double eta = 0.0;
    int patch = 16;
    int n_patches = 4;
};

struct UpsamplerRunConfig {
    int width = 4;
    int emb_dim = 8;
    int t_probe = 1;
    bool pivot_noise = false;  // optional training-pivot augmentation, off by default
};

// One JSON document drives a whole run. Every field has a pinned default;
// unknown keys are an error so typos cannot silently fall back.
struct RunConfig {
    ScheduleConfig sched;
    denoiser::UNetConfig unet;
    std::array<int, 2> base{32, 32};
    std::array<int, 2> target{64, 64};
    UpsamplerRunConfig ups;
    TrainConfig train;
    DataConfig data;
    EvalConfig eval;
    Arm arm = Arm::ours_tf;
    int lowrank_rank = 2;

    void validate() const;
    upsampler::UpsamplerConfig upsampler_config() const;
};

RunConfig defaults();

// text -> config, applying "a.b.c=value" overrides after parsing
RunConfig parse(const std::string& json_text, const std::vector<std::string>& overrides = {});
RunConfig parse_file(const std::string& path, const std::vector<std::string>& overrides = {});

// round-trip serialization; canonical (sorted keys, no whitespace variance)
std::string canonical_json(const RunConfig& cfg);

// FNV-1a over the canonical form, rendered as 16 hex digits
std::string config_hash(const RunConfig& cfg);

}  // namespace cascade::config
