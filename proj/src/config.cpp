#include "cascade/config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace cascade::config {

using json = nlohmann::json;

Arm arm_from_string(const std::string& s) {
    if (s == "ours_tf") return Arm::ours_tf;
    if (s == "ours_t") return Arm::ours_t;
    if (s == "direct") return Arm::direct;
    if (s == "full_ft") return Arm::full_ft;
    if (s == "lowrank") return Arm::lowrank;
    throw std::invalid_argument("unknown arm: " + s +
                                " (want ours_tf|ours_t|direct|full_ft|lowrank)");
}

std::string arm_to_string(Arm a) {
    switch (a) {
        case Arm::ours_tf: return "ours_tf";
        case Arm::ours_t: return "ours_t";
        case Arm::direct: return "direct";
        case Arm::full_ft: return "full_ft";
        case Arm::lowrank: return "lowrank";
    }
    throw std::logic_error("bad arm enum");
}

void RunConfig::validate() const {
    if (sched.T < 2) throw std::invalid_argument("schedule.T: must be >= 2");
    if (sched.K < 1 || sched.K > sched.T)
        throw std::invalid_argument("schedule.K: must lie in [1, T]");
    unet.validate();
    upsampler_config().validate();
    for (int v : {base[0], base[1], target[0], target[1]})
        if (v < 8) throw std::invalid_argument("cascade: resolutions must be >= 8");
    if (base[0] % unet.divisibility() != 0 || base[1] % unet.divisibility() != 0)
        throw std::invalid_argument("cascade.base: extents must be divisible by " +
                                    std::to_string(unet.divisibility()));
    if (train.lr <= 0) throw std::invalid_argument("train.lr: must be positive");
    if (train.batch < 1) throw std::invalid_argument("train.batch: must be >= 1");
    if (train.steps < 0) throw std::invalid_argument("train.steps: must be >= 0");
    if (train.eval_every < 1) throw std::invalid_argument("train.eval_every: must be >= 1");
    if (train.log_every < 1) throw std::invalid_argument("train.log_every: must be >= 1");
    if (train.checkpoint_every < 1)
        throw std::invalid_argument("train.checkpoint_every: must be >= 1");
    if (data.png_dir.empty() && (data.n_train < 1 || data.n_eval < 1))
        throw std::invalid_argument("data: n_train and n_eval must be >= 1");
    if (eval.n_samples < 2) throw std::invalid_argument("eval.n_samples: must be >= 2");
    if (eval.ddim_steps < 1) throw std::invalid_argument("eval.ddim_steps: must be >= 1");
    if (eval.eta < 0 || eval.eta > 1) throw std::invalid_argument("eval.eta: must be in [0,1]");
    if (eval.patch < 1) throw std::invalid_argument("eval.patch: must be >= 1");
    if (eval.n_patches < 1) throw std::invalid_argument("eval.n_patches: must be >= 1");
    if (ups.t_probe < 1 || ups.t_probe > sched.T)
        throw std::invalid_argument("upsampler.t_probe: must lie in [1, T]");
    if (lowrank_rank < 1) throw std::invalid_argument("lowrank.rank: must be >= 1");
}

upsampler::UpsamplerConfig RunConfig::upsampler_config() const {
    upsampler::UpsamplerConfig u;
    u.width = ups.width;
    u.emb_dim = ups.emb_dim;
    u.factor = 2;
    u.gn_groups = ups.width % 2 == 0 ? 2 : 1;
    return u;
}

RunConfig defaults() { return RunConfig{}; }

namespace {
json to_json(const RunConfig& c) {
    json j;
    j["schedule"] = {{"kind", schedule::to_string(c.sched.kind)},
                     {"T", c.sched.T},
                     {"K", c.sched.K}};
    j["unet"] = {{"in_channels", c.unet.in_channels},
                 {"base_channels", c.unet.base_channels},
                 {"levels", c.unet.levels},
                 {"blocks_per_level", c.unet.blocks_per_level},
                 {"time_embed_dim", c.unet.time_embed_dim},
                 {"num_classes", c.unet.num_classes},
                 {"groupnorm_groups", c.unet.groupnorm_groups}};
    j["cascade"] = {{"base", c.base}, {"target", c.target}};
    j["upsampler"] = {{"width", c.ups.width},
                      {"emb_dim", c.ups.emb_dim},
                      {"t_probe", c.ups.t_probe},
                      {"pivot_noise", c.ups.pivot_noise}};
    j["train"] = {{"lr", c.train.lr},
                  {"batch", c.train.batch},
                  {"steps", c.train.steps},
                  {"seed", c.train.seed},
                  {"eval_every", c.train.eval_every},
                  {"log_every", c.train.log_every},
                  {"checkpoint_every", c.train.checkpoint_every}};
    j["data"] = {{"corpus_seed", c.data.corpus_seed},
                 {"n_train", c.data.n_train},
                 {"n_eval", c.data.n_eval},
                 {"png_dir", c.data.png_dir}};
    j["eval"] = {{"extractor_seed", c.eval.extractor_seed},
                 {"n_samples", c.eval.n_samples},
                 {"ddim_steps", c.eval.ddim_steps},
                 {"eta", c.eval.eta},
                 {"patch", c.eval.patch},
                 {"n_patches", c.eval.n_patches}};
    j["arm"] = arm_to_string(c.arm);
    j["lowrank"] = {{"rank", c.lowrank_rank}};
    return j;
}

// pull a field if present, then mark it consumed
template <class T>
void take(json& obj, const char* key, T& out, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) return;
    try {
        out = it->get<T>();
    } catch (const json::exception&) {
        throw std::invalid_argument(where + "." + key + ": wrong type (" + it->dump() + ")");
    }
    obj.erase(it);
}

void reject_unknown(const json& obj, const std::string& where) {
    if (!obj.empty())
        throw std::invalid_argument("unknown config field: " + where + "." +
                                    obj.begin().key());
}

RunConfig from_json(json j) {
    if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
    RunConfig c;
    if (j.contains("schedule")) {
        json s = j.at("schedule");
        std::string kind = schedule::to_string(c.sched.kind);
        take(s, "kind", kind, "schedule");
        c.sched.kind = schedule::kind_from_string(kind);
        take(s, "T", c.sched.T, "schedule");
        take(s, "K", c.sched.K, "schedule");
        reject_unknown(s, "schedule");
        j.erase("schedule");
    }
    if (j.contains("unet")) {
        json u = j.at("unet");
        take(u, "in_channels", c.unet.in_channels, "unet");
        take(u, "base_channels", c.unet.base_channels, "unet");
        take(u, "levels", c.unet.levels, "unet");
        take(u, "blocks_per_level", c.unet.blocks_per_level, "unet");
        take(u, "time_embed_dim", c.unet.time_embed_dim, "unet");
        take(u, "num_classes", c.unet.num_classes, "unet");
        take(u, "groupnorm_groups", c.unet.groupnorm_groups, "unet");
        reject_unknown(u, "unet");
        j.erase("unet");
    }
    if (j.contains("cascade")) {
        json k = j.at("cascade");
        take(k, "base", c.base, "cascade");
        take(k, "target", c.target, "cascade");
        reject_unknown(k, "cascade");
        j.erase("cascade");
    }
    if (j.contains("upsampler")) {
        json u = j.at("upsampler");
        take(u, "width", c.ups.width, "upsampler");
        take(u, "emb_dim", c.ups.emb_dim, "upsampler");
        take(u, "t_probe", c.ups.t_probe, "upsampler");
        take(u, "pivot_noise", c.ups.pivot_noise, "upsampler");
        reject_unknown(u, "upsampler");
        j.erase("upsampler");
    }
    if (j.contains("train")) {
        json t = j.at("train");
        take(t, "lr", c.train.lr, "train");
        take(t, "batch", c.train.batch, "train");
        take(t, "steps", c.train.steps, "train");
        take(t, "seed", c.train.seed, "train");
        take(t, "eval_every", c.train.eval_every, "train");
        take(t, "log_every", c.train.log_every, "train");
        take(t, "checkpoint_every", c.train.checkpoint_every, "train");
        reject_unknown(t, "train");
        j.erase("train");
    }
    if (j.contains("data")) {
        json d = j.at("data");
        take(d, "corpus_seed", c.data.corpus_seed, "data");
        take(d, "n_train", c.data.n_train, "data");
        take(d, "n_eval", c.data.n_eval, "data");
        take(d, "png_dir", c.data.png_dir, "data");
        reject_unknown(d, "data");
        j.erase("data");
    }
    if (j.contains("eval")) {
        json e = j.at("eval");
        take(e, "extractor_seed", c.eval.extractor_seed, "eval");
        take(e, "n_samples", c.eval.n_samples, "eval");
        take(e, "ddim_steps", c.eval.ddim_steps, "eval");
        take(e, "eta", c.eval.eta, "eval");
        take(e, "patch", c.eval.patch, "eval");
        take(e, "n_patches", c.eval.n_patches, "eval");
        reject_unknown(e, "eval");
        j.erase("eval");
    }
    if (j.contains("arm")) {
        c.arm = arm_from_string(j.at("arm").get<std::string>());
        j.erase("arm");
    }
    if (j.contains("lowrank")) {
        json l = j.at("lowrank");
        take(l, "rank", c.lowrank_rank, "lowrank");
        reject_unknown(l, "lowrank");
        j.erase("lowrank");
    }
    reject_unknown(j, "config");
    c.validate();
    return c;
}

// overrides look like "train.lr=1e-4"; values parse as JSON when they can,
// otherwise they are taken as strings
void apply_override(json& j, const std::string& text) {
    auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0)
        throw std::invalid_argument("override must look like key.path=value: " + text);
    std::string path = text.substr(0, eq), value = text.substr(eq + 1);
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;

    json* node = &j;
    size_t start = 0;
    while (true) {
        size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot - start);
        if (key.empty()) throw std::invalid_argument("bad override path: " + path);
        if (dot == std::string::npos) {
            (*node)[key] = parsed;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}
}  // namespace

RunConfig parse(const std::string& json_text, const std::vector<std::string>& overrides) {
    json j;
    try {
        j = json_text.empty() ? json::object() : json::parse(json_text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
    }
    for (const auto& o : overrides) apply_override(j, o);
    return from_json(std::move(j));
}

RunConfig parse_file(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse(text, overrides);
}

std::string canonical_json(const RunConfig& cfg) { return to_json(cfg).dump(); }

std::string config_hash(const RunConfig& cfg) {
    const std::string s = canonical_json(cfg);
    uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
    return std::string(buf);
}

}  // namespace cascade::config
