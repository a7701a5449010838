#include "cascade/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cascade/image.hpp"
#include "cascade/kernels.hpp"

namespace cascade::data {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {
constexpr double kMarginPx = 2.0;  // clearance between objects at base resolution
constexpr double kRoot3 = 1.7320508075688772;

const char* type_name(ObjType t) {
    switch (t) {
        case ObjType::disk: return "disk";
        case ObjType::square: return "square";
        case ObjType::triangle: return "triangle";
    }
    throw std::logic_error("bad object type");
}

ObjType type_from(const std::string& s) {
    if (s == "disk") return ObjType::disk;
    if (s == "square") return ObjType::square;
    if (s == "triangle") return ObjType::triangle;
    throw std::invalid_argument("unknown object type: " + s);
}

// coverage test in unit coordinates; size is the circumradius throughout
bool inside(const SceneObject& o, double px, double py) {
    const double dx = px - o.x, dy = py - o.y;
    switch (o.type) {
        case ObjType::disk:
            return dx * dx + dy * dy <= o.size * o.size;
        case ObjType::square: {
            const double a = o.size / std::sqrt(2.0);
            return std::abs(dx) <= a && std::abs(dy) <= a;
        }
        case ObjType::triangle: {
            // equilateral, apex up: vertices at angles 90, 210, 330 degrees
            const double r = o.size;
            const double ax = 0, ay = -r;
            const double bx = -r * kRoot3 / 2, by = r / 2;
            const double cx = r * kRoot3 / 2, cy = r / 2;
            auto side = [&](double x1, double y1, double x2, double y2) {
                return (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1);
            };
            const double s1 = side(ax, ay, bx, by);
            const double s2 = side(bx, by, cx, cy);
            const double s3 = side(cx, cy, ax, ay);
            return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
        }
    }
    return false;
}

unsigned char quantize(float v) {
    double q = std::nearbyint(((double)v + 1.0) / 2.0 * 255.0);
    return (unsigned char)std::clamp(q, 0.0, 255.0);
}
}  // namespace

std::string spec_to_json(const SceneSpec& spec) {
    json j;
    j["background"] = spec.background;
    json objs = json::array();
    for (const auto& o : spec.objects)
        objs.push_back({{"type", type_name(o.type)},
                        {"x", o.x},
                        {"y", o.y},
                        {"size", o.size},
                        {"color", o.color}});
    j["objects"] = std::move(objs);
    return j.dump();
}

SceneSpec spec_from_json(const std::string& text) {
    json j = json::parse(text);
    SceneSpec spec;
    spec.background = j.at("background").get<std::array<double, 3>>();
    for (const auto& jo : j.at("objects")) {
        SceneObject o;
        o.type = type_from(jo.at("type").get<std::string>());
        o.x = jo.at("x").get<double>();
        o.y = jo.at("y").get<double>();
        o.size = jo.at("size").get<double>();
        o.color = jo.at("color").get<std::array<double, 3>>();
        spec.objects.push_back(o);
    }
    return spec;
}

bool scene_valid(const SceneSpec& spec, int base_res) {
    const double margin = kMarginPx / base_res;
    for (size_t i = 0; i < spec.objects.size(); ++i) {
        const auto& a = spec.objects[i];
        if (a.size <= 0) return false;
        if (a.x - a.size < 0 || a.x + a.size > 1 || a.y - a.size < 0 || a.y + a.size > 1)
            return false;
        for (size_t j = i + 1; j < spec.objects.size(); ++j) {
            const auto& b = spec.objects[j];
            const double dx = a.x - b.x, dy = a.y - b.y;
            const double need = a.size + b.size + margin;
            if (dx * dx + dy * dy < need * need) return false;
        }
    }
    return true;
}

Tensorf render(const SceneSpec& spec, int h, int w) {
    if (h < 8 || w < 8) throw std::invalid_argument("render: resolution must be >= 8");
    // the generator enforces the full 2 px margin; rendering only refuses
    // true overlap or out-of-frame geometry (margin at 1024 is ~0)
    if (!spec.objects.empty() && !scene_valid(spec, 1024))
        throw std::invalid_argument("render: scene violates the overlap constraint");
    constexpr int SS = 4;
    constexpr double inv_ss = 1.0 / (SS * SS);
    Tensorf img({3, h, w});
    for (int c = 0; c < 3; ++c)
        std::fill(img.data() + (int64_t)c * h * w, img.data() + (int64_t)(c + 1) * h * w,
                  (float)spec.background[c]);

    for (const auto& o : spec.objects) {
        // objects never overlap, so each can composite over the background alone
        const int y0 = std::max(0, (int)std::floor((o.y - o.size) * h) - 1);
        const int y1 = std::min(h - 1, (int)std::ceil((o.y + o.size) * h) + 1);
        const int x0 = std::max(0, (int)std::floor((o.x - o.size) * w) - 1);
        const int x1 = std::min(w - 1, (int)std::ceil((o.x + o.size) * w) + 1);
        for (int py = y0; py <= y1; ++py) {
            for (int px = x0; px <= x1; ++px) {
                int hit = 0;
                for (int sy = 0; sy < SS; ++sy)
                    for (int sx = 0; sx < SS; ++sx) {
                        const double ux = (px + (sx + 0.5) / SS) / w;
                        const double uy = (py + (sy + 0.5) / SS) / h;
                        hit += inside(o, ux, uy);
                    }
                if (!hit) continue;
                const double cov = hit * inv_ss;
                for (int c = 0; c < 3; ++c) {
                    float& p = img[((int64_t)c * h + py) * w + px];
                    p = (float)(p + cov * (o.color[c] - p));
                }
            }
        }
    }
    return img;
}

SceneSpec random_scene(Rng& rng, int k_min, int k_max, int base_res) {
    if (k_min < 0 || k_max < k_min) throw std::invalid_argument("random_scene: bad k range");
    for (;;) {
        SceneSpec spec;
        for (int c = 0; c < 3; ++c) spec.background[c] = -0.92 + 0.14 * rng.uniform();
        const int k = (int)rng.uniform_int(k_min, k_max);
        bool ok = true;
        for (int i = 0; i < k && ok; ++i) {
            SceneObject o;
            bool placed = false;
            for (int tries = 0; tries < 200 && !placed; ++tries) {
                o.type = (ObjType)rng.uniform_int(0, 2);
                o.size = 0.07 + 0.09 * rng.uniform();
                o.x = o.size + (1 - 2 * o.size) * rng.uniform();
                o.y = o.size + (1 - 2 * o.size) * rng.uniform();
                for (int c = 0; c < 3; ++c) o.color[c] = 0.15 + 0.85 * rng.uniform();
                spec.objects.push_back(o);
                if (scene_valid(spec, base_res))
                    placed = true;
                else
                    spec.objects.pop_back();
            }
            ok = placed;
        }
        if (ok) return spec;  // else redraw the whole scene
    }
}

Corpus::Corpus(uint64_t seed, int n_train, int n_eval, int k_min, int k_max, int base_res)
    : seed_(seed), k_min_(k_min), k_max_(k_max), base_res_(base_res) {
    if (n_train < 1 || n_eval < 1)
        throw std::invalid_argument("corpus: n_train and n_eval must be >= 1");
    Rng rng(seed);
    train_.reserve(n_train);
    eval_.reserve(n_eval);
    for (int i = 0; i < n_train; ++i) train_.push_back(random_scene(rng, k_min, k_max, base_res));
    for (int i = 0; i < n_eval; ++i) eval_.push_back(random_scene(rng, k_min, k_max, base_res));
}

Batch Corpus::assemble(const std::vector<SceneSpec>& specs,
                       std::vector<std::vector<unsigned char>>& cache,
                       std::array<int, 2>& cached_res, const std::vector<int>& idx,
                       std::array<int, 2> res) const {
    const int h = res[0], w = res[1];
    if (cached_res != res) {
        cache.assign(specs.size(), {});
        cached_res = res;
    }
    Batch b;
    b.x0 = Tensorf({(int)idx.size(), 3, h, w});
    const int64_t plane = (int64_t)3 * h * w;
    for (size_t n = 0; n < idx.size(); ++n) {
        const int i = idx[n];
        if (i < 0 || i >= (int)specs.size())
            throw std::out_of_range("corpus: sample index out of range");
        auto& slot = cache[i];
        if (slot.empty()) {
            Tensorf img = render(specs[i], h, w);
            slot.resize((size_t)plane);
            for (int64_t p = 0; p < plane; ++p) slot[p] = quantize(img[p]);
        }
        float* dst = b.x0.data() + (int64_t)n * plane;
        for (int64_t p = 0; p < plane; ++p)
            dst[p] = (float)(slot[p] / 255.0 * 2.0 - 1.0);
        b.labels.push_back(label_of(specs[i]));
    }
    return b;
}

Batch Corpus::get(const std::vector<int>& idx, std::array<int, 2> res) const {
    return assemble(train_, train_cache_, train_cache_res_, idx, res);
}

Batch Corpus::get_eval(const std::vector<int>& idx, std::array<int, 2> res) const {
    return assemble(eval_, eval_cache_, eval_cache_res_, idx, res);
}

std::string Corpus::manifest_json() const {
    json j;
    j["seed"] = seed_;
    j["k_min"] = k_min_;
    j["k_max"] = k_max_;
    j["base_res"] = base_res_;
    j["n_train"] = train_.size();
    j["n_eval"] = eval_.size();
    json tr = json::array(), ev = json::array();
    for (const auto& s : train_) tr.push_back(json::parse(spec_to_json(s)));
    for (const auto& s : eval_) ev.push_back(json::parse(spec_to_json(s)));
    j["train"] = std::move(tr);
    j["eval"] = std::move(ev);
    return j.dump();
}

PngFolder::PngFolder(const std::string& dir) {
    if (!fs::is_directory(dir)) throw std::invalid_argument("not a directory: " + dir);
    std::vector<std::string> paths;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
            paths.push_back(e.path().string());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
        try {
            Tensorf img = image::read_png(p);
            const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
            const int side = std::min(h, w);
            const int oy = (h - side) / 2, ox = (w - side) / 2;
            Tensorf sq({c, side, side});
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < side; ++y)
                    for (int x = 0; x < side; ++x)
                        sq[((int64_t)ch * side + y) * side + x] =
                            img[((int64_t)ch * h + y + oy) * w + x + ox];
            images_.push_back(std::move(sq));
        } catch (const std::exception& e) {
            std::fprintf(stderr, "warning: skipping %s: %s\n", p.c_str(), e.what());
        }
    }
    if (images_.empty()) throw std::invalid_argument("no readable PNGs in " + dir);
}

Batch PngFolder::get(const std::vector<int>& idx, std::array<int, 2> res) const {
    Batch b;
    b.x0 = Tensorf({(int)idx.size(), 3, res[0], res[1]});
    const int64_t plane = (int64_t)3 * res[0] * res[1];
    for (size_t n = 0; n < idx.size(); ++n) {
        if (idx[n] < 0 || idx[n] >= (int)images_.size())
            throw std::out_of_range("png dataset: index out of range");
        const Tensorf& src = images_[idx[n]];
        Tensorf one = src.reshaped({1, src.dim(0), src.dim(1), src.dim(2)});
        Tensorf rs = kernels::area_resize(one, res[0], res[1]);
        Tensorf rgb = rs;
        if (rs.dim(1) == 1) {  // grayscale: replicate to three channels
            rgb = Tensorf({1, 3, res[0], res[1]});
            for (int c = 0; c < 3; ++c)
                std::copy(rs.data(), rs.data() + res[0] * res[1],
                          rgb.data() + (int64_t)c * res[0] * res[1]);
        }
        std::copy(rgb.data(), rgb.data() + plane, b.x0.data() + (int64_t)n * plane);
        b.labels.push_back(0);
    }
    return b;
}

void export_corpus(const Corpus& corpus, const std::string& dir, std::array<int, 2> base,
                   std::array<int, 2> target) {
    fs::create_directories(dir);
    auto fnv = [](const std::string& s) {
        uint64_t h = 14695981039346656037ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
        return std::string(buf);
    };
    json files = json::array();
    auto dump_split = [&](const char* split, int n, auto spec_at) {
        for (int i = 0; i < n; ++i) {
            const SceneSpec& spec = spec_at(i);
            const std::string sj = spec_to_json(spec);
            for (auto res : {base, target}) {
                const std::string key =
                    sj + "@" + std::to_string(res[0]) + "x" + std::to_string(res[1]);
                const std::string name = fnv(key) + ".png";
                const fs::path path = fs::path(dir) / name;
                if (!fs::exists(path)) image::write_png(path.string(), render(spec, res[0], res[1]));
                files.push_back({{"split", split},
                                 {"index", i},
                                 {"res", res},
                                 {"file", name},
                                 {"label", corpus.label_of(spec)}});
            }
        }
    };
    dump_split("train", corpus.size(), [&](int i) -> const SceneSpec& { return corpus.train_spec(i); });
    dump_split("eval", corpus.n_eval(), [&](int i) -> const SceneSpec& { return corpus.eval_spec(i); });

    json manifest = json::parse(corpus.manifest_json());
    manifest["files"] = std::move(files);
    std::ofstream os(fs::path(dir) / "manifest.json");
    os << manifest.dump(2) << "\n";
}

}  // namespace cascade::data
