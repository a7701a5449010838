#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "cascade/data.hpp"
#include "cascade/eval.hpp"

using namespace cascade;
namespace E = cascade::eval;
namespace Dt = cascade::data;
namespace fs = std::filesystem;

namespace {

E::Feats gaussian_feats(int n, int d, uint64_t seed, const std::vector<double>& offset = {}) {
    E::Feats f;
    f.n = n;
    f.d = d;
    f.v.resize((int64_t)n * d);
    Rng rng(seed);
    for (auto& v : f.v) v = rng.normal();
    if (!offset.empty())
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) f.v[(int64_t)i * d + j] += offset[j];
    return f;
}

double poly3(const double* x, const double* y, int d) {
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += x[j] * y[j];
    const double u = dot / d + 1.0;
    return u * u * u;
}

// plain double-loop MMD^2: the h-statistic form when the sides are the same
// size, the three-block average otherwise
double mmd_oracle(const E::Feats& a, const E::Feats& b) {
    const int m = a.n, n = b.n, d = a.d;
    if (m == n) {
        double s = 0.0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) {
                if (i == j) continue;
                s += poly3(a.row(i), a.row(j), d) + poly3(b.row(i), b.row(j), d) -
                     poly3(a.row(i), b.row(j), d) - poly3(b.row(i), a.row(j), d);
            }
        return s / ((double)m * (m - 1));
    }
    double xx = 0.0, yy = 0.0, xy = 0.0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            if (i != j) xx += poly3(a.row(i), a.row(j), d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) yy += poly3(b.row(i), b.row(j), d);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) xy += poly3(a.row(i), b.row(j), d);
    return xx / ((double)m * (m - 1)) + yy / ((double)n * (n - 1)) - 2.0 * xy / ((double)m * n);
}

Tensorf image_set(int n, int c, int h, int w, uint64_t seed) {
    Tensorf t = randn_seeded<float>({n, c, h, w}, seed);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = std::tanh(t[i]);
    return t;
}

// alternating +-amp squares, phase shifted per image so the set is not rank-1
Tensorf checker_set(int n, int c, int hw, float amp) {
    Tensorf t({n, c, hw, hw});
    float* p = t.data();
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < hw; ++y)
                for (int x = 0; x < hw; ++x) *p++ = ((x + y + i) & 1) ? amp : -amp;
    return t;
}

// random +-amp signs: the same per-pixel mean and variance as the checkerboard
Tensorf rademacher_set(int n, int c, int hw, float amp, uint64_t seed) {
    Tensorf t({n, c, hw, hw});
    Rng rng(seed);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = (rng.raw() & 1) ? amp : -amp;
    return t;
}

Tensorf replicate2(const Tensorf& x) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensorf out({n, c, 2 * h, 2 * w});
    for (int i = 0; i < n * c; ++i) {
        const float* src = x.data() + (int64_t)i * h * w;
        float* dst = out.data() + (int64_t)i * 4 * h * w;
        for (int y = 0; y < 2 * h; ++y)
            for (int z = 0; z < 2 * w; ++z) dst[(int64_t)y * 2 * w + z] = src[(int64_t)(y / 2) * w + z / 2];
    }
    return out;
}

struct TmpDir {
    fs::path path;
    TmpDir() {
        path = fs::temp_directory_path() /
               ("cascade_eval_" + std::to_string(::getpid()) + "_" +
                std::to_string((uintptr_t)this));
        fs::create_directories(path);
    }
    ~TmpDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const char* name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("identical feature sets score zero") {
    const auto a = gaussian_feats(40, 16, 5);
    CHECK(E::frechet_distance(a, a) <= 1e-8);
    CHECK(std::abs(E::kernel_distance(a, a)) <= 1e-6);
}

TEST_CASE("offset unit Gaussians recover the squared mean gap") {
    std::vector<double> m(16, 0.0);
    m[0] = 1.5;
    m[3] = -2.0;
    m[9] = 0.5;
    const double want = 1.5 * 1.5 + 2.0 * 2.0 + 0.5 * 0.5;

    const auto a = gaussian_feats(10000, 16, 21);
    const auto b = gaussian_feats(10000, 16, 22, m);
    const double got = E::frechet_distance(a, b);
    CHECK(got == doctest::Approx(want).epsilon(0.05));
}

TEST_CASE("distances are symmetric") {
    const auto a = gaussian_feats(30, 12, 31);
    const auto b = gaussian_feats(25, 12, 32, std::vector<double>(12, 0.3));
    CHECK(std::abs(E::frechet_distance(a, b) - E::frechet_distance(b, a)) <= 1e-8);
    CHECK(std::abs(E::kernel_distance(a, b) - E::kernel_distance(b, a)) <= 1e-8);
}

TEST_CASE("kernel distance matches a brute-force estimator") {
    const auto a = gaussian_feats(50, 6, 41);
    const auto b = gaussian_feats(50, 6, 42, std::vector<double>(6, 0.7));
    CHECK(std::abs(E::kernel_distance(a, b) - mmd_oracle(a, b)) <= 1e-8);

    // unequal sides go through the plain three-block estimator
    const auto c = gaussian_feats(37, 6, 43);
    CHECK(std::abs(E::kernel_distance(a, c) - mmd_oracle(a, c)) <= 1e-8);
    CHECK(std::abs(E::kernel_distance(c, b) - mmd_oracle(c, b)) <= 1e-8);
}

TEST_CASE("well-separated clusters score strictly positive") {
    const auto a = gaussian_feats(60, 8, 51, std::vector<double>(8, 3.0));
    const auto b = gaussian_feats(60, 8, 52, std::vector<double>(8, -3.0));
    CHECK(E::frechet_distance(a, b) > 1.0);
    CHECK(E::kernel_distance(a, b) > 1.0);
}

TEST_CASE("too-small or mismatched feature sets are refused") {
    const auto ok = gaussian_feats(4, 8, 61);
    auto one = gaussian_feats(1, 8, 62);
    CHECK_THROWS_WITH_AS(E::frechet_distance(one, ok), doctest::Contains("at least 2"),
                         std::invalid_argument);
    CHECK_THROWS_AS(E::kernel_distance(ok, one), std::invalid_argument);

    auto narrow = gaussian_feats(4, 6, 63);
    CHECK_THROWS_WITH_AS(E::frechet_distance(ok, narrow), doctest::Contains("dims differ"),
                         std::invalid_argument);
    CHECK_THROWS_AS(E::kernel_distance(ok, narrow), std::invalid_argument);
}

TEST_CASE("the extractor is a pure function of its seed") {
    const auto imgs = image_set(5, 3, 16, 16, 71);
    E::FeatureExtractor fa(7), fb(7), fc(8);
    const auto ra = fa.extract(imgs);
    const auto rb = fb.extract(imgs);
    REQUIRE(ra.n == 5);
    REQUIRE(ra.d == E::FeatureExtractor::kDim);
    CHECK(ra.v == rb.v);

    const auto rc = fc.extract(imgs);
    double diff = 0.0;
    for (size_t i = 0; i < ra.v.size(); ++i) diff = std::max(diff, std::abs(ra.v[i] - rc.v[i]));
    CHECK(diff > 1e-6);

    CHECK_THROWS_AS(E::FeatureExtractor(9, 0), std::invalid_argument);
    CHECK_THROWS_WITH_AS(fa.extract(image_set(2, 1, 8, 8, 72)), doctest::Contains("channels"),
                         std::invalid_argument);
    CHECK_THROWS_AS(fa.extract(Tensorf::zeros({3, 8, 8})), std::invalid_argument);
}

TEST_CASE("chunked extraction matches one-shot extraction") {
    // 70 images force three chunks; rows must agree with per-image extraction
    const auto imgs = image_set(70, 3, 8, 8, 73);
    E::FeatureExtractor fx(11);
    const auto all = fx.extract(imgs);
    for (int i : {0, 31, 32, 69}) {
        Tensorf one({1, 3, 8, 8});
        std::memcpy(one.data(), imgs.data() + (int64_t)i * 3 * 8 * 8, sizeof(float) * 3 * 8 * 8);
        const auto fi = fx.extract(one);
        for (int j = 0; j < all.d; ++j) CHECK(all.row(i)[j] == fi.row(0)[j]);
    }
}

TEST_CASE("full-extent patches collapse to the whole-image metrics") {
    const auto a = image_set(12, 3, 16, 16, 81);
    const auto b = image_set(12, 3, 16, 16, 82);
    E::FeatureExtractor fx(13);

    const auto [pfid, pkid] = E::patch_metrics(fx, a, b, 16, 5, 99);
    const double fid = E::frechet_distance(fx.extract(a), fx.extract(b));
    const double kid = E::kernel_distance(fx.extract(a), fx.extract(b));
    CHECK(std::abs(pfid - fid) <= 1e-8);
    CHECK(std::abs(pkid - kid) <= 1e-8);
}

TEST_CASE("patch crops are a pure function of the seed") {
    const auto a = image_set(8, 3, 16, 16, 83);
    const auto b = image_set(8, 3, 16, 16, 84);
    E::FeatureExtractor fx(13);

    const auto r1 = E::patch_metrics(fx, a, b, 8, 4, 7);
    const auto r2 = E::patch_metrics(fx, a, b, 8, 4, 7);
    CHECK(r1.first == r2.first);
    CHECK(r1.second == r2.second);

    const auto r3 = E::patch_metrics(fx, a, b, 8, 4, 8);
    CHECK((r1.first != r3.first || r1.second != r3.second));
}

TEST_CASE("patch metrics separate textures with identical pixel statistics") {
    const auto a = checker_set(12, 3, 16, 0.7f);
    const auto b = rademacher_set(12, 3, 16, 0.7f, 85);
    E::FeatureExtractor fx(13);
    const auto [pfid, pkid] = E::patch_metrics(fx, a, b, 8, 4, 9);
    CHECK(pfid > 1e-6);
    CHECK(pkid > 1e-6);
}

TEST_CASE("patch metric input validation") {
    const auto a = image_set(4, 3, 12, 12, 86);
    E::FeatureExtractor fx(13);
    CHECK_THROWS_WITH_AS(E::patch_metrics(fx, a, a, 13, 2, 1), doctest::Contains("exceeds"),
                         std::invalid_argument);
    CHECK_THROWS_AS(E::patch_metrics(fx, a, a, 0, 2, 1), std::invalid_argument);
    CHECK_THROWS_AS(E::patch_metrics(fx, a, a, 8, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS(E::patch_metrics(fx, Tensorf::zeros({3, 12, 12}), a, 8, 2, 1),
                    std::invalid_argument);
}

TEST_CASE("exact upsamples are judged consistent with their base images") {
    const auto base = image_set(64, 3, 16, 16, 91);
    const auto high = replicate2(base);
    E::FeatureExtractor fx(17);

    const double self = E::base_consistency(fx, base, high);
    CHECK(self <= 1e-8);
    CHECK(self == E::base_consistency(fx, base, high));  // pure function

    const auto other = image_set(64, 3, 32, 32, 92);
    CHECK(E::base_consistency(fx, base, other) > self);
    CHECK(E::base_consistency(fx, base, other) > 1e-3);
}

TEST_CASE("base consistency refuses sets it cannot align") {
    E::FeatureExtractor fx(17);
    const auto base = image_set(4, 3, 16, 16, 93);
    CHECK_THROWS_WITH_AS(E::base_consistency(fx, base, image_set(4, 3, 24, 24, 94)),
                         doctest::Contains("downsample"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(E::base_consistency(fx, base, image_set(4, 1, 32, 32, 95)),
                         doctest::Contains("channel"), std::invalid_argument);
    CHECK_THROWS_AS(E::base_consistency(fx, Tensorf::zeros({3, 16, 16}), base),
                    std::invalid_argument);
}

TEST_CASE("count_objects on flat and rendered images") {
    CHECK(E::count_objects(Tensorf::full({3, 32, 32}, -0.85f)) == 0);
    CHECK(E::count_objects(Tensorf::full({3, 32, 32}, 1.0f)) == 0);

    Rng rng(101);
    for (int trial = 0; trial < 5; ++trial) {
        const auto spec = Dt::random_scene(rng, 3, 3, 32);
        REQUIRE(spec.count() == 3);
        for (int res : {32, 64, 96}) CHECK(E::count_objects(Dt::render(spec, res, res)) == 3);
    }

    CHECK_THROWS_AS(E::count_objects(Tensorf::zeros({1, 3, 32, 32})), std::invalid_argument);
    CHECK_THROWS_AS(E::count_objects(Tensorf::zeros({3, 32, 32}), 0), std::invalid_argument);
}

TEST_CASE("counting is reliable over a thousand clean renders") {
    const int n = 1000, res = 32;
    Tensorf imgs({n, 3, res, res});
    std::vector<int> truth(n);
    Rng rng(103);
    for (int i = 0; i < n; ++i) {
        const auto spec = Dt::random_scene(rng, 1, 4, 32);
        const auto img = Dt::render(spec, res, res);
        std::memcpy(imgs.data() + (int64_t)i * 3 * res * res, img.data(),
                    sizeof(float) * 3 * res * res);
        truth[i] = spec.count();
    }
    const auto st = E::count_stats(imgs, truth);
    CHECK(st.accuracy >= 0.99);
    CHECK(st.mae <= 0.05);

    truth.pop_back();
    CHECK_THROWS_WITH_AS(E::count_stats(imgs, truth), doctest::Contains("ground-truth"),
                         std::invalid_argument);
}

TEST_CASE("metric reports round-trip through json and csv") {
    E::MetricReport r;
    r.proxy_fid_r = 1.25;
    r.proxy_kid_r = 0.03125;
    r.proxy_pfid_r = 2.5;
    r.proxy_fid_b = 0.75;
    r.count_accuracy = 0.97;
    r.count_mae = 0.04;
    r.n_gen = 500;
    r.n_ref = 1000;
    r.extractor_seed = 424242;
    r.sample_seed = 7;
    r.config_hash = "0123456789abcdef";
    r.checkpoint_hash = "fedcba9876543210";
    r.runtime_sec = 12.5;

    const auto back = E::MetricReport::from_json(r.to_json());
    CHECK(back.proxy_fid_r == r.proxy_fid_r);
    CHECK(back.proxy_kid_r == r.proxy_kid_r);
    CHECK(back.proxy_pfid_r == r.proxy_pfid_r);
    CHECK(back.proxy_fid_b == r.proxy_fid_b);
    CHECK(back.count_accuracy == r.count_accuracy);
    CHECK(back.count_mae == r.count_mae);
    CHECK(back.n_gen == r.n_gen);
    CHECK(back.n_ref == r.n_ref);
    CHECK(back.extractor_seed == r.extractor_seed);
    CHECK(back.sample_seed == r.sample_seed);
    CHECK(back.config_hash == r.config_hash);
    CHECK(back.checkpoint_hash == r.checkpoint_hash);
    CHECK(back.runtime_sec == r.runtime_sec);

    const auto header = E::MetricReport::csv_header();
    const auto row = r.csv_row();
    CHECK(std::count(header.begin(), header.end(), ',') == 12);
    CHECK(std::count(row.begin(), row.end(), ',') == 12);
    CHECK(row.find("0123456789abcdef") != std::string::npos);
    CHECK(row.find("500") != std::string::npos);
}

TEST_CASE("file hashing is stable on content, not on names") {
    TmpDir tmp;
    const auto w = [&](const char* name, const std::string& body) {
        std::ofstream out(tmp.file(name), std::ios::binary);
        out << body;
    };
    w("a.bin", "same bytes");
    w("b.bin", "same bytes");
    w("c.bin", "other bytes");

    const auto ha = E::file_hash_hex(tmp.file("a.bin"));
    CHECK(ha.size() == 16);
    CHECK(ha == E::file_hash_hex(tmp.file("b.bin")));
    CHECK(ha != E::file_hash_hex(tmp.file("c.bin")));
    CHECK_THROWS_AS(E::file_hash_hex(tmp.file("missing.bin")), std::runtime_error);
}
