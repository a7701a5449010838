#include "cascade/eval.hpp"

#include <cblas.h>
#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cascade/image.hpp"
#include "cascade/kernels.hpp"

namespace cascade::eval {

using json = nlohmann::json;

// ---- feature extractor ----------------------------------------------------

namespace {

Tensorf seeded_conv_weight(int out, int in, uint64_t seed) {
    Tensorf w = randn_seeded<float>({out, in, 3, 3}, seed);
    const float s = 1.0f / std::sqrt((float)(in * 9));
    for (int64_t i = 0; i < w.size(); ++i) w[i] *= s;
    return w;
}

void tanh_inplace(Tensorf& t) {
    float* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = std::tanh(p[i]);
}

}  // namespace

FeatureExtractor::FeatureExtractor(uint64_t seed, int in_channels) : seed_(seed), in_(in_channels) {
    if (in_channels < 1) throw std::invalid_argument("feature extractor: in_channels must be >= 1");
    w1_ = seeded_conv_weight(16, in_, mix_seed(seed, 1));
    w2_ = seeded_conv_weight(32, 16, mix_seed(seed, 2));
    w3_ = seeded_conv_weight(kDim, 32, mix_seed(seed, 3));
}

Feats FeatureExtractor::extract(const Tensorf& images) const {
    if (images.rank() != 4)
        throw std::invalid_argument("feature extractor: expected NCHW images, got " +
                                    shape_str(images.shape()));
    if (images.dim(1) != in_)
        throw std::invalid_argument("feature extractor: built for " + std::to_string(in_) +
                                    " channels, images have " + std::to_string(images.dim(1)));
    const int n = images.dim(0);
    const int c = images.dim(1), h = images.dim(2), w = images.dim(3);

    Feats out;
    out.n = n;
    out.d = kDim;
    out.v.assign((int64_t)n * kDim, 0.0);

    const Tensorf b1 = Tensorf::zeros({16}), b2 = Tensorf::zeros({32}), b3 = Tensorf::zeros({kDim});

    // chunked so the intermediate activations of a big set never pile up
    const int chunk = 32;
    for (int n0 = 0; n0 < n; n0 += chunk) {
        const int m = std::min(chunk, n - n0);
        Tensorf x({m, c, h, w});
        std::memcpy(x.data(), images.data() + (int64_t)n0 * c * h * w,
                    sizeof(float) * (size_t)m * c * h * w);

        Tensorf a = kernels::conv2d_fwd(x, w1_, b1, 2, 1);
        tanh_inplace(a);
        a = kernels::conv2d_fwd(a, w2_, b2, 2, 1);
        tanh_inplace(a);
        a = kernels::conv2d_fwd(a, w3_, b3, 2, 1);
        tanh_inplace(a);

        const int fh = a.dim(2), fw = a.dim(3);
        const double inv = 1.0 / ((double)fh * fw);
        for (int i = 0; i < m; ++i) {
            const float* src = a.data() + (int64_t)i * kDim * fh * fw;
            double* dst = out.row(n0 + i);
            for (int ch = 0; ch < kDim; ++ch) {
                double acc = 0.0;
                const float* plane = src + (int64_t)ch * fh * fw;
                for (int p = 0; p < fh * fw; ++p) acc += plane[p];
                dst[ch] = acc * inv;
            }
        }
    }
    return out;
}

// ---- distribution distances ------------------------------------------------

namespace {

void check_pair(const Feats& a, const Feats& b, const char* who) {
    if (a.n < 2 || b.n < 2)
        throw std::invalid_argument(std::string(who) + ": need at least 2 samples per side, got " +
                                    std::to_string(a.n) + " and " + std::to_string(b.n));
    if (a.d != b.d)
        throw std::invalid_argument(std::string(who) + ": feature dims differ, " +
                                    std::to_string(a.d) + " vs " + std::to_string(b.d));
}

// biased (divide by n) covariance; duplicated rows then leave it unchanged
void mean_cov(const Feats& f, std::vector<double>& mu, std::vector<double>& cov) {
    const int n = f.n, d = f.d;
    mu.assign(d, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* r = f.row(i);
        for (int j = 0; j < d; ++j) mu[j] += r[j];
    }
    for (int j = 0; j < d; ++j) mu[j] /= n;

    std::vector<double> centered((int64_t)n * d);
    for (int i = 0; i < n; ++i) {
        const double* r = f.row(i);
        double* c = centered.data() + (int64_t)i * d;
        for (int j = 0; j < d; ++j) c[j] = r[j] - mu[j];
    }
    cov.assign((int64_t)d * d, 0.0);
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, d, d, n, 1.0 / n, centered.data(), d,
                centered.data(), d, 0.0, cov.data(), d);
}

// symmetric PSD square root; negative eigenvalues from rounding are clamped
void sym_sqrt(const std::vector<double>& s, int d, std::vector<double>& out) {
    std::vector<double> vecs(s);
    std::vector<double> vals(d);
    const int info = LAPACKE_dsyev(LAPACK_ROW_MAJOR, 'V', 'U', d, vecs.data(), d, vals.data());
    if (info != 0)
        throw std::runtime_error("eigendecomposition failed, dsyev info=" + std::to_string(info));
    // vecs now holds eigenvector j in column j; scale columns by sqrt(max(val, 0))
    std::vector<double> scaled(vecs);
    for (int j = 0; j < d; ++j) {
        const double sv = std::sqrt(std::max(vals[j], 0.0));
        for (int i = 0; i < d; ++i) scaled[(int64_t)i * d + j] *= sv;
    }
    out.assign((int64_t)d * d, 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, d, d, d, 1.0, scaled.data(), d,
                vecs.data(), d, 0.0, out.data(), d);
}

double trace_of(const std::vector<double>& m, int d) {
    double t = 0.0;
    for (int i = 0; i < d; ++i) t += m[(int64_t)i * d + i];
    return t;
}

}  // namespace

double frechet_distance(const Feats& a, const Feats& b) {
    check_pair(a, b, "frechet_distance");
    const int d = a.d;

    std::vector<double> mu_a, mu_b, cov_a, cov_b;
    mean_cov(a, mu_a, cov_a);
    mean_cov(b, mu_b, cov_b);

    double mean_term = 0.0;
    for (int j = 0; j < d; ++j) {
        const double diff = mu_a[j] - mu_b[j];
        mean_term += diff * diff;
    }

    // tr((Sa Sb)^{1/2}) via the symmetric similar matrix A Sb A, A = Sa^{1/2}
    std::vector<double> root_a;
    sym_sqrt(cov_a, d, root_a);
    std::vector<double> tmp((int64_t)d * d), inner((int64_t)d * d);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, d, d, d, 1.0, root_a.data(), d,
                cov_b.data(), d, 0.0, tmp.data(), d);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, d, d, d, 1.0, tmp.data(), d,
                root_a.data(), d, 0.0, inner.data(), d);
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            const double avg = 0.5 * (inner[(int64_t)i * d + j] + inner[(int64_t)j * d + i]);
            inner[(int64_t)i * d + j] = inner[(int64_t)j * d + i] = avg;
        }
    std::vector<double> vals(d);
    const int info = LAPACKE_dsyev(LAPACK_ROW_MAJOR, 'N', 'U', d, inner.data(), d, vals.data());
    if (info != 0)
        throw std::runtime_error("eigendecomposition failed, dsyev info=" + std::to_string(info));
    double tr_sqrt = 0.0;
    for (int j = 0; j < d; ++j) tr_sqrt += std::sqrt(std::max(vals[j], 0.0));

    const double fid = mean_term + trace_of(cov_a, d) + trace_of(cov_b, d) - 2.0 * tr_sqrt;
    return std::max(fid, 0.0);
}

double kernel_distance(const Feats& a, const Feats& b) {
    check_pair(a, b, "kernel_distance");
    const int m = a.n, n = b.n, d = a.d;

    auto gram = [d](const Feats& x, const Feats& y) {
        std::vector<double> g((int64_t)x.n * y.n);
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, x.n, y.n, d, 1.0, x.v.data(), d,
                    y.v.data(), d, 0.0, g.data(), y.n);
        for (auto& v : g) {
            const double u = v / d + 1.0;
            v = u * u * u;
        }
        return g;
    };

    const auto kxx = gram(a, a);
    const auto kyy = gram(b, b);
    const auto kxy = gram(a, b);

    double sum_xx = 0.0, sum_yy = 0.0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            if (i != j) sum_xx += kxx[(int64_t)i * m + j];
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) sum_yy += kyy[(int64_t)i * n + j];

    const double term_x = sum_xx / ((double)m * (m - 1));
    const double term_y = sum_yy / ((double)n * (n - 1));

    // equal sizes use the paired U-statistic (cross diagonal excluded), which
    // is exactly zero on identical sets; otherwise the full cross average
    double cross;
    if (m == n) {
        double s = 0.0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                if (i != j) s += kxy[(int64_t)i * n + j];
        cross = s / ((double)m * (m - 1));
    } else {
        double s = 0.0;
        for (double v : kxy) s += v;
        cross = s / ((double)m * n);
    }
    return term_x + term_y - 2.0 * cross;
}

// ---- patch metrics ----------------------------------------------------------

namespace {

Tensorf crop_set(const Tensorf& images, int patch, int n_patches, Rng& rng) {
    const int n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    if (h == patch && w == patch) return images;  // only one possible crop

    Tensorf out({n * n_patches, c, patch, patch});
    float* dst = out.data();
    for (int i = 0; i < n; ++i) {
        const float* img = images.data() + (int64_t)i * c * h * w;
        for (int p = 0; p < n_patches; ++p) {
            const int top = rng.uniform_int(0, h - patch);
            const int left = rng.uniform_int(0, w - patch);
            for (int ch = 0; ch < c; ++ch) {
                const float* plane = img + (int64_t)ch * h * w;
                for (int r = 0; r < patch; ++r) {
                    std::memcpy(dst, plane + (int64_t)(top + r) * w + left,
                                sizeof(float) * (size_t)patch);
                    dst += patch;
                }
            }
        }
    }
    return out;
}

}  // namespace

std::pair<double, double> patch_metrics(const FeatureExtractor& fx, const Tensorf& a,
                                        const Tensorf& b, int patch, int n_patches,
                                        uint64_t seed) {
    if (a.rank() != 4 || b.rank() != 4)
        throw std::invalid_argument("patch_metrics: expected NCHW image sets");
    if (patch < 1 || n_patches < 1)
        throw std::invalid_argument("patch_metrics: patch and n_patches must be >= 1");
    const int min_extent = std::min(std::min(a.dim(2), a.dim(3)), std::min(b.dim(2), b.dim(3)));
    if (patch > min_extent)
        throw std::invalid_argument("patch_metrics: patch " + std::to_string(patch) +
                                    " exceeds smallest image extent " +
                                    std::to_string(min_extent));

    Rng rng_a(mix_seed(seed, 0xa));
    Rng rng_b(mix_seed(seed, 0xb));
    const Feats fa = fx.extract(crop_set(a, patch, n_patches, rng_a));
    const Feats fb = fx.extract(crop_set(b, patch, n_patches, rng_b));
    return {frechet_distance(fa, fb), kernel_distance(fa, fb)};
}

// ---- base-resolution consistency --------------------------------------------

double base_consistency(const FeatureExtractor& fx, const Tensorf& gen_base,
                        const Tensorf& gen_high) {
    if (gen_base.rank() != 4 || gen_high.rank() != 4)
        throw std::invalid_argument("base_consistency: expected NCHW image sets");
    if (gen_base.dim(1) != gen_high.dim(1))
        throw std::invalid_argument("base_consistency: channel counts differ");
    const int bh = gen_base.dim(2), bw = gen_base.dim(3);
    const int hh = gen_high.dim(2), hw = gen_high.dim(3);
    if (hh % bh != 0 || hw % bw != 0)
        throw std::invalid_argument("base_consistency: cannot area-downsample " +
                                    std::to_string(hh) + "x" + std::to_string(hw) + " to " +
                                    std::to_string(bh) + "x" + std::to_string(bw));
    const int fh = hh / bh, fw = hw / bw;

    const int n = gen_high.dim(0), c = gen_high.dim(1);
    Tensorf pooled({n, c, bh, bw});
    const double inv = 1.0 / ((double)fh * fw);
    for (int i = 0; i < n * c; ++i) {
        const float* src = gen_high.data() + (int64_t)i * hh * hw;
        float* dst = pooled.data() + (int64_t)i * bh * bw;
        for (int y = 0; y < bh; ++y)
            for (int x = 0; x < bw; ++x) {
                double acc = 0.0;
                for (int dy = 0; dy < fh; ++dy)
                    for (int dx = 0; dx < fw; ++dx)
                        acc += src[(int64_t)(y * fh + dy) * hw + (x * fw + dx)];
                dst[(int64_t)y * bw + x] = (float)(acc * inv);
            }
    }
    return frechet_distance(fx.extract(gen_base), fx.extract(pooled));
}

// ---- object counting ---------------------------------------------------------

int count_objects(const Tensorf& image, int base_res) {
    if (image.rank() != 3)
        throw std::invalid_argument("count_objects: expected a CHW image, got " +
                                    shape_str(image.shape()));
    if (base_res < 1) throw std::invalid_argument("count_objects: base_res must be >= 1");
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);

    std::vector<float> lum((int64_t)h * w, 0.0f);
    for (int ch = 0; ch < c; ++ch) {
        const float* plane = image.data() + (int64_t)ch * h * w;
        for (int64_t p = 0; p < (int64_t)h * w; ++p) lum[p] += plane[p];
    }
    const float invc = 1.0f / c;
    for (auto& v : lum) v *= invc;

    std::vector<float> border;
    border.reserve(2 * (h + w));
    for (int x = 0; x < w; ++x) {
        border.push_back(lum[x]);
        if (h > 1) border.push_back(lum[(int64_t)(h - 1) * w + x]);
    }
    for (int y = 1; y + 1 < h; ++y) {
        border.push_back(lum[(int64_t)y * w]);
        if (w > 1) border.push_back(lum[(int64_t)y * w + w - 1]);
    }
    std::nth_element(border.begin(), border.begin() + border.size() / 2, border.end());
    const float bg = border[border.size() / 2];
    const float thresh = bg + 0.4f;

    const double min_area = 4.0 * ((double)h * w) / ((double)base_res * base_res);

    std::vector<uint8_t> fg((int64_t)h * w);
    for (int64_t p = 0; p < (int64_t)h * w; ++p) fg[p] = lum[p] > thresh ? 1 : 0;

    std::vector<uint8_t> seen((int64_t)h * w, 0);
    std::vector<int64_t> stack;
    int count = 0;
    for (int64_t start = 0; start < (int64_t)h * w; ++start) {
        if (!fg[start] || seen[start]) continue;
        int64_t area = 0;
        stack.assign(1, start);
        seen[start] = 1;
        while (!stack.empty()) {
            const int64_t p = stack.back();
            stack.pop_back();
            ++area;
            const int y = (int)(p / w), x = (int)(p % w);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    const int64_t q = (int64_t)ny * w + nx;
                    if (fg[q] && !seen[q]) {
                        seen[q] = 1;
                        stack.push_back(q);
                    }
                }
        }
        if ((double)area >= min_area) ++count;
    }
    return count;
}

CountStats count_stats(const Tensorf& images, const std::vector<int>& true_counts, int base_res) {
    if (images.rank() != 4) throw std::invalid_argument("count_stats: expected NCHW images");
    const int n = images.dim(0);
    if ((int)true_counts.size() != n)
        throw std::invalid_argument("count_stats: " + std::to_string(n) + " images but " +
                                    std::to_string(true_counts.size()) + " ground-truth counts");
    if (n == 0) return {};

    CountStats st;
    for (int i = 0; i < n; ++i) {
        const int got = count_objects(image::nth_image(images, i), base_res);
        if (got == true_counts[i]) st.accuracy += 1.0;
        st.mae += std::abs(got - true_counts[i]);
    }
    st.accuracy /= n;
    st.mae /= n;
    return st;
}

// ---- report serialization ------------------------------------------------------

std::string MetricReport::to_json() const {
    json j;
    j["proxy_fid_r"] = proxy_fid_r;
    j["proxy_kid_r"] = proxy_kid_r;
    j["proxy_pfid_r"] = proxy_pfid_r;
    j["proxy_fid_b"] = proxy_fid_b;
    j["count_accuracy"] = count_accuracy;
    j["count_mae"] = count_mae;
    j["n_gen"] = n_gen;
    j["n_ref"] = n_ref;
    j["extractor_seed"] = extractor_seed;
    j["sample_seed"] = sample_seed;
    j["config_hash"] = config_hash;
    j["checkpoint_hash"] = checkpoint_hash;
    j["runtime_sec"] = runtime_sec;
    return j.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
    json j = json::parse(text);
    MetricReport r;
    r.proxy_fid_r = j.value("proxy_fid_r", 0.0);
    r.proxy_kid_r = j.value("proxy_kid_r", 0.0);
    r.proxy_pfid_r = j.value("proxy_pfid_r", 0.0);
    r.proxy_fid_b = j.value("proxy_fid_b", 0.0);
    r.count_accuracy = j.value("count_accuracy", 0.0);
    r.count_mae = j.value("count_mae", 0.0);
    r.n_gen = j.value("n_gen", 0);
    r.n_ref = j.value("n_ref", 0);
    r.extractor_seed = j.value("extractor_seed", (uint64_t)0);
    r.sample_seed = j.value("sample_seed", (uint64_t)0);
    r.config_hash = j.value("config_hash", std::string());
    r.checkpoint_hash = j.value("checkpoint_hash", std::string());
    r.runtime_sec = j.value("runtime_sec", 0.0);
    return r;
}

std::string MetricReport::csv_header() {
    return "proxy_fid_r,proxy_kid_r,proxy_pfid_r,proxy_fid_b,count_accuracy,count_mae,"
           "n_gen,n_ref,extractor_seed,sample_seed,config_hash,checkpoint_hash,runtime_sec";
}

std::string MetricReport::csv_row() const {
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6g", v);
        return std::string(buf);
    };
    return num(proxy_fid_r) + "," + num(proxy_kid_r) + "," + num(proxy_pfid_r) + "," +
           num(proxy_fid_b) + "," + num(count_accuracy) + "," + num(count_mae) + "," +
           std::to_string(n_gen) + "," + std::to_string(n_ref) + "," +
           std::to_string(extractor_seed) + "," + std::to_string(sample_seed) + "," + config_hash +
           "," + checkpoint_hash + "," + num(runtime_sec);
}

std::string file_hash_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for hashing: " + path);
    uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        const std::streamsize got = in.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= (uint8_t)buf[i];
            h *= 1099511628211ull;
        }
        if (got < (std::streamsize)sizeof(buf)) break;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", (unsigned long long)h);
    return std::string(out);
}

}  // namespace cascade::eval
