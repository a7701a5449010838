#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cascade/tensor.hpp"

namespace cascade::eval {

// Row-major feature matrix, one row per sample. Kept in double so the
// covariance algebra downstream does not inherit float accumulation error.
struct Feats {
    int n = 0;
    int d = 0;
    std::vector<double> v;

    double* row(int i) { return v.data() + (int64_t)i * d; }
    const double* row(int i) const { return v.data() + (int64_t)i * d; }
};

// Three fixed random stride-2 convs and a global average pool. The weights
// come from the seed alone and are never trained, so two runs with the same
// seed score images on the same scale.
class FeatureExtractor {
public:
    static constexpr int kDim = 64;

    explicit FeatureExtractor(uint64_t seed, int in_channels = 3);

    // images: NCHW in [-1, 1]; returns one kDim-wide row per image
    Feats extract(const Tensorf& images) const;

    uint64_t seed() const { return seed_; }
    int in_channels() const { return in_; }

private:
    uint64_t seed_;
    int in_;
    Tensorf w1_, w2_, w3_;
};

// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}), Gaussian fits with
// biased covariance. The matrix square root goes through a symmetric
// eigendecomposition with eigenvalues clamped at zero.
double frechet_distance(const Feats& a, const Feats& b);

// unbiased MMD^2 with the polynomial kernel (x.y/d + 1)^3
double kernel_distance(const Feats& a, const Feats& b);

// Distances over seeded random crops. When patch equals a set's full extent
// the one possible crop is taken once per image, so the result collapses to
// the whole-image distance exactly.
std::pair<double, double> patch_metrics(const FeatureExtractor& fx, const Tensorf& a,
                                        const Tensorf& b, int patch, int n_patches,
                                        uint64_t seed);

// Area-downsamples gen_high to the resolution of gen_base, then Frechet
// distance between the two feature sets.
double base_consistency(const FeatureExtractor& fx, const Tensorf& gen_base,
                        const Tensorf& gen_high);

// Thresholded 8-connected component count. Background level is estimated
// from the border pixels; blobs below 4 px of area at base_res (scaled with
// resolution) are dropped as speckle.
int count_objects(const Tensorf& image, int base_res = 32);

struct CountStats {
    double accuracy = 0.0;  // fraction of images counted exactly right
    double mae = 0.0;       // mean |count - truth|
};

CountStats count_stats(const Tensorf& images, const std::vector<int>& true_counts,
                       int base_res = 32);

// One row of the comparison table plus the provenance needed to reproduce it.
struct MetricReport {
    double proxy_fid_r = 0.0;
    double proxy_kid_r = 0.0;
    double proxy_pfid_r = 0.0;
    double proxy_fid_b = 0.0;
    double count_accuracy = 0.0;
    double count_mae = 0.0;
    int n_gen = 0;
    int n_ref = 0;
    uint64_t extractor_seed = 0;
    uint64_t sample_seed = 0;
    std::string config_hash;
    std::string checkpoint_hash;
    double runtime_sec = 0.0;

    std::string to_json() const;
    static MetricReport from_json(const std::string& text);
    static std::string csv_header();
    std::string csv_row() const;
};

// FNV-1a over a file's bytes, 16 hex digits; what reports record for the
// checkpoint they scored
std::string file_hash_hex(const std::string& path);

}  // namespace cascade::eval
