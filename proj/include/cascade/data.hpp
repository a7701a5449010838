#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "cascade/tensor.hpp"

namespace cascade::data {

enum class ObjType { disk, square, triangle };

struct SceneObject {
    ObjType type = ObjType::disk;
    double x = 0.5, y = 0.5;  // center in unit coordinates
    double size = 0.1;        // circumradius in unit coordinates
    std::array<double, 3> color{1, 1, 1};
};

// Resolution-independent scene description: the same spec renders at any
// extent, which is what makes object counts comparable across resolutions.
struct SceneSpec {
    std::array<double, 3> background{-0.85, -0.85, -0.85};
    std::vector<SceneObject> objects;
    int count() const { return (int)objects.size(); }
};

std::string spec_to_json(const SceneSpec& spec);
SceneSpec spec_from_json(const std::string& text);

// anti-aliased rasterization (4x4 supersampling) to a [3, h, w] image in [-1, 1]
Tensorf render(const SceneSpec& spec, int h, int w);

// overlap rule shared by the generator and the render-time validator:
// circumradius distance with a 2 px margin at the stated base extent
bool scene_valid(const SceneSpec& spec, int base_res);

SceneSpec random_scene(Rng& rng, int k_min, int k_max, int base_res);

struct Batch {
    Tensorf x0;  // NCHW in [-1, 1]
    std::vector<int> labels;
};

class Dataset {
public:
    virtual ~Dataset() = default;
    virtual int size() const = 0;
    virtual int num_classes() const = 0;
    virtual Batch get(const std::vector<int>& idx, std::array<int, 2> res) const = 0;
};

// Deterministic synthetic corpus: all specs derive from one seed, the
// train/eval split is disjoint by construction, and the class label is the
// object count. Rendered images are cached per resolution as 8-bit planes
// (the same quantization PNG export uses).
class Corpus : public Dataset {
public:
    Corpus(uint64_t seed, int n_train, int n_eval, int k_min = 1, int k_max = 4,
           int base_res = 32);

    int size() const override { return (int)train_.size(); }
    int num_classes() const override { return k_max_ - k_min_ + 1; }
    Batch get(const std::vector<int>& idx, std::array<int, 2> res) const override;

    int n_eval() const { return (int)eval_.size(); }
    Batch get_eval(const std::vector<int>& idx, std::array<int, 2> res) const;

    const SceneSpec& train_spec(int i) const { return train_.at(i); }
    const SceneSpec& eval_spec(int i) const { return eval_.at(i); }
    int label_of(const SceneSpec& spec) const { return spec.count() - k_min_; }
    uint64_t seed() const { return seed_; }

    std::string manifest_json() const;

private:
    Batch assemble(const std::vector<SceneSpec>& specs,
                   std::vector<std::vector<unsigned char>>& cache, std::array<int, 2>& cached_res,
                   const std::vector<int>& idx, std::array<int, 2> res) const;

    uint64_t seed_;
    int k_min_, k_max_, base_res_;
    std::vector<SceneSpec> train_, eval_;
    // one cached resolution per split covers the training and eval loops
    mutable std::vector<std::vector<unsigned char>> train_cache_, eval_cache_;
    mutable std::array<int, 2> train_cache_res_{0, 0}, eval_cache_res_{0, 0};
};

// directory of PNGs, center-cropped square and area-resampled on access;
// unconditional (num_classes = 0)
class PngFolder : public Dataset {
public:
    explicit PngFolder(const std::string& dir);

    int size() const override { return (int)images_.size(); }
    int num_classes() const override { return 0; }
    Batch get(const std::vector<int>& idx, std::array<int, 2> res) const override;

private:
    std::vector<Tensorf> images_;  // originals, center-cropped square
};

// content-addressed PNG cache plus a manifest describing the whole corpus
void export_corpus(const Corpus& corpus, const std::string& dir, std::array<int, 2> base,
                   std::array<int, 2> target);

}  // namespace cascade::data
