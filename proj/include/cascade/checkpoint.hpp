#pragma once

#include <string>
#include <vector>

#include "cascade/graph.hpp"

namespace cascade::ckpt {

// Single-file checkpoint: an 8-byte magic, a length-prefixed JSON manifest
// (format version, config hash, step, per-tensor name/dtype/shape/offset/
// group), then one contiguous little-endian float32 blob. Writes go through
// a temp file and rename so a crash never leaves a torn checkpoint.

struct LoadInfo {
    int64_t step = 0;
    std::string config_hash;
    std::vector<std::string> groups;  // groups present in the file
};

// groups empty = save everything; otherwise only parameters whose group is listed
void save(const std::string& path, const graph::ParamStore<float>& store,
          const std::string& config_hash, int64_t step,
          const std::vector<std::string>& groups = {});

// Copies every tensor in the file into the store. Unknown names, shape
// disagreements, and format-version mismatches are errors naming the tensor;
// store parameters absent from the file keep their current values.
LoadInfo load(const std::string& path, graph::ParamStore<float>& store);

// manifest-only read, for provenance without touching any weights
LoadInfo peek(const std::string& path);

struct TensorEntry {
    std::string name;
    std::string group;
    Shape shape;

    int64_t size() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }
};

// per-tensor manifest listing, for parameter censuses over a file
std::vector<TensorEntry> manifest(const std::string& path);

}  // namespace cascade::ckpt
