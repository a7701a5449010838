#include "cascade/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace cascade::ckpt {

using json = nlohmann::json;

namespace {
constexpr char kMagic[8] = {'C', 'S', 'C', 'D', 'K', 'P', 'T', '1'};
constexpr int kVersion = 1;

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
    os.write((const char*)b, 8);
}

uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read((char*)b, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)b[i] << (8 * i);
    return v;
}

json read_manifest(std::istream& is, const std::string& path) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error(path + ": not a checkpoint file");
    const uint64_t len = read_u64(is);
    std::string text(len, '\0');
    is.read(text.data(), (std::streamsize)len);
    if (!is) throw std::runtime_error(path + ": truncated manifest");
    json man = json::parse(text);
    if (man.at("version").get<int>() != kVersion)
        throw std::runtime_error(path + ": unsupported checkpoint format version " +
                                 man.at("version").dump());
    return man;
}

LoadInfo info_of(const json& man) {
    LoadInfo info;
    info.step = man.at("step").get<int64_t>();
    info.config_hash = man.at("config_hash").get<std::string>();
    std::set<std::string> gs;
    for (const auto& t : man.at("tensors")) gs.insert(t.at("group").get<std::string>());
    info.groups.assign(gs.begin(), gs.end());
    return info;
}
}  // namespace

void save(const std::string& path, const graph::ParamStore<float>& store,
          const std::string& config_hash, int64_t step,
          const std::vector<std::string>& groups) {
    json tensors = json::array();
    std::vector<const graph::Param<float>*> picked;
    uint64_t offset = 0;
    for (const auto& p : store.params()) {
        if (!groups.empty() &&
            std::find(groups.begin(), groups.end(), p.group) == groups.end())
            continue;
        const auto& v = p.var.value();
        json t;
        t["name"] = p.name;
        t["group"] = p.group;
        t["dtype"] = "f32";
        t["shape"] = v.shape();
        t["offset"] = offset;
        tensors.push_back(std::move(t));
        picked.push_back(&p);
        offset += (uint64_t)v.size() * 4;
    }
    json man;
    man["version"] = kVersion;
    man["config_hash"] = config_hash;
    man["step"] = step;
    man["tensors"] = std::move(tensors);
    const std::string text = man.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp);
        os.write(kMagic, 8);
        write_u64(os, text.size());
        os.write(text.data(), (std::streamsize)text.size());
        for (const auto* p : picked) {
            const auto& v = p->var.value();
            static_assert(sizeof(float) == 4);
            os.write((const char*)v.data(), (std::streamsize)v.size() * 4);
        }
        if (!os) throw std::runtime_error("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot move " + tmp + " into place");
}

LoadInfo load(const std::string& path, graph::ParamStore<float>& store) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    json man = read_manifest(is, path);
    const std::streampos blob_start = is.tellg();
    for (const auto& t : man.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        if (!store.contains(name))
            throw std::runtime_error(path + ": tensor " + name +
                                     " does not exist in the current model");
        auto& param = store.at(name);
        Shape shape = t.at("shape").get<Shape>();
        auto& dst = param.var.mutable_value();
        if (dst.shape() != shape)
            throw std::runtime_error(path + ": tensor " + name + " has shape " +
                                     t.at("shape").dump() +
                                     " in the file but the model expects a different one");
        if (t.at("dtype").get<std::string>() != "f32")
            throw std::runtime_error(path + ": tensor " + name + " has unsupported dtype");
        is.seekg(blob_start + (std::streampos)t.at("offset").get<uint64_t>());
        is.read((char*)dst.data(), (std::streamsize)dst.size() * 4);
        if (!is) throw std::runtime_error(path + ": truncated data for tensor " + name);
        require_finite(dst, ("loaded tensor " + name).c_str());
    }
    return info_of(man);
}

LoadInfo peek(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return info_of(read_manifest(is, path));
}

std::vector<TensorEntry> manifest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    json man = read_manifest(is, path);
    std::vector<TensorEntry> out;
    for (const auto& t : man.at("tensors")) {
        TensorEntry e;
        e.name = t.at("name").get<std::string>();
        e.group = t.at("group").get<std::string>();
        e.shape = t.at("shape").get<Shape>();
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace cascade::ckpt
