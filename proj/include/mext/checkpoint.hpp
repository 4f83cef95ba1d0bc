#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mext/data.hpp"
#include "mext/errors.hpp"
#include "mext/model.hpp"

namespace mext {

// MEXT1 container: magic "MEXT1", u32 little-endian header length, a JSON
// header listing {name, ownership, shape, dtype, byte_offset} per tensor,
// then the raw little-endian tensor payloads in header order. byte_offset
// is relative to the start of the data section.

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

inline constexpr char kContainerMagic[5] = {'M', 'E', 'X', 'T', '1'};

struct ContainerTensor {
    std::string name;
    std::string ownership;  // "backbone" | "off_ramp:<i>" | "final_classifier" | "data"
    Shape shape;
    std::string dtype;  // "f32" | "f64" | "i32"
    std::vector<uint8_t> bytes;
};

namespace detail {

inline int64_t dtype_size(const std::string& dtype) {
    if (dtype == "f32" || dtype == "i32") return 4;
    if (dtype == "f64") return 8;
    throw CheckpointError("unknown dtype: " + dtype);
}

}  // namespace detail

inline void write_container(const std::string& path, const std::vector<ContainerTensor>& tensors) {
    nlohmann::json header = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& t : tensors) {
        const int64_t want = numel_of(t.shape) * detail::dtype_size(t.dtype);
        if (int64_t(t.bytes.size()) != want)
            throw CheckpointError("container: payload size mismatch for " + t.name);
        header.push_back({{"name", t.name},
                          {"ownership", t.ownership},
                          {"shape", t.shape},
                          {"dtype", t.dtype},
                          {"byte_offset", offset}});
        offset += uint64_t(t.bytes.size());
    }
    const std::string hdr = header.dump();
    if (hdr.size() > 0xFFFFFFFFull) throw CheckpointError("container: header too large");

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out.write(kContainerMagic, 5);
    const uint32_t hlen = uint32_t(hdr.size());
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(hdr.data(), std::streamsize(hdr.size()));
    for (const auto& t : tensors)
        out.write(reinterpret_cast<const char*>(t.bytes.data()), std::streamsize(t.bytes.size()));
    if (!out) throw DataError("write failed for " + path);
}

inline std::vector<ContainerTensor> read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    char magic[5];
    if (!in.read(magic, 5) || std::memcmp(magic, kContainerMagic, 5) != 0)
        throw CheckpointError(path + ": bad magic, not a MEXT1 container");
    uint32_t hlen = 0;
    if (!in.read(reinterpret_cast<char*>(&hlen), 4))
        throw CheckpointError(path + ": truncated header length");
    std::string hdr(hlen, '\0');
    if (!in.read(hdr.data(), hlen)) throw CheckpointError(path + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hdr);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(path + ": header is not valid JSON: " + e.what());
    }
    if (!header.is_array()) throw CheckpointError(path + ": header must be a JSON array");

    const std::streampos data_start = in.tellg();
    std::vector<ContainerTensor> tensors;
    for (const auto& rec : header) {
        ContainerTensor t;
        try {
            t.name = rec.at("name").get<std::string>();
            t.ownership = rec.at("ownership").get<std::string>();
            t.shape = rec.at("shape").get<Shape>();
            t.dtype = rec.at("dtype").get<std::string>();
            const uint64_t off = rec.at("byte_offset").get<uint64_t>();
            const int64_t len = numel_of(t.shape) * detail::dtype_size(t.dtype);
            t.bytes.resize(size_t(len));
            in.seekg(data_start + std::streampos(off));
            if (!in.read(reinterpret_cast<char*>(t.bytes.data()), len))
                throw CheckpointError(path + ": truncated payload for " + t.name);
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointError(path + ": malformed header record: " + std::string(e.what()));
        }
        tensors.push_back(std::move(t));
    }
    return tensors;
}

// ---------------------------------------------------------- model checkpoint

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store) {
    std::vector<ContainerTensor> tensors;
    tensors.reserve(store.entries.size());
    for (const auto& e : store.entries) {
        ContainerTensor t;
        t.name = e.name;
        t.ownership = ownership_str(e.owner, e.ramp);
        t.shape = e.tensor.shape;
        t.dtype = dtype_name<T>();
        t.bytes.resize(e.tensor.data.size() * sizeof(T));
        std::memcpy(t.bytes.data(), e.tensor.data.data(), t.bytes.size());
        tensors.push_back(std::move(t));
    }
    write_container(path, tensors);
}

// Loads a checkpoint into the layout implied by `cfg`. Any mismatch --
// missing tensor, unexpected tensor, wrong shape or dtype -- is a
// CheckpointError (the CLI's exit code 4).
template <typename T>
ParamStore<T> load_checkpoint(const std::string& path, const ModelConfig& cfg) {
    ParamStore<T> store = ParamStore<T>::init(cfg);
    const std::vector<ContainerTensor> tensors = read_container(path);
    if (tensors.size() != store.entries.size())
        throw CheckpointError(path + ": expected " + std::to_string(store.entries.size()) +
                              " tensors for this config, found " + std::to_string(tensors.size()));
    for (const auto& t : tensors) {
        auto it = store.by_name.find(t.name);
        if (it == store.by_name.end())
            throw CheckpointError(path + ": unexpected tensor " + t.name);
        auto& entry = store.entries[it->second];
        if (t.shape != entry.tensor.shape)
            throw CheckpointError(path + ": shape mismatch for " + t.name + ": checkpoint " +
                                  shape_str(t.shape) + " vs config " +
                                  shape_str(entry.tensor.shape));
        if (t.dtype != dtype_name<T>())
            throw CheckpointError(path + ": dtype mismatch for " + t.name);
        if (t.ownership != ownership_str(entry.owner, entry.ramp))
            throw CheckpointError(path + ": ownership mismatch for " + t.name);
        std::memcpy(entry.tensor.data.data(), t.bytes.data(), t.bytes.size());
    }
    return store;
}

// ------------------------------------------------------------- dataset cache

// Token-id dataset in the same container framing, for skipping TSV parsing
// and vocab encoding on repeated runs.
inline void save_dataset_cache(const std::string& path, const Dataset& ds) {
    const int64_t n = int64_t(ds.examples.size());
    const int64_t len = ds.max_len();
    auto i32_tensor = [](std::string name, Shape shape, const std::vector<int32_t>& v) {
        ContainerTensor t;
        t.name = std::move(name);
        t.ownership = "data";
        t.shape = std::move(shape);
        t.dtype = "i32";
        t.bytes.resize(v.size() * 4);
        std::memcpy(t.bytes.data(), v.data(), t.bytes.size());
        return t;
    };
    std::vector<int32_t> tokens(size_t(n * len), Vocab::kPad);
    std::vector<int32_t> lengths(size_t(n), 0), labels(size_t(n), 0), strata(size_t(n), 0);
    for (int64_t i = 0; i < n; ++i) {
        const Example& ex = ds.examples[size_t(i)];
        std::copy(ex.ids.begin(), ex.ids.end(), tokens.begin() + i * len);
        lengths[size_t(i)] = int32_t(ex.ids.size());
        labels[size_t(i)] = ex.label;
        strata[size_t(i)] = ex.stratum;
    }
    const std::vector<int32_t> meta = {int32_t(ds.classes), ds.metric == Metric::f1 ? 1 : 0,
                                       int32_t(ds.positive_class)};
    write_container(path, {i32_tensor("tokens", {n, len}, tokens),
                           i32_tensor("lengths", {n}, lengths),
                           i32_tensor("labels", {n}, labels),
                           i32_tensor("strata", {n}, strata),
                           i32_tensor("meta", {3}, meta)});
}

inline Dataset load_dataset_cache(const std::string& path) {
    const auto tensors = read_container(path);
    auto find = [&](const std::string& name) -> const ContainerTensor& {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw CheckpointError(path + ": dataset cache missing tensor " + name);
    };
    auto as_i32 = [](const ContainerTensor& t) {
        if (t.dtype != "i32") throw CheckpointError("dataset cache: expected i32 for " + t.name);
        std::vector<int32_t> v(t.bytes.size() / 4);
        std::memcpy(v.data(), t.bytes.data(), t.bytes.size());
        return v;
    };
    const auto& tok = find("tokens");
    if (tok.shape.size() != 2) throw CheckpointError(path + ": tokens tensor must be 2-d");
    const int64_t n = tok.shape[0], len = tok.shape[1];
    const auto tokens = as_i32(tok);
    const auto lengths = as_i32(find("lengths"));
    const auto labels = as_i32(find("labels"));
    const auto strata = as_i32(find("strata"));
    const auto meta = as_i32(find("meta"));
    if (meta.size() != 3) throw CheckpointError(path + ": malformed meta tensor");
    Dataset ds;
    ds.classes = int(meta[0]);
    ds.metric = meta[1] == 1 ? Metric::f1 : Metric::accuracy;
    ds.positive_class = int(meta[2]);
    ds.examples.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
        Example& ex = ds.examples[size_t(i)];
        const int64_t l = lengths[size_t(i)];
        ex.ids.assign(tokens.begin() + i * len, tokens.begin() + i * len + l);
        ex.label = labels[size_t(i)];
        ex.stratum = int8_t(strata[size_t(i)]);
    }
    return ds;
}

}  // namespace mext
