// DSDF container: the single on-disk format for checkpoints, datasets,
// feature sets and sampled outputs.
//
// Layout (all integers little-endian):
//   bytes 0..3   magic "DSDF"
//   byte  4      format version (currently 1)
//   bytes 5..12  u64 JSON header length H
//   H bytes      UTF-8 JSON: {"meta": {...}, "tensors": [{name, dtype, shape}...]}
//   then one raw payload per tensor, in header order (f32 or f64 values).
//
// Writes are byte-deterministic for identical content (sorted JSON keys,
// binary float payloads), which is what the rerun-determinism checks hash.
#pragma once

#include "mf/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace mf::io {

using nlohmann::json;

enum class Dtype { f32, f64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }
inline Dtype dtype_from_name(const std::string& s) {
    if (s == "f32") return Dtype::f32;
    if (s == "f64") return Dtype::f64;
    throw std::invalid_argument("unknown dtype: " + s);
}
template <class T>
constexpr Dtype dtype_of() {
    return sizeof(T) == 4 ? Dtype::f32 : Dtype::f64;
}

struct ArchiveTensor {
    std::string name;
    Dtype dtype = Dtype::f64;
    std::vector<int64_t> shape;
    std::vector<float> f32;
    std::vector<double> f64;

    int64_t numel() const { return numel_of(shape); }

    template <class T>
    Tensor<T> as() const {
        Tensor<T> t(shape);
        if (dtype == Dtype::f32) {
            for (size_t i = 0; i < f32.size(); ++i) t.data[i] = static_cast<T>(f32[i]);
        } else {
            for (size_t i = 0; i < f64.size(); ++i) t.data[i] = static_cast<T>(f64[i]);
        }
        return t;
    }
};

struct Archive {
    json meta = json::object();
    std::vector<ArchiveTensor> tensors;

    template <class T>
    void add(const std::string& name, const Tensor<T>& t) {
        ArchiveTensor at;
        at.name = name;
        at.shape = t.shape;
        at.dtype = dtype_of<T>();
        if constexpr (sizeof(T) == 4) {
            at.f32.assign(t.data.begin(), t.data.end());
        } else {
            at.f64.assign(t.data.begin(), t.data.end());
        }
        tensors.push_back(std::move(at));
    }

    const ArchiveTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
    const ArchiveTensor& get(const std::string& name) const {
        const ArchiveTensor* t = find(name);
        if (!t) throw std::runtime_error("archive tensor not found: " + name);
        return *t;
    }
    template <class T>
    Tensor<T> get_as(const std::string& name) const {
        return get(name).template as<T>();
    }

    void save(const std::string& path) const;
    static Archive load(const std::string& path);
};

// Hex SHA-256 of a file's bytes (run manifests, determinism checks).
std::string sha256_file(const std::string& path);
// Hex SHA-256 of an in-memory string (config hashes).
std::string sha256_string(const std::string& text);

}  // namespace mf::io
