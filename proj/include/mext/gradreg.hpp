#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mext/model.hpp"
#include "mext/tensor.hpp"

namespace mext {

// Flat gradient layout over a param store. The entry order mirrors the store,
// so two vectors flattened from the same store always line up.
struct GradLayout {
    struct Entry {
        std::string name;
        Ownership owner;
        int ramp;
        Shape shape;
        int64_t offset;
        int64_t length;
    };

    std::vector<Entry> entries;
    std::unordered_map<std::string, size_t> by_name;
    int64_t total = 0;

    template <typename T>
    static GradLayout from_store(const ParamStore<T>& store) {
        GradLayout layout;
        int64_t off = 0;
        for (const auto& e : store.entries) {
            layout.by_name.emplace(e.name, layout.entries.size());
            layout.entries.push_back(
                Entry{e.name, e.owner, e.ramp, e.tensor.shape, off, e.tensor.numel()});
            off += e.tensor.numel();
        }
        layout.total = off;
        return layout;
    }

    const Entry& at(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ContractError("grad layout: unknown param " + name);
        return entries[it->second];
    }
};

// Flat gradient. layout may be null for free-standing vector math (tests,
// the projection suite); flatten/unflatten require it.
template <typename T>
struct GradVector {
    std::vector<T> values;
    const GradLayout* layout = nullptr;

    int64_t size() const { return int64_t(values.size()); }
};

template <typename T>
GradVector<T> flatten(const std::map<std::string, Tensor<T>>& grads, const GradLayout& layout) {
    GradVector<T> g;
    g.layout = &layout;
    g.values.assign(size_t(layout.total), T(0));
    for (const auto& [name, tensor] : grads) {
        const auto& e = layout.at(name);  // unknown name throws
        if (tensor.numel() != e.length)
            throw ShapeError("flatten: size mismatch for " + name);
        for (int64_t i = 0; i < e.length; ++i)
            g.values[size_t(e.offset + i)] = tensor.data[size_t(i)];
    }
    return g;
}

template <typename T>
std::map<std::string, Tensor<T>> unflatten(const GradVector<T>& g) {
    if (!g.layout) throw ContractError("unflatten: vector has no layout");
    if (g.size() != g.layout->total) throw ShapeError("unflatten: length mismatch");
    std::map<std::string, Tensor<T>> out;
    for (const auto& e : g.layout->entries) {
        Tensor<T> t(e.shape);
        for (int64_t i = 0; i < e.length; ++i) t.data[size_t(i)] = g.values[size_t(e.offset + i)];
        out.emplace(e.name, std::move(t));
    }
    return out;
}

template <typename T>
double dot_product(const GradVector<T>& a, const GradVector<T>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) s += double(a.values[i]) * double(b.values[i]);
    return s;
}

template <typename T>
double norm(const GradVector<T>& g) {
    double s = 0.0;
    for (T v : g.values) s += double(v) * double(v);
    return std::sqrt(s);
}

struct GrDiagnostic {
    int64_t step = 0;
    double dot = 0.0;
    double gf_norm = 0.0;
    double gs_norm = 0.0;
    bool conflicted = false;
};

template <typename T>
struct RegularizeResult {
    GradVector<T> g_star;
    GradVector<T> proj;  // Proj(g_f); only populated when conflicted
    bool conflicted = false;
    double dot = 0.0;
    double gs_norm_sq = 0.0;
};

// Conflict-aware combination of the final-exit gradient g_f and the
// self-distillation gradient g_s. When they point more than 90 degrees
// apart (dot < 0), g_f is projected onto the normal plane of g_s first:
//
//   Proj(g_f) = g_f - (g_f . g_s / |g_s|^2) g_s,   g* = Proj(g_f) + g_s
//
// otherwise g* = g_f + g_s unchanged. A vanishing |g_s|^2 (< 1e-24) takes
// the pass-through branch; the dot is ~0 there so no conflict can fire.
template <typename T>
RegularizeResult<T> regularize(const GradVector<T>& g_f, const GradVector<T>& g_s) {
    if (g_f.size() != g_s.size()) throw ShapeError("regularize: length mismatch");
    if (g_f.layout && g_s.layout && g_f.layout != g_s.layout)
        throw ContractError("regularize: layouts differ");
    RegularizeResult<T> r;
    r.g_star.layout = g_f.layout;
    r.g_star.values.resize(g_f.values.size());
    double dot = 0.0, ns = 0.0;
    for (size_t i = 0; i < g_f.values.size(); ++i) {
        dot += double(g_f.values[i]) * double(g_s.values[i]);
        ns += double(g_s.values[i]) * double(g_s.values[i]);
    }
    r.dot = dot;
    r.gs_norm_sq = ns;
    if (dot < 0.0 && ns >= 1e-24) {
        r.conflicted = true;
        r.proj.layout = g_f.layout;
        r.proj.values.resize(g_f.values.size());
        const double coef = dot / ns;
        for (size_t i = 0; i < g_f.values.size(); ++i) {
            const double proj = double(g_f.values[i]) - coef * double(g_s.values[i]);
            r.proj.values[i] = T(proj);
            r.g_star.values[i] = T(proj + double(g_s.values[i]));
        }
    } else {
        r.conflicted = false;
        for (size_t i = 0; i < g_f.values.size(); ++i)
            r.g_star.values[i] = g_f.values[i] + g_s.values[i];
    }
    return r;
}

}  // namespace mext
