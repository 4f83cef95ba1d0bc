#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mext/gradreg.hpp"
#include "mext/model.hpp"

namespace mext {

// Ownership tags whose parameters receive no updates. Frozen tensors stay
// bitwise identical across any number of steps.
struct FreezeMask {
    bool backbone = false;
    bool off_ramps = false;
    bool final_classifier = false;

    bool covers(Ownership o) const {
        switch (o) {
            case Ownership::backbone: return backbone;
            case Ownership::off_ramp: return off_ramps;
            case Ownership::final_classifier: return final_classifier;
        }
        return false;
    }

    static FreezeMask none() { return {}; }
    static FreezeMask ramps_only() { return FreezeMask{false, true, false}; }
    static FreezeMask backbone_and_final() { return FreezeMask{true, false, true}; }
};

struct OptimConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;     // global-norm gradient clip; <= 0 disables
    double warmup_frac = 0.1;   // linear warmup fraction, then linear decay
};

// lr schedule: linear ramp over the first warmup_frac of total steps, then
// linear decay toward zero at the end of the run. step is 0-based.
inline double scheduled_lr(const OptimConfig& cfg, int64_t step, int64_t total_steps) {
    if (total_steps <= 0) return cfg.lr;
    const int64_t warm = std::max<int64_t>(1, int64_t(cfg.warmup_frac * double(total_steps)));
    if (step < warm) return cfg.lr * double(step + 1) / double(warm);
    if (total_steps <= warm) return cfg.lr;
    return cfg.lr * double(total_steps - step) / double(total_steps - warm);
}

// Zeroes gradient segments under the mask, then rescales the rest so the
// global norm does not exceed clip_norm. Returns the pre-clip norm.
template <typename T>
double mask_and_clip(GradVector<T>& g, const FreezeMask& mask, double clip_norm) {
    if (g.layout) {
        for (const auto& e : g.layout->entries) {
            if (!mask.covers(e.owner)) continue;
            for (int64_t i = 0; i < e.length; ++i) g.values[size_t(e.offset + i)] = T(0);
        }
    }
    double ns = 0.0;
    for (T v : g.values) ns += double(v) * double(v);
    const double n = std::sqrt(ns);
    if (clip_norm > 0.0 && n > clip_norm) {
        const T s = T(clip_norm / n);
        for (T& v : g.values) v *= s;
    }
    return n;
}

// Adam over the flat layout. Moment buffers are keyed by flat offset and
// persist for the lifetime of the optimizer; masked segments are skipped
// entirely so frozen parameters and their moments never move.
template <typename T>
class Adam {
public:
    Adam(const GradLayout& layout, OptimConfig cfg)
        : layout_(&layout),
          cfg_(cfg),
          m_(size_t(layout.total), T(0)),
          v_(size_t(layout.total), T(0)) {}

    // One update with an explicit learning rate (the scheduler's output).
    void step(ParamStore<T>& store, const GradVector<T>& g, const FreezeMask& mask, double lr) {
        if (g.size() != layout_->total) throw ShapeError("adam: gradient length mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
        const T one_m_b1 = T(1.0 - cfg_.beta1), one_m_b2 = T(1.0 - cfg_.beta2);
        const T inv_bc1 = T(1.0 / bc1), inv_bc2 = T(1.0 / bc2);
        const T lrt = T(lr), eps = T(cfg_.eps);
        for (size_t ei = 0; ei < layout_->entries.size(); ++ei) {
            const auto& e = layout_->entries[ei];
            if (mask.covers(e.owner)) continue;
            if (store.entries[ei].tensor.numel() != e.length)
                throw ContractError("adam: store does not match layout at " + e.name);
            T* p = store.entries[ei].tensor.data.data();
            const T* gd = g.values.data() + e.offset;
            T* m = m_.data() + e.offset;
            T* v = v_.data() + e.offset;
            for (int64_t i = 0; i < e.length; ++i) {
                const T gi = gd[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                p[i] -= lrt * (m[i] * inv_bc1) / (std::sqrt(v[i] * inv_bc2) + eps);
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    const GradLayout* layout_;
    OptimConfig cfg_;
    int64_t t_ = 0;
    std::vector<T> m_, v_;
};

}  // namespace mext
