#pragma once

// Shared helpers for the test suites: small model factories, seeded batches,
// an independent central-difference oracle, and a tiny logistic-regression
// probe used by the data-pipeline tests.

#include <cmath>
#include <functional>
#include <vector>

#include "mext/data.hpp"
#include "mext/model.hpp"
#include "mext/rng.hpp"

namespace testutil {

using namespace mext;

// relative error with an absolute fallback below the floor
inline double rel_err(double a, double b, double floor = 1e-3) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline ModelConfig tiny_config(uint64_t seed = 7, int k = 3, int hidden = 32, int classes = 2) {
    ModelConfig mc;
    mc.k = k;
    mc.hidden = hidden;
    mc.heads = 4;
    mc.ffn = hidden * 2;
    mc.vocab = 24;
    mc.classes = classes;
    mc.max_len = 10;
    mc.seed = seed;
    return mc;
}

// Random padded batch with CLS at position 0 and valid content ids.
inline TokenBatch random_batch(const ModelConfig& cfg, int batch, int64_t len, uint64_t seed) {
    Rng rng(seed);
    TokenBatch b;
    b.batch = batch;
    b.len = len;
    for (int r = 0; r < batch; ++r) {
        const int32_t valid = int32_t(2 + rng.index(int(len) - 1));
        b.lengths.push_back(valid);
        b.labels.push_back(int32_t(rng.index(cfg.classes)));
        for (int64_t t = 0; t < len; ++t) {
            if (t >= valid)
                b.ids.push_back(Vocab::kPad);
            else if (t == 0)
                b.ids.push_back(Vocab::kCls);
            else
                b.ids.push_back(int32_t(4 + rng.index(cfg.vocab - 4)));
        }
    }
    return b;
}

// Central finite difference d loss / d theta[index] with the loss given as a
// function of the whole store; independent of the tape's backward pass.
template <typename T>
double fd_coord(ParamStore<T>& store, const std::string& name, int64_t index,
                const std::function<double(const ParamStore<T>&)>& loss, double h = 1e-5) {
    T& slot = store.at(name).tensor.data[size_t(index)];
    const T orig = slot;
    slot = T(double(orig) + h);
    const double lp = loss(store);
    slot = T(double(orig) - h);
    const double lm = loss(store);
    slot = orig;
    return (lp - lm) / (2.0 * h);
}

// Logistic-regression probe trained with plain gradient descent; used as an
// independent linear-separability oracle over fixed feature vectors.
inline double logistic_probe_accuracy(const std::vector<std::vector<double>>& train_x,
                                      const std::vector<int32_t>& train_y,
                                      const std::vector<std::vector<double>>& test_x,
                                      const std::vector<int32_t>& test_y, int iters = 300,
                                      double lr = 0.5) {
    const size_t dim = train_x.front().size();
    std::vector<double> w(dim, 0.0);
    double bias = 0.0;
    const double n = double(train_x.size());
    std::vector<double> gw(dim, 0.0);
    for (int it = 0; it < iters; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (size_t i = 0; i < train_x.size(); ++i) {
            double z = bias;
            for (size_t d = 0; d < dim; ++d) z += w[d] * train_x[i][d];
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double err = p - double(train_y[i]);
            for (size_t d = 0; d < dim; ++d) gw[d] += err * train_x[i][d];
            gb += err;
        }
        for (size_t d = 0; d < dim; ++d) w[d] -= lr * gw[d] / n;
        bias -= lr * gb / n;
    }
    int64_t hit = 0;
    for (size_t i = 0; i < test_x.size(); ++i) {
        double z = bias;
        for (size_t d = 0; d < dim; ++d) z += w[d] * test_x[i][d];
        hit += (z > 0.0 ? 1 : 0) == test_y[i];
    }
    return double(hit) / double(test_x.size());
}

}  // namespace testutil
