#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "mext/data.hpp"
#include "mext/losses.hpp"
#include "mext/model.hpp"

namespace mext {

// Shannon entropy of a distribution, with 0*ln(0) := 0. Natural log by
// default; base 2 is available because the threshold scale is otherwise a
// matter of convention.
enum class EntropyBase { nats, bits };

template <typename T>
double entropy(const T* probs, int64_t n, EntropyBase base = EntropyBase::nats) {
    double sum = 0.0, h = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double p = double(probs[i]);
        if (p < 0.0) throw ContractError("entropy: negative probability");
        sum += p;
        if (p > 0.0) h -= p * std::log(p);
    }
    if (std::abs(sum - 1.0) > 1e-4)
        throw ContractError("entropy: probabilities sum to " + std::to_string(sum));
    return base == EntropyBase::nats ? h : h / std::log(2.0);
}

template <typename T>
double entropy(const std::vector<T>& probs, EntropyBase base = EntropyBase::nats) {
    return entropy(probs.data(), int64_t(probs.size()), base);
}

template <typename T>
int32_t argmax_row_t(const T* row, int64_t n) {
    int32_t best = 0;
    for (int64_t j = 1; j < n; ++j)
        if (row[j] > row[best]) best = int32_t(j);
    return best;
}

struct ExitDecision {
    int exit_layer = 0;          // 1-based
    double entropy_at_exit = 0;  // nats unless configured otherwise
    int32_t prediction = 0;
};

struct EvalOptions {
    int batch = 64;
    int threads = 0;  // 0: MEXT_THREADS env var, else hardware concurrency
    EntropyBase entropy_base = EntropyBase::nats;
};

inline int resolve_eval_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("MEXT_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

// Walks the off-ramps in order and exits at the first one whose prediction
// entropy (softmax at temperature 1) falls below S; the last layer always
// exits. Layers past the exit are never computed.
template <typename T>
ExitDecision infer_adaptive(const ParamStore<T>& store, const Example& ex, double S,
                            EntropyBase base = EntropyBase::nats) {
    if (S < 0.0) throw ContractError("infer_adaptive: threshold must be >= 0");
    TokenBatch batch = make_batch(Dataset{{ex}, store.config.classes}, {0});
    IncrementalForward<T> fw(store, batch);
    const int k = fw.max_layer();
    for (int i = 1; i <= k; ++i) {
        const Tensor<T>& logits = fw.advance();
        const Tensor<T> probs = temp_softmax(logits, 1.0);
        const double h = entropy(probs.data.data(), probs.cols(), base);
        if (h < S || i == k)
            return ExitDecision{i, h, argmax_row_t(probs.data.data(), probs.cols())};
    }
    return {};  // unreachable
}

// Per-example, per-layer entropies and predictions for a whole dataset,
// computed once and shared by sweep / histogram / fixed-layer evaluation.
// Batches are partitioned statically over threads and written to disjoint
// slots, so results are identical for any thread count.
struct ExitTable {
    int k = 0;
    int64_t n = 0;
    std::vector<double> entropies;   // n * k
    std::vector<int32_t> preds;      // n * k
    std::vector<int32_t> labels;     // n

    double entropy_at(int64_t ex, int layer) const {
        return entropies[size_t(ex * k + layer - 1)];
    }
    int32_t pred_at(int64_t ex, int layer) const { return preds[size_t(ex * k + layer - 1)]; }

    // first layer whose entropy drops below S; the last layer always exits
    int exit_layer(int64_t ex, double S) const {
        for (int i = 1; i < k; ++i)
            if (entropy_at(ex, i) < S) return i;
        return k;
    }
};

template <typename T>
ExitTable compute_exit_table(const ParamStore<T>& store, const Dataset& ds,
                             const EvalOptions& opts = {}) {
    if (ds.examples.empty()) throw DataError("evaluation dataset is empty");
    const int k = store.config.k;
    const int64_t n = int64_t(ds.examples.size());
    ExitTable table;
    table.k = k;
    table.n = n;
    table.entropies.resize(size_t(n * k));
    table.preds.resize(size_t(n * k));
    table.labels.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) table.labels[size_t(i)] = ds.examples[size_t(i)].label;

    const int64_t nbatches = (n + opts.batch - 1) / opts.batch;
    const int threads = std::max(
        1, std::min<int>(resolve_eval_threads(opts.threads), int(nbatches)));

    auto run_range = [&](int worker) {
        for (int64_t bi = worker; bi < nbatches; bi += threads) {
            const int64_t lo = bi * opts.batch;
            const int64_t hi = std::min<int64_t>(lo + opts.batch, n);
            std::vector<int64_t> idx(size_t(hi - lo), 0);
            for (int64_t i = lo; i < hi; ++i) idx[size_t(i - lo)] = i;
            const TokenBatch batch = make_batch(ds, idx);
            const ExitOutputs<T> out = eval_all_exits(store, batch);
            for (int layer = 1; layer <= k; ++layer) {
                const Tensor<T> probs = temp_softmax(out.logits[size_t(layer - 1)], 1.0);
                const int64_t c = probs.cols();
                for (int64_t r = 0; r < hi - lo; ++r) {
                    const T* row = probs.data.data() + r * c;
                    table.entropies[size_t((lo + r) * k + layer - 1)] =
                        entropy(row, c, opts.entropy_base);
                    table.preds[size_t((lo + r) * k + layer - 1)] = argmax_row_t(row, c);
                }
            }
        }
    };

    if (threads == 1) {
        run_range(0);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(size_t(threads));
        for (int w = 0; w < threads; ++w) pool.emplace_back(run_range, w);
        for (auto& t : pool) t.join();
    }
    return table;
}

// ------------------------------------------------------------------- metrics

inline double accuracy(const std::vector<int32_t>& preds, const std::vector<int32_t>& labels) {
    int64_t hit = 0;
    for (size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
    return preds.empty() ? 0.0 : double(hit) / double(preds.size());
}

// binary F1 on the positive class
inline double f1_score(const std::vector<int32_t>& preds, const std::vector<int32_t>& labels,
                       int32_t positive = 1) {
    int64_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const bool p = preds[i] == positive, y = labels[i] == positive;
        tp += p && y;
        fp += p && !y;
        fn += !p && y;
    }
    const double denom = double(2 * tp + fp + fn);
    return denom == 0.0 ? 0.0 : double(2 * tp) / denom;
}

inline double metric_value(const std::vector<int32_t>& preds, const std::vector<int32_t>& labels,
                           Metric metric, int32_t positive = 1) {
    return metric == Metric::accuracy ? accuracy(preds, labels)
                                      : f1_score(preds, labels, positive);
}

// -------------------------------------------------------------------- sweeps

struct SweepRecord {
    double threshold = 0.0;
    double metric = 0.0;            // accuracy or F1 per task config
    double expected_time_pct = 0.0; // dataset mean of exit_layer/k, in percent
    std::vector<int64_t> histogram; // exits per layer, sums to dataset size
};

inline SweepRecord sweep_at(const ExitTable& table, const Dataset& ds, double S) {
    SweepRecord rec;
    rec.threshold = S;
    rec.histogram.assign(size_t(table.k), 0);
    std::vector<int32_t> preds(size_t(table.n), 0);
    for (int64_t i = 0; i < table.n; ++i) {
        const int exit = table.exit_layer(i, S);
        ++rec.histogram[size_t(exit - 1)];
        preds[size_t(i)] = table.pred_at(i, exit);
    }
    double time_sum = 0.0;
    for (int layer = 1; layer <= table.k; ++layer)
        time_sum += double(rec.histogram[size_t(layer - 1)]) * double(layer) / double(table.k);
    rec.expected_time_pct = 100.0 * time_sum / double(table.n);
    rec.metric = metric_value(preds, table.labels, ds.metric, int32_t(ds.positive_class));
    return rec;
}

template <typename T>
std::vector<SweepRecord> sweep(const ParamStore<T>& store, const Dataset& ds,
                               const std::vector<double>& thresholds,
                               const EvalOptions& opts = {}) {
    const ExitTable table = compute_exit_table(store, ds, opts);
    std::vector<SweepRecord> out;
    out.reserve(thresholds.size());
    for (double S : thresholds) out.push_back(sweep_at(table, ds, S));
    return out;
}

// Metric of every exit with the exit layer fixed for all inputs; no
// entropy thresholding involved.
inline std::vector<double> eval_fixed_layers(const ExitTable& table, const Dataset& ds) {
    std::vector<double> out;
    out.reserve(size_t(table.k));
    std::vector<int32_t> preds(size_t(table.n), 0);
    for (int layer = 1; layer <= table.k; ++layer) {
        for (int64_t i = 0; i < table.n; ++i) preds[size_t(i)] = table.pred_at(i, layer);
        out.push_back(metric_value(preds, table.labels, ds.metric, int32_t(ds.positive_class)));
    }
    return out;
}

template <typename T>
std::vector<double> eval_fixed_layers(const ParamStore<T>& store, const Dataset& ds,
                                      const EvalOptions& opts = {}) {
    return eval_fixed_layers(compute_exit_table(store, ds, opts), ds);
}

template <typename T>
std::vector<int64_t> exit_histogram(const ParamStore<T>& store, const Dataset& ds, double S,
                                    const EvalOptions& opts = {}) {
    return sweep(store, ds, {S}, opts).front().histogram;
}

// --------------------------------------------------------------- CSV output

inline std::string format_fixed(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRecord>& records, int k) {
    os << "threshold,metric,expected_time_pct";
    for (int i = 1; i <= k; ++i) os << ",count_layer_" << i;
    os << "\n";
    for (const auto& r : records) {
        os << format_fixed(r.threshold) << "," << format_fixed(r.metric) << ","
           << format_fixed(r.expected_time_pct);
        for (int64_t c : r.histogram) os << "," << c;
        os << "\n";
    }
}

inline void write_layerwise_csv(std::ostream& os, const std::vector<double>& per_layer) {
    os << "layer,metric\n";
    for (size_t i = 0; i < per_layer.size(); ++i)
        os << (i + 1) << "," << format_fixed(per_layer[i]) << "\n";
}

}  // namespace mext
