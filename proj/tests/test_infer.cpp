#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "mext/infer.hpp"
#include "testutil.hpp"

using namespace mext;
using Catch::Approx;
using testutil::tiny_config;

namespace {

Dataset fixed_len_dataset(const ModelConfig& cfg, int n, int64_t len, uint64_t seed) {
    Rng rng(seed);
    Dataset ds;
    ds.classes = cfg.classes;
    for (int i = 0; i < n; ++i) {
        Example ex;
        ex.ids.push_back(Vocab::kCls);
        for (int64_t t = 1; t < len; ++t) ex.ids.push_back(int32_t(4 + rng.index(cfg.vocab - 4)));
        ex.label = int32_t(rng.index(cfg.classes));
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

}  // namespace

TEST_CASE("entropy closed forms") {
    CHECK(entropy(std::vector<double>{1.0, 0.0, 0.0}) == Approx(0.0).margin(1e-12));
    CHECK(entropy(std::vector<double>{0.5, 0.5}) == Approx(std::log(2.0)));
    CHECK(entropy(std::vector<double>{0.9, 0.1}) == Approx(0.325083).margin(1e-6));
    // base-2 variant
    CHECK(entropy(std::vector<double>{0.5, 0.5}, EntropyBase::bits) == Approx(1.0));
}

TEST_CASE("entropy contract errors") {
    CHECK_THROWS_AS(entropy(std::vector<double>{1.2, -0.2}), ContractError);
    CHECK_THROWS_AS(entropy(std::vector<double>{0.4, 0.4}), ContractError);
}

TEST_CASE("entropy stays within [0, ln C] on random distributions") {
    Rng rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        const int c = 2 + rng.index(6);
        std::vector<double> p(size_t(c), 0.0);
        double sum = 0;
        for (auto& v : p) {
            v = -std::log(1.0 - rng.uniform());
            sum += v;
        }
        for (auto& v : p) v /= sum;
        const double h = entropy(p);
        CHECK(h >= 0.0);
        CHECK(h <= std::log(double(c)) + 1e-9);
    }
}

TEST_CASE("infer_adaptive threshold semantics") {
    const ModelConfig cfg = tiny_config(101, 4, 32, 2);
    auto store = ParamStore<float>::init(cfg);
    const Dataset ds = fixed_len_dataset(cfg, 12, 8, 102);

    SECTION("S=0 always exits at the last layer") {
        for (const auto& ex : ds.examples) {
            const auto d = infer_adaptive(store, ex, 0.0);
            CHECK(d.exit_layer == cfg.k);
        }
    }
    SECTION("S above ln C always exits at layer 1") {
        const double S = std::log(double(cfg.classes)) + 0.01;
        for (const auto& ex : ds.examples) {
            const auto d = infer_adaptive(store, ex, S);
            CHECK(d.exit_layer == 1);
            CHECK(d.entropy_at_exit < S);
        }
    }
    SECTION("exit happens at the first layer whose entropy crosses") {
        // derive per-layer entropies directly and cross-check the decision
        const ExitTable table = compute_exit_table(store, ds);
        Rng rng(103);
        for (int trial = 0; trial < 30; ++trial) {
            const int64_t i = rng.index(int(ds.size()));
            const double S = rng.uniform() * std::log(2.0);
            const auto d = infer_adaptive(store, ds.examples[size_t(i)], S);
            CHECK(d.exit_layer == table.exit_layer(i, S));
            CHECK(d.prediction == table.pred_at(i, d.exit_layer));
            CHECK(d.entropy_at_exit == Approx(table.entropy_at(i, d.exit_layer)).margin(1e-12));
            if (d.exit_layer < cfg.k) CHECK(d.entropy_at_exit < S);
            for (int j = 1; j < d.exit_layer; ++j) CHECK(table.entropy_at(i, j) >= S);
        }
    }
    SECTION("negative threshold is a contract error") {
        CHECK_THROWS_AS(infer_adaptive(store, ds.examples[0], -0.1), ContractError);
    }
}

TEST_CASE("sweep: S=0 gives full time and the final exit's accuracy") {
    const ModelConfig cfg = tiny_config(111, 3, 32, 2);
    auto store = ParamStore<float>::init(cfg);
    const Dataset ds = fixed_len_dataset(cfg, 40, 8, 112);
    const auto recs = sweep(store, ds, {0.0});
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].expected_time_pct == Approx(100.0));
    const auto fixed = eval_fixed_layers(store, ds);
    CHECK(recs[0].metric == Approx(fixed.back()));
    CHECK(recs[0].histogram.back() == int64_t(ds.size()));
}

TEST_CASE("sweep: expected time formula on a constructed half-half split") {
    // half the examples exit at layer 3 of k=6, half at 6 -> 75%
    ExitTable table;
    table.k = 6;
    table.n = 10;
    table.entropies.assign(size_t(table.n * table.k), 1.0);
    table.preds.assign(size_t(table.n * table.k), 0);
    table.labels.assign(size_t(table.n), 0);
    for (int64_t i = 0; i < 5; ++i) table.entropies[size_t(i * 6 + 2)] = 0.0;  // layer 3
    Dataset ds;
    ds.classes = 2;
    ds.examples.resize(10);
    const auto rec = sweep_at(table, ds, 0.5);
    CHECK(rec.expected_time_pct == Approx(75.0));
    CHECK(rec.histogram[2] == 5);
    CHECK(rec.histogram[5] == 5);
}

TEST_CASE("expected time is non-increasing over an increasing threshold grid") {
    const ModelConfig cfg = tiny_config(121, 4, 32, 2);
    auto store = ParamStore<float>::init(cfg);
    const Dataset ds = fixed_len_dataset(cfg, 60, 8, 122);
    std::vector<double> grid;
    for (int i = 0; i < 20; ++i) grid.push_back(0.693 * double(i) / 19.0);
    const auto recs = sweep(store, ds, grid);

    // per-example oracle: the first-crossing layer can only move earlier
    const ExitTable table = compute_exit_table(store, ds);
    for (size_t g = 1; g < grid.size(); ++g) {
        for (int64_t i = 0; i < table.n; ++i)
            CHECK(table.exit_layer(i, grid[g]) <= table.exit_layer(i, grid[g - 1]));
        CHECK(recs[g].expected_time_pct <= recs[g - 1].expected_time_pct + 1e-12);
    }
}

TEST_CASE("histogram counts always sum to the dataset size") {
    const ModelConfig cfg = tiny_config(131, 3, 32, 2);
    auto store = ParamStore<float>::init(cfg);
    const Dataset ds = fixed_len_dataset(cfg, 33, 8, 132);
    Rng rng(133);
    for (double S : {0.0, 0.1, 0.4, 0.695, 10.0}) {
        const auto counts = exit_histogram(store, ds, S);
        int64_t total = 0;
        for (int64_t c : counts) total += c;
        CHECK(total == int64_t(ds.size()));
    }
    // extreme thresholds put all mass at the ends
    CHECK(exit_histogram(store, ds, 0.0).back() == int64_t(ds.size()));
    CHECK(exit_histogram(store, ds, 10.0).front() == int64_t(ds.size()));
}

TEST_CASE("histogram and the i/k formula reproduce expected_time_pct") {
    const ModelConfig cfg = tiny_config(141, 5, 32, 3);
    auto store = ParamStore<float>::init(cfg);
    const Dataset ds = fixed_len_dataset(cfg, 50, 8, 142);
    for (const auto& rec : sweep(store, ds, {0.0, 0.3, 0.8, 1.2})) {
        double t = 0.0;
        for (int layer = 1; layer <= cfg.k; ++layer)
            t += double(rec.histogram[size_t(layer - 1)]) * double(layer) / double(cfg.k);
        CHECK(std::abs(rec.expected_time_pct - 100.0 * t / double(ds.size())) < 1e-9);
    }
}

TEST_CASE("eval_fixed_layers returns k values and agrees with sweep at S=0") {
    const ModelConfig cfg = tiny_config(151, 4, 32, 2);
    auto store = ParamStore<float>::init(cfg);
    const Dataset ds = fixed_len_dataset(cfg, 25, 8, 152);
    const auto fixed = eval_fixed_layers(store, ds);
    REQUIRE(int(fixed.size()) == cfg.k);
    CHECK(fixed.back() == Approx(sweep(store, ds, {0.0})[0].metric));
}

TEST_CASE("adaptive prediction equals the argmax of the same exit's logits") {
    const ModelConfig cfg = tiny_config(161, 3, 32, 3);
    auto store = ParamStore<float>::init(cfg);
    const Dataset ds = fixed_len_dataset(cfg, 10, 8, 162);
    for (const auto& ex : ds.examples) {
        const auto d = infer_adaptive(store, ex, 0.9);
        const TokenBatch b = make_batch(ds, {&ex - ds.examples.data()});
        const auto out = eval_all_exits(store, b);
        const auto& logits = out.logits[size_t(d.exit_layer - 1)];
        CHECK(d.prediction == argmax_row_t(logits.data.data(), logits.cols()));
    }
}

TEST_CASE("f1 score on a worked confusion table") {
    // preds vs labels: TP=2, FP=1, FN=1 -> F1 = 2*2 / (4+1+1) = 0.666...
    const std::vector<int32_t> preds = {1, 1, 1, 0, 0};
    const std::vector<int32_t> labels = {1, 1, 0, 1, 0};
    CHECK(f1_score(preds, labels) == Approx(2.0 / 3.0));
    CHECK(accuracy(preds, labels) == Approx(0.6));
    // degenerate: no positives anywhere -> 0 by convention
    CHECK(f1_score({0, 0}, {0, 0}) == 0.0);
}

TEST_CASE("dataset metric selects F1 when configured") {
    const ModelConfig cfg = tiny_config(171, 3, 32, 2);
    auto store = ParamStore<float>::init(cfg);
    Dataset ds = fixed_len_dataset(cfg, 30, 8, 172);
    const ExitTable table = compute_exit_table(store, ds);
    std::vector<int32_t> preds(size_t(table.n), 0);
    for (int64_t i = 0; i < table.n; ++i) preds[size_t(i)] = table.pred_at(i, cfg.k);
    ds.metric = Metric::f1;
    const auto rec = sweep(store, ds, {0.0})[0];
    CHECK(rec.metric == Approx(f1_score(preds, table.labels)));
}

TEST_CASE("evaluation is independent of the thread count") {
    const ModelConfig cfg = tiny_config(181, 4, 32, 2);
    auto store = ParamStore<float>::init(cfg);
    const Dataset ds = fixed_len_dataset(cfg, 70, 8, 182);
    EvalOptions one;
    one.threads = 1;
    one.batch = 16;
    EvalOptions four;
    four.threads = 4;
    four.batch = 16;
    const ExitTable a = compute_exit_table(store, ds, one);
    const ExitTable b = compute_exit_table(store, ds, four);
    CHECK(a.entropies == b.entropies);
    CHECK(a.preds == b.preds);
}

TEST_CASE("sweep CSV schema") {
    std::vector<SweepRecord> recs(2);
    recs[0] = {0.0, 0.75, 100.0, {0, 0, 12}};
    recs[1] = {0.5, 0.7, 55.5, {5, 4, 3}};
    std::ostringstream os;
    write_sweep_csv(os, recs, 3);
    const std::string want =
        "threshold,metric,expected_time_pct,count_layer_1,count_layer_2,count_layer_3\n"
        "0.000000,0.750000,100.000000,0,0,12\n"
        "0.500000,0.700000,55.500000,5,4,3\n";
    CHECK(os.str() == want);

    std::ostringstream os2;
    write_layerwise_csv(os2, {0.5, 0.625});
    CHECK(os2.str() == "layer,metric\n1,0.500000\n2,0.625000\n");
}
