#include <catch2/catch_amalgamated.hpp>

#include "mext/losses.hpp"
#include "testutil.hpp"

using namespace mext;
using Catch::Approx;

namespace {

// logits chosen so temp_softmax(logits, temp) reproduces the given probs
template <typename T>
Tensor<T> logits_for(const std::vector<double>& probs, double temp = 1.0) {
    Tensor<T> t({1, int64_t(probs.size())});
    for (size_t i = 0; i < probs.size(); ++i) t.data[i] = T(temp * std::log(probs[i]));
    return t;
}

ExitOutputs<double> random_exits(int k, int batch, int classes, uint64_t seed) {
    Rng rng(seed);
    ExitOutputs<double> out;
    for (int i = 0; i < k; ++i) {
        Tensor<double> t({batch, classes});
        for (auto& v : t.data) v = rng.normal() * 2.0;
        out.logits.push_back(std::move(t));
    }
    return out;
}

}  // namespace

TEST_CASE("cross_entropy closed forms") {
    // probability 1 on the true class -> 0
    Tensor<double> sure({1, 2}, {50.0, -50.0});
    CHECK(cross_entropy(sure, {0}) == Approx(0.0).margin(1e-9));

    // uniform logits over C classes -> ln C
    for (int c : {2, 3, 7}) {
        Tensor<double> uni({1, int64_t(c)});
        CHECK(cross_entropy(uni, {0}) == Approx(std::log(double(c))));
    }

    // logits (ln 2, 0), label 0 -> -ln(2/3)
    Tensor<double> t({1, 2}, {std::log(2.0), 0.0});
    CHECK(cross_entropy(t, {0}) == Approx(0.405465).margin(1e-6));
}

TEST_CASE("cross_entropy rejects out-of-range labels") {
    Tensor<double> t({1, 2}, {0.0, 0.0});
    CHECK_THROWS_AS(cross_entropy(t, {2}), DataError);
    CHECK_THROWS_AS(cross_entropy(t, {-1}), DataError);
}

TEST_CASE("temp_softmax closed forms") {
    // logits (ln 4, 0) at T=2 -> (2/3, 1/3)
    Tensor<double> t({1, 2}, {std::log(4.0), 0.0});
    const auto p = temp_softmax(t, 2.0);
    CHECK(p.data[0] == Approx(2.0 / 3.0));
    CHECK(p.data[1] == Approx(1.0 / 3.0));

    // equal logits at any T -> uniform
    Tensor<double> eq({1, 3}, {1.7, 1.7, 1.7});
    for (double temp : {0.1, 1.0, 5.0}) {
        const auto pe = temp_softmax(eq, temp);
        for (double v : pe.data) CHECK(v == Approx(1.0 / 3.0));
    }

    // T -> infinity flattens any logits toward uniform
    Rng rng(5);
    Tensor<double> any({1, 4});
    for (auto& v : any.data) v = rng.normal() * 3.0;
    const auto pu = temp_softmax(any, 1e6);
    for (double v : pu.data) CHECK(v == Approx(0.25).margin(1e-4));
}

TEST_CASE("temp_softmax rejects non-positive temperature") {
    Tensor<double> t({1, 2}, {0.0, 1.0});
    CHECK_THROWS_AS(temp_softmax(t, 0.0), ConfigError);
    CHECK_THROWS_AS(temp_softmax(t, -1.0), ConfigError);
}

TEST_CASE("kld_exit closed form and identity") {
    // teacher == student -> 0 at any temperature
    Rng rng(9);
    for (double temp : {1.0, 3.0, 0.5}) {
        Tensor<double> a({2, 3});
        for (auto& v : a.data) v = rng.normal();
        CHECK(kld_exit(a, a, temp) == Approx(0.0).margin(1e-12));
    }

    // teacher (0.5, 0.5), student (0.25, 0.75) -> 0.5 ln2 + 0.5 ln(2/3)
    const auto teacher = logits_for<double>({0.5, 0.5});
    const auto student = logits_for<double>({0.25, 0.75});
    CHECK(kld_exit(teacher, student, 1.0) == Approx(0.143841).margin(1e-6));

    // same distributions produced at T=3 give the same divergence
    const auto teacher3 = logits_for<double>({0.5, 0.5}, 3.0);
    const auto student3 = logits_for<double>({0.25, 0.75}, 3.0);
    CHECK(kld_exit(teacher3, student3, 3.0) == Approx(0.143841).margin(1e-6));
}

TEST_CASE("kld_exit is nonnegative on random logit pairs") {
    Rng rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor<double> a({2, 4}), b({2, 4});
        for (auto& v : a.data) v = rng.normal() * 4.0;
        for (auto& v : b.data) v = rng.normal() * 4.0;
        const double temp = 0.5 + rng.uniform() * 4.0;
        CHECK(kld_exit(a, b, temp) >= -1e-9);
    }
}

TEST_CASE("kld_exit survives saturated softmaxes thanks to the log clamp") {
    Tensor<double> hot({1, 2}, {200.0, -200.0});
    Tensor<double> cold({1, 2}, {-200.0, 200.0});
    const double v = kld_exit(hot, cold, 1.0);
    CHECK(std::isfinite(v));
    CHECK(v > 0.0);
}

TEST_CASE("sd_loss examples and reductions") {
    const SDConfig defaults;
    CHECK(defaults.gamma == 0.9);
    CHECK(defaults.temperature == 3.0);

    const auto exits = random_exits(4, 3, 2, 77);
    const std::vector<int32_t> labels = {0, 1, 1};

    SECTION("gamma=0 reduces to the plain multi-exit CE sum") {
        SDConfig cfg;
        cfg.gamma = 0.0;
        const auto lb = sd_loss(exits, labels, cfg);
        double want = 0.0;
        for (size_t i = 0; i + 1 < exits.logits.size(); ++i)
            want += cross_entropy(exits.logits[i], labels);
        CHECK(lb.sd == Approx(want).margin(1e-6));
        CHECK(lb.kld == Approx(0.0).margin(1e-12));
    }

    SECTION("gamma=1 is pure distillation and ignores the labels") {
        SDConfig cfg;
        cfg.gamma = 1.0;
        const auto lb = sd_loss(exits, labels, cfg);
        double want = 0.0;
        for (size_t i = 0; i + 1 < exits.logits.size(); ++i)
            want += kld_exit(exits.logits.back(), exits.logits[i], cfg.temperature);
        CHECK(lb.sd == Approx(want).margin(1e-6));
        CHECK(lb.multi == Approx(0.0).margin(1e-12));

        const std::vector<int32_t> other_labels = {1, 0, 0};
        const auto lb2 = sd_loss(exits, other_labels, cfg);
        CHECK(lb2.sd == Approx(lb.sd).margin(1e-12));
    }

    SECTION("breakdown identities hold at the defaults") {
        const auto lb = sd_loss(exits, labels, defaults);
        CHECK(lb.sd == Approx(lb.multi + lb.kld).margin(1e-6));
        double multi = 0.0, kld = 0.0;
        REQUIRE(lb.per_exit.size() == 3);
        for (const auto& [ce, kl] : lb.per_exit) {
            multi += (1.0 - defaults.gamma) * ce;
            kld += defaults.gamma * kl;
        }
        CHECK(lb.multi == Approx(multi).margin(1e-9));
        CHECK(lb.kld == Approx(kld).margin(1e-9));
        CHECK(lb.final == Approx(cross_entropy(exits.logits.back(), labels)).margin(1e-9));
    }
}

TEST_CASE("sd_loss needs at least two exits") {
    const auto exits = random_exits(1, 2, 2, 3);
    CHECK_THROWS_AS(sd_loss(exits, {0, 1}, SDConfig{}), ContractError);
}

TEST_CASE("sd_loss is continuous in gamma") {
    const auto exits = random_exits(3, 4, 3, 21);
    const std::vector<int32_t> labels = {0, 2, 1, 1};
    double sum_ce = 0.0, sum_kld = 0.0;
    {
        const auto lb = sd_loss(exits, labels, SDConfig{0.5, 3.0});
        for (const auto& [ce, kl] : lb.per_exit) {
            sum_ce += ce;
            sum_kld += kl;
        }
    }
    Rng rng(22);
    for (int trial = 0; trial < 50; ++trial) {
        const double g = rng.uniform() * 0.999;
        const double eps = rng.uniform() * (1.0 - g) * 0.1;
        const double a = sd_loss(exits, labels, SDConfig{g, 3.0}).sd;
        const double b = sd_loss(exits, labels, SDConfig{g + eps, 3.0}).sd;
        CHECK(std::abs(a - b) <= eps * (sum_ce + sum_kld) + 1e-6);
    }
}

TEST_CASE("config validation") {
    CHECK_THROWS_AS((SDConfig{-0.1, 3.0}.validate()), ConfigError);
    CHECK_THROWS_AS((SDConfig{1.1, 3.0}.validate()), ConfigError);
    CHECK_THROWS_AS((SDConfig{0.5, 0.0}.validate()), ConfigError);
    CHECK_NOTHROW((SDConfig{0.0, 0.1}.validate()));
}

TEST_CASE("tape sd_loss_graph matches the pure-numeric sd_loss") {
    const ModelConfig cfg = testutil::tiny_config(51, 3, 32, 2);
    auto store = ParamStore<double>::init(cfg);
    const TokenBatch b = testutil::random_batch(cfg, 3, 8, 52);
    GradTape<double> tape;
    auto fw = forward_all_exits(tape, store, b);
    const SDConfig sd;
    const SdLossVars vars = sd_loss_graph(tape, fw.exit_logits, b.labels, sd);
    const LossBreakdown from_tape = breakdown_of(tape, vars);

    ExitOutputs<double> out;
    for (Var v : fw.exit_logits) out.logits.push_back(tape.val(v));
    const LossBreakdown pure = sd_loss(out, b.labels, sd);
    CHECK(from_tape.final == Approx(pure.final).margin(1e-9));
    CHECK(from_tape.multi == Approx(pure.multi).margin(1e-9));
    CHECK(from_tape.kld == Approx(pure.kld).margin(1e-9));
    CHECK(from_tape.sd == Approx(pure.sd).margin(1e-9));
}

TEST_CASE("distillation gradient w.r.t. teacher parameters is exactly zero") {
    const ModelConfig cfg = testutil::tiny_config(61, 3, 32, 2);
    auto store = ParamStore<double>::init(cfg);
    const TokenBatch b = testutil::random_batch(cfg, 2, 8, 62);
    GradTape<double> tape;
    auto fw = forward_all_exits(tape, store, b);
    const SdLossVars vars = sd_loss_graph(tape, fw.exit_logits, b.labels, SDConfig{});
    auto g = tape.backward(vars.kld);
    // the final classifier only feeds the teacher side of the KLD
    for (double v : g.at("final.w").data) CHECK(v == 0.0);
    for (double v : g.at("final.b").data) CHECK(v == 0.0);
    // the student path does receive distillation gradient
    double ramp_mass = 0.0;
    for (double v : g.at("ramp1.w").data) ramp_mass += std::abs(v);
    CHECK(ramp_mass > 0.0);
}
