#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mext/data.hpp"
#include "mext/gradreg.hpp"
#include "mext/infer.hpp"
#include "mext/losses.hpp"
#include "mext/model.hpp"
#include "mext/optim.hpp"

namespace mext {

enum class Regime { deebert, deebert_sd, sd_only, romebert };

inline std::string regime_str(Regime r) {
    switch (r) {
        case Regime::deebert: return "deebert";
        case Regime::deebert_sd: return "deebert_sd";
        case Regime::sd_only: return "sd_only";
        case Regime::romebert: return "romebert";
    }
    return "?";
}

inline Regime regime_from(const std::string& s) {
    if (s == "deebert") return Regime::deebert;
    if (s == "deebert_sd") return Regime::deebert_sd;
    if (s == "sd_only") return Regime::sd_only;
    if (s == "romebert") return Regime::romebert;
    throw ConfigError("unknown regime: " + s);
}

inline bool regime_is_two_stage(Regime r) {
    return r == Regime::deebert || r == Regime::deebert_sd;
}

struct RegimeConfig {
    Regime regime = Regime::romebert;
    std::vector<int> stage_epochs = {2};  // two entries for the two-stage regimes
    int batch_size = 32;
    OptimConfig optim;
    SDConfig sd;
    uint64_t seed = 0;
    bool use_gr = true;  // only consulted by the romebert regime

    void validate() const {
        const size_t want = regime_is_two_stage(regime) ? 2 : 1;
        if (stage_epochs.size() != want)
            throw ConfigError("regime " + regime_str(regime) + " needs " + std::to_string(want) +
                              " stage epoch count(s), got " + std::to_string(stage_epochs.size()));
        for (int e : stage_epochs)
            if (e < 1) throw ConfigError("stage epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        sd.validate();
    }
};

struct EpochRecord {
    int epoch = 0;  // global, 1-based across stages
    int stage = 0;  // 1 or 2
    std::string regime;
    double l_final = 0.0;
    double l_multi = 0.0;
    double l_kld = 0.0;
    double conflict_rate = 0.0;
    std::vector<double> per_layer_dev_acc;
};

struct TrainCallbacks {
    std::function<void(int stage, int stages, const std::string& desc)> on_stage;
    std::function<void(const EpochRecord&)> on_epoch;
    std::function<void(const GrDiagnostic&)> on_gr_step;
};

// Executes single optimization steps for each regime. One trainer per
// training run; begin_stage() resets the optimizer state between stages.
template <typename T>
class RegimeTrainer {
public:
    RegimeTrainer(ParamStore<T>& store, OptimConfig optim)
        : store_(&store), layout_(GradLayout::from_store(store)), optim_cfg_(optim) {
        begin_stage();
    }

    void begin_stage() { adam_.emplace(layout_, optim_cfg_); }

    const GradLayout& layout() const { return layout_; }

    // Stage 1: backbone + final classifier trained on the final exit's
    // cross-entropy; the off-ramps are untouched.
    LossBreakdown step_deebert_stage1(const TokenBatch& batch, double lr) {
        GradTape<T> tape;
        auto fw = forward_prefix(tape, *store_, batch, store_->config.k,
                                 [](Ownership o, int) { return o != Ownership::off_ramp; });
        const Var loss = tape.cross_entropy(fw.exit_logits.front(), batch.labels);
        GradVector<T> g = flatten(tape.backward(loss), layout_);
        apply(g, FreezeMask::ramps_only(), lr);
        LossBreakdown lb;
        lb.final = double(tape.val(loss).data[0]);
        return lb;
    }

    // Stage 2: everything trained in stage 1 is frozen; the off-ramps learn
    // either plain per-exit cross-entropy or the self-distillation objective.
    LossBreakdown step_deebert_stage2(const TokenBatch& batch, bool with_sd, const SDConfig& sd,
                                      double lr) {
        GradTape<T> tape;
        auto fw = forward_all_exits(tape, *store_, batch,
                                    [](Ownership o, int) { return o == Ownership::off_ramp; });
        LossBreakdown lb;
        Var loss;
        if (with_sd) {
            const SdLossVars vars = sd_loss_graph(tape, fw.exit_logits, batch.labels, sd);
            loss = vars.sd;
            lb = breakdown_of(tape, vars);
        } else {
            // gamma plays no role here: the objective is the unweighted sum
            // of the early exits' cross-entropies
            for (size_t i = 0; i + 1 < fw.exit_logits.size(); ++i) {
                const Var ce = tape.cross_entropy(fw.exit_logits[i], batch.labels);
                lb.per_exit.emplace_back(double(tape.val(ce).data[0]), 0.0);
                lb.multi += double(tape.val(ce).data[0]);
                loss = loss.valid() ? tape.add(loss, ce) : ce;
            }
            lb.sd = lb.multi;
            lb.final = cross_entropy(tape.val(fw.exit_logits.back()), batch.labels);
        }
        GradVector<T> g = flatten(tape.backward(loss), layout_);
        apply(g, FreezeMask::backbone_and_final(), lr);
        return lb;
    }

    // One-stage joint step: g_f from the final exit's loss and g_s from the
    // self-distillation loss, both on the same batch and the same forward
    // pass. With GR enabled a conflicted g_f is projected before the sum.
    std::pair<LossBreakdown, GrDiagnostic> step_romebert(const TokenBatch& batch, bool use_gr,
                                                         const SDConfig& sd, double lr) {
        GradTape<T> tape;
        auto fw = forward_all_exits(tape, *store_, batch);
        const SdLossVars vars = sd_loss_graph(tape, fw.exit_logits, batch.labels, sd);
        const GradVector<T> g_f = flatten(tape.backward(vars.final_ce), layout_);
        const GradVector<T> g_s = flatten(tape.backward(vars.sd), layout_);

        RegularizeResult<T> rr;
        if (use_gr) {
            rr = regularize(g_f, g_s);
        } else {
            rr.g_star.layout = &layout_;
            rr.g_star.values.resize(g_f.values.size());
            double dot = 0.0, ns = 0.0;
            for (size_t i = 0; i < g_f.values.size(); ++i) {
                dot += double(g_f.values[i]) * double(g_s.values[i]);
                ns += double(g_s.values[i]) * double(g_s.values[i]);
                rr.g_star.values[i] = g_f.values[i] + g_s.values[i];
            }
            rr.dot = dot;
            rr.gs_norm_sq = ns;
            rr.conflicted = dot < 0.0 && ns >= 1e-24;
        }
        GrDiagnostic diag{step_count_, rr.dot, norm(g_f), norm(g_s), rr.conflicted};
        apply(rr.g_star, FreezeMask::none(), lr);
        return {breakdown_of(tape, vars), diag};
    }

private:
    void apply(GradVector<T>& g, const FreezeMask& mask, double lr) {
        mask_and_clip(g, mask, optim_cfg_.clip_norm);
        adam_->step(*store_, g, mask, lr);
        ++step_count_;
    }

    ParamStore<T>* store_;
    GradLayout layout_;
    OptimConfig optim_cfg_;
    std::optional<Adam<T>> adam_;
    int64_t step_count_ = 0;
};

struct TrainResult {
    std::vector<EpochRecord> metrics;
};

// Runs the regime's stage sequence over the dataset. Deterministic for a
// given (config, seed): batch order, init, and evaluation all derive from
// seeded streams.
template <typename T>
TrainResult train(ParamStore<T>& store, const RegimeConfig& cfg, const Dataset& train_ds,
                  const Dataset& dev_ds, const TrainCallbacks& cb = {},
                  const EvalOptions& eval_opts = {}) {
    cfg.validate();
    if (train_ds.examples.empty()) throw DataError("train: empty training dataset");
    if (dev_ds.examples.empty()) throw DataError("train: empty dev dataset");

    RegimeTrainer<T> trainer(store, cfg.optim);
    TrainResult result;
    const int stages = int(cfg.stage_epochs.size());
    const int64_t n = int64_t(train_ds.examples.size());
    const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    int global_epoch = 0;

    for (int stage = 1; stage <= stages; ++stage) {
        trainer.begin_stage();
        if (cb.on_stage) {
            std::string desc;
            switch (cfg.regime) {
                case Regime::deebert:
                    desc = stage == 1 ? "final-exit fine-tuning" : "off-ramp training (frozen backbone)";
                    break;
                case Regime::deebert_sd:
                    desc = stage == 1 ? "final-exit fine-tuning"
                                      : "off-ramp self-distillation (frozen backbone)";
                    break;
                case Regime::sd_only: desc = "joint self-distillation"; break;
                case Regime::romebert:
                    desc = cfg.use_gr ? "joint self-distillation + gradient regularization"
                                      : "joint self-distillation";
                    break;
            }
            cb.on_stage(stage, stages, desc);
        }
        const int epochs = cfg.stage_epochs[size_t(stage - 1)];
        const int64_t stage_steps = int64_t(epochs) * steps_per_epoch;
        int64_t stage_step = 0;

        for (int e = 0; e < epochs; ++e) {
            ++global_epoch;
            Rng order_rng =
                Rng(cfg.seed).fork("batch-order").fork(uint64_t(stage)).fork(uint64_t(e));
            std::vector<int64_t> order(size_t(n), 0);
            for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
            order_rng.shuffle(order);

            double sum_final = 0.0, sum_multi = 0.0, sum_kld = 0.0;
            int64_t conflicted_steps = 0, steps = 0;
            for (int64_t lo = 0; lo < n; lo += cfg.batch_size) {
                const int64_t hi = std::min<int64_t>(lo + cfg.batch_size, n);
                const std::vector<int64_t> idx(order.begin() + lo, order.begin() + hi);
                const TokenBatch batch = make_batch(train_ds, idx);
                const double lr = scheduled_lr(cfg.optim, stage_step, stage_steps);

                LossBreakdown lb;
                switch (cfg.regime) {
                    case Regime::deebert:
                        lb = stage == 1 ? trainer.step_deebert_stage1(batch, lr)
                                        : trainer.step_deebert_stage2(batch, false, cfg.sd, lr);
                        break;
                    case Regime::deebert_sd:
                        lb = stage == 1 ? trainer.step_deebert_stage1(batch, lr)
                                        : trainer.step_deebert_stage2(batch, true, cfg.sd, lr);
                        break;
                    case Regime::sd_only:
                    case Regime::romebert: {
                        const bool gr = cfg.regime == Regime::romebert && cfg.use_gr;
                        auto [step_lb, diag] = trainer.step_romebert(batch, gr, cfg.sd, lr);
                        lb = std::move(step_lb);
                        conflicted_steps += diag.conflicted;
                        if (cb.on_gr_step) cb.on_gr_step(diag);
                        break;
                    }
                }
                sum_final += lb.final;
                sum_multi += lb.multi;
                sum_kld += lb.kld;
                ++steps;
                ++stage_step;
            }

            EpochRecord rec;
            rec.epoch = global_epoch;
            rec.stage = stage;
            rec.regime = regime_str(cfg.regime);
            rec.l_final = sum_final / double(steps);
            rec.l_multi = sum_multi / double(steps);
            rec.l_kld = sum_kld / double(steps);
            rec.conflict_rate = double(conflicted_steps) / double(steps);
            rec.per_layer_dev_acc = eval_fixed_layers(store, dev_ds, eval_opts);
            if (cb.on_epoch) cb.on_epoch(rec);
            result.metrics.push_back(std::move(rec));
        }
    }
    return result;
}

}  // namespace mext
