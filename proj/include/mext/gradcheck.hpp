#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mext/losses.hpp"
#include "mext/model.hpp"
#include "mext/train.hpp"

namespace mext {

// Central finite-difference validation of the backward pass, in double
// precision. The oracle recomputes each loss from a fresh forward pass and
// never touches the tape's backward machinery. The distillation losses hold
// the teacher distribution at the unperturbed parameters, which is exactly
// the function the detached-teacher backward differentiates.
//
// Error metric: |analytic - fd| / max(|analytic|, |fd|, rel_floor). Above
// the floor this is a true relative error; below it, an absolute check at
// tol * rel_floor, which is still orders of magnitude above central-
// difference noise.

struct GradCheckConfig {
    uint64_t seed = 1;
    double h = 1e-5;
    double tol = 1e-5;
    double rel_floor = 1e-3;
    int coords_per_tensor = 5;
    int directions = 3;  // random-direction derivative probes per loss
    ModelConfig model{/*k=*/3, /*hidden=*/32, /*heads=*/4, /*ffn=*/64,
                      /*vocab=*/24, /*classes=*/3, /*max_len=*/8, /*seed=*/0};
    int batch = 4;
};

struct GradCheckResult {
    std::string loss_name;
    double max_rel_err = 0.0;
    std::string worst_coord;
    int64_t coords_checked = 0;
    bool pass = false;
};

namespace gradcheck_detail {

enum class LossKind { final_ce, multi, kld, sd };

inline double eval_loss(const ParamStore<double>& store, const TokenBatch& batch,
                        const SDConfig& sd, const Tensor<double>& teacher_base, LossKind kind) {
    const ExitOutputs<double> out = eval_all_exits(store, batch);
    const size_t k = out.logits.size();
    double loss = 0.0;
    switch (kind) {
        case LossKind::final_ce:
            return cross_entropy(out.logits[k - 1], batch.labels);
        case LossKind::multi:
            for (size_t i = 0; i + 1 < k; ++i)
                loss += (1.0 - sd.gamma) * cross_entropy(out.logits[i], batch.labels);
            return loss;
        case LossKind::kld:
            for (size_t i = 0; i + 1 < k; ++i)
                loss += sd.gamma * kld_exit(teacher_base, out.logits[i], sd.temperature);
            return loss;
        case LossKind::sd:
            for (size_t i = 0; i + 1 < k; ++i) {
                loss += (1.0 - sd.gamma) * cross_entropy(out.logits[i], batch.labels);
                loss += sd.gamma * kld_exit(teacher_base, out.logits[i], sd.temperature);
            }
            return loss;
    }
    return loss;
}

}  // namespace gradcheck_detail

inline double gradcheck_rel_err(double analytic, double fd, double rel_floor) {
    const double denom = std::max({std::abs(analytic), std::abs(fd), rel_floor});
    return std::abs(analytic - fd) / denom;
}

inline std::vector<GradCheckResult> run_gradcheck(const GradCheckConfig& cfg = {}) {
    using gradcheck_detail::LossKind;
    ModelConfig mc = cfg.model;
    mc.seed = cfg.seed;
    ParamStore<double> store = ParamStore<double>::init(mc);

    Rng rng = Rng(cfg.seed).fork("gradcheck");
    TokenBatch batch;
    batch.batch = cfg.batch;
    batch.len = mc.max_len - 1;
    for (int b = 0; b < cfg.batch; ++b) {
        batch.lengths.push_back(int32_t(2 + rng.index(int(batch.len) - 1)));
        batch.labels.push_back(int32_t(rng.index(mc.classes)));
        for (int64_t t = 0; t < batch.len; ++t) {
            const bool pad = t >= batch.lengths.back();
            batch.ids.push_back(pad ? 0 : (t == 0 ? Vocab::kCls : int32_t(4 + rng.index(mc.vocab - 4))));
        }
    }
    const SDConfig sd{};

    GradTape<double> tape;
    auto fw = forward_all_exits(tape, store, batch);
    const SdLossVars vars = sd_loss_graph(tape, fw.exit_logits, batch.labels, sd);
    const Tensor<double> teacher_base = tape.val(fw.exit_logits.back());

    struct Item {
        LossKind kind;
        const char* name;
        Var var;
    };
    const std::vector<Item> items = {{LossKind::final_ce, "L_final", vars.final_ce},
                                     {LossKind::multi, "L_multi", vars.multi},
                                     {LossKind::kld, "L_kld", vars.kld},
                                     {LossKind::sd, "L_sd", vars.sd}};

    std::vector<GradCheckResult> results;
    for (const auto& item : items) {
        const auto grads = tape.backward(item.var);
        GradCheckResult res;
        res.loss_name = item.name;

        Rng pick = Rng(cfg.seed).fork("coords").fork(hash_str(item.name));
        auto loss_at = [&](const ParamStore<double>& s) {
            return gradcheck_detail::eval_loss(s, batch, sd, teacher_base, item.kind);
        };
        // sampled per-coordinate central differences
        for (auto& e : store.entries) {
            const auto& g = grads.at(e.name);
            for (int c = 0; c < cfg.coords_per_tensor; ++c) {
                const int64_t i = int64_t(pick.below(uint64_t(e.tensor.numel())));
                const double orig = e.tensor.data[size_t(i)];
                e.tensor.data[size_t(i)] = orig + cfg.h;
                const double lp = loss_at(store);
                e.tensor.data[size_t(i)] = orig - cfg.h;
                const double lm = loss_at(store);
                e.tensor.data[size_t(i)] = orig;
                const double fd = (lp - lm) / (2.0 * cfg.h);
                const double rel = gradcheck_rel_err(g.data[size_t(i)], fd, cfg.rel_floor);
                ++res.coords_checked;
                if (rel > res.max_rel_err) {
                    res.max_rel_err = rel;
                    res.worst_coord = e.name + "[" + std::to_string(i) + "]";
                }
            }
        }
        // random-direction probes cover every coordinate at once
        for (int d = 0; d < cfg.directions; ++d) {
            double analytic_dir = 0.0;
            std::vector<std::pair<std::string, Tensor<double>>> dirs;
            for (auto& e : store.entries) {
                Tensor<double> dir(e.tensor.shape);
                for (auto& x : dir.data) x = pick.normal();
                const auto& g = grads.at(e.name);
                for (size_t i = 0; i < dir.data.size(); ++i) analytic_dir += g.data[i] * dir.data[i];
                dirs.emplace_back(e.name, std::move(dir));
            }
            auto shift = [&](double scale) {
                for (auto& [name, dir] : dirs) {
                    auto& t = store.at(name).tensor;
                    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] += scale * dir.data[i];
                }
            };
            shift(cfg.h);
            const double lp = loss_at(store);
            shift(-2.0 * cfg.h);
            const double lm = loss_at(store);
            shift(cfg.h);
            const double fd = (lp - lm) / (2.0 * cfg.h);
            // directional derivatives are O(1); a plain relative error applies
            const double rel = gradcheck_rel_err(analytic_dir, fd, cfg.rel_floor);
            ++res.coords_checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_coord = std::string("direction-") + std::to_string(d);
            }
        }
        res.pass = res.max_rel_err < cfg.tol;
        results.push_back(std::move(res));
    }
    return results;
}

}  // namespace mext
