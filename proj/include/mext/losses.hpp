#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "mext/autograd.hpp"
#include "mext/model.hpp"

namespace mext {

struct SDConfig {
    double gamma = 0.9;       // weight on the distillation term per early exit
    double temperature = 3.0;

    void validate() const {
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("sd: gamma must be in [0,1]");
        if (!(temperature > 0.0)) throw ConfigError("sd: temperature must be > 0");
    }
};

struct LossBreakdown {
    double final = 0.0;  // cross-entropy of the last exit
    double multi = 0.0;  // sum_i (1-gamma) * ce_i over early exits
    double kld = 0.0;    // sum_i gamma * kld_i over early exits
    double sd = 0.0;     // multi + kld
    std::vector<std::pair<double, double>> per_exit;  // unweighted (ce_i, kld_i), i = 1..k-1
};

// -------------------------------------------------------------- pure numeric

// Row-wise softmax of logits/temperature, max-shift stabilized.
template <typename T>
Tensor<T> temp_softmax(const Tensor<T>& logits, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("temp_softmax: temperature must be > 0");
    Tensor<T> p = logits;
    const T inv = T(1.0 / temperature);
    for (T& x : p.data) x *= inv;
    kernels::softmax_rows(p.data.data(), p.rows(), p.cols());
    return p;
}

// Mean over the batch of -log softmax(logits)[label], natural log.
template <typename T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& labels) {
    const int64_t m = logits.rows(), c = logits.cols();
    if (int64_t(labels.size()) != m) throw ShapeError("cross_entropy: labels length mismatch");
    double loss = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        const int32_t y = labels[size_t(i)];
        if (y < 0 || int64_t(y) >= c)
            throw DataError("cross_entropy: label " + std::to_string(y) + " out of range");
        const T* row = logits.data.data() + i * c;
        double mx = double(row[0]);
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, double(row[j]));
        double sum = 0.0;
        for (int64_t j = 0; j < c; ++j) sum += std::exp(double(row[j]) - mx);
        loss += std::log(sum) + mx - double(row[y]);
    }
    return loss / double(m);
}

// Mean KL(teacher || student) at the given temperature. Log arguments are
// clamped below at 1e-12 so saturated softmaxes stay finite.
template <typename T>
double kld_exit(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                double temperature) {
    if (!teacher_logits.same_shape(student_logits)) throw ShapeError("kld_exit: shape mismatch");
    const Tensor<T> pt = temp_softmax(teacher_logits, temperature);
    const Tensor<T> ps = temp_softmax(student_logits, temperature);
    const int64_t m = pt.rows(), c = pt.cols();
    double loss = 0.0;
    for (int64_t i = 0; i < m * c; ++i) {
        const double p = double(pt.data[size_t(i)]);
        const double q = double(ps.data[size_t(i)]);
        loss += p * (std::log(std::max(p, 1e-12)) - std::log(std::max(q, 1e-12)));
    }
    return loss / double(m);
}

// Combined self-distillation objective over all exits. Early exit i pays
// (1-gamma)*ce_i + gamma*kld_i against the last exit's softened prediction;
// the last exit itself pays plain cross-entropy, reported separately.
template <typename T>
LossBreakdown sd_loss(const ExitOutputs<T>& outputs, const std::vector<int32_t>& labels,
                      const SDConfig& cfg) {
    cfg.validate();
    const size_t k = outputs.logits.size();
    if (k < 2) throw ContractError("sd_loss: need at least 2 exits");
    LossBreakdown lb;
    const Tensor<T>& teacher = outputs.logits[k - 1];
    for (size_t i = 0; i + 1 < k; ++i) {
        const double ce = cross_entropy(outputs.logits[i], labels);
        const double kl = kld_exit(teacher, outputs.logits[i], cfg.temperature);
        lb.per_exit.emplace_back(ce, kl);
        lb.multi += (1.0 - cfg.gamma) * ce;
        lb.kld += cfg.gamma * kl;
    }
    lb.sd = lb.multi + lb.kld;
    lb.final = cross_entropy(teacher, labels);
    return lb;
}

// ------------------------------------------------------------- tape variants

// Scalar vars for the loss terms of one forward pass.
struct SdLossVars {
    Var final_ce;  // L_final
    Var multi;     // L_multi
    Var kld;       // L_kld
    Var sd;        // L_sd = L_multi + L_kld
    std::vector<std::pair<Var, Var>> per_exit;
};

template <typename T>
SdLossVars sd_loss_graph(GradTape<T>& tape, const std::vector<Var>& exit_logits,
                         const std::vector<int32_t>& labels, const SDConfig& cfg) {
    cfg.validate();
    const size_t k = exit_logits.size();
    if (k < 2) throw ContractError("sd_loss: need at least 2 exits");
    SdLossVars out;
    const Var teacher = exit_logits[k - 1];
    Var multi, kld;
    for (size_t i = 0; i + 1 < k; ++i) {
        const Var ce = tape.cross_entropy(exit_logits[i], labels);
        const Var kl = tape.kld(teacher, exit_logits[i], T(cfg.temperature));
        out.per_exit.emplace_back(ce, kl);
        const Var wce = tape.scale(ce, T(1.0 - cfg.gamma));
        const Var wkl = tape.scale(kl, T(cfg.gamma));
        multi = multi.valid() ? tape.add(multi, wce) : wce;
        kld = kld.valid() ? tape.add(kld, wkl) : wkl;
    }
    out.multi = multi;
    out.kld = kld;
    out.sd = tape.add(multi, kld);
    out.final_ce = tape.cross_entropy(teacher, labels);
    return out;
}

template <typename T>
LossBreakdown breakdown_of(const GradTape<T>& tape, const SdLossVars& vars) {
    LossBreakdown lb;
    lb.final = double(tape.val(vars.final_ce).data[0]);
    lb.multi = double(tape.val(vars.multi).data[0]);
    lb.kld = double(tape.val(vars.kld).data[0]);
    lb.sd = double(tape.val(vars.sd).data[0]);
    for (const auto& [ce, kl] : vars.per_exit)
        lb.per_exit.emplace_back(double(tape.val(ce).data[0]), double(tape.val(kl).data[0]));
    return lb;
}

}  // namespace mext
