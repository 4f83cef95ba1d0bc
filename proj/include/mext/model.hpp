#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mext/autograd.hpp"
#include "mext/rng.hpp"
#include "mext/tensor.hpp"

namespace mext {

inline constexpr double kLayernormEps = 1e-5;
inline constexpr double kInitSigma = 0.02;

struct ModelConfig {
    int k = 6;         // encoder layers; every layer feeds an exit classifier
    int hidden = 128;  // model width
    int heads = 4;
    int ffn = 256;
    int vocab = 0;
    int classes = 0;
    int max_len = 64;
    uint64_t seed = 0;

    void validate() const {
        if (k < 2) throw ConfigError("model: k must be >= 2");
        if (hidden < 1 || heads < 1 || hidden % heads != 0)
            throw ConfigError("model: hidden must be a positive multiple of heads");
        if (ffn < 1) throw ConfigError("model: ffn must be >= 1");
        if (vocab < 5) throw ConfigError("model: vocab must be >= 5");
        if (classes < 2) throw ConfigError("model: classes must be >= 2");
        if (max_len < 1) throw ConfigError("model: max_len must be >= 1");
    }

    bool operator==(const ModelConfig&) const = default;
};

enum class Ownership { backbone, off_ramp, final_classifier };

inline std::string ownership_str(Ownership o, int ramp) {
    switch (o) {
        case Ownership::backbone: return "backbone";
        case Ownership::off_ramp: return "off_ramp:" + std::to_string(ramp);
        case Ownership::final_classifier: return "final_classifier";
    }
    return "?";
}

// Named parameter tensors. Entry order is fixed at construction and defines
// the flat gradient layout everywhere else.
template <typename T>
struct ParamStore {
    struct Entry {
        std::string name;
        Ownership owner;
        int ramp;  // 1..k-1 for off_ramp entries, 0 otherwise
        Tensor<T> tensor;
    };

    ModelConfig config;
    std::vector<Entry> entries;
    std::unordered_map<std::string, size_t> by_name;

    const Entry& at(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ContractError("param store: unknown param " + name);
        return entries[it->second];
    }
    Entry& at(const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ContractError("param store: unknown param " + name);
        return entries[it->second];
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& e : entries) n += e.tensor.numel();
        return n;
    }

private:
    void add(std::string name, Ownership owner, int ramp, Tensor<T> t) {
        by_name.emplace(name, entries.size());
        entries.push_back(Entry{std::move(name), owner, ramp, std::move(t)});
    }

public:
    // Weight matrices from a truncated normal (sigma 0.02, cut at 2 sigma),
    // biases zero, layernorm gains one. Deterministic for a given seed.
    static ParamStore init(const ModelConfig& cfg) {
        cfg.validate();
        ParamStore s;
        s.config = cfg;
        Rng rng = Rng(cfg.seed).fork("model-init");
        const int64_t h = cfg.hidden, f = cfg.ffn, c = cfg.classes;

        auto weight = [&](Shape shape) {
            Tensor<T> t(std::move(shape));
            for (T& x : t.data) x = T(rng.truncated_normal(kInitSigma));
            return t;
        };
        auto zerosv = [&](Shape shape) { return zeros<T>(std::move(shape)); };
        auto ones = [&](Shape shape) { return full<T>(std::move(shape), T(1)); };

        s.add("embed.tok", Ownership::backbone, 0, weight({int64_t(cfg.vocab), h}));
        s.add("embed.pos", Ownership::backbone, 0, weight({int64_t(cfg.max_len), h}));
        s.add("embed.ln.g", Ownership::backbone, 0, ones({h}));
        s.add("embed.ln.b", Ownership::backbone, 0, zerosv({h}));
        for (int l = 1; l <= cfg.k; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            s.add(p + "attn.wq", Ownership::backbone, 0, weight({h, h}));
            s.add(p + "attn.bq", Ownership::backbone, 0, zerosv({h}));
            s.add(p + "attn.wk", Ownership::backbone, 0, weight({h, h}));
            s.add(p + "attn.bk", Ownership::backbone, 0, zerosv({h}));
            s.add(p + "attn.wv", Ownership::backbone, 0, weight({h, h}));
            s.add(p + "attn.bv", Ownership::backbone, 0, zerosv({h}));
            s.add(p + "attn.wo", Ownership::backbone, 0, weight({h, h}));
            s.add(p + "attn.bo", Ownership::backbone, 0, zerosv({h}));
            s.add(p + "ln1.g", Ownership::backbone, 0, ones({h}));
            s.add(p + "ln1.b", Ownership::backbone, 0, zerosv({h}));
            s.add(p + "ffn.w1", Ownership::backbone, 0, weight({h, f}));
            s.add(p + "ffn.b1", Ownership::backbone, 0, zerosv({f}));
            s.add(p + "ffn.w2", Ownership::backbone, 0, weight({f, h}));
            s.add(p + "ffn.b2", Ownership::backbone, 0, zerosv({h}));
            s.add(p + "ln2.g", Ownership::backbone, 0, ones({h}));
            s.add(p + "ln2.b", Ownership::backbone, 0, zerosv({h}));
        }
        for (int i = 1; i < cfg.k; ++i) {
            const std::string p = "ramp" + std::to_string(i) + ".";
            s.add(p + "w", Ownership::off_ramp, i, weight({h, c}));
            s.add(p + "b", Ownership::off_ramp, i, zerosv({c}));
        }
        s.add("final.w", Ownership::final_classifier, 0, weight({h, c}));
        s.add("final.b", Ownership::final_classifier, 0, zerosv({c}));
        return s;
    }
};

// Per-exit logits for one batch: logits[i] holds exit i+1's [batch x classes].
template <typename T>
struct ExitOutputs {
    std::vector<Tensor<T>> logits;
};

// One batch of padded token rows.
struct TokenBatch {
    int64_t batch = 0;
    int64_t len = 0;
    std::vector<int32_t> ids;      // batch*len, row-major, pad id 0 at the tail
    std::vector<int32_t> lengths;  // valid positions per example
    std::vector<int32_t> labels;   // may be empty at inference
};

using TrainablePred = std::function<bool(Ownership, int)>;

inline TrainablePred track_all() {
    return [](Ownership, int) { return true; };
}
inline TrainablePred track_none() {
    return [](Ownership, int) { return false; };
}

// Tape vars for one forward pass.
template <typename T>
struct ForwardVars {
    std::vector<Var> exit_logits;              // one per evaluated exit, in layer order
    std::vector<Var> param_vars;               // index-aligned with store.entries
};

namespace detail {

template <typename T>
std::vector<Var> register_params(GradTape<T>& tape, const ParamStore<T>& store,
                                 const TrainablePred& trainable) {
    std::vector<Var> pv;
    pv.reserve(store.entries.size());
    for (const auto& e : store.entries)
        pv.push_back(tape.param(e.name, e.tensor, trainable(e.owner, e.ramp)));
    return pv;
}

// The helpers below are the single source of the op sequence, so the batched
// and the incremental forward paths produce bit-identical activations.

template <typename T>
struct EncoderCtx {
    GradTape<T>* tape;
    const ParamStore<T>* store;
    std::vector<Var> param_vars;
    TokenBatch batch;
    std::vector<int64_t> cls_rows;

    Var pv(const std::string& name) const { return param_vars[store->by_name.at(name)]; }
};

template <typename T>
EncoderCtx<T> make_ctx(GradTape<T>& tape, const ParamStore<T>& store, const TokenBatch& batch,
                       const TrainablePred& trainable) {
    const ModelConfig& cfg = store.config;
    if (batch.len > cfg.max_len)
        throw DataError("forward: sequence length " + std::to_string(batch.len) +
                        " exceeds max_len " + std::to_string(cfg.max_len));
    if (int64_t(batch.ids.size()) != batch.batch * batch.len)
        throw ShapeError("forward: ids size mismatch");
    for (int32_t id : batch.ids)
        if (id < 0 || id >= cfg.vocab)
            throw DataError("forward: token id " + std::to_string(id) + " out of range");
    EncoderCtx<T> ctx{&tape, &store, register_params(tape, store, trainable), batch, {}};
    ctx.cls_rows.resize(size_t(batch.batch));
    for (int64_t b = 0; b < batch.batch; ++b) ctx.cls_rows[size_t(b)] = b * batch.len;
    return ctx;
}

template <typename T>
Var embed_input(EncoderCtx<T>& ctx) {
    GradTape<T>& tape = *ctx.tape;
    std::vector<int32_t> pos_ids(size_t(ctx.batch.batch * ctx.batch.len));
    for (int64_t b = 0; b < ctx.batch.batch; ++b)
        for (int64_t t = 0; t < ctx.batch.len; ++t)
            pos_ids[size_t(b * ctx.batch.len + t)] = int32_t(t);
    Var x = tape.add(tape.embedding(ctx.pv("embed.tok"), ctx.batch.ids),
                     tape.embedding(ctx.pv("embed.pos"), pos_ids));
    return tape.layernorm(x, ctx.pv("embed.ln.g"), ctx.pv("embed.ln.b"), T(kLayernormEps));
}

template <typename T>
Var encoder_layer(EncoderCtx<T>& ctx, Var x, int l) {
    GradTape<T>& tape = *ctx.tape;
    const std::string p = "layer" + std::to_string(l) + ".";
    Var q = tape.add_bias(tape.matmul(x, ctx.pv(p + "attn.wq")), ctx.pv(p + "attn.bq"));
    Var kk = tape.add_bias(tape.matmul(x, ctx.pv(p + "attn.wk")), ctx.pv(p + "attn.bk"));
    Var v = tape.add_bias(tape.matmul(x, ctx.pv(p + "attn.wv")), ctx.pv(p + "attn.bv"));
    Var c = tape.attention(q, kk, v, ctx.batch.lengths, ctx.batch.len, ctx.store->config.heads);
    Var att = tape.add_bias(tape.matmul(c, ctx.pv(p + "attn.wo")), ctx.pv(p + "attn.bo"));
    x = tape.layernorm(tape.add(x, att), ctx.pv(p + "ln1.g"), ctx.pv(p + "ln1.b"),
                       T(kLayernormEps));
    Var ff = tape.gelu(tape.add_bias(tape.matmul(x, ctx.pv(p + "ffn.w1")), ctx.pv(p + "ffn.b1")));
    ff = tape.add_bias(tape.matmul(ff, ctx.pv(p + "ffn.w2")), ctx.pv(p + "ffn.b2"));
    return tape.layernorm(tape.add(x, ff), ctx.pv(p + "ln2.g"), ctx.pv(p + "ln2.b"),
                          T(kLayernormEps));
}

template <typename T>
Var exit_classifier(EncoderCtx<T>& ctx, Var x, int l) {
    GradTape<T>& tape = *ctx.tape;
    const bool is_final = (l == ctx.store->config.k);
    const std::string rp = is_final ? "final." : "ramp" + std::to_string(l) + ".";
    Var cls = tape.gather_rows(x, ctx.cls_rows);
    return tape.add_bias(tape.matmul(cls, ctx.pv(rp + "w")), ctx.pv(rp + "b"));
}

}  // namespace detail

// Runs the encoder through layer `upto` (1-based) and evaluates the exit
// classifier after each layer when collect_all is set, otherwise only the
// one at `upto`. Layers past `upto` are never touched.
template <typename T>
ForwardVars<T> forward_encoder(GradTape<T>& tape, const ParamStore<T>& store,
                               const TokenBatch& batch, int upto, bool collect_all,
                               const TrainablePred& trainable = track_all()) {
    const ModelConfig& cfg = store.config;
    if (upto < 1 || upto > cfg.k)
        throw ContractError("forward: layer index " + std::to_string(upto) + " out of [1," +
                            std::to_string(cfg.k) + "]");
    detail::EncoderCtx<T> ctx = detail::make_ctx(tape, store, batch, trainable);
    ForwardVars<T> fw;
    fw.param_vars = ctx.param_vars;
    Var x = detail::embed_input(ctx);
    for (int l = 1; l <= upto; ++l) {
        x = detail::encoder_layer(ctx, x, l);
        if (collect_all || l == upto)
            fw.exit_logits.push_back(detail::exit_classifier(ctx, x, l));
    }
    return fw;
}

// Layer-at-a-time forward over one batch; never computes past the layer the
// caller has asked for. Drives entropy-threshold early exit.
template <typename T>
class IncrementalForward {
public:
    IncrementalForward(const ParamStore<T>& store, const TokenBatch& batch)
        : ctx_(detail::make_ctx(tape_, store, batch, track_none())) {
        x_ = detail::embed_input(ctx_);
    }

    int layer() const { return layer_; }
    int max_layer() const { return ctx_.store->config.k; }

    // applies layer layer()+1 and returns that exit's logits
    const Tensor<T>& advance() {
        if (layer_ >= max_layer()) throw ContractError("incremental forward: past final layer");
        ++layer_;
        x_ = detail::encoder_layer(ctx_, x_, layer_);
        logits_ = detail::exit_classifier(ctx_, x_, layer_);
        return tape_.val(logits_);
    }

    const Tensor<T>& exit_logits() const {
        if (layer_ == 0) throw ContractError("incremental forward: no layer applied yet");
        return tape_.val(logits_);
    }

private:
    GradTape<T> tape_;
    detail::EncoderCtx<T> ctx_;
    Var x_;
    Var logits_;
    int layer_ = 0;
};

// All k exits: entry i holds the classifier fed by layer i+1.
template <typename T>
ForwardVars<T> forward_all_exits(GradTape<T>& tape, const ParamStore<T>& store,
                                 const TokenBatch& batch,
                                 const TrainablePred& trainable = track_all()) {
    return forward_encoder(tape, store, batch, store.config.k, true, trainable);
}

// Exit i only, touching layers 1..i and off-ramp i.
template <typename T>
ForwardVars<T> forward_prefix(GradTape<T>& tape, const ParamStore<T>& store,
                              const TokenBatch& batch, int upto,
                              const TrainablePred& trainable = track_all()) {
    return forward_encoder(tape, store, batch, upto, false, trainable);
}

// Plain-value forward for evaluation.
template <typename T>
ExitOutputs<T> eval_all_exits(const ParamStore<T>& store, const TokenBatch& batch) {
    GradTape<T> tape;
    ForwardVars<T> fw = forward_all_exits(tape, store, batch, track_none());
    ExitOutputs<T> out;
    out.logits.reserve(fw.exit_logits.size());
    for (Var v : fw.exit_logits) out.logits.push_back(tape.val(v));
    return out;
}

}  // namespace mext
