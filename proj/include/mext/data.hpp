#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mext/errors.hpp"
#include "mext/model.hpp"
#include "mext/rng.hpp"

namespace mext {

enum class Metric { accuracy, f1 };

inline std::string metric_str(Metric m) { return m == Metric::accuracy ? "accuracy" : "f1"; }
inline Metric metric_from(const std::string& s) {
    if (s == "accuracy") return Metric::accuracy;
    if (s == "f1") return Metric::f1;
    throw ConfigError("unknown metric: " + s);
}

// One encoded example. Token ids already include the leading marker token;
// padding happens at batch assembly. stratum is -1 unless the source
// dataset tags difficulty (the synthetic generator does).
struct Example {
    std::vector<int32_t> ids;
    int32_t label = 0;
    int8_t stratum = -1;  // 0 easy, 1 hard
};

struct Dataset {
    std::vector<Example> examples;
    int classes = 0;
    Metric metric = Metric::accuracy;
    int positive_class = 1;  // F1 positive class index

    size_t size() const { return examples.size(); }
    int64_t max_len() const {
        int64_t m = 0;
        for (const auto& e : examples) m = std::max<int64_t>(m, int64_t(e.ids.size()));
        return m;
    }
};

// ------------------------------------------------------------------ tokenizer

// lowercase + whitespace split + each punctuation character as its own
// token; bytes >= 0x80 are kept inside words so UTF-8 survives untouched
inline std::vector<std::string> normalize_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (unsigned char ch : text) {
        if (ch < 0x80 && std::isspace(ch)) {
            flush();
        } else if (ch < 0x80 && !std::isalnum(ch)) {
            flush();
            out.emplace_back(1, char(ch));
        } else {
            cur.push_back(ch < 0x80 ? char(std::tolower(ch)) : char(ch));
        }
    }
    flush();
    return out;
}

struct Vocab {
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kUnk = 1;
    static constexpr int32_t kCls = 2;
    static constexpr int32_t kSep = 3;

    std::vector<std::string> id_to_token;  // includes the 4 specials
    std::unordered_map<std::string, int32_t> token_to_id;

    int32_t size() const { return int32_t(id_to_token.size()); }

    int32_t id_of(const std::string& tok) const {
        auto it = token_to_id.find(tok);
        return it == token_to_id.end() ? kUnk : it->second;
    }

    const std::string& token_of(int32_t id) const { return id_to_token[size_t(id)]; }
};

// Top (max_size - 4) tokens by frequency over the training split, ties broken
// lexicographically. Deterministic for a fixed corpus.
inline Vocab build_vocab(const std::vector<std::string>& corpus, int max_size) {
    if (corpus.empty()) throw DataError("build_vocab: empty corpus");
    if (max_size < 5) throw ConfigError("build_vocab: max_size must be >= 5");
    std::unordered_map<std::string, int64_t> freq;
    for (const auto& text : corpus)
        for (const auto& tok : normalize_tokens(text)) ++freq[tok];
    std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocab v;
    v.id_to_token = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
    const size_t keep = std::min(ranked.size(), size_t(max_size - 4));
    for (size_t i = 0; i < keep; ++i) v.id_to_token.push_back(ranked[i].first);
    for (size_t i = 0; i < v.id_to_token.size(); ++i)
        v.token_to_id.emplace(v.id_to_token[i], int32_t(i));
    return v;
}

// [CLS] a ([SEP] b), truncated to max_len including the specials. When a pair
// overflows, tokens are dropped from whichever side is currently longer.
inline std::vector<int32_t> encode_example(const std::vector<std::string>& tokens_a,
                                           const std::vector<std::string>* tokens_b,
                                           const Vocab& vocab, int max_len) {
    int64_t la = int64_t(tokens_a.size());
    int64_t lb = tokens_b ? int64_t(tokens_b->size()) : 0;
    const int64_t budget = int64_t(max_len) - 1 - (tokens_b ? 1 : 0);
    while (la + lb > budget) {
        if (la >= lb && la > 0)
            --la;
        else
            --lb;
    }
    std::vector<int32_t> ids;
    ids.reserve(size_t(1 + la + (tokens_b ? 1 : 0) + lb));
    ids.push_back(Vocab::kCls);
    for (int64_t i = 0; i < la; ++i) ids.push_back(vocab.id_of(tokens_a[size_t(i)]));
    if (tokens_b) {
        ids.push_back(Vocab::kSep);
        for (int64_t i = 0; i < lb; ++i) ids.push_back(vocab.id_of((*tokens_b)[size_t(i)]));
    }
    return ids;
}

inline std::vector<std::string> decode_example(const std::vector<int32_t>& ids,
                                               const Vocab& vocab) {
    std::vector<std::string> out;
    for (int32_t id : ids) out.push_back(vocab.token_of(id));
    return out;
}

// ------------------------------------------------------------------ TSV tasks

// Column layout and label set for one tab-separated task file.
struct TaskSpec {
    std::string name;
    int text_a_col = 0;
    int text_b_col = -1;  // -1: single-sentence task
    int label_col = 1;
    Metric metric = Metric::accuracy;
    std::vector<std::string> labels;

    int classes() const { return int(labels.size()); }

    int32_t label_id(const std::string& s) const {
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == s) return int32_t(i);
        return -1;
    }

    int max_col() const { return std::max({text_a_col, text_b_col, label_col}); }
};

// Built-in layouts for the standard GLUE classification TSVs. Anything else
// can be described in the config file with the same fields.
inline TaskSpec glue_task(const std::string& name) {
    if (name == "sst2" || name == "sst-2")
        return {"sst2", 0, -1, 1, Metric::accuracy, {"0", "1"}};
    if (name == "mrpc") return {"mrpc", 3, 4, 0, Metric::f1, {"0", "1"}};
    if (name == "qqp") return {"qqp", 3, 4, 5, Metric::f1, {"0", "1"}};
    if (name == "qnli")
        return {"qnli", 1, 2, 3, Metric::accuracy, {"entailment", "not_entailment"}};
    if (name == "rte") return {"rte", 1, 2, 3, Metric::accuracy, {"entailment", "not_entailment"}};
    if (name == "mnli")
        return {"mnli", 8, 9, 11, Metric::accuracy, {"contradiction", "entailment", "neutral"}};
    throw ConfigError("unknown task: " + name);
}

inline std::vector<std::string> split_tsv_line(const std::string& line) {
    std::vector<std::string> cols;
    size_t start = 0;
    for (size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == '\t') {
            cols.emplace_back(line, start, i - start);
            start = i + 1;
        }
    }
    if (!cols.empty() && !cols.back().empty() && cols.back().back() == '\r') cols.back().pop_back();
    return cols;
}

// Raw rows, before vocab-dependent encoding.
struct TsvRows {
    std::vector<std::string> text_a, text_b;
    std::vector<int32_t> labels;
    bool has_b = false;
};

inline TsvRows read_tsv(const std::string& path, const TaskSpec& spec) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    if (int(split_tsv_line(line).size()) <= spec.max_col())
        throw DataError(path + ": header has fewer columns than task " + spec.name + " expects");
    TsvRows rows;
    rows.has_b = spec.text_b_col >= 0;
    int64_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cols = split_tsv_line(line);
        if (int(cols.size()) <= spec.max_col())
            throw DataError(path + ":" + std::to_string(lineno) + ": expected at least " +
                            std::to_string(spec.max_col() + 1) + " columns, got " +
                            std::to_string(cols.size()));
        const int32_t label = spec.label_id(cols[size_t(spec.label_col)]);
        if (label < 0)
            throw DataError(path + ":" + std::to_string(lineno) + ": unknown label '" +
                            cols[size_t(spec.label_col)] + "'");
        rows.text_a.push_back(cols[size_t(spec.text_a_col)]);
        if (rows.has_b) rows.text_b.push_back(cols[size_t(spec.text_b_col)]);
        rows.labels.push_back(label);
    }
    return rows;
}

inline Dataset encode_rows(const TsvRows& rows, const TaskSpec& spec, const Vocab& vocab,
                           int max_len) {
    Dataset ds;
    ds.classes = spec.classes();
    ds.metric = spec.metric;
    ds.examples.reserve(rows.text_a.size());
    for (size_t i = 0; i < rows.text_a.size(); ++i) {
        const auto ta = normalize_tokens(rows.text_a[i]);
        std::optional<std::vector<std::string>> tb;
        if (rows.has_b) tb = normalize_tokens(rows.text_b[i]);
        Example ex;
        ex.ids = encode_example(ta, tb ? &*tb : nullptr, vocab, max_len);
        ex.label = rows.labels[i];
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

inline Dataset load_tsv(const std::string& path, const TaskSpec& spec, const Vocab& vocab,
                        int max_len) {
    return encode_rows(read_tsv(path, spec), spec, vocab, max_len);
}

// ------------------------------------------------------------- synthetic task

// Binary sequence task with a controllable easy/hard mixture.
//
// Easy stratum: the first content position carries one of two class-marker
// tokens and the label is that marker's class; readable after one layer of
// attention. Hard stratum: a probe token is planted early and the label is
// whether its paired twin appears at a distant late position (vs a different
// pair token). Deciding it takes a nonlinear comparison of two far-apart
// positions, so a linear readout on top of a frozen encoder stays at chance
// while joint training can pull the comparison into the early layers.
// Marker tokens are also sprinkled at random as distractors in both strata
// so bag-of-tokens statistics carry no signal.
struct SyntheticSpec {
    double easy_fraction = 0.7;
    int seq_len = 24;     // includes the leading marker token slot
    int vocab_size = 64;  // >= pair/marker/filler budget below
    uint64_t seed = 0;
    int train_n = 20000;
    int dev_n = 4000;
    int pair_count = 8;
    double distractor_rate = 0.15;

    // token id layout after the 4 reserved ids
    static constexpr int32_t kMarker0 = 4;
    static constexpr int32_t kMarker1 = 5;
    static constexpr int32_t kNeutral = 6;
    int32_t pair_token(int i) const { return int32_t(7 + i); }
    int32_t filler_base() const { return int32_t(7 + pair_count); }
    int filler_count() const { return vocab_size - int(filler_base()); }

    void validate() const {
        if (!(easy_fraction >= 0.0 && easy_fraction <= 1.0))
            throw ConfigError("synthetic: easy_fraction must be in [0,1]");
        if (seq_len < 8) throw ConfigError("synthetic: seq_len must be >= 8");
        if (pair_count < 2) throw ConfigError("synthetic: pair_count must be >= 2");
        if (filler_count() < 4)
            throw ConfigError("synthetic: vocab_size too small for pair_count");
        if (train_n < 1 || dev_n < 1) throw ConfigError("synthetic: sizes must be positive");
        if (!(distractor_rate >= 0.0 && distractor_rate < 1.0))
            throw ConfigError("synthetic: distractor_rate must be in [0,1)");
    }
};

namespace detail {

inline Example gen_one(const SyntheticSpec& spec, Rng& rng, bool easy, int32_t label) {
    const int L = spec.seq_len;
    Example ex;
    ex.label = label;
    ex.stratum = easy ? 0 : 1;
    ex.ids.resize(size_t(L));
    ex.ids[0] = Vocab::kCls;

    auto filler = [&] {
        if (rng.uniform() < spec.distractor_rate)
            return rng.uniform() < 0.5 ? SyntheticSpec::kMarker0 : SyntheticSpec::kMarker1;
        return int32_t(spec.filler_base() + rng.index(spec.filler_count()));
    };
    for (int t = 2; t < L; ++t) ex.ids[size_t(t)] = filler();

    if (easy) {
        ex.ids[1] = label == 0 ? SyntheticSpec::kMarker0 : SyntheticSpec::kMarker1;
    } else {
        ex.ids[1] = SyntheticSpec::kNeutral;
        // plant the probe and its (mis)match in opposite thirds of the sequence
        const int third = (L - 2) / 3;
        const int px = 2 + rng.index(third);
        const int py = L - 1 - rng.index(third);
        const int xi = rng.index(spec.pair_count);
        int yi;
        if (label == 1) {
            yi = xi;
        } else {
            yi = rng.index(spec.pair_count - 1);
            if (yi >= xi) ++yi;
        }
        ex.ids[size_t(px)] = spec.pair_token(xi);
        ex.ids[size_t(py)] = spec.pair_token(yi);
    }
    return ex;
}

inline std::vector<Example> gen_split(const SyntheticSpec& spec, Rng& rng, int n) {
    // exact per-stratum label balance, then a seeded shuffle
    const int n_easy = int(std::lround(spec.easy_fraction * double(n)));
    std::vector<std::pair<bool, int32_t>> slots;
    slots.reserve(size_t(n));
    for (int i = 0; i < n_easy; ++i) slots.emplace_back(true, int32_t(i % 2));
    for (int i = 0; i < n - n_easy; ++i) slots.emplace_back(false, int32_t(i % 2));
    rng.shuffle(slots);
    std::vector<Example> out;
    out.reserve(size_t(n));
    for (const auto& [easy, label] : slots) out.push_back(gen_one(spec, rng, easy, label));
    return out;
}

}  // namespace detail

struct SyntheticData {
    Dataset train;
    Dataset dev;
};

inline SyntheticData gen_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticData out;
    for (Dataset* ds : {&out.train, &out.dev}) {
        ds->classes = 2;
        ds->metric = Metric::accuracy;
    }
    Rng train_rng = Rng(spec.seed).fork("synthetic-train");
    Rng dev_rng = Rng(spec.seed).fork("synthetic-dev");
    out.train.examples = detail::gen_split(spec, train_rng, spec.train_n);
    out.dev.examples = detail::gen_split(spec, dev_rng, spec.dev_n);
    return out;
}

// ------------------------------------------------------------ batch assembly

inline TokenBatch make_batch(const Dataset& ds, const std::vector<int64_t>& indices) {
    TokenBatch b;
    b.batch = int64_t(indices.size());
    int64_t len = 1;
    for (int64_t idx : indices)
        len = std::max<int64_t>(len, int64_t(ds.examples[size_t(idx)].ids.size()));
    b.len = len;
    b.ids.assign(size_t(b.batch * len), Vocab::kPad);
    b.lengths.resize(size_t(b.batch));
    b.labels.resize(size_t(b.batch));
    for (int64_t r = 0; r < b.batch; ++r) {
        const Example& ex = ds.examples[size_t(indices[size_t(r)])];
        std::copy(ex.ids.begin(), ex.ids.end(), b.ids.begin() + r * len);
        b.lengths[size_t(r)] = int32_t(ex.ids.size());
        b.labels[size_t(r)] = ex.label;
    }
    return b;
}

}  // namespace mext
