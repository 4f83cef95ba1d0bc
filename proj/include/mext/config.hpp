#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mext/data.hpp"
#include "mext/errors.hpp"
#include "mext/infer.hpp"
#include "mext/losses.hpp"
#include "mext/model.hpp"
#include "mext/sha1.hpp"
#include "mext/train.hpp"

namespace mext {

using json = nlohmann::json;

namespace cfgdetail {

inline void check_keys(const json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
T get_or(const json& j, const char* key, T def) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

}  // namespace cfgdetail

// --------------------------------------------------------- per-module configs

inline void from_json_into(const json& j, ModelConfig& m) {
    cfgdetail::check_keys(j, "model",
                          {"k", "hidden", "heads", "ffn", "vocab", "classes", "max_len", "seed"});
    m.k = cfgdetail::get_or(j, "k", m.k);
    m.hidden = cfgdetail::get_or(j, "hidden", m.hidden);
    m.heads = cfgdetail::get_or(j, "heads", m.heads);
    m.ffn = cfgdetail::get_or(j, "ffn", m.ffn);
    m.vocab = cfgdetail::get_or(j, "vocab", m.vocab);
    m.classes = cfgdetail::get_or(j, "classes", m.classes);
    m.max_len = cfgdetail::get_or(j, "max_len", m.max_len);
    m.seed = cfgdetail::get_or(j, "seed", m.seed);
}

inline json to_json(const ModelConfig& m) {
    return {{"k", m.k},         {"hidden", m.hidden},   {"heads", m.heads},
            {"ffn", m.ffn},     {"vocab", m.vocab},     {"classes", m.classes},
            {"max_len", m.max_len}, {"seed", m.seed}};
}

inline void from_json_into(const json& j, SDConfig& s) {
    cfgdetail::check_keys(j, "sd", {"gamma", "temperature"});
    s.gamma = cfgdetail::get_or(j, "gamma", s.gamma);
    s.temperature = cfgdetail::get_or(j, "temperature", s.temperature);
}

inline json to_json(const SDConfig& s) {
    return {{"gamma", s.gamma}, {"temperature", s.temperature}};
}

inline void from_json_into(const json& j, OptimConfig& o) {
    cfgdetail::check_keys(
        j, "optim", {"lr", "beta1", "beta2", "eps", "clip_norm", "warmup_frac"});
    o.lr = cfgdetail::get_or(j, "lr", o.lr);
    o.beta1 = cfgdetail::get_or(j, "beta1", o.beta1);
    o.beta2 = cfgdetail::get_or(j, "beta2", o.beta2);
    o.eps = cfgdetail::get_or(j, "eps", o.eps);
    o.clip_norm = cfgdetail::get_or(j, "clip_norm", o.clip_norm);
    o.warmup_frac = cfgdetail::get_or(j, "warmup_frac", o.warmup_frac);
}

inline json to_json(const OptimConfig& o) {
    return {{"lr", o.lr},           {"beta1", o.beta1},
            {"beta2", o.beta2},     {"eps", o.eps},
            {"clip_norm", o.clip_norm}, {"warmup_frac", o.warmup_frac}};
}

inline void from_json_into(const json& j, RegimeConfig& r) {
    cfgdetail::check_keys(j, "regime",
                          {"name", "stage_epochs", "batch_size", "optim", "seed", "use_gr"});
    if (j.contains("name")) r.regime = regime_from(j.at("name").get<std::string>());
    if (j.contains("stage_epochs")) r.stage_epochs = j.at("stage_epochs").get<std::vector<int>>();
    r.batch_size = cfgdetail::get_or(j, "batch_size", r.batch_size);
    if (j.contains("optim")) from_json_into(j.at("optim"), r.optim);
    r.seed = cfgdetail::get_or(j, "seed", r.seed);
    r.use_gr = cfgdetail::get_or(j, "use_gr", r.use_gr);
}

inline json to_json(const RegimeConfig& r) {
    return {{"name", regime_str(r.regime)}, {"stage_epochs", r.stage_epochs},
            {"batch_size", r.batch_size},   {"optim", to_json(r.optim)},
            {"seed", r.seed},               {"use_gr", r.use_gr}};
}

inline void from_json_into(const json& j, SyntheticSpec& s) {
    cfgdetail::check_keys(j, "synthetic",
                          {"easy_fraction", "seq_len", "vocab_size", "seed", "train_n", "dev_n",
                           "pair_count", "distractor_rate"});
    s.easy_fraction = cfgdetail::get_or(j, "easy_fraction", s.easy_fraction);
    s.seq_len = cfgdetail::get_or(j, "seq_len", s.seq_len);
    s.vocab_size = cfgdetail::get_or(j, "vocab_size", s.vocab_size);
    s.seed = cfgdetail::get_or(j, "seed", s.seed);
    s.train_n = cfgdetail::get_or(j, "train_n", s.train_n);
    s.dev_n = cfgdetail::get_or(j, "dev_n", s.dev_n);
    s.pair_count = cfgdetail::get_or(j, "pair_count", s.pair_count);
    s.distractor_rate = cfgdetail::get_or(j, "distractor_rate", s.distractor_rate);
}

inline json to_json(const SyntheticSpec& s) {
    return {{"easy_fraction", s.easy_fraction},
            {"seq_len", s.seq_len},
            {"vocab_size", s.vocab_size},
            {"seed", s.seed},
            {"train_n", s.train_n},
            {"dev_n", s.dev_n},
            {"pair_count", s.pair_count},
            {"distractor_rate", s.distractor_rate}};
}

inline void from_json_into(const json& j, TaskSpec& t) {
    cfgdetail::check_keys(j, "task spec",
                          {"name", "text_a_col", "text_b_col", "label_col", "metric", "labels"});
    t.name = cfgdetail::get_or(j, "name", t.name);
    t.text_a_col = cfgdetail::get_or(j, "text_a_col", t.text_a_col);
    t.text_b_col = cfgdetail::get_or(j, "text_b_col", t.text_b_col);
    t.label_col = cfgdetail::get_or(j, "label_col", t.label_col);
    if (j.contains("metric")) t.metric = metric_from(j.at("metric").get<std::string>());
    if (j.contains("labels")) t.labels = j.at("labels").get<std::vector<std::string>>();
}

inline json to_json(const TaskSpec& t) {
    return {{"name", t.name},
            {"text_a_col", t.text_a_col},
            {"text_b_col", t.text_b_col},
            {"label_col", t.label_col},
            {"metric", metric_str(t.metric)},
            {"labels", t.labels}};
}

// Data source: the built-in synthetic generator or a pair of TSV files.
struct TaskConfig {
    std::string name = "synthetic";
    SyntheticSpec synthetic;
    std::string train_path;
    std::string dev_path;
    int vocab_size = 8000;               // vocabulary budget for TSV tasks
    std::optional<TaskSpec> columns;     // overrides the built-in GLUE layout
    std::string cache_dir;               // write/reuse encoded dataset caches

    bool is_synthetic() const { return name == "synthetic"; }
};

inline void from_json_into(const json& j, TaskConfig& t) {
    cfgdetail::check_keys(
        j, "task",
        {"name", "synthetic", "train_path", "dev_path", "vocab_size", "columns", "cache_dir"});
    t.name = cfgdetail::get_or(j, "name", t.name);
    if (j.contains("synthetic")) from_json_into(j.at("synthetic"), t.synthetic);
    t.train_path = cfgdetail::get_or(j, "train_path", t.train_path);
    t.dev_path = cfgdetail::get_or(j, "dev_path", t.dev_path);
    t.vocab_size = cfgdetail::get_or(j, "vocab_size", t.vocab_size);
    if (j.contains("columns")) {
        TaskSpec spec;
        from_json_into(j.at("columns"), spec);
        t.columns = spec;
    }
    t.cache_dir = cfgdetail::get_or(j, "cache_dir", t.cache_dir);
}

inline json to_json(const TaskConfig& t) {
    json j = {{"name", t.name},
              {"synthetic", to_json(t.synthetic)},
              {"train_path", t.train_path},
              {"dev_path", t.dev_path},
              {"vocab_size", t.vocab_size},
              {"cache_dir", t.cache_dir}};
    if (t.columns) j["columns"] = to_json(*t.columns);
    return j;
}

struct InferConfig {
    std::vector<double> thresholds = {0.0,  0.02, 0.05, 0.1,  0.15, 0.2,  0.25, 0.3,
                                      0.35, 0.4,  0.45, 0.5,  0.55, 0.6,  0.65, 0.7};
    EntropyBase entropy_base = EntropyBase::nats;
    int eval_batch = 64;
};

inline void from_json_into(const json& j, InferConfig& c) {
    cfgdetail::check_keys(j, "infer", {"thresholds", "entropy_base", "eval_batch"});
    if (j.contains("thresholds")) c.thresholds = j.at("thresholds").get<std::vector<double>>();
    if (j.contains("entropy_base")) {
        const std::string b = j.at("entropy_base").get<std::string>();
        if (b == "nats")
            c.entropy_base = EntropyBase::nats;
        else if (b == "bits")
            c.entropy_base = EntropyBase::bits;
        else
            throw ConfigError("infer.entropy_base must be 'nats' or 'bits'");
    }
    c.eval_batch = cfgdetail::get_or(j, "eval_batch", c.eval_batch);
}

inline json to_json(const InferConfig& c) {
    return {{"thresholds", c.thresholds},
            {"entropy_base", c.entropy_base == EntropyBase::nats ? "nats" : "bits"},
            {"eval_batch", c.eval_batch}};
}

// ------------------------------------------------------------- run config

struct RunConfig {
    ModelConfig model;
    RegimeConfig regime;
    TaskConfig task;
    InferConfig infer;
    std::string out_dir = "mext-out";

    // one seed drives init, batch order, and the synthetic generator
    void set_seed(uint64_t seed) {
        model.seed = seed;
        regime.seed = seed;
        task.synthetic.seed = seed;
    }
};

inline void from_json_into(const json& j, RunConfig& c) {
    cfgdetail::check_keys(j, "config", {"model", "regime", "sd", "task", "infer", "out"});
    if (j.contains("model")) from_json_into(j.at("model"), c.model);
    if (j.contains("regime")) from_json_into(j.at("regime"), c.regime);
    if (j.contains("sd")) from_json_into(j.at("sd"), c.regime.sd);
    if (j.contains("task")) from_json_into(j.at("task"), c.task);
    if (j.contains("infer")) from_json_into(j.at("infer"), c.infer);
    c.out_dir = cfgdetail::get_or(j, "out", c.out_dir);
}

inline json to_json(const RunConfig& c) {
    return {{"model", to_json(c.model)}, {"regime", to_json(c.regime)},
            {"sd", to_json(c.regime.sd)}, {"task", to_json(c.task)},
            {"infer", to_json(c.infer)},  {"out", c.out_dir}};
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": invalid JSON: " + e.what());
    }
    RunConfig c;
    from_json_into(j, c);
    return c;
}

// ------------------------------------------------------------- run manifest

// Written next to every training run's artifacts: the full config snapshot,
// the seed, content hashes of the inputs, and the paths of every artifact
// the run produced.
struct RunManifest {
    RunConfig config;
    uint64_t seed = 0;
    std::map<std::string, std::string> input_hashes;  // path -> git blob sha1
    std::map<std::string, std::string> outputs;       // artifact -> relative path
};

inline json to_json(const RunManifest& m) {
    return {{"schema", "mext-run-manifest-v1"},
            {"config", to_json(m.config)},
            {"seed", m.seed},
            {"inputs", m.input_hashes},
            {"outputs", m.outputs}};
}

inline void from_json_into(const json& j, RunManifest& m) {
    cfgdetail::check_keys(j, "manifest", {"schema", "config", "seed", "inputs", "outputs"});
    if (j.contains("config")) from_json_into(j.at("config"), m.config);
    m.seed = cfgdetail::get_or(j, "seed", m.seed);
    if (j.contains("inputs"))
        m.input_hashes = j.at("inputs").get<std::map<std::string, std::string>>();
    if (j.contains("outputs"))
        m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
}

inline void write_manifest(const std::string& path, const RunManifest& m) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out << to_json(m).dump(2) << "\n";
}

inline RunManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open manifest " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": invalid JSON: " + e.what());
    }
    RunManifest m;
    from_json_into(j, m);
    return m;
}

inline std::string file_git_sha1(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return git_blob_sha1(ss.str());
}

}  // namespace mext
