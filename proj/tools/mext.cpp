// mext: multi-exit transformer training and adaptive inference.
//
// Subcommands: train, sweep, layerwise, histogram, compare, gradcheck.
// Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint
// mismatch; gradcheck additionally exits 1 when a numerical check fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mext/checkpoint.hpp"
#include "mext/config.hpp"
#include "mext/gradcheck.hpp"
#include "mext/infer.hpp"
#include "mext/train.hpp"

namespace fs = std::filesystem;
using namespace mext;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitCheckpoint = 4;

struct CommonFlags {
    std::string config_path;
    std::string regime;
    std::string task;
    std::string thresholds;
    std::string out_dir;
    std::string gr;
    int64_t seed = -1;
    double gamma = -1.0;
    double temperature = -1.0;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "JSON config file");
    cmd->add_option("--regime", f.regime, "deebert | deebert_sd | sd_only | romebert");
    cmd->add_option("--task", f.task, "synthetic | sst2 | mrpc | qqp | qnli | rte | mnli");
    cmd->add_option("--seed", f.seed, "seed for init, batch order, and data generation");
    cmd->add_option("--thresholds", f.thresholds, "comma-separated entropy thresholds");
    cmd->add_option("--out", f.out_dir, "output directory");
    cmd->add_option("--gr", f.gr, "gradient regularization: on | off");
    cmd->add_option("--gamma", f.gamma, "distillation mixing coefficient");
    cmd->add_option("--temperature", f.temperature, "distillation temperature");
}

std::vector<double> parse_thresholds(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            size_t pos = 0;
            const double v = std::stod(item, &pos);
            if (pos != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("bad threshold value: '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("no thresholds given");
    return out;
}

RunConfig assemble_config(const CommonFlags& f) {
    RunConfig cfg;
    if (!f.config_path.empty()) cfg = load_run_config(f.config_path);
    if (!f.regime.empty()) cfg.regime.regime = regime_from(f.regime);
    if (!f.task.empty()) cfg.task.name = f.task;
    if (f.seed >= 0) cfg.set_seed(uint64_t(f.seed));
    if (!f.thresholds.empty()) cfg.infer.thresholds = parse_thresholds(f.thresholds);
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    if (!f.gr.empty()) {
        if (f.gr == "on")
            cfg.regime.use_gr = true;
        else if (f.gr == "off")
            cfg.regime.use_gr = false;
        else
            throw ConfigError("--gr must be 'on' or 'off'");
    }
    if (f.gamma >= 0.0) cfg.regime.sd.gamma = f.gamma;
    if (f.temperature >= 0.0) cfg.regime.sd.temperature = f.temperature;
    // the two-stage regimes default to the same epoch count per stage
    if (regime_is_two_stage(cfg.regime.regime) && cfg.regime.stage_epochs.size() == 1)
        cfg.regime.stage_epochs = {cfg.regime.stage_epochs[0], cfg.regime.stage_epochs[0]};
    return cfg;
}

struct TaskData {
    Dataset train;
    Dataset dev;
    int vocab = 0;
    int classes = 0;
    int suggested_max_len = 0;
    std::map<std::string, std::string> input_hashes;
};

TaskData load_task(const TaskConfig& task, int max_len_hint) {
    TaskData data;
    if (task.is_synthetic()) {
        SyntheticData syn = gen_synthetic(task.synthetic);
        data.train = std::move(syn.train);
        data.dev = std::move(syn.dev);
        data.vocab = task.synthetic.vocab_size;
        data.classes = 2;
        data.suggested_max_len = task.synthetic.seq_len;
        data.input_hashes["synthetic-spec"] = git_blob_sha1(to_json(task.synthetic).dump());
        return data;
    }
    const TaskSpec spec = task.columns ? *task.columns : glue_task(task.name);
    if (task.train_path.empty() || task.dev_path.empty())
        throw DataError("task '" + task.name + "' needs task.train_path and task.dev_path");
    const int max_len = max_len_hint > 0 ? max_len_hint : 128;

    std::string cache_train, cache_dev;
    if (!task.cache_dir.empty()) {
        fs::create_directories(task.cache_dir);
        const std::string tag =
            spec.name + "-v" + std::to_string(task.vocab_size) + "-l" + std::to_string(max_len);
        cache_train = (fs::path(task.cache_dir) / (tag + "-train.mext")).string();
        cache_dev = (fs::path(task.cache_dir) / (tag + "-dev.mext")).string();
    }

    data.input_hashes[task.train_path] = file_git_sha1(task.train_path);
    data.input_hashes[task.dev_path] = file_git_sha1(task.dev_path);

    if (!cache_train.empty() && fs::exists(cache_train) && fs::exists(cache_dev)) {
        data.train = load_dataset_cache(cache_train);
        data.dev = load_dataset_cache(cache_dev);
    } else {
        const TsvRows train_rows = read_tsv(task.train_path, spec);
        const TsvRows dev_rows = read_tsv(task.dev_path, spec);
        std::vector<std::string> corpus = train_rows.text_a;  // vocab from train split only
        corpus.insert(corpus.end(), train_rows.text_b.begin(), train_rows.text_b.end());
        const Vocab vocab = build_vocab(corpus, task.vocab_size);
        data.train = encode_rows(train_rows, spec, vocab, max_len);
        data.dev = encode_rows(dev_rows, spec, vocab, max_len);
        data.vocab = vocab.size();
        if (!cache_train.empty()) {
            save_dataset_cache(cache_train, data.train);
            save_dataset_cache(cache_dev, data.dev);
        }
    }
    if (data.vocab == 0) data.vocab = task.vocab_size;
    data.classes = spec.classes();
    data.suggested_max_len = max_len;
    return data;
}

// Fills the model dimensions the task dictates. Explicit nonzero values in
// the config must agree with the data.
void resolve_model(ModelConfig& m, const TaskData& data) {
    if (m.vocab == 0)
        m.vocab = data.vocab;
    else if (m.vocab < data.vocab)
        throw ConfigError("model.vocab " + std::to_string(m.vocab) +
                          " is smaller than the task vocabulary " + std::to_string(data.vocab));
    if (m.classes == 0)
        m.classes = data.classes;
    else if (m.classes != data.classes)
        throw ConfigError("model.classes " + std::to_string(m.classes) +
                          " does not match the task's " + std::to_string(data.classes));
    if (m.max_len == 0) m.max_len = data.suggested_max_len;
    m.validate();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << content;
}

json epoch_record_json(const EpochRecord& r) {
    return {{"epoch", r.epoch},
            {"stage", r.stage},
            {"regime", r.regime},
            {"L_final", r.l_final},
            {"L_multi", r.l_multi},
            {"L_kld", r.l_kld},
            {"conflict_rate", r.conflict_rate},
            {"per_layer_dev_acc", r.per_layer_dev_acc}};
}

// ------------------------------------------------------------------ train

int cmd_train(const RunConfig& cfg_in) {
    RunConfig cfg = cfg_in;
    const auto t0 = std::chrono::steady_clock::now();
    TaskData data = load_task(cfg.task, cfg.model.max_len);
    resolve_model(cfg.model, data);
    cfg.regime.validate();

    fs::create_directories(cfg.out_dir);
    const fs::path out(cfg.out_dir);

    ParamStore<float> store = ParamStore<float>::init(cfg.model);

    std::ostringstream metrics;
    metrics << json{{"type", "run_header"}, {"manifest", "manifest.json"},
                    {"regime", regime_str(cfg.regime.regime)}}
                   .dump()
            << "\n";
    std::ostringstream gr_log;
    const bool log_gr = cfg.regime.regime == Regime::romebert && cfg.regime.use_gr;

    TrainCallbacks cb;
    cb.on_stage = [&](int stage, int stages, const std::string& desc) {
        std::printf("[stage %d/%d] %s\n", stage, stages, desc.c_str());
    };
    cb.on_epoch = [&](const EpochRecord& r) {
        metrics << epoch_record_json(r).dump() << "\n";
        std::printf("  epoch %d  L_final %.4f  L_multi %.4f  L_kld %.4f  conflicts %.3f  dev acc",
                    r.epoch, r.l_final, r.l_multi, r.l_kld, r.conflict_rate);
        for (double a : r.per_layer_dev_acc) std::printf(" %.3f", a);
        std::printf("\n");
        std::fflush(stdout);
    };
    if (log_gr)
        cb.on_gr_step = [&](const GrDiagnostic& d) {
            gr_log << json{{"step", d.step},
                           {"dot", d.dot},
                           {"gf_norm", d.gf_norm},
                           {"gs_norm", d.gs_norm},
                           {"conflicted", d.conflicted}}
                          .dump()
                   << "\n";
        };

    EvalOptions eval_opts;
    eval_opts.batch = cfg.infer.eval_batch;
    eval_opts.entropy_base = cfg.infer.entropy_base;
    train(store, cfg.regime, data.train, data.dev, cb, eval_opts);

    save_checkpoint((out / "checkpoint.mext").string(), store);
    write_text_file((out / "metrics.jsonl").string(), metrics.str());

    RunManifest manifest;
    manifest.config = cfg;
    manifest.seed = cfg.regime.seed;
    manifest.input_hashes = data.input_hashes;
    manifest.outputs["checkpoint"] = "checkpoint.mext";
    manifest.outputs["metrics"] = "metrics.jsonl";
    if (log_gr) {
        write_text_file((out / "gr_diag.jsonl").string(), gr_log.str());
        manifest.outputs["gr_diagnostics"] = "gr_diag.jsonl";
    }
    write_manifest((out / "manifest.json").string(), manifest);

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("wrote %s (%.1fs)\n", (out / "checkpoint.mext").c_str(), secs);
    return kExitOk;
}

// ------------------------------------------------- checkpoint-consuming cmds

struct LoadedRun {
    RunConfig cfg;
    ParamStore<float> store;
    TaskData data;
    fs::path out;
    std::string manifest_rel;  // how artifacts reference the manifest
};

LoadedRun load_run(const std::string& checkpoint_path, const CommonFlags& flags) {
    if (!fs::exists(checkpoint_path)) throw DataError("no such checkpoint: " + checkpoint_path);
    RunConfig cfg;
    const fs::path ckpt_dir = fs::path(checkpoint_path).parent_path();
    const fs::path manifest_path = ckpt_dir / "manifest.json";
    if (!flags.config_path.empty()) {
        cfg = load_run_config(flags.config_path);
    } else if (fs::exists(manifest_path)) {
        cfg = read_manifest(manifest_path.string()).config;
    }
    if (!flags.thresholds.empty()) cfg.infer.thresholds = parse_thresholds(flags.thresholds);
    if (!flags.task.empty()) cfg.task.name = flags.task;
    if (flags.seed >= 0) cfg.set_seed(uint64_t(flags.seed));
    if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;

    LoadedRun run{cfg, {}, {}, {}, {}};
    run.data = load_task(cfg.task, cfg.model.max_len);
    resolve_model(run.cfg.model, run.data);
    run.store = load_checkpoint<float>(checkpoint_path, run.cfg.model);
    run.out = flags.out_dir.empty() ? ckpt_dir : fs::path(flags.out_dir);
    fs::create_directories(run.out);
    run.manifest_rel = fs::exists(manifest_path) ? "manifest.json" : "";
    return run;
}

EvalOptions eval_options(const RunConfig& cfg) {
    EvalOptions o;
    o.batch = cfg.infer.eval_batch;
    o.entropy_base = cfg.infer.entropy_base;
    return o;
}

int cmd_sweep(const std::string& checkpoint, const CommonFlags& flags) {
    LoadedRun run = load_run(checkpoint, flags);
    const auto records =
        sweep(run.store, run.data.dev, run.cfg.infer.thresholds, eval_options(run.cfg));
    std::ostringstream csv;
    write_sweep_csv(csv, records, run.cfg.model.k);
    const fs::path path = run.out / "sweep.csv";
    write_text_file(path.string(), csv.str());
    std::printf("wrote %s (%zu thresholds)\n", path.c_str(), records.size());
    return kExitOk;
}

int cmd_layerwise(const std::string& checkpoint, const CommonFlags& flags) {
    LoadedRun run = load_run(checkpoint, flags);
    const auto per_layer = eval_fixed_layers(run.store, run.data.dev, eval_options(run.cfg));
    std::ostringstream csv;
    write_layerwise_csv(csv, per_layer);
    const fs::path path = run.out / "layerwise.csv";
    write_text_file(path.string(), csv.str());
    std::printf("wrote %s (%zu layers)\n", path.c_str(), per_layer.size());
    return kExitOk;
}

int cmd_histogram(const std::string& checkpoint, const CommonFlags& flags) {
    LoadedRun run = load_run(checkpoint, flags);
    if (run.cfg.infer.thresholds.size() != 1)
        throw ConfigError("histogram needs exactly one threshold (--thresholds S)");
    const double S = run.cfg.infer.thresholds[0];
    const auto rec = sweep(run.store, run.data.dev, {S}, eval_options(run.cfg)).front();
    json j = {{"threshold", S},
              {"counts", rec.histogram},
              {"total", int64_t(run.data.dev.size())},
              {"expected_time_pct", rec.expected_time_pct},
              {"metric", rec.metric}};
    if (!run.manifest_rel.empty()) j["manifest"] = run.manifest_rel;
    const fs::path path = run.out / "histogram.json";
    write_text_file(path.string(), j.dump(2) + "\n");
    std::printf("wrote %s\n", path.c_str());
    return kExitOk;
}

// ---------------------------------------------------------------- compare

// Trains all four regimes on the same task and seed, then tabulates the
// fixed-exit metric per layer for each.
int cmd_compare(const RunConfig& cfg_in) {
    const std::vector<Regime> regimes = {Regime::deebert, Regime::deebert_sd, Regime::sd_only,
                                         Regime::romebert};
    RunConfig base = cfg_in;
    fs::create_directories(base.out_dir);
    std::vector<std::vector<double>> columns;
    int k = 0;
    for (Regime r : regimes) {
        RunConfig cfg = base;
        cfg.regime.regime = r;
        const int e = cfg.regime.stage_epochs.empty() ? 2 : cfg.regime.stage_epochs[0];
        cfg.regime.stage_epochs =
            regime_is_two_stage(r) ? std::vector<int>{e, e} : std::vector<int>{e};
        cfg.out_dir = (fs::path(base.out_dir) / regime_str(r)).string();
        std::printf("== %s ==\n", regime_str(r).c_str());
        const int rc = cmd_train(cfg);
        if (rc != kExitOk) return rc;

        TaskData data = load_task(cfg.task, cfg.model.max_len);
        resolve_model(cfg.model, data);
        const auto store =
            load_checkpoint<float>((fs::path(cfg.out_dir) / "checkpoint.mext").string(), cfg.model);
        columns.push_back(eval_fixed_layers(store, data.dev, eval_options(cfg)));
        k = cfg.model.k;
    }
    std::ostringstream csv;
    csv << "layer";
    for (Regime r : regimes) csv << "," << regime_str(r);
    csv << "\n";
    for (int layer = 1; layer <= k; ++layer) {
        csv << layer;
        for (const auto& col : columns) csv << "," << format_fixed(col[size_t(layer - 1)]);
        csv << "\n";
    }
    const fs::path path = fs::path(base.out_dir) / "compare.csv";
    write_text_file(path.string(), csv.str());
    std::printf("wrote %s\n", path.c_str());
    return kExitOk;
}

// --------------------------------------------------------------- gradcheck

int cmd_gradcheck(uint64_t seed) {
    GradCheckConfig gc;
    gc.seed = seed;
    const auto results = run_gradcheck(gc);
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("%-8s max rel err %.3e over %lld checks (worst %s): %s\n", r.loss_name.c_str(),
                    r.max_rel_err, (long long)r.coords_checked, r.worst_coord.c_str(),
                    r.pass ? "ok" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    return all_pass ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-exit transformer training and entropy-threshold adaptive inference"};
    app.require_subcommand(1);

    CommonFlags train_flags, sweep_flags, layer_flags, hist_flags, compare_flags;
    std::string sweep_ckpt, layer_ckpt, hist_ckpt;
    int64_t gradcheck_seed = 1;

    CLI::App* train_cmd = app.add_subcommand("train", "train a regime and write a checkpoint");
    add_common_flags(train_cmd, train_flags);

    CLI::App* sweep_cmd =
        app.add_subcommand("sweep", "accuracy / expected-time sweep over entropy thresholds");
    sweep_cmd->add_option("checkpoint", sweep_ckpt, "checkpoint file")->required();
    add_common_flags(sweep_cmd, sweep_flags);

    CLI::App* layer_cmd =
        app.add_subcommand("layerwise", "fixed-exit metric for every layer");
    layer_cmd->add_option("checkpoint", layer_ckpt, "checkpoint file")->required();
    add_common_flags(layer_cmd, layer_flags);

    CLI::App* hist_cmd =
        app.add_subcommand("histogram", "exit-layer distribution at one threshold");
    hist_cmd->add_option("checkpoint", hist_ckpt, "checkpoint file")->required();
    add_common_flags(hist_cmd, hist_flags);

    CLI::App* compare_cmd =
        app.add_subcommand("compare", "train all four regimes and tabulate layerwise metrics");
    add_common_flags(compare_cmd, compare_flags);

    CLI::App* gradcheck_cmd =
        app.add_subcommand("gradcheck", "finite-difference validation of the backward pass");
    gradcheck_cmd->add_option("--seed", gradcheck_seed, "seed for the checked model");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(assemble_config(train_flags));
        if (sweep_cmd->parsed()) return cmd_sweep(sweep_ckpt, sweep_flags);
        if (layer_cmd->parsed()) return cmd_layerwise(layer_ckpt, layer_flags);
        if (hist_cmd->parsed()) return cmd_histogram(hist_ckpt, hist_flags);
        if (compare_cmd->parsed()) return cmd_compare(assemble_config(compare_flags));
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(uint64_t(gradcheck_seed));
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return kExitCheckpoint;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    }
    return kExitConfig;
}
