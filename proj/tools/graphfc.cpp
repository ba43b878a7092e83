// Batch CLI for the transaction fraud-detection pipeline.
//
// Subcommands: synth, train, eval, sweep, ablate, export-embeddings.
// Exit codes: 0 success, 2 configuration/usage error, 3 data error,
// 4 internal error.
//
// All commands are deterministic given their inputs and seeds; volatile
// facts (timestamps, runtimes) go only into manifest.json sidecars so that
// reports and checkpoints are byte-stable.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "graphfc/common.hpp"
#include "graphfc/data.hpp"
#include "graphfc/eval.hpp"
#include "graphfc/harness.hpp"
#include "graphfc/synth.hpp"
#include "graphfc/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace graphfc;

namespace {

json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSON in " + path + ": " + e.what());
    }
}

// Root config layout: {"synth": {...}, "split": {...}, "train": {...},
// "sweep": {...}, "ablate": {...}}. Sections irrelevant to the current
// subcommand are allowed but must be one of the known names.
json load_root_config(const std::string& path) {
    if (path.empty()) return json::object();
    const json j = load_json_file(path);
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    for (const auto& item : j.items()) {
        const std::string& key = item.key();
        if (key != "synth" && key != "split" && key != "train" && key != "sweep" &&
            key != "ablate") {
            throw ConfigError("unknown config section: '" + key + "'");
        }
    }
    return j;
}

DateDays parse_config_date(const std::string& s, const char* what) {
    try {
        return parse_iso_date(s);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("bad ") + what + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Split spec: temporal cutoff + label-mask parameters.
// ---------------------------------------------------------------------------

struct SplitSpec {
    std::string test_from;  // ISO date; required for every data-bearing run
    double valid_fraction = 0.2;
    double inspection_rate = 0.05;
    std::uint64_t mask_seed = 1;
};

void apply_split_json(SplitSpec& s, const json& j) {
    if (!j.is_object()) throw ConfigError("split config must be a JSON object");
    try {
        for (const auto& [key, val] : j.items()) {
            if (key == "test_from") s.test_from = val.get<std::string>();
            else if (key == "valid_fraction") s.valid_fraction = val.get<double>();
            else if (key == "inspection_rate") s.inspection_rate = val.get<double>();
            else if (key == "mask_seed") s.mask_seed = val.get<std::uint64_t>();
            else throw ConfigError("unknown split config key: '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad split config value: ") + e.what());
    }
}

json split_to_json(const SplitSpec& s) {
    return {{"test_from", s.test_from},
            {"valid_fraction", s.valid_fraction},
            {"inspection_rate", s.inspection_rate},
            {"mask_seed", s.mask_seed}};
}

// Temporal split only (masking is separate so sweeps can re-mask per cell).
void apply_temporal_split(Dataset& d, const SplitSpec& s) {
    if (s.test_from.empty()) {
        throw ConfigError("test_from is required (flag --test-from or config split.test_from)");
    }
    temporal_split(d, parse_config_date(s.test_from, "test_from"), s.valid_fraction);
}

void apply_split_and_mask(Dataset& d, const SplitSpec& s) {
    apply_temporal_split(d, s);
    if (s.inspection_rate < 0.0 || s.inspection_rate > 1.0) {
        throw ConfigError("inspection_rate must be in [0, 1]");
    }
    mask_labels(d, s.inspection_rate, s.mask_seed);
}

// ---------------------------------------------------------------------------
// Manifest sidecar: the only place volatile run facts are recorded.
// ---------------------------------------------------------------------------

void write_manifest(const fs::path& path, const std::string& command, double seconds,
                    const std::vector<fs::path>& artifacts, const json& extra) {
    json j;
    j["tool"] = "graphfc";
    j["command"] = command;
    j["created_unix"] = static_cast<std::int64_t>(std::time(nullptr));
    j["runtime_seconds"] = seconds;
    json arts = json::array();
    for (const auto& a : artifacts) {
        arts.push_back({{"path", a.filename().string()},
                        {"bytes", static_cast<std::uint64_t>(fs::file_size(a))},
                        {"fnv1a64", file_digest(a.string())}});
    }
    j["artifacts"] = std::move(arts);
    j["extra"] = extra;
    write_text_file(path.string(), j.dump(2) + "\n");
}

class Stopwatch {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_report_files(const fs::path& dir, const EvalReport& rep) {
    write_text_file((dir / "report.json").string(), report_to_json(rep).dump(2) + "\n");
    std::string csv = kReportCsvHeader;
    csv += '\n';
    append_report_csv_rows(rep, csv);
    write_text_file((dir / "report.csv").string(), csv);
}

std::vector<std::uint32_t> rows_for_split_name(const Dataset& d, const std::string& name) {
    if (name == "train") return d.indices_of(Split::Train);
    if (name == "valid") return d.indices_of(Split::Valid);
    if (name == "test") return d.indices_of(Split::Test);
    if (name == "all") {
        std::vector<std::uint32_t> all(d.size());
        for (std::uint32_t i = 0; i < d.size(); ++i) all[i] = i;
        return all;
    }
    throw ConfigError("unknown split name: '" + name + "' (train|valid|test|all)");
}

// ---------------------------------------------------------------------------
// Subcommand state.
// ---------------------------------------------------------------------------

struct CliState {
    // shared
    std::string config_path;
    std::string data_path;
    std::string out_dir;
    std::string out_file;
    std::string checkpoint_path;

    // split overrides
    std::string test_from;
    double valid_fraction = -1.0;
    double inspection_rate = -1.0;
    std::uint64_t mask_seed = 0;

    // synth overrides
    SynthConfig synth;

    // train overrides (only applied when the flag was given)
    std::string variant, aggregator, ranking, pretrain_graph, finetune_graph, drop_key;
    std::uint64_t seed = 0;
    std::size_t pretrain_epochs = 0, finetune_epochs = 0, batch_size = 0, hidden = 0;
    std::size_t negatives = 0, patience = 0, trees = 0, tree_depth = 0;
    double learning_rate = 0.0, alpha_revenue = -1.0, lambda_reg = -1.0;
    std::vector<std::size_t> fanouts;
    bool no_lookahead = false;
    bool hs_prefix_key = false;

    // sweep / ablate
    std::vector<double> rates;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> variants;
    double rate = -1.0;
    bool no_baseline = false;
    bool graph_grid = false;

    // eval / export
    std::string split_name = "test";
    std::string subset = "full";
};

SplitSpec resolve_split(const CliState& st, const CLI::App* sub, const json& root,
                        const SplitSpec& defaults) {
    SplitSpec s = defaults;
    if (root.contains("split")) apply_split_json(s, root.at("split"));
    if (sub->count("--test-from")) s.test_from = st.test_from;
    if (sub->count("--valid-fraction")) s.valid_fraction = st.valid_fraction;
    if (sub->count("--inspection-rate")) s.inspection_rate = st.inspection_rate;
    if (sub->count("--mask-seed")) s.mask_seed = st.mask_seed;
    return s;
}

TrainConfig resolve_train_config(const CliState& st, const CLI::App* sub, const json& root) {
    TrainConfig cfg;
    if (root.contains("train")) apply_train_config_json(cfg, root.at("train"));
    if (sub->count("--variant")) cfg.variant = pipeline_variant_from_name(st.variant);
    if (sub->count("--aggregator")) cfg.aggregator = aggregator_from_name(st.aggregator);
    if (sub->count("--ranking")) cfg.ranking = ranking_key_from_name(st.ranking);
    if (sub->count("--pretrain-graph")) {
        cfg.pretrain_graph = graph_variant_from_name(st.pretrain_graph);
    }
    if (sub->count("--finetune-graph")) {
        cfg.finetune_graph = graph_variant_from_name(st.finetune_graph);
    }
    if (sub->count("--drop-key")) cfg.drop_key = key_kind_from_name(st.drop_key);
    if (sub->count("--seed")) cfg.seed = st.seed;
    if (sub->count("--pretrain-epochs")) cfg.pretrain_epochs = st.pretrain_epochs;
    if (sub->count("--finetune-epochs")) cfg.finetune_epochs = st.finetune_epochs;
    if (sub->count("--batch-size")) cfg.batch_size = st.batch_size;
    if (sub->count("--hidden")) cfg.hidden = st.hidden;
    if (sub->count("--negatives")) cfg.negatives = st.negatives;
    if (sub->count("--patience")) cfg.patience = st.patience;
    if (sub->count("--trees")) cfg.gbdt.n_trees = st.trees;
    if (sub->count("--tree-depth")) cfg.gbdt.max_depth = st.tree_depth;
    if (sub->count("--learning-rate")) cfg.learning_rate = st.learning_rate;
    if (sub->count("--alpha-revenue")) cfg.alpha_revenue = st.alpha_revenue;
    if (sub->count("--lambda-reg")) cfg.lambda_reg = st.lambda_reg;
    if (sub->count("--fanouts")) {
        cfg.fanouts = st.fanouts;
        cfg.layers = st.fanouts.size();
    }
    if (sub->count("--hs-prefix-key")) cfg.hs_prefix_key = true;
    if (sub->count("--no-lookahead")) cfg.lookahead = false;
    cfg.validate();
    return cfg;
}

void add_split_options(CLI::App* sub, CliState& st) {
    sub->add_option("--test-from", st.test_from, "ISO date; records on/after go to test");
    sub->add_option("--valid-fraction", st.valid_fraction,
                    "fraction of pre-test rows used for validation");
    sub->add_option("--inspection-rate", st.inspection_rate,
                    "fraction of train rows with visible outcomes");
    sub->add_option("--mask-seed", st.mask_seed, "label-mask seed");
}

void add_train_options(CLI::App* sub, CliState& st) {
    sub->add_option("--variant", st.variant,
                    "full|no_pretrain|joint|no_cross_features|single_key");
    sub->add_option("--aggregator", st.aggregator, "attention|mean|relation_typed");
    sub->add_option("--ranking", st.ranking, "cls|rev|combined");
    sub->add_option("--pretrain-graph", st.pretrain_graph, "full|labeled_only|unlabeled_only");
    sub->add_option("--finetune-graph", st.finetune_graph, "full|labeled_only");
    sub->add_option("--drop-key", st.drop_key, "importer|hs_code (single_key variant)");
    sub->add_option("--seed", st.seed, "training seed");
    sub->add_option("--pretrain-epochs", st.pretrain_epochs);
    sub->add_option("--finetune-epochs", st.finetune_epochs);
    sub->add_option("--batch-size", st.batch_size);
    sub->add_option("--hidden", st.hidden, "embedding width");
    sub->add_option("--negatives", st.negatives, "contrastive negatives per anchor");
    sub->add_option("--patience", st.patience, "early-stopping patience");
    sub->add_option("--trees", st.trees, "boosted trees in the cross-feature encoder");
    sub->add_option("--tree-depth", st.tree_depth);
    sub->add_option("--learning-rate", st.learning_rate);
    sub->add_option("--alpha-revenue", st.alpha_revenue, "surcharge MSE weight");
    sub->add_option("--lambda-reg", st.lambda_reg, "L2 weight");
    sub->add_option("--fanouts", st.fanouts, "per-layer neighbor fan-outs")->delimiter(',');
    sub->add_flag("--hs-prefix-key", st.hs_prefix_key, "add 4-digit HS prefix key nodes");
    sub->add_flag("--no-lookahead", st.no_lookahead, "disable lookahead slow weights");
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

void cmd_synth(const CliState& st, const CLI::App* sub) {
    Stopwatch watch;
    const json root = load_root_config(st.config_path);
    SynthConfig cfg;
    if (root.contains("synth")) {
        const json& j = root.at("synth");
        if (!j.is_object()) throw ConfigError("synth config must be a JSON object");
        try {
            for (const auto& [key, val] : j.items()) {
                if (key == "n_transactions") cfg.n_transactions = val.get<std::size_t>();
                else if (key == "n_importers") cfg.n_importers = val.get<std::size_t>();
                else if (key == "n_hs_codes") cfg.n_hs_codes = val.get<std::size_t>();
                else if (key == "base_illicit_rate") cfg.base_illicit_rate = val.get<double>();
                else if (key == "importer_effect") cfg.importer_effect = val.get<double>();
                else if (key == "hs_effect") cfg.hs_effect = val.get<double>();
                else if (key == "feature_noise") cfg.feature_noise = val.get<double>();
                else if (key == "start_date") {
                    cfg.start_date = parse_config_date(val.get<std::string>(), "start_date");
                } else if (key == "end_date") {
                    cfg.end_date = parse_config_date(val.get<std::string>(), "end_date");
                } else if (key == "seed") cfg.seed = val.get<std::uint64_t>();
                else throw ConfigError("unknown synth config key: '" + key + "'");
            }
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad synth config value: ") + e.what());
        }
    }
    if (sub->count("--n")) cfg.n_transactions = st.synth.n_transactions;
    if (sub->count("--importers")) cfg.n_importers = st.synth.n_importers;
    if (sub->count("--hs-codes")) cfg.n_hs_codes = st.synth.n_hs_codes;
    if (sub->count("--base-rate")) cfg.base_illicit_rate = st.synth.base_illicit_rate;
    if (sub->count("--importer-effect")) cfg.importer_effect = st.synth.importer_effect;
    if (sub->count("--hs-effect")) cfg.hs_effect = st.synth.hs_effect;
    if (sub->count("--noise")) cfg.feature_noise = st.synth.feature_noise;
    if (sub->count("--start-date")) cfg.start_date = st.synth.start_date;
    if (sub->count("--end-date")) cfg.end_date = st.synth.end_date;
    if (sub->count("--seed")) cfg.seed = st.synth.seed;

    const Dataset d = generate_synthetic(cfg);
    const fs::path out(st.out_file);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_csv(d, out.string());

    std::size_t n_illicit = 0;
    for (const auto& r : d.records) n_illicit += r.illicit ? 1 : 0;
    json extra;
    extra["n_transactions"] = d.size();
    extra["n_illicit"] = n_illicit;
    extra["seed"] = cfg.seed;
    const fs::path manifest = out.parent_path() / (out.stem().string() + ".manifest.json");
    write_manifest(manifest, "synth", watch.seconds(), {out}, extra);
    std::printf("synth: wrote %zu transactions (%zu illicit) to %s\n", d.size(), n_illicit,
                out.string().c_str());
}

void cmd_train(const CliState& st, const CLI::App* sub) {
    Stopwatch watch;
    const json root = load_root_config(st.config_path);
    const SplitSpec split = resolve_split(st, sub, root, SplitSpec{});
    TrainConfig cfg = resolve_train_config(st, sub, root);

    Dataset d = load_csv(st.data_path);
    apply_split_and_mask(d, split);

    PipelineResult res = run_pipeline(d, cfg);

    const fs::path dir(st.out_dir);
    fs::create_directories(dir);
    json extra = model_extra_json(res.model);
    extra["split"] = split_to_json(split);
    const fs::path ckpt = dir / "checkpoint.bin";
    save_checkpoint(ckpt.string(), res.model.params, extra);
    write_report_files(dir, res.report);
    const fs::path curve = dir / "loss_curve.csv";
    write_text_file(curve.string(), curve_to_csv(res.curve));

    json mextra;
    mextra["data"] = {{"path", st.data_path}, {"fnv1a64", file_digest(st.data_path)}};
    mextra["train_seconds"] = res.train_seconds;
    mextra["pretrain_epochs_run"] = res.pretrain_epochs_run;
    mextra["finetune_epochs_run"] = res.finetune_epochs_run;
    mextra["best_epoch"] = res.best_epoch;
    mextra["divergence"] = res.divergence;
    write_manifest(dir / "manifest.json", "train", watch.seconds(),
                   {ckpt, dir / "report.json", dir / "report.csv", curve}, mextra);

    std::printf("train: variant=%s pretrain=%zu finetune=%zu best_epoch=%zu divergence=%d\n",
                pipeline_variant_name(cfg.variant), res.pretrain_epochs_run,
                res.finetune_epochs_run, res.best_epoch, res.divergence ? 1 : 0);
    for (const auto& m : res.report.metrics) {
        std::printf("  n=%g%% precision=%.4f recall=%.4f revenue=%.4f\n", m.n_percent,
                    m.precision, m.recall, m.revenue_ratio);
    }
}

void cmd_eval(const CliState& st, const CLI::App* sub) {
    Stopwatch watch;
    LoadedCheckpoint lc = load_checkpoint(st.checkpoint_path);
    SplitSpec defaults;
    if (lc.extra.contains("split")) apply_split_json(defaults, lc.extra.at("split"));
    const json root = load_root_config(st.config_path);
    const SplitSpec split = resolve_split(st, sub, root, defaults);
    PipelineModel model = model_from_checkpoint(std::move(lc));

    Dataset d = load_csv(st.data_path);
    apply_split_and_mask(d, split);

    const auto rows = rows_for_split_name(d, st.split_name);
    if (rows.empty()) throw DataError("requested split is empty: " + st.split_name);
    if (st.split_name == "train" || st.split_name == "all") {
        throw ConfigError("eval scores held-out rows only (--split test|valid)");
    }
    auto scored = score_with_model(d, model, rows, /*require_outcome=*/true);

    std::string subset_name = "test";
    if (st.subset == "full") {
        subset_name = st.split_name;
    } else if (st.subset == "unseen_importer") {
        scored = unseen_key_subset(d, KeyKind::Importer, scored);
        subset_name = st.split_name + "_unseen_importer";
    } else if (st.subset == "unseen_hs") {
        scored = unseen_key_subset(d, KeyKind::HsCode, scored);
        subset_name = st.split_name + "_unseen_hs_code";
    } else {
        throw ConfigError("unknown subset: '" + st.subset + "' (full|unseen_importer|unseen_hs)");
    }
    if (scored.empty()) throw DataError("subset '" + st.subset + "' selected no transactions");

    EvalReport rep = build_eval_report(scored, model.cfg.eval_percents, model.cfg.ranking,
                                       pipeline_variant_name(model.cfg.variant),
                                       model.cfg.seed);
    rep.subset = subset_name;
    rep.osr_importer = osr_row(compute_osr(d, KeyKind::Importer));
    rep.osr_hs = osr_row(compute_osr(d, KeyKind::HsCode));

    const fs::path dir(st.out_dir);
    fs::create_directories(dir);
    write_report_files(dir, rep);
    json mextra;
    mextra["data"] = {{"path", st.data_path}, {"fnv1a64", file_digest(st.data_path)}};
    mextra["checkpoint"] = {{"path", st.checkpoint_path},
                            {"fnv1a64", file_digest(st.checkpoint_path)}};
    mextra["subset"] = subset_name;
    mextra["n_scored"] = rep.n_scored;
    write_manifest(dir / "manifest.json", "eval", watch.seconds(),
                   {dir / "report.json", dir / "report.csv"}, mextra);
    std::printf("eval: subset=%s n=%zu\n", subset_name.c_str(), rep.n_scored);
    for (const auto& m : rep.metrics) {
        std::printf("  n=%g%% precision=%.4f recall=%.4f revenue=%.4f\n", m.n_percent,
                    m.precision, m.recall, m.revenue_ratio);
    }
}

void write_cells_outputs(const fs::path& dir, const std::string& command, double seconds,
                         const std::vector<RunCell>& cells, const json& mextra_in) {
    fs::create_directories(dir);
    const fs::path cells_path = dir / "cells.csv";
    write_text_file(cells_path.string(), cells_to_csv(cells));
    std::size_t failed = 0;
    for (const auto& c : cells) failed += c.ok ? 0 : 1;
    json mextra = mextra_in;
    mextra["cells_total"] = cells.size();
    mextra["cells_failed"] = failed;
    write_manifest(dir / "manifest.json", command, seconds, {cells_path}, mextra);
    std::printf("%s: %zu cells (%zu failed), results in %s\n", command.c_str(), cells.size(),
                failed, cells_path.string().c_str());
    for (const auto& c : cells) {
        if (!c.ok) {
            std::printf("  FAILED %s seed=%llu rate=%g%%: %s\n", c.variant.c_str(),
                        static_cast<unsigned long long>(c.seed), c.inspection_percent,
                        c.error.c_str());
        }
    }
}

void cmd_sweep(const CliState& st, const CLI::App* sub) {
    Stopwatch watch;
    const json root = load_root_config(st.config_path);
    const SplitSpec split = resolve_split(st, sub, root, SplitSpec{});
    const TrainConfig cfg = resolve_train_config(st, sub, root);

    std::vector<double> rates{1.0, 2.0, 5.0, 10.0, 20.0};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    bool include_baseline = true;
    if (root.contains("sweep")) {
        const json& j = root.at("sweep");
        try {
            for (const auto& [key, val] : j.items()) {
                if (key == "rates") rates = val.get<std::vector<double>>();
                else if (key == "seeds") seeds = val.get<std::vector<std::uint64_t>>();
                else if (key == "include_baseline") include_baseline = val.get<bool>();
                else throw ConfigError("unknown sweep config key: '" + key + "'");
            }
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad sweep config value: ") + e.what());
        }
    }
    if (sub->count("--rates")) rates = st.rates;
    if (sub->count("--seeds")) seeds = st.seeds;
    if (st.no_baseline) include_baseline = false;

    Dataset d = load_csv(st.data_path);
    apply_temporal_split(d, split);

    const auto cells = run_sweep(d, cfg, rates, seeds, include_baseline);
    json mextra;
    mextra["data"] = {{"path", st.data_path}, {"fnv1a64", file_digest(st.data_path)}};
    mextra["rates"] = rates;
    mextra["seeds"] = seeds;
    write_cells_outputs(st.out_dir, "sweep", watch.seconds(), cells, mextra);
}

void cmd_ablate(const CliState& st, const CLI::App* sub) {
    Stopwatch watch;
    const json root = load_root_config(st.config_path);
    const SplitSpec split = resolve_split(st, sub, root, SplitSpec{});
    const TrainConfig cfg = resolve_train_config(st, sub, root);

    std::vector<std::string> variants{"full", "no_pretrain", "joint", "no_cross_features",
                                      "single_key", kGbdtBaselineTag};
    double rate = 5.0;
    std::vector<std::uint64_t> seeds{1};
    bool graph_grid = false;
    if (root.contains("ablate")) {
        const json& j = root.at("ablate");
        try {
            for (const auto& [key, val] : j.items()) {
                if (key == "variants") variants = val.get<std::vector<std::string>>();
                else if (key == "rate") rate = val.get<double>();
                else if (key == "seeds") seeds = val.get<std::vector<std::uint64_t>>();
                else if (key == "graph_grid") graph_grid = val.get<bool>();
                else throw ConfigError("unknown ablate config key: '" + key + "'");
            }
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad ablate config value: ") + e.what());
        }
    }
    if (sub->count("--variants")) variants = st.variants;
    if (sub->count("--rate")) rate = st.rate;
    if (sub->count("--seeds")) seeds = st.seeds;
    if (st.graph_grid) graph_grid = true;

    Dataset d = load_csv(st.data_path);
    apply_temporal_split(d, split);

    const auto cells = graph_grid ? run_graph_grid(d, cfg, rate, seeds)
                                  : run_ablations(d, cfg, variants, rate, seeds);
    json mextra;
    mextra["data"] = {{"path", st.data_path}, {"fnv1a64", file_digest(st.data_path)}};
    mextra["rate"] = rate;
    mextra["seeds"] = seeds;
    mextra["graph_grid"] = graph_grid;
    write_cells_outputs(st.out_dir, "ablate", watch.seconds(), cells, mextra);
}

void cmd_export_embeddings(const CliState& st, const CLI::App* sub) {
    Stopwatch watch;
    LoadedCheckpoint lc = load_checkpoint(st.checkpoint_path);
    SplitSpec defaults;
    if (lc.extra.contains("split")) apply_split_json(defaults, lc.extra.at("split"));
    const json root = load_root_config(st.config_path);
    const SplitSpec split = resolve_split(st, sub, root, defaults);
    PipelineModel model = model_from_checkpoint(std::move(lc));
    model.cfg.validate();

    Dataset d = load_csv(st.data_path);
    apply_split_and_mask(d, split);

    const auto rows = rows_for_split_name(d, st.split_name);
    if (rows.empty()) throw DataError("requested split is empty: " + st.split_name);
    const auto train_rows = d.indices_of(Split::Train);
    auto table = encode_features_with(d, model.ensemble, model.raw_stats,
                                      model.cfg.uses_cross_features());
    if (table->width != model.params.input_width) {
        throw DataError("feature width does not match the trained model");
    }
    std::vector<std::uint32_t> scoring;
    for (auto r : rows) {
        if (d.split[r] != Split::Train) scoring.push_back(r);
    }
    const TransactionGraph g = build_graph(
        d, table, {model.cfg.finetune_graph, model.keys, train_rows, scoring});
    const GnnRunner runner(g, model.cfg.fanouts);

    const fs::path out(st.out_file);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    export_embeddings(out.string(), d, runner, model.params, rows, model.cfg.batch_size,
                      derive_seed(model.cfg.seed, "export_embeddings"));
    json extra;
    extra["split"] = st.split_name;
    extra["rows"] = rows.size();
    extra["dims"] = model.params.hidden;
    const fs::path manifest = out.parent_path() / (out.stem().string() + ".manifest.json");
    write_manifest(manifest, "export-embeddings", watch.seconds(), {out}, extra);
    std::printf("export-embeddings: %zu rows x %zu dims -> %s\n", rows.size(),
                model.params.hidden, out.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Customs fraud-detection pipeline (boosted cross features + "
                 "graph message passing)"};
    app.require_subcommand(1);
    CliState st;

    auto* synth = app.add_subcommand("synth", "generate a synthetic transaction CSV");
    synth->add_option("--out", st.out_file, "output CSV path")->required();
    synth->add_option("--config", st.config_path, "JSON config file");
    synth->add_option("--n", st.synth.n_transactions, "transaction count");
    synth->add_option("--importers", st.synth.n_importers);
    synth->add_option("--hs-codes", st.synth.n_hs_codes);
    synth->add_option("--base-rate", st.synth.base_illicit_rate, "population illicit rate");
    synth->add_option("--importer-effect", st.synth.importer_effect);
    synth->add_option("--hs-effect", st.synth.hs_effect);
    synth->add_option("--noise", st.synth.feature_noise);
    std::string synth_start, synth_end;
    synth->add_option("--start-date", synth_start, "ISO date");
    synth->add_option("--end-date", synth_end, "ISO date");
    synth->add_option("--seed", st.synth.seed);
    synth->callback([&] {
        if (synth->count("--start-date")) {
            st.synth.start_date = parse_config_date(synth_start, "start_date");
        }
        if (synth->count("--end-date")) {
            st.synth.end_date = parse_config_date(synth_end, "end_date");
        }
        cmd_synth(st, synth);
    });

    auto* train = app.add_subcommand("train", "train the pipeline and write a checkpoint");
    train->add_option("--data", st.data_path, "input CSV")->required();
    train->add_option("--config", st.config_path, "JSON config file");
    train->add_option("--out-dir", st.out_dir, "output directory")->required();
    add_split_options(train, st);
    add_train_options(train, st);
    train->callback([&] { cmd_train(st, train); });

    auto* eval = app.add_subcommand("eval", "score a held-out split with a checkpoint");
    eval->add_option("--data", st.data_path, "input CSV")->required();
    eval->add_option("--checkpoint", st.checkpoint_path, "checkpoint file")->required();
    eval->add_option("--out-dir", st.out_dir, "output directory")->required();
    eval->add_option("--config", st.config_path, "JSON config file");
    eval->add_option("--split", st.split_name, "test|valid (default test)");
    eval->add_option("--subset", st.subset, "full|unseen_importer|unseen_hs");
    add_split_options(eval, st);
    eval->callback([&] { cmd_eval(st, eval); });

    auto* sweep = app.add_subcommand("sweep", "label-budget sweep over rates x seeds");
    sweep->add_option("--data", st.data_path, "input CSV")->required();
    sweep->add_option("--config", st.config_path, "JSON config file");
    sweep->add_option("--out-dir", st.out_dir, "output directory")->required();
    sweep->add_option("--rates", st.rates, "inspection rates in percent")->delimiter(',');
    sweep->add_option("--seeds", st.seeds, "mask/training seeds")->delimiter(',');
    sweep->add_flag("--no-baseline", st.no_baseline, "skip the boosted-tree baseline");
    add_split_options(sweep, st);
    add_train_options(sweep, st);
    sweep->callback([&] { cmd_sweep(st, sweep); });

    auto* ablate = app.add_subcommand("ablate", "run ablation variants or the graph grid");
    ablate->add_option("--data", st.data_path, "input CSV")->required();
    ablate->add_option("--config", st.config_path, "JSON config file");
    ablate->add_option("--out-dir", st.out_dir, "output directory")->required();
    ablate->add_option("--variants", st.variants, "variant names (or 'gbdt')")->delimiter(',');
    ablate->add_option("--rate", st.rate, "inspection rate percent");
    ablate->add_option("--seeds", st.seeds, "mask/training seeds")->delimiter(',');
    ablate->add_flag("--graph-grid", st.graph_grid,
                     "run the pretrain/fine-tune graph grid instead of variants");
    add_split_options(ablate, st);
    add_train_options(ablate, st);
    ablate->callback([&] { cmd_ablate(st, ablate); });

    auto* exp = app.add_subcommand("export-embeddings",
                                   "write per-transaction embeddings as CSV");
    exp->add_option("--data", st.data_path, "input CSV")->required();
    exp->add_option("--checkpoint", st.checkpoint_path, "checkpoint file")->required();
    exp->add_option("--out", st.out_file, "output CSV path")->required();
    exp->add_option("--config", st.config_path, "JSON config file");
    exp->add_option("--split", st.split_name, "train|valid|test|all (default test)");
    add_split_options(exp, st);
    exp->callback([&] { cmd_export_embeddings(st, exp); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const InternalError& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 4;
    }
    return 0;
}
