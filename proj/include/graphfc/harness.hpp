#pragma once

// Multi-run experiment drivers: inspection-rate sweeps, ablation batteries,
// and the pretrain/fine-tune graph grid. Every cell trains on a freshly
// masked copy of the dataset; per-cell failures are captured in the results
// table instead of aborting the whole batch.

#include <cstdint>
#include <exception>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "graphfc/common.hpp"
#include "graphfc/data.hpp"
#include "graphfc/eval.hpp"
#include "graphfc/training.hpp"

namespace graphfc {

inline constexpr const char* kGbdtBaselineTag = "gbdt";

struct RunCell {
    std::string kind;     // "sweep" | "ablate" | "graph_grid"
    std::string variant;  // pipeline variant name or "gbdt"
    std::string pretrain_graph;
    std::string finetune_graph;
    double inspection_percent = 0.0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    EvalReport report;  // valid only when ok
};

namespace harness_detail {

inline std::string csv_safe(std::string s) {
    for (char& c : s) {
        if (c == ',' ) c = ';';
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

inline RunCell execute_cell(const Dataset& base, TrainConfig cfg, const char* kind,
                            const std::string& variant_tag, double rate_percent,
                            std::uint64_t seed) {
    RunCell cell;
    cell.kind = kind;
    cell.variant = variant_tag;
    cell.inspection_percent = rate_percent;
    cell.seed = seed;
    cell.pretrain_graph = graph_variant_name(cfg.pretrain_graph);
    cell.finetune_graph = graph_variant_name(cfg.finetune_graph);
    try {
        if (rate_percent <= 0.0 || rate_percent > 100.0) {
            throw ConfigError("inspection rate percent must be in (0, 100]");
        }
        Dataset d = base;
        mask_labels(d, rate_percent / 100.0, seed);
        if (variant_tag == kGbdtBaselineTag) {
            const auto scored = run_gbdt_baseline(d, cfg.gbdt);
            cell.report = build_eval_report(scored, cfg.eval_percents, RankingKey::Cls,
                                            kGbdtBaselineTag, seed);
            cell.report.osr_importer = osr_row(compute_osr(d, KeyKind::Importer));
            cell.report.osr_hs = osr_row(compute_osr(d, KeyKind::HsCode));
        } else {
            cfg.variant = pipeline_variant_from_name(variant_tag);
            cfg.seed = seed;
            cell.report = run_pipeline(d, cfg).report;
        }
        cell.ok = true;
    } catch (const std::exception& e) {
        cell.error = e.what();
    }
    return cell;
}

}  // namespace harness_detail

// Label-budget sweep: the primary model (and optionally the boosted-tree
// baseline) at every (inspection rate, seed) combination.
inline std::vector<RunCell> run_sweep(const Dataset& base, const TrainConfig& cfg,
                                      const std::vector<double>& rate_percents,
                                      const std::vector<std::uint64_t>& seeds,
                                      bool include_baseline) {
    if (rate_percents.empty()) throw ConfigError("sweep needs at least one inspection rate");
    if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
    std::vector<RunCell> out;
    for (double rate : rate_percents) {
        for (auto seed : seeds) {
            out.push_back(harness_detail::execute_cell(
                base, cfg, "sweep", pipeline_variant_name(cfg.variant), rate, seed));
            if (include_baseline) {
                out.push_back(harness_detail::execute_cell(base, cfg, "sweep",
                                                           kGbdtBaselineTag, rate, seed));
            }
        }
    }
    return out;
}

// Ablation battery: each named variant (plus "gbdt") at one inspection rate.
inline std::vector<RunCell> run_ablations(const Dataset& base, const TrainConfig& cfg,
                                          const std::vector<std::string>& variants,
                                          double rate_percent,
                                          const std::vector<std::uint64_t>& seeds) {
    if (variants.empty()) throw ConfigError("ablation needs at least one variant");
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    std::vector<RunCell> out;
    for (const auto& v : variants) {
        if (v != kGbdtBaselineTag) pipeline_variant_from_name(v);  // validate early
        for (auto seed : seeds) {
            out.push_back(
                harness_detail::execute_cell(base, cfg, "ablate", v, rate_percent, seed));
        }
    }
    return out;
}

// All six (pretraining graph, fine-tuning graph) combinations: pretraining on
// labeled-only / unlabeled-only / full, fine-tuning on labeled-only / full.
inline std::vector<RunCell> run_graph_grid(const Dataset& base, const TrainConfig& cfg,
                                           double rate_percent,
                                           const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ConfigError("graph grid needs at least one seed");
    static constexpr GraphVariant kPre[] = {GraphVariant::LabeledOnly,
                                            GraphVariant::UnlabeledOnly, GraphVariant::Full};
    static constexpr GraphVariant kFin[] = {GraphVariant::LabeledOnly, GraphVariant::Full};
    std::vector<RunCell> out;
    for (auto fin : kFin) {
        for (auto pre : kPre) {
            TrainConfig c = cfg;
            c.pretrain_graph = pre;
            c.finetune_graph = fin;
            for (auto seed : seeds) {
                out.push_back(harness_detail::execute_cell(
                    base, c, "graph_grid", pipeline_variant_name(c.variant), rate_percent,
                    seed));
            }
        }
    }
    return out;
}

inline constexpr const char* kCellCsvHeader =
    "kind,variant,pretrain_graph,finetune_graph,inspection_percent,seed,status,error,"
    "subset,ranking_key,n_percent,k,precision,recall,revenue_ratio,no_positives,no_revenue";

inline std::string cells_to_csv(const std::vector<RunCell>& cells) {
    std::string out = kCellCsvHeader;
    out += '\n';
    for (const auto& c : cells) {
        const std::string prefix = c.kind + "," + c.variant + "," + c.pretrain_graph + "," +
                                   c.finetune_graph + "," +
                                   format_double_exact(c.inspection_percent) + "," +
                                   std::to_string(c.seed) + ",";
        if (!c.ok) {
            out += prefix + "error," + harness_detail::csv_safe(c.error) + ",,,,,,,,,\n";
            continue;
        }
        for (const auto& m : c.report.metrics) {
            out += prefix + "ok,," + c.report.subset + "," + c.report.ranking_key + "," +
                   format_double_exact(m.n_percent) + "," + std::to_string(m.k) + "," +
                   format_double_exact(m.precision) + "," + format_double_exact(m.recall) +
                   "," + format_double_exact(m.revenue_ratio) + "," +
                   (m.no_positives ? "1" : "0") + "," + (m.no_revenue ? "1" : "0") + "\n";
        }
    }
    return out;
}

// Restrict scored transactions to those whose key value never appears among
// labeled train rows (the inductive slice of the test period).
inline std::vector<ScoredTransaction> unseen_key_subset(
    const Dataset& d, KeyKind key, const std::vector<ScoredTransaction>& scored) {
    std::unordered_set<std::string> seen_keys;
    for (std::size_t i = 0; i < d.records.size(); ++i) {
        if (d.split[i] == Split::Train && d.is_labeled(i)) {
            seen_keys.insert(record_key(d.records[i], key));
        }
    }
    std::unordered_map<std::string, std::uint32_t> row_of;
    for (std::uint32_t i = 0; i < d.records.size(); ++i) row_of.emplace(d.records[i].txn_id, i);
    std::vector<ScoredTransaction> out;
    for (const auto& s : scored) {
        const auto it = row_of.find(s.txn_id);
        if (it == row_of.end()) throw InternalError("unseen_key_subset: unknown txn_id");
        if (!seen_keys.count(record_key(d.records[it->second], key))) out.push_back(s);
    }
    return out;
}

}  // namespace graphfc
