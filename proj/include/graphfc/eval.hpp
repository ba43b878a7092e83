#pragma once

// Inspection-style evaluation: rank scored transactions, inspect the top n%,
// and report precision / recall / recovered-revenue share at each cut, plus
// unseen-key summaries. Reports serialize to canonical JSON (volatile fields
// like runtimes are excluded; they belong in the run manifest) and to a flat
// CSV with one row per (variant, n, seed).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "graphfc/common.hpp"
#include "graphfc/data.hpp"

namespace graphfc {

enum class RankingKey : std::uint8_t { Cls = 0, Rev = 1, Combined = 2 };

inline const char* ranking_key_name(RankingKey k) {
    switch (k) {
        case RankingKey::Cls: return "cls";
        case RankingKey::Rev: return "rev";
        case RankingKey::Combined: return "combined";
    }
    return "?";
}

inline RankingKey ranking_key_from_name(const std::string& s) {
    if (s == "cls") return RankingKey::Cls;
    if (s == "rev") return RankingKey::Rev;
    if (s == "combined") return RankingKey::Combined;
    throw ConfigError("unknown ranking key: '" + s + "'");
}

struct ScoredTransaction {
    std::string txn_id;
    bool illicit = false;          // ground truth
    double raised_revenue = 0.0;   // ground-truth surcharge
    double y_cls = 0.0;            // predicted illicit probability
    double y_rev = 0.0;            // predicted surcharge (de-standardized)
};

inline double ranking_value(const ScoredTransaction& s, RankingKey key) {
    switch (key) {
        case RankingKey::Cls: return s.y_cls;
        case RankingKey::Rev: return s.y_rev;
        case RankingKey::Combined: return s.y_cls * std::max(s.y_rev, 0.0);
    }
    return 0.0;
}

// Descending by key value; ties broken by ascending txn_id so orderings are
// total and reproducible.
inline std::vector<ScoredTransaction> rank(std::vector<ScoredTransaction> scored,
                                           RankingKey key) {
    std::sort(scored.begin(), scored.end(),
              [key](const ScoredTransaction& a, const ScoredTransaction& b) {
                  const double va = ranking_value(a, key);
                  const double vb = ranking_value(b, key);
                  if (va != vb) return va > vb;
                  return a.txn_id < b.txn_id;
              });
    return scored;
}

inline std::size_t inspect_count(std::size_t n_total, double percent) {
    if (percent <= 0.0 || percent > 100.0) {
        throw ConfigError("inspection percent must be in (0, 100]");
    }
    return static_cast<std::size_t>(
        std::ceil(static_cast<double>(n_total) * percent / 100.0));
}

struct MetricRow {
    double n_percent = 0.0;
    std::size_t k = 0;            // inspected count
    double precision = 0.0;
    double recall = 0.0;
    double revenue_ratio = 0.0;
    bool no_positives = false;    // ground truth had zero illicit rows
    bool no_revenue = false;      // ground truth had zero total surcharge
};

// Precision and recall over the top n% of an already-ranked list.
inline MetricRow precision_recall_at(const std::vector<ScoredTransaction>& ranked,
                                     double percent) {
    if (ranked.empty()) throw DataError("precision_recall_at: empty ranking");
    MetricRow row;
    row.n_percent = percent;
    row.k = inspect_count(ranked.size(), percent);
    std::size_t tp = 0, positives = 0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (ranked[i].illicit) {
            ++positives;
            if (i < row.k) ++tp;
        }
    }
    row.precision = static_cast<double>(tp) / static_cast<double>(row.k);
    if (positives == 0) {
        row.no_positives = true;
        row.recall = 0.0;
    } else {
        row.recall = static_cast<double>(tp) / static_cast<double>(positives);
    }
    return row;
}

// Share of total recoverable surcharge captured by inspecting the top n%.
inline MetricRow revenue_at(const std::vector<ScoredTransaction>& ranked, double percent) {
    if (ranked.empty()) throw DataError("revenue_at: empty ranking");
    MetricRow row;
    row.n_percent = percent;
    row.k = inspect_count(ranked.size(), percent);
    double captured = 0.0, total = 0.0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (!ranked[i].illicit) continue;
        total += ranked[i].raised_revenue;
        if (i < row.k) captured += ranked[i].raised_revenue;
    }
    if (total == 0.0) {
        row.no_revenue = true;
        row.revenue_ratio = 0.0;
    } else {
        row.revenue_ratio = captured / total;
    }
    return row;
}

struct OsrRow {
    std::size_t seen = 0;
    std::size_t unseen = 0;
    double rate = 0.0;
};

inline OsrRow osr_row(const OsrSummary& s) { return {s.seen, s.unseen, s.rate()}; }

struct EvalReport {
    std::string variant;       // pipeline variant or baseline tag
    std::string subset = "test";
    std::string ranking_key = "cls";
    std::uint64_t seed = 0;
    std::size_t n_scored = 0;
    std::vector<MetricRow> metrics;
    OsrRow osr_importer;
    OsrRow osr_hs;
    bool divergence_flag = false;   // pretraining loss failed to decrease
    double runtime_seconds = 0.0;   // volatile; manifest-only
};

inline EvalReport build_eval_report(const std::vector<ScoredTransaction>& scored,
                                    const std::vector<double>& percents, RankingKey key,
                                    std::string variant, std::uint64_t seed) {
    EvalReport rep;
    rep.variant = std::move(variant);
    rep.ranking_key = ranking_key_name(key);
    rep.seed = seed;
    rep.n_scored = scored.size();
    const auto ranked = rank(scored, key);
    for (double p : percents) {
        MetricRow row = precision_recall_at(ranked, p);
        const MetricRow rev = revenue_at(ranked, p);
        row.revenue_ratio = rev.revenue_ratio;
        row.no_revenue = rev.no_revenue;
        rep.metrics.push_back(row);
    }
    return rep;
}

inline double metric_at(const EvalReport& rep, double percent, const char* which) {
    for (const auto& m : rep.metrics) {
        if (m.n_percent == percent) {
            if (std::string_view(which) == "precision") return m.precision;
            if (std::string_view(which) == "recall") return m.recall;
            if (std::string_view(which) == "revenue") return m.revenue_ratio;
            throw InternalError("metric_at: unknown metric name");
        }
    }
    throw InternalError("metric_at: percent not present in report");
}

// Canonical JSON (no volatile fields) — byte-stable for identical runs.
inline nlohmann::json report_to_json(const EvalReport& rep) {
    nlohmann::json j;
    j["format"] = "eval-report";
    j["version"] = 1;
    j["variant"] = rep.variant;
    j["subset"] = rep.subset;
    j["ranking_key"] = rep.ranking_key;
    j["seed"] = rep.seed;
    j["n_scored"] = rep.n_scored;
    j["divergence_flag"] = rep.divergence_flag;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& m : rep.metrics) {
        rows.push_back({{"n_percent", m.n_percent},
                        {"k", m.k},
                        {"precision", m.precision},
                        {"recall", m.recall},
                        {"revenue_ratio", m.revenue_ratio},
                        {"no_positives", m.no_positives},
                        {"no_revenue", m.no_revenue}});
    }
    j["metrics"] = std::move(rows);
    j["osr"] = {{"importer",
                 {{"seen", rep.osr_importer.seen},
                  {"unseen", rep.osr_importer.unseen},
                  {"rate", rep.osr_importer.rate}}},
                {"hs_code",
                 {{"seen", rep.osr_hs.seen},
                  {"unseen", rep.osr_hs.unseen},
                  {"rate", rep.osr_hs.rate}}}};
    return j;
}

inline constexpr const char* kReportCsvHeader =
    "variant,subset,ranking_key,seed,n_percent,k,precision,recall,revenue_ratio,"
    "no_positives,no_revenue";

inline void append_report_csv_rows(const EvalReport& rep, std::string& out) {
    for (const auto& m : rep.metrics) {
        out += rep.variant;
        out += ',';
        out += rep.subset;
        out += ',';
        out += rep.ranking_key;
        out += ',';
        out += std::to_string(rep.seed);
        out += ',';
        out += format_double_exact(m.n_percent);
        out += ',';
        out += std::to_string(m.k);
        out += ',';
        out += format_double_exact(m.precision);
        out += ',';
        out += format_double_exact(m.recall);
        out += ',';
        out += format_double_exact(m.revenue_ratio);
        out += ',';
        out += (m.no_positives ? '1' : '0');
        out += ',';
        out += (m.no_revenue ? '1' : '0');
        out += '\n';
    }
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << content;
    if (!out) throw DataError("write failed: " + path);
}

}  // namespace graphfc
