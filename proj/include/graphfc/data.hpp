#pragma once

// Transaction dataset: CSV schema, temporal train/valid/test split, label
// masking for semi-supervised runs, and unseen-key-rate bookkeeping.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "graphfc/common.hpp"

namespace graphfc {

// ---------------------------------------------------------------------------
// Records and dataset.
// ---------------------------------------------------------------------------

struct TransactionRecord {
    std::string txn_id;
    DateDays date = 0;
    std::string importer_id;
    std::string hs_code;
    double declared_value = 0.0;  // customs value, >= 0
    double quantity = 0.0;        // > 0
    double gross_weight = 0.0;    // kg, > 0
    double tariff_rate = 0.0;     // in [0, 1]
    double paid_tax = 0.0;        // >= 0

    // Ground-truth inspection outcome; absent for never-inspected rows.
    bool has_outcome = false;
    bool illicit = false;
    double raised_revenue = 0.0;  // additional duty collected; 0 for licit rows
};

enum class Split : std::uint8_t { None = 0, Train, Valid, Test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Valid: return "valid";
        case Split::Test: return "test";
        default: return "none";
    }
}

// Ordered record list plus split tags and the label mask that controls which
// ground-truth outcomes are visible to training.
struct Dataset {
    std::vector<TransactionRecord> records;
    std::vector<Split> split;           // per record
    std::vector<std::uint8_t> labeled;  // per record: outcome visible to training

    std::size_t size() const { return records.size(); }

    void reset_tags() {
        split.assign(records.size(), Split::None);
        labeled.assign(records.size(), 0);
    }

    std::vector<std::uint32_t> indices_of(Split s) const {
        std::vector<std::uint32_t> out;
        for (std::uint32_t i = 0; i < records.size(); ++i) {
            if (split[i] == s) out.push_back(i);
        }
        return out;
    }

    std::size_t count_of(Split s) const {
        std::size_t n = 0;
        for (auto t : split) {
            if (t == s) ++n;
        }
        return n;
    }

    bool is_labeled(std::size_t i) const { return labeled[i] != 0; }
};

// ---------------------------------------------------------------------------
// CSV schema (fixed, comma-separated, no quoting):
//   txn_id,date,importer_id,hs_code,declared_value,quantity,gross_weight,
//   tariff_rate,paid_tax,illicit,raised_revenue
// `illicit`/`raised_revenue` are empty strings when the outcome is unknown.
// ---------------------------------------------------------------------------

inline constexpr const char* kCsvHeader =
    "txn_id,date,importer_id,hs_code,declared_value,quantity,gross_weight,"
    "tariff_rate,paid_tax,illicit,raised_revenue";

namespace detail {

inline void split_fields(std::string_view line, std::vector<std::string_view>& out) {
    out.clear();
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(start));
            return;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

inline double parse_double_field(std::string_view s, const char* col, std::size_t line_no) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || s.empty()) {
        throw DataError("line " + std::to_string(line_no) + ": column '" + col +
                        "' is not a number: '" + std::string(s) + "'");
    }
    return v;
}

}  // namespace detail

// Loads and validates a CSV file. Throws DataError naming the offending line.
inline Dataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open CSV file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kCsvHeader) {
        throw DataError(path + ": header does not match expected schema; got '" + line + "'");
    }

    Dataset d;
    std::unordered_set<std::string> seen_ids;
    std::vector<std::string_view> f;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        detail::split_fields(line, f);
        if (f.size() != 11) {
            throw DataError("line " + std::to_string(line_no) + ": expected 11 columns, got " +
                            std::to_string(f.size()));
        }
        TransactionRecord r;
        r.txn_id = std::string(f[0]);
        if (r.txn_id.empty()) {
            throw DataError("line " + std::to_string(line_no) + ": empty txn_id");
        }
        if (!seen_ids.insert(r.txn_id).second) {
            throw DataError("line " + std::to_string(line_no) + ": duplicate txn_id '" +
                            r.txn_id + "'");
        }
        try {
            r.date = parse_iso_date(f[1]);
        } catch (const DataError& e) {
            throw DataError("line " + std::to_string(line_no) + ": " + e.what());
        }
        r.importer_id = std::string(f[2]);
        r.hs_code = std::string(f[3]);
        if (r.importer_id.empty() || r.hs_code.empty()) {
            throw DataError("line " + std::to_string(line_no) +
                            ": importer_id and hs_code must be non-empty");
        }
        r.declared_value = detail::parse_double_field(f[4], "declared_value", line_no);
        r.quantity = detail::parse_double_field(f[5], "quantity", line_no);
        r.gross_weight = detail::parse_double_field(f[6], "gross_weight", line_no);
        r.tariff_rate = detail::parse_double_field(f[7], "tariff_rate", line_no);
        r.paid_tax = detail::parse_double_field(f[8], "paid_tax", line_no);
        if (r.declared_value < 0.0) {
            throw DataError("line " + std::to_string(line_no) + ": declared_value must be >= 0");
        }
        if (!(r.quantity > 0.0)) {
            throw DataError("line " + std::to_string(line_no) + ": quantity must be > 0");
        }
        if (!(r.gross_weight > 0.0)) {
            throw DataError("line " + std::to_string(line_no) + ": gross_weight must be > 0");
        }
        if (r.tariff_rate < 0.0 || r.tariff_rate > 1.0) {
            throw DataError("line " + std::to_string(line_no) + ": tariff_rate must be in [0,1]");
        }
        if (r.paid_tax < 0.0) {
            throw DataError("line " + std::to_string(line_no) + ": paid_tax must be >= 0");
        }

        const bool has_illicit = !f[9].empty();
        const bool has_revenue = !f[10].empty();
        if (has_illicit != has_revenue) {
            throw DataError("line " + std::to_string(line_no) +
                            ": illicit and raised_revenue must be both present or both empty");
        }
        if (has_illicit) {
            if (f[9] == "1" || f[9] == "true") {
                r.illicit = true;
            } else if (f[9] == "0" || f[9] == "false") {
                r.illicit = false;
            } else {
                throw DataError("line " + std::to_string(line_no) + ": illicit must be 0/1, got '" +
                                std::string(f[9]) + "'");
            }
            r.raised_revenue = detail::parse_double_field(f[10], "raised_revenue", line_no);
            if (r.raised_revenue < 0.0) {
                throw DataError("line " + std::to_string(line_no) +
                                ": raised_revenue must be >= 0");
            }
            if (!r.illicit && r.raised_revenue != 0.0) {
                throw DataError("line " + std::to_string(line_no) +
                                ": licit row must have raised_revenue == 0");
            }
            r.has_outcome = true;
        }
        d.records.push_back(std::move(r));
    }
    d.reset_tags();
    return d;
}

inline void save_csv(const Dataset& d, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open CSV file for writing: " + path);
    out << kCsvHeader << "\n";
    for (const auto& r : d.records) {
        out << r.txn_id << ',' << format_iso_date(r.date) << ',' << r.importer_id << ','
            << r.hs_code << ',' << format_double_exact(r.declared_value) << ','
            << format_double_exact(r.quantity) << ',' << format_double_exact(r.gross_weight)
            << ',' << format_double_exact(r.tariff_rate) << ','
            << format_double_exact(r.paid_tax) << ',';
        if (r.has_outcome) {
            out << (r.illicit ? '1' : '0') << ',' << format_double_exact(r.raised_revenue);
        } else {
            out << ',';
        }
        out << "\n";
    }
    if (!out) throw DataError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Temporal split: test = records dated >= test_from; the latest
// valid_fraction of the remainder becomes validation. Date ties are broken by
// ascending txn_id so the split is total-order deterministic.
// ---------------------------------------------------------------------------

inline void temporal_split(Dataset& d, DateDays test_from, double valid_fraction) {
    if (valid_fraction <= 0.0 || valid_fraction >= 1.0) {
        throw ConfigError("valid_fraction must be in (0, 1)");
    }
    if (d.records.empty()) throw DataError("temporal_split: empty dataset");
    d.reset_tags();

    std::vector<std::uint32_t> pre;  // records before the test period
    for (std::uint32_t i = 0; i < d.records.size(); ++i) {
        if (d.records[i].date >= test_from) {
            d.split[i] = Split::Test;
        } else {
            pre.push_back(i);
        }
    }
    if (pre.empty()) throw DataError("temporal_split: no records before test_from");
    if (pre.size() == d.records.size()) {
        throw DataError("temporal_split: no records on or after test_from");
    }

    std::sort(pre.begin(), pre.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (d.records[a].date != d.records[b].date) return d.records[a].date < d.records[b].date;
        return d.records[a].txn_id < d.records[b].txn_id;
    });
    const auto n_valid =
        static_cast<std::size_t>(round_half_up(valid_fraction * static_cast<double>(pre.size())));
    if (n_valid == 0) throw DataError("temporal_split: validation split is empty");
    if (n_valid >= pre.size()) throw DataError("temporal_split: validation would swallow train");
    const std::size_t n_train = pre.size() - n_valid;
    for (std::size_t k = 0; k < pre.size(); ++k) {
        d.split[pre[k]] = (k < n_train) ? Split::Train : Split::Valid;
    }
}

// ---------------------------------------------------------------------------
// Label masking: keep exactly round(rate * |train|) train outcomes visible,
// chosen uniformly without replacement; validation rows stay fully labeled.
// Idempotent for a fixed (dataset, rate, seed).
// ---------------------------------------------------------------------------

inline void mask_labels(Dataset& d, double inspection_rate, std::uint64_t seed) {
    if (inspection_rate <= 0.0 || inspection_rate > 1.0) {
        throw ConfigError("inspection_rate must be in (0, 1]");
    }
    std::vector<std::uint32_t> train;
    for (std::uint32_t i = 0; i < d.records.size(); ++i) {
        d.labeled[i] = 0;
        if (d.split[i] == Split::Train) train.push_back(i);
        if (d.split[i] == Split::Valid) {
            if (!d.records[i].has_outcome) {
                throw DataError("validation record without ground-truth outcome: " +
                                d.records[i].txn_id);
            }
            d.labeled[i] = 1;
        }
    }
    const auto n_keep = static_cast<std::size_t>(
        round_half_up(inspection_rate * static_cast<double>(train.size())));
    if (n_keep == 0) throw DataError("mask_labels: zero labeled records after rounding");

    // Canonical candidate order: ascending txn_id, so masking is invariant to
    // record-file permutation.
    std::sort(train.begin(), train.end(), [&](std::uint32_t a, std::uint32_t b) {
        return d.records[a].txn_id < d.records[b].txn_id;
    });
    Rng rng(derive_seed(seed, "mask_labels"));
    const auto chosen = rng.sample_without_replacement(train.size(), n_keep);
    for (auto k : chosen) {
        const std::uint32_t i = train[k];
        if (!d.records[i].has_outcome) {
            throw DataError("train record selected for labeling lacks ground truth: " +
                            d.records[i].txn_id);
        }
        d.labeled[i] = 1;
    }
}

// ---------------------------------------------------------------------------
// Unseen-key rate: fraction of unique test key values (importer or HS code)
// never seen among labeled train records.
// ---------------------------------------------------------------------------

enum class KeyKind : std::uint8_t { Importer = 0, HsCode = 1 };

inline const char* key_kind_name(KeyKind k) {
    return k == KeyKind::Importer ? "importer" : "hs_code";
}

inline const std::string& record_key(const TransactionRecord& r, KeyKind k) {
    return k == KeyKind::Importer ? r.importer_id : r.hs_code;
}

struct OsrSummary {
    std::size_t seen = 0;    // unique test keys covered by labeled train rows
    std::size_t unseen = 0;  // unique test keys with no labeled train coverage
    double rate() const {
        const std::size_t total = seen + unseen;
        return total == 0 ? 0.0 : static_cast<double>(unseen) / static_cast<double>(total);
    }
};

inline OsrSummary compute_osr(const Dataset& d, KeyKind key) {
    std::unordered_set<std::string> labeled_train_keys;
    for (std::size_t i = 0; i < d.records.size(); ++i) {
        if (d.split[i] == Split::Train && d.is_labeled(i)) {
            labeled_train_keys.insert(record_key(d.records[i], key));
        }
    }
    std::unordered_set<std::string> test_keys;
    for (std::size_t i = 0; i < d.records.size(); ++i) {
        if (d.split[i] == Split::Test) test_keys.insert(record_key(d.records[i], key));
    }
    OsrSummary s;
    for (const auto& k : test_keys) {
        if (labeled_train_keys.count(k)) {
            ++s.seen;
        } else {
            ++s.unseen;
        }
    }
    return s;
}

// Rewrites the label mask so the test-period unseen-key rate lands within one
// key value of `target_osr`: a seeded choice of (1 - target) of the unique
// test keys gets all of its train transactions labeled; everything else is
// hidden. Validation stays fully labeled.
inline void select_osr_subset(Dataset& d, KeyKind key, double target_osr, std::uint64_t seed) {
    if (target_osr < 0.0 || target_osr > 1.0) {
        throw ConfigError("target_osr must be in [0, 1]");
    }
    std::set<std::string> test_keys;  // ordered for deterministic indexing
    std::unordered_set<std::string> train_keys;
    for (std::size_t i = 0; i < d.records.size(); ++i) {
        if (d.split[i] == Split::Test) test_keys.insert(record_key(d.records[i], key));
        if (d.split[i] == Split::Train) train_keys.insert(record_key(d.records[i], key));
    }
    if (test_keys.empty()) throw DataError("select_osr_subset: no test records");

    std::vector<const std::string*> coverable;  // test keys that exist in train
    for (const auto& k : test_keys) {
        if (train_keys.count(k)) coverable.push_back(&k);
    }
    const auto want_seen = static_cast<std::size_t>(
        round_half_up((1.0 - target_osr) * static_cast<double>(test_keys.size())));
    if (want_seen > coverable.size()) {
        throw DataError("select_osr_subset: target_osr " + std::to_string(target_osr) +
                        " unreachable; only " + std::to_string(coverable.size()) + " of " +
                        std::to_string(test_keys.size()) + " test keys appear in train");
    }

    Rng rng(derive_seed(seed, "select_osr_subset", {static_cast<std::uint64_t>(key)}));
    const auto pick = rng.sample_without_replacement(coverable.size(), want_seen);
    std::unordered_set<std::string> seen_keys;
    for (auto k : pick) seen_keys.insert(*coverable[k]);

    for (std::size_t i = 0; i < d.records.size(); ++i) {
        if (d.split[i] == Split::Train) {
            const bool keep = seen_keys.count(record_key(d.records[i], key)) > 0;
            if (keep && !d.records[i].has_outcome) {
                throw DataError("train record selected for labeling lacks ground truth: " +
                                d.records[i].txn_id);
            }
            d.labeled[i] = keep ? 1 : 0;
        } else if (d.split[i] == Split::Valid) {
            if (!d.records[i].has_outcome) {
                throw DataError("validation record without ground-truth outcome: " +
                                d.records[i].txn_id);
            }
            d.labeled[i] = 1;
        } else {
            d.labeled[i] = 0;
        }
    }
}

}  // namespace graphfc
