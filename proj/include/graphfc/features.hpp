#pragma once

// Numeric feature engineering and the node-feature table consumed by the
// message-passing model (either multi-hot tree-leaf indicators or a dense
// numeric matrix).

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "graphfc/common.hpp"
#include "graphfc/data.hpp"

namespace graphfc {

struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;  // row-major

    FeatureMatrix() = default;
    FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    const double* row(std::size_t r) const { return values.data() + r * cols; }
};

// Engineered per-transaction numerics fed to the boosted trees. Ratios are the
// point: unit value and tax share carry the undervaluation signal.
inline constexpr std::array<const char*, 8> kEngineeredFeatureNames = {
    "log1p_declared_value", "log1p_quantity",    "log1p_gross_weight", "log_unit_value",
    "log1p_value_per_kg",   "tariff_rate",       "log1p_paid_tax",     "tax_per_value",
};

inline FeatureMatrix engineered_features(const Dataset& d) {
    FeatureMatrix m(d.size(), kEngineeredFeatureNames.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& r = d.records[i];
        m.at(i, 0) = std::log1p(r.declared_value);
        m.at(i, 1) = std::log1p(r.quantity);
        m.at(i, 2) = std::log1p(r.gross_weight);
        m.at(i, 3) = std::log1p(r.declared_value / r.quantity);
        m.at(i, 4) = std::log1p(r.declared_value / r.gross_weight);
        m.at(i, 5) = r.tariff_rate;
        m.at(i, 6) = std::log1p(r.paid_tax);
        m.at(i, 7) = r.paid_tax / (r.declared_value + 1.0);
    }
    return m;
}

// Raw column values (no transforms); used by the no-cross-features ablation.
inline constexpr std::array<const char*, 5> kRawFeatureNames = {
    "declared_value", "quantity", "gross_weight", "tariff_rate", "paid_tax",
};

inline FeatureMatrix raw_features(const Dataset& d) {
    FeatureMatrix m(d.size(), kRawFeatureNames.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& r = d.records[i];
        m.at(i, 0) = r.declared_value;
        m.at(i, 1) = r.quantity;
        m.at(i, 2) = r.gross_weight;
        m.at(i, 3) = r.tariff_rate;
        m.at(i, 4) = r.paid_tax;
    }
    return m;
}

struct ColumnStats {
    std::vector<double> mean;
    std::vector<double> std;
};

// Column statistics over a row subset (e.g. train rows only).
inline ColumnStats column_stats(const FeatureMatrix& m, const std::vector<std::uint32_t>& rows) {
    if (rows.empty()) throw DataError("column_stats: empty row subset");
    ColumnStats s;
    s.mean.assign(m.cols, 0.0);
    s.std.assign(m.cols, 0.0);
    for (auto r : rows) {
        for (std::size_t c = 0; c < m.cols; ++c) s.mean[c] += m.at(r, c);
    }
    for (auto& v : s.mean) v /= static_cast<double>(rows.size());
    for (auto r : rows) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            const double dlt = m.at(r, c) - s.mean[c];
            s.std[c] += dlt * dlt;
        }
    }
    for (auto& v : s.std) {
        v = std::sqrt(v / static_cast<double>(rows.size()));
        if (v == 0.0) v = 1.0;
    }
    return s;
}

inline void standardize_columns(FeatureMatrix& m, const ColumnStats& s) {
    if (s.mean.size() != m.cols) throw InternalError("standardize_columns: stats width mismatch");
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            m.at(r, c) = (m.at(r, c) - s.mean[c]) / s.std[c];
        }
    }
}

// Node features for message passing: one row per transaction, either a sparse
// multi-hot set of active indices (all-ones) or a dense numeric row. Virtual
// nodes implicitly use the zero vector of the same width.
struct FeatureTable {
    std::size_t width = 0;
    bool sparse = true;
    std::vector<std::vector<std::uint32_t>> multihot;  // if sparse
    FeatureMatrix dense;                               // if !sparse

    std::size_t rows() const { return sparse ? multihot.size() : dense.rows; }

    static FeatureTable from_multihot(std::vector<std::vector<std::uint32_t>> rows,
                                      std::size_t width) {
        FeatureTable t;
        t.width = width;
        t.sparse = true;
        t.multihot = std::move(rows);
        return t;
    }

    static FeatureTable from_dense(FeatureMatrix m) {
        FeatureTable t;
        t.width = m.cols;
        t.sparse = false;
        t.dense = std::move(m);
        return t;
    }
};

}  // namespace graphfc
