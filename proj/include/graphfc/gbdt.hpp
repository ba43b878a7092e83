#pragma once

// Gradient-boosted decision trees with second-order logistic boosting and
// exact greedy splits, plus the leaf-indicator ("cross feature") encoding
// that turns a fitted ensemble into sparse multi-hot node features.
//
// Determinism contract: candidate splits are scanned feature-ascending then
// threshold-ascending and replaced only on strictly larger gain, so gain ties
// resolve to the lowest feature index, then the lowest threshold. Rows with
// missing (NaN) values route left. A row value equal to the threshold routes
// right (split predicate is `x < threshold`).

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "graphfc/common.hpp"
#include "graphfc/features.hpp"

namespace graphfc {

struct GbdtConfig {
    std::size_t n_trees = 100;
    std::size_t max_depth = 4;
    double learning_rate = 0.3;
    double lambda_leaf = 1.0;      // L2 on leaf weights
    double min_child_weight = 1.0; // minimum hessian mass per child
    double base_score = 0.0;       // initial raw (pre-sigmoid) prediction
};

struct TreeNode {
    // feature >= 0: internal split node; feature == -1: leaf.
    std::int32_t feature = -1;
    double threshold = 0.0;
    std::uint32_t left = 0;
    std::uint32_t right = 0;
    double leaf_value = 0.0;
    std::uint32_t leaf_index = 0;  // global index across the whole ensemble

    bool is_leaf() const { return feature < 0; }
};

struct DecisionTree {
    std::vector<TreeNode> nodes;  // preorder; nodes[0] is the root

    // Index of the leaf node this row lands in.
    std::uint32_t route(const double* row) const {
        std::uint32_t at = 0;
        while (!nodes[at].is_leaf()) {
            const double x = row[nodes[at].feature];
            at = (std::isnan(x) || x < nodes[at].threshold) ? nodes[at].left : nodes[at].right;
        }
        return at;
    }
};

struct TreeEnsemble {
    GbdtConfig config;
    std::vector<DecisionTree> trees;
    std::size_t total_leaves = 0;  // global multi-hot width W

    double raw_score(const double* row) const {
        double raw = config.base_score;
        for (const auto& t : trees) raw += config.learning_rate * t.nodes[t.route(row)].leaf_value;
        return raw;
    }

    // Illicit probability for one feature row.
    double score(const double* row) const { return sigmoid(raw_score(row)); }
};

// Sparse multi-hot cross features: per row, the global leaf indices activated
// by the ensemble (exactly one per tree), ascending.
struct CrossFeatureMatrix {
    std::size_t n_rows = 0;
    std::size_t width = 0;  // == ensemble.total_leaves
    std::vector<std::vector<std::uint32_t>> indices;
};

namespace gbdt_detail {

struct SplitChoice {
    bool found = false;
    std::int32_t feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

inline double leaf_weight(double g_sum, double h_sum, double lambda) {
    return -g_sum / (h_sum + lambda);
}

inline double score_part(double g_sum, double h_sum, double lambda) {
    return (g_sum * g_sum) / (h_sum + lambda);
}

struct TreeBuilder {
    const FeatureMatrix& x;
    const std::vector<double>& grad;
    const std::vector<double>& hess;
    const GbdtConfig& cfg;
    DecisionTree tree;

    // Gain of one candidate computed the canonical way: direct accumulation
    // of both children's sums in node row order. Distinct candidates that
    // induce the same row partition have mathematically equal gains; this
    // evaluation makes them bit-equal too, so the "lowest feature index, then
    // lowest threshold" tie rule is exact rather than at the mercy of
    // prefix-scan rounding.
    double canonical_gain(const std::vector<std::uint32_t>& rows, std::size_t f, double thr,
                          double parent_score) const {
        double g_left = 0.0, h_left = 0.0, g_right = 0.0, h_right = 0.0;
        for (auto r : rows) {
            const double v = x.at(r, f);
            if (std::isnan(v) || v < thr) {
                g_left += grad[r];
                h_left += hess[r];
            } else {
                g_right += grad[r];
                h_right += hess[r];
            }
        }
        if (h_left < cfg.min_child_weight || h_right < cfg.min_child_weight) {
            return -std::numeric_limits<double>::infinity();
        }
        return 0.5 * (score_part(g_left, h_left, cfg.lambda_leaf) +
                      score_part(g_right, h_right, cfg.lambda_leaf) - parent_score);
    }

    SplitChoice best_split(const std::vector<std::uint32_t>& rows) const {
        double g_total = 0.0, h_total = 0.0;
        for (auto r : rows) {
            g_total += grad[r];
            h_total += hess[r];
        }
        const double parent_score = score_part(g_total, h_total, cfg.lambda_leaf);

        // Pass 1: fast prefix-scan pass to bracket the best gain. Candidates
        // whose child hessian mass sits within `slack` of min_child_weight
        // cannot be classified by prefix-scan rounding; they are passed
        // through for canonical adjudication but do not raise the bracket.
        const double slack = 1e-9 * std::max(1.0, h_total);
        double best_fast = 0.0;
        std::vector<std::pair<double, std::uint32_t>> order;
        order.reserve(rows.size());
        auto scan = [&](auto&& visit) {
            for (std::size_t f = 0; f < x.cols; ++f) {
                order.clear();
                double g_missing = 0.0, h_missing = 0.0;
                for (auto r : rows) {
                    const double v = x.at(r, f);
                    if (std::isnan(v)) {
                        g_missing += grad[r];  // missing values always route left
                        h_missing += hess[r];
                    } else {
                        order.emplace_back(v, r);
                    }
                }
                if (order.size() < 2) continue;
                std::sort(order.begin(), order.end(),
                          [](const auto& a, const auto& b) { return a.first < b.first; });

                double g_left = g_missing, h_left = h_missing;
                for (std::size_t k = 0; k + 1 < order.size(); ++k) {
                    g_left += grad[order[k].second];
                    h_left += hess[order[k].second];
                    if (order[k].first == order[k + 1].first) continue;  // not a boundary
                    const double g_right = g_total - g_left;
                    const double h_right = h_total - h_left;
                    const double margin =
                        std::min(h_left, h_right) - cfg.min_child_weight;
                    if (margin < -slack) continue;  // clearly below the mass floor
                    const double gain = 0.5 * (score_part(g_left, h_left, cfg.lambda_leaf) +
                                               score_part(g_right, h_right, cfg.lambda_leaf) -
                                               parent_score);
                    visit(f, 0.5 * (order[k].first + order[k + 1].first), gain,
                          margin > slack);
                }
            }
        };
        scan([&](std::size_t, double, double gain, bool clearly_legal) {
            if (clearly_legal) best_fast = std::max(best_fast, gain);
        });

        // Pass 2: every candidate within rounding reach of the bracket (or
        // with a borderline mass margin) is re-evaluated canonically; scan
        // order makes strict ">" keep the lowest feature index, then the
        // lowest threshold, on exact gain ties.
        const double cutoff = best_fast - 1e-9 * std::max(1.0, std::fabs(best_fast));
        SplitChoice best;
        best.gain = 0.0;
        scan([&](std::size_t f, double thr, double gain, bool clearly_legal) {
            if (clearly_legal && gain < cutoff) return;
            const double exact = canonical_gain(rows, f, thr, parent_score);
            if (exact > best.gain) {
                best.found = true;
                best.feature = static_cast<std::int32_t>(f);
                best.threshold = thr;
                best.gain = exact;
            }
        });
        return best;
    }

    // Appends the subtree for `rows` in preorder; returns its node index.
    std::uint32_t build(const std::vector<std::uint32_t>& rows, std::size_t depth) {
        const auto at = static_cast<std::uint32_t>(tree.nodes.size());
        tree.nodes.emplace_back();

        SplitChoice split;
        if (depth < cfg.max_depth && rows.size() >= 2) split = best_split(rows);
        if (!split.found) {
            double g = 0.0, h = 0.0;
            for (auto r : rows) {
                g += grad[r];
                h += hess[r];
            }
            tree.nodes[at].feature = -1;
            tree.nodes[at].leaf_value = leaf_weight(g, h, cfg.lambda_leaf);
            return at;
        }

        std::vector<std::uint32_t> left_rows, right_rows;
        for (auto r : rows) {
            const double v = x.at(r, static_cast<std::size_t>(split.feature));
            if (std::isnan(v) || v < split.threshold) {
                left_rows.push_back(r);
            } else {
                right_rows.push_back(r);
            }
        }
        tree.nodes[at].feature = split.feature;
        tree.nodes[at].threshold = split.threshold;
        const std::uint32_t l = build(left_rows, depth + 1);
        const std::uint32_t r = build(right_rows, depth + 1);
        tree.nodes[at].left = l;
        tree.nodes[at].right = r;
        return at;
    }
};

}  // namespace gbdt_detail

// Fits the boosted ensemble on binary labels with logistic loss.
inline TreeEnsemble fit_gbdt(const FeatureMatrix& x, const std::vector<std::uint8_t>& y,
                             const GbdtConfig& cfg) {
    if (x.rows == 0 || x.cols == 0) throw DataError("fit_gbdt: empty feature matrix");
    if (y.size() != x.rows) throw DataError("fit_gbdt: label count does not match rows");
    if (x.rows < 2) throw DataError("fit_gbdt: need at least 2 rows");
    if (cfg.n_trees == 0) throw ConfigError("fit_gbdt: n_trees must be > 0");
    bool has_pos = false, has_neg = false;
    for (auto v : y) (v ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) throw DataError("fit_gbdt: single-class label set");

    TreeEnsemble ens;
    ens.config = cfg;
    std::vector<double> raw(x.rows, cfg.base_score);
    std::vector<double> grad(x.rows), hess(x.rows);
    std::vector<std::uint32_t> all_rows(x.rows);
    for (std::uint32_t i = 0; i < x.rows; ++i) all_rows[i] = i;

    for (std::size_t t = 0; t < cfg.n_trees; ++t) {
        for (std::size_t i = 0; i < x.rows; ++i) {
            const double p = sigmoid(raw[i]);
            grad[i] = p - static_cast<double>(y[i]);
            hess[i] = p * (1.0 - p);
        }
        gbdt_detail::TreeBuilder builder{x, grad, hess, cfg, {}};
        builder.build(all_rows, 0);
        DecisionTree tree = std::move(builder.tree);

        // Global leaf indices are assigned append-only in node-array order, so
        // adding trees never renumbers earlier leaves.
        for (auto& n : tree.nodes) {
            if (n.is_leaf()) n.leaf_index = static_cast<std::uint32_t>(ens.total_leaves++);
        }
        for (std::size_t i = 0; i < x.rows; ++i) {
            raw[i] += cfg.learning_rate * tree.nodes[tree.route(x.row(i))].leaf_value;
        }
        ens.trees.push_back(std::move(tree));
    }
    return ens;
}

// Per-row activated global leaf indices; exactly one index per tree.
inline CrossFeatureMatrix encode_multihot(const TreeEnsemble& ens, const FeatureMatrix& x) {
    if (ens.trees.empty()) throw DataError("encode_multihot: ensemble has no trees");
    CrossFeatureMatrix m;
    m.n_rows = x.rows;
    m.width = ens.total_leaves;
    m.indices.resize(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto& row = m.indices[i];
        row.reserve(ens.trees.size());
        for (const auto& t : ens.trees) row.push_back(t.nodes[t.route(x.row(i))].leaf_index);
    }
    return m;
}

inline std::vector<double> gbdt_scores(const TreeEnsemble& ens, const FeatureMatrix& x) {
    std::vector<double> p(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) p[i] = ens.score(x.row(i));
    return p;
}

// ---------------------------------------------------------------------------
// JSON serialization. Floating fields are written as decimal strings that
// round-trip exactly, so a reloaded ensemble reproduces bit-identical scores.
// ---------------------------------------------------------------------------

inline constexpr int kEnsembleFormatVersion = 1;

inline nlohmann::json ensemble_to_json(const TreeEnsemble& ens) {
    nlohmann::json j;
    j["format"] = "gbdt-ensemble";
    j["version"] = kEnsembleFormatVersion;
    j["learning_rate"] = format_double_exact(ens.config.learning_rate);
    j["base_score"] = format_double_exact(ens.config.base_score);
    j["lambda_leaf"] = format_double_exact(ens.config.lambda_leaf);
    j["min_child_weight"] = format_double_exact(ens.config.min_child_weight);
    j["max_depth"] = ens.config.max_depth;
    j["total_leaves"] = ens.total_leaves;
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : ens.trees) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& n : t.nodes) {
            nlohmann::json jn;
            if (n.is_leaf()) {
                jn["value"] = format_double_exact(n.leaf_value);
                jn["leaf_index"] = n.leaf_index;
            } else {
                jn["feature"] = n.feature;
                jn["threshold"] = format_double_exact(n.threshold);
                jn["left"] = n.left;
                jn["right"] = n.right;
            }
            nodes.push_back(std::move(jn));
        }
        trees.push_back(nlohmann::json{{"nodes", std::move(nodes)}});
    }
    j["trees"] = std::move(trees);
    return j;
}

inline TreeEnsemble ensemble_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "gbdt-ensemble" ||
            j.at("version").get<int>() != kEnsembleFormatVersion) {
            throw DataError("unsupported ensemble format/version");
        }
        TreeEnsemble ens;
        auto parse_d = [](const nlohmann::json& v) {
            return std::strtod(v.get<std::string>().c_str(), nullptr);
        };
        ens.config.learning_rate = parse_d(j.at("learning_rate"));
        ens.config.base_score = parse_d(j.at("base_score"));
        ens.config.lambda_leaf = parse_d(j.at("lambda_leaf"));
        ens.config.min_child_weight = parse_d(j.at("min_child_weight"));
        ens.config.max_depth = j.at("max_depth").get<std::size_t>();
        ens.total_leaves = j.at("total_leaves").get<std::size_t>();
        for (const auto& jt : j.at("trees")) {
            DecisionTree t;
            for (const auto& jn : jt.at("nodes")) {
                TreeNode n;
                if (jn.contains("value")) {
                    n.feature = -1;
                    n.leaf_value = parse_d(jn.at("value"));
                    n.leaf_index = jn.at("leaf_index").get<std::uint32_t>();
                } else {
                    n.feature = jn.at("feature").get<std::int32_t>();
                    n.threshold = parse_d(jn.at("threshold"));
                    n.left = jn.at("left").get<std::uint32_t>();
                    n.right = jn.at("right").get<std::uint32_t>();
                }
                t.nodes.push_back(n);
            }
            ens.trees.push_back(std::move(t));
        }
        ens.config.n_trees = ens.trees.size();
        return ens;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed ensemble JSON: ") + e.what());
    }
}

inline FeatureTable cross_features_to_table(CrossFeatureMatrix&& m) {
    return FeatureTable::from_multihot(std::move(m.indices), m.width);
}

}  // namespace graphfc
