#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "graphfc/gbdt.hpp"

using namespace graphfc;

namespace {

// ---------------------------------------------------------------------------
// Independent stagewise oracle. Deliberately written with a different shape
// from the production code: every candidate split is evaluated by a fresh
// partition pass instead of a running prefix scan, and thresholds come from
// midpoints of de-duplicated sorted column values.
// ---------------------------------------------------------------------------

struct OracleNode {
    bool leaf = true;
    int feature = -1;
    double threshold = 0.0;
    double value = 0.0;
    std::unique_ptr<OracleNode> left, right;
};

struct OracleStats {
    double g = 0.0, h = 0.0;
};

OracleStats sum_stats(const std::vector<std::uint32_t>& rows, const std::vector<double>& grad,
                      const std::vector<double>& hess) {
    OracleStats s;
    for (auto r : rows) {
        s.g += grad[r];
        s.h += hess[r];
    }
    return s;
}

std::unique_ptr<OracleNode> oracle_build(const FeatureMatrix& x, const std::vector<double>& grad,
                                         const std::vector<double>& hess,
                                         const std::vector<std::uint32_t>& rows,
                                         std::size_t depth, const GbdtConfig& cfg) {
    auto node = std::make_unique<OracleNode>();
    const auto total = sum_stats(rows, grad, hess);

    double best_gain = 0.0;
    int best_feature = -1;
    double best_threshold = 0.0;
    if (depth < cfg.max_depth && rows.size() >= 2) {
        for (std::size_t f = 0; f < x.cols; ++f) {
            std::vector<double> vals;
            for (auto r : rows) {
                const double v = x.at(r, f);
                if (!std::isnan(v)) vals.push_back(v);
            }
            std::sort(vals.begin(), vals.end());
            vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
            for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
                const double thr = 0.5 * (vals[k] + vals[k + 1]);
                std::vector<std::uint32_t> lrows, rrows;
                for (auto r : rows) {
                    const double v = x.at(r, f);
                    (std::isnan(v) || v < thr ? lrows : rrows).push_back(r);
                }
                const auto ls = sum_stats(lrows, grad, hess);
                const auto rs = sum_stats(rrows, grad, hess);
                if (ls.h < cfg.min_child_weight || rs.h < cfg.min_child_weight) continue;
                const double gain =
                    0.5 * (ls.g * ls.g / (ls.h + cfg.lambda_leaf) +
                           rs.g * rs.g / (rs.h + cfg.lambda_leaf) -
                           total.g * total.g / (total.h + cfg.lambda_leaf));
                // Strictly-greater keeps the lowest feature, then lowest
                // threshold, on exact gain ties; gain must be positive.
                if (gain > best_gain) {
                    best_gain = gain;
                    best_feature = static_cast<int>(f);
                    best_threshold = thr;
                }
            }
        }
    }

    if (best_feature < 0) {
        node->value = -total.g / (total.h + cfg.lambda_leaf);
        return node;
    }
    std::vector<std::uint32_t> lrows, rrows;
    for (auto r : rows) {
        const double v = x.at(r, static_cast<std::size_t>(best_feature));
        (std::isnan(v) || v < best_threshold ? lrows : rrows).push_back(r);
    }
    node->leaf = false;
    node->feature = best_feature;
    node->threshold = best_threshold;
    node->left = oracle_build(x, grad, hess, lrows, depth + 1, cfg);
    node->right = oracle_build(x, grad, hess, rrows, depth + 1, cfg);
    return node;
}

double oracle_route(const OracleNode& n, const double* row) {
    if (n.leaf) return n.value;
    const double v = row[n.feature];
    return oracle_route(std::isnan(v) || v < n.threshold ? *n.left : *n.right, row);
}

std::vector<std::unique_ptr<OracleNode>> oracle_fit(const FeatureMatrix& x,
                                                    const std::vector<std::uint8_t>& y,
                                                    const GbdtConfig& cfg) {
    std::vector<std::uint32_t> all;
    for (std::uint32_t i = 0; i < x.rows; ++i) all.push_back(i);
    std::vector<double> raw(x.rows, cfg.base_score), grad(x.rows), hess(x.rows);
    std::vector<std::unique_ptr<OracleNode>> trees;
    for (std::size_t t = 0; t < cfg.n_trees; ++t) {
        for (std::size_t i = 0; i < x.rows; ++i) {
            // The shared scalar sigmoid keeps stage inputs bit-identical, so
            // any structural disagreement is attributable to split search.
            const double p = sigmoid(raw[i]);
            grad[i] = p - double(y[i]);
            hess[i] = p * (1.0 - p);
        }
        trees.push_back(oracle_build(x, grad, hess, all, 0, cfg));
        for (std::size_t i = 0; i < x.rows; ++i) {
            raw[i] += cfg.learning_rate * oracle_route(*trees.back(), x.row(i));
        }
    }
    return trees;
}

// Structural comparison of a fitted tree against the oracle tree.
void require_same_tree(const DecisionTree& t, std::uint32_t at, const OracleNode& o) {
    if (o.leaf) {
        REQUIRE(t.nodes[at].is_leaf());
        REQUIRE_THAT(t.nodes[at].leaf_value, Catch::Matchers::WithinAbs(o.value, 1e-9));
        return;
    }
    REQUIRE_FALSE(t.nodes[at].is_leaf());
    REQUIRE(t.nodes[at].feature == o.feature);
    REQUIRE(t.nodes[at].threshold == o.threshold);
    require_same_tree(t, t.nodes[at].left, *o.left);
    require_same_tree(t, t.nodes[at].right, *o.right);
}

FeatureMatrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, bool with_nan) {
    FeatureMatrix x(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            if (with_nan && rng.uniform() < 0.07) {
                x.at(i, j) = std::numeric_limits<double>::quiet_NaN();
            } else {
                // Three decimals keep midpoints exact and gains well separated.
                x.at(i, j) = std::round(rng.uniform(-4.0, 4.0) * 1000.0) / 1000.0;
            }
        }
    }
    return x;
}

std::vector<std::uint8_t> random_labels(Rng& rng, std::size_t rows) {
    std::vector<std::uint8_t> y(rows);
    bool pos = false, neg = false;
    for (std::size_t i = 0; i < rows; ++i) {
        y[i] = rng.uniform() < 0.4 ? 1 : 0;
        (y[i] ? pos : neg) = true;
    }
    if (!pos) y[0] = 1;
    if (!neg) y[rows - 1] = 0;
    return y;
}

}  // namespace

TEST_CASE("fitted ensembles match the exhaustive stagewise oracle") {
    Rng rng(2024);
    for (int fixture = 0; fixture < 24; ++fixture) {
        GbdtConfig cfg;
        cfg.n_trees = 1 + rng.below(3);
        cfg.max_depth = 1 + rng.below(3);
        cfg.learning_rate = 0.3;
        const std::size_t rows = 8 + rng.below(57);   // up to 64
        const std::size_t cols = 1 + rng.below(6);    // up to 6
        const FeatureMatrix x = random_matrix(rng, rows, cols, fixture % 3 == 0);
        const auto y = random_labels(rng, rows);

        const TreeEnsemble ens = fit_gbdt(x, y, cfg);
        const auto oracle = oracle_fit(x, y, cfg);
        REQUIRE(ens.trees.size() == oracle.size());
        for (std::size_t t = 0; t < oracle.size(); ++t) {
            require_same_tree(ens.trees[t], 0, *oracle[t]);
        }
        // Final probabilities agree through the sigmoid as well.
        for (std::size_t i = 0; i < rows; ++i) {
            double raw = cfg.base_score;
            for (const auto& t : oracle) raw += cfg.learning_rate * oracle_route(*t, x.row(i));
            REQUIRE_THAT(ens.score(x.row(i)),
                         Catch::Matchers::WithinAbs(1.0 / (1.0 + std::exp(-raw)), 1e-12));
        }
    }
}

TEST_CASE("depth-1 split on two binary features maximizes second-order gain") {
    // Hand-solved fixture: feature 0 yields gain 13/12, feature 1 only 1/12.
    FeatureMatrix x(8, 2);
    const double f0[] = {0, 0, 0, 0, 1, 1, 1, 1};
    const double f1[] = {0, 1, 0, 1, 0, 1, 0, 1};
    std::vector<std::uint8_t> y = {0, 0, 0, 1, 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) {
        x.at(i, 0) = f0[i];
        x.at(i, 1) = f1[i];
    }
    GbdtConfig cfg;
    cfg.n_trees = 1;
    cfg.max_depth = 1;
    const TreeEnsemble ens = fit_gbdt(x, y, cfg);
    const auto& root = ens.trees[0].nodes[0];
    REQUIRE_FALSE(root.is_leaf());
    REQUIRE(root.feature == 0);
    REQUIRE(root.threshold == 0.5);
    // Left: labels {0,0,0,1} -> G=1, H=1, value -1/(1+1) = -0.5.
    // Right: labels {1,1,1,1} -> G=-2, H=1, value +1.0.
    REQUIRE_THAT(ens.trees[0].nodes[root.left].leaf_value,
                 Catch::Matchers::WithinAbs(-0.5, 1e-12));
    REQUIRE_THAT(ens.trees[0].nodes[root.right].leaf_value,
                 Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("a perfectly separating feature wins the root split") {
    Rng rng(5);
    FeatureMatrix x(40, 4);
    std::vector<std::uint8_t> y(40);
    for (int i = 0; i < 40; ++i) {
        y[i] = i < 18 ? 0 : 1;
        for (int j = 0; j < 3; ++j) x.at(i, j) = rng.uniform(-1, 1);
        x.at(i, 3) = y[i] ? rng.uniform(2.0, 3.0) : rng.uniform(-3.0, -2.0);
    }
    GbdtConfig cfg;
    cfg.n_trees = 1;
    cfg.max_depth = 1;
    const TreeEnsemble ens = fit_gbdt(x, y, cfg);
    REQUIRE(ens.trees[0].nodes[0].feature == 3);
}

TEST_CASE("fit_gbdt rejects degenerate inputs") {
    FeatureMatrix x(4, 1);
    for (int i = 0; i < 4; ++i) x.at(i, 0) = i;
    REQUIRE_THROWS_AS(fit_gbdt(x, {1, 1, 1, 1}, GbdtConfig{}), DataError);
    REQUIRE_THROWS_AS(fit_gbdt(x, {0, 0, 0, 0}, GbdtConfig{}), DataError);
    REQUIRE_THROWS_AS(fit_gbdt(FeatureMatrix{}, {}, GbdtConfig{}), DataError);
    REQUIRE_THROWS_AS(fit_gbdt(x, {0, 1}, GbdtConfig{}), DataError);
}

TEST_CASE("routing follows decision rules with deterministic tie handling") {
    // Tree encoding "gross_weight > 100 AND quantity < 5": weight split at
    // 100 (left <, right >=), then quantity split at 5 on the right branch.
    DecisionTree t;
    t.nodes.resize(5);
    t.nodes[0] = {0, 100.0, 1, 2, 0.0, 0};        // split on feature 0 (weight)
    t.nodes[1] = {-1, 0.0, 0, 0, -1.0, 0};        // weight < 100
    t.nodes[2] = {1, 5.0, 3, 4, 0.0, 0};          // split on feature 1 (quantity)
    t.nodes[3] = {-1, 0.0, 0, 0, +2.0, 1};        // weight >= 100, quantity < 5
    t.nodes[4] = {-1, 0.0, 0, 0, -2.0, 2};        // weight >= 100, quantity >= 5

    const double rule_row[] = {150.0, 3.0};
    REQUIRE(t.route(rule_row) == 3);
    const double light_row[] = {99.0, 3.0};
    REQUIRE(t.route(light_row) == 1);
    // Boundary values equal to the threshold route right.
    const double boundary_weight[] = {100.0, 3.0};
    REQUIRE(t.route(boundary_weight) == 3);
    const double boundary_quantity[] = {150.0, 5.0};
    REQUIRE(t.route(boundary_quantity) == 4);
    // Missing values route left.
    const double missing[] = {std::numeric_limits<double>::quiet_NaN(), 3.0};
    REQUIRE(t.route(missing) == 1);
}

TEST_CASE("a stub tree routes every row to its only leaf") {
    TreeEnsemble ens;
    ens.config.base_score = 0.25;
    DecisionTree stub;
    stub.nodes.push_back({-1, 0.0, 0, 0, 0.75, 0});
    ens.trees.push_back(stub);
    ens.total_leaves = 1;

    FeatureMatrix x(3, 2);
    x.at(0, 0) = -10;
    x.at(1, 0) = 0;
    x.at(2, 0) = 10;
    const auto m = encode_multihot(ens, x);
    for (const auto& row : m.indices) {
        REQUIRE(row.size() == 1);
        REQUIRE(row[0] == 0);
    }
}

TEST_CASE("multi-hot activations use global append-only leaf indices") {
    // Three hand-built complete depth-2 trees, 4 leaves each (W = 12), wired
    // so one probe row activates local leaves (0, 2, 3) -> global {0, 6, 11}.
    auto make_tree = [](double thr0, double thr1l, double thr1r, std::uint32_t base) {
        DecisionTree t;
        t.nodes.resize(7);
        t.nodes[0] = {0, thr0, 1, 4, 0.0, 0};
        t.nodes[1] = {1, thr1l, 2, 3, 0.0, 0};
        t.nodes[2] = {-1, 0.0, 0, 0, 0.1, base + 0};
        t.nodes[3] = {-1, 0.0, 0, 0, 0.2, base + 1};
        t.nodes[4] = {1, thr1r, 5, 6, 0.0, 0};
        t.nodes[5] = {-1, 0.0, 0, 0, 0.3, base + 2};
        t.nodes[6] = {-1, 0.0, 0, 0, 0.4, base + 3};
        return t;
    };
    TreeEnsemble ens;
    ens.trees.push_back(make_tree(2.0, 2.0, 2.0, 0));   // row (1,1): left-left  -> local 0
    ens.trees.push_back(make_tree(0.5, 2.0, 2.0, 4));   // row (1,1): right-left -> local 2
    ens.trees.push_back(make_tree(0.5, 2.0, 0.5, 8));   // row (1,1): right-right-> local 3
    ens.total_leaves = 12;

    FeatureMatrix x(1, 2);
    x.at(0, 0) = 1.0;
    x.at(0, 1) = 1.0;
    const auto m = encode_multihot(ens, x);
    REQUIRE(m.width == 12);
    REQUIRE(m.indices[0] == std::vector<std::uint32_t>{0, 6, 11});
}

TEST_CASE("every encoded row activates exactly one leaf per tree") {
    Rng rng(9);
    const FeatureMatrix x = random_matrix(rng, 400, 5, true);
    const auto y = random_labels(rng, 400);
    GbdtConfig cfg;
    cfg.n_trees = 7;
    cfg.max_depth = 3;
    const TreeEnsemble ens = fit_gbdt(x, y, cfg);
    const auto m = encode_multihot(ens, x);
    REQUIRE(m.width == ens.total_leaves);
    std::set<std::uint32_t> global;
    for (const auto& t : ens.trees) {
        for (const auto& n : t.nodes) {
            if (n.is_leaf()) REQUIRE(global.insert(n.leaf_index).second);
        }
    }
    for (std::size_t i = 0; i < x.rows; ++i) {
        REQUIRE(m.indices[i].size() == cfg.n_trees);
        // One active leaf per tree, reproduced by per-row routing.
        for (std::size_t t = 0; t < cfg.n_trees; ++t) {
            const auto& tree = ens.trees[t];
            REQUIRE(m.indices[i][t] == tree.nodes[tree.route(x.row(i))].leaf_index);
        }
    }
}

TEST_CASE("scores accumulate leaf values through the sigmoid") {
    TreeEnsemble empty;
    empty.config.base_score = 0.4;
    const double row0[] = {0.0};
    REQUIRE(empty.score(row0) == sigmoid(0.4));
    empty.config.base_score = 0.0;
    REQUIRE(empty.score(row0) == 0.5);

    Rng rng(13);
    const FeatureMatrix x = random_matrix(rng, 64, 3, false);
    const auto y = random_labels(rng, 64);
    GbdtConfig cfg;
    cfg.n_trees = 3;
    cfg.max_depth = 2;
    const TreeEnsemble ens = fit_gbdt(x, y, cfg);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double raw = cfg.base_score;
        for (const auto& t : ens.trees) {
            raw += cfg.learning_rate * t.nodes[t.route(x.row(i))].leaf_value;
        }
        REQUIRE_THAT(ens.score(x.row(i)), Catch::Matchers::WithinAbs(sigmoid(raw), 1e-12));
    }

    // Monotonicity in a single leaf value, routing held fixed.
    TreeEnsemble bumped = ens;
    for (auto& n : bumped.trees[0].nodes) {
        if (n.is_leaf()) n.leaf_value += 1.0;
    }
    for (std::size_t i = 0; i < x.rows; ++i) {
        REQUIRE(bumped.score(x.row(i)) > ens.score(x.row(i)));
    }
}

TEST_CASE("JSON serialization round-trips bit-identical scores") {
    Rng rng(17);
    const FeatureMatrix x = random_matrix(rng, 64, 4, true);
    const auto y = random_labels(rng, 64);
    GbdtConfig cfg;
    cfg.n_trees = 4;
    cfg.max_depth = 3;
    cfg.learning_rate = 0.2971;  // not exactly representable in decimal
    const TreeEnsemble ens = fit_gbdt(x, y, cfg);

    const auto j = ensemble_to_json(ens);
    const TreeEnsemble back = ensemble_from_json(j);
    REQUIRE(back.trees.size() == ens.trees.size());
    REQUIRE(back.total_leaves == ens.total_leaves);
    for (std::size_t i = 0; i < x.rows; ++i) {
        REQUIRE(back.score(x.row(i)) == ens.score(x.row(i)));  // bit-exact
    }

    nlohmann::json corrupt = j;
    corrupt["version"] = 999;
    REQUIRE_THROWS_AS(ensemble_from_json(corrupt), DataError);
    nlohmann::json missing = j;
    missing.erase("trees");
    REQUIRE_THROWS_AS(ensemble_from_json(missing), DataError);
}
