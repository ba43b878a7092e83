#pragma once

// End-to-end training: boosted-tree cross features feed a bipartite
// transaction graph; message passing is first pretrained with a neighbor
// contrastive objective, then fine-tuned with a dual head (illicit
// probability + standardized log surcharge). Ablation variants toggle the
// pretraining stage, fold it into fine-tuning, swap cross features for raw
// numerics, or drop one virtual-key kind.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "graphfc/common.hpp"
#include "graphfc/data.hpp"
#include "graphfc/eval.hpp"
#include "graphfc/features.hpp"
#include "graphfc/gbdt.hpp"
#include "graphfc/gnn.hpp"
#include "graphfc/graph.hpp"

namespace graphfc {

// ---------------------------------------------------------------------------
// Pipeline variants.
// ---------------------------------------------------------------------------

enum class PipelineVariant : std::uint8_t {
    Full = 0,
    NoPretrain = 1,       // skip the self-supervised stage
    Joint = 2,            // optimize contrastive + supervised losses together
    NoCrossFeatures = 3,  // raw standardized numerics instead of tree leaves
    SingleKey = 4,        // drop one virtual-key kind from the graph
};

inline const char* pipeline_variant_name(PipelineVariant v) {
    switch (v) {
        case PipelineVariant::Full: return "full";
        case PipelineVariant::NoPretrain: return "no_pretrain";
        case PipelineVariant::Joint: return "joint";
        case PipelineVariant::NoCrossFeatures: return "no_cross_features";
        case PipelineVariant::SingleKey: return "single_key";
    }
    return "?";
}

inline PipelineVariant pipeline_variant_from_name(const std::string& s) {
    if (s == "full") return PipelineVariant::Full;
    if (s == "no_pretrain") return PipelineVariant::NoPretrain;
    if (s == "joint") return PipelineVariant::Joint;
    if (s == "no_cross_features") return PipelineVariant::NoCrossFeatures;
    if (s == "single_key") return PipelineVariant::SingleKey;
    throw ConfigError("unknown pipeline variant: '" + s + "'");
}

inline KeyKind key_kind_from_name(const std::string& s) {
    if (s == "importer") return KeyKind::Importer;
    if (s == "hs_code") return KeyKind::HsCode;
    throw ConfigError("unknown key kind: '" + s + "'");
}

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

struct TrainConfig {
    PipelineVariant variant = PipelineVariant::Full;
    Aggregator aggregator = Aggregator::Attention;
    std::size_t hidden = 32;
    std::size_t layers = 2;
    double leaky_slope = 0.2;
    std::vector<std::size_t> fanouts{25, 10};

    std::size_t pretrain_epochs = 20;
    std::size_t finetune_epochs = 50;
    std::size_t batch_size = 512;
    double learning_rate = 0.005;
    // Learning rate for the fine-tuning stage; 0 means "same as
    // learning_rate". A smaller fine-tune rate keeps more of the pretrained
    // representation instead of relearning it from scratch.
    double finetune_learning_rate = 0.0;
    bool lookahead = true;
    std::size_t lookahead_sync = 6;
    double lookahead_interp = 0.5;
    double alpha_revenue = 10.0;  // weight of the surcharge MSE term
    double lambda_reg = 1e-4;     // L2 on all parameters during fine-tuning
    std::size_t negatives = 5;    // contrastive negatives per anchor
    std::size_t max_positives = 5;
    std::size_t patience = 5;
    double early_stop_percent = 5.0;

    GraphVariant pretrain_graph = GraphVariant::Full;
    GraphVariant finetune_graph = GraphVariant::Full;
    KeyKind drop_key = KeyKind::Importer;  // for the single-key variant
    bool hs_prefix_key = false;            // add 4-digit HS prefix nodes

    RankingKey ranking = RankingKey::Cls;
    std::vector<double> eval_percents{1.0, 2.0, 5.0, 10.0, 20.0};
    std::uint64_t seed = 1;

    GbdtConfig gbdt;

    void validate() const {
        if (hidden == 0) throw ConfigError("hidden width must be positive");
        if (layers == 0 || layers % 2 != 0) {
            throw ConfigError(
                "layer count must be a positive even number so the final "
                "update lands on transaction nodes");
        }
        if (fanouts.size() != layers) {
            throw ConfigError("fanouts must list one fan-out per layer");
        }
        for (auto f : fanouts) {
            if (f == 0) throw ConfigError("fanouts must be positive");
        }
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
        if (finetune_learning_rate < 0.0) {
            throw ConfigError("finetune_learning_rate must be >= 0 (0 inherits learning_rate)");
        }
        if (lookahead_sync == 0) throw ConfigError("lookahead_sync must be positive");
        if (lookahead_interp <= 0.0 || lookahead_interp > 1.0) {
            throw ConfigError("lookahead_interp must be in (0, 1]");
        }
        if (alpha_revenue < 0.0) throw ConfigError("alpha_revenue must be >= 0");
        if (lambda_reg < 0.0) throw ConfigError("lambda_reg must be >= 0");
        if (max_positives == 0) throw ConfigError("max_positives must be positive");
        if (patience == 0) throw ConfigError("patience must be positive");
        if (early_stop_percent <= 0.0 || early_stop_percent > 100.0) {
            throw ConfigError("early_stop_percent must be in (0, 100]");
        }
        if (eval_percents.empty()) throw ConfigError("eval_percents must be non-empty");
        for (double p : eval_percents) {
            if (p <= 0.0 || p > 100.0) throw ConfigError("eval percents must be in (0, 100]");
        }
        if (leaky_slope < 0.0 || leaky_slope >= 1.0) {
            throw ConfigError("leaky_slope must be in [0, 1)");
        }
        if (finetune_graph == GraphVariant::UnlabeledOnly) {
            throw ConfigError("fine-tuning graph cannot be unlabeled-only");
        }
        if (gbdt.n_trees == 0) throw ConfigError("gbdt.n_trees must be positive");
        if (gbdt.max_depth == 0) throw ConfigError("gbdt.max_depth must be positive");
        if (gbdt.learning_rate <= 0.0) throw ConfigError("gbdt.learning_rate must be positive");
        if (gbdt.lambda_leaf < 0.0) throw ConfigError("gbdt.lambda_leaf must be >= 0");
        if (gbdt.min_child_weight < 0.0) throw ConfigError("gbdt.min_child_weight must be >= 0");
    }

    GraphKeys graph_keys() const {
        GraphKeys k;
        k.importer = true;
        k.hs = true;
        k.hs_prefix = hs_prefix_key;
        if (variant == PipelineVariant::SingleKey) {
            (drop_key == KeyKind::Importer ? k.importer : k.hs) = false;
        }
        if (k.active() == 0) throw ConfigError("graph needs at least one virtual-key kind");
        return k;
    }

    bool uses_cross_features() const { return variant != PipelineVariant::NoCrossFeatures; }
    bool pretrains() const {
        return variant != PipelineVariant::NoPretrain && variant != PipelineVariant::Joint;
    }
    double finetune_lr() const {
        return finetune_learning_rate > 0.0 ? finetune_learning_rate : learning_rate;
    }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["variant"] = pipeline_variant_name(c.variant);
    j["aggregator"] = aggregator_name(c.aggregator);
    j["hidden"] = c.hidden;
    j["layers"] = c.layers;
    j["leaky_slope"] = c.leaky_slope;
    j["fanouts"] = c.fanouts;
    j["pretrain_epochs"] = c.pretrain_epochs;
    j["finetune_epochs"] = c.finetune_epochs;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["finetune_learning_rate"] = c.finetune_learning_rate;
    j["lookahead"] = c.lookahead;
    j["lookahead_sync"] = c.lookahead_sync;
    j["lookahead_interp"] = c.lookahead_interp;
    j["alpha_revenue"] = c.alpha_revenue;
    j["lambda_reg"] = c.lambda_reg;
    j["negatives"] = c.negatives;
    j["max_positives"] = c.max_positives;
    j["patience"] = c.patience;
    j["early_stop_percent"] = c.early_stop_percent;
    j["pretrain_graph"] = graph_variant_name(c.pretrain_graph);
    j["finetune_graph"] = graph_variant_name(c.finetune_graph);
    j["drop_key"] = key_kind_name(c.drop_key);
    j["hs_prefix_key"] = c.hs_prefix_key;
    j["ranking"] = ranking_key_name(c.ranking);
    j["eval_percents"] = c.eval_percents;
    j["seed"] = c.seed;
    j["gbdt"] = {{"n_trees", c.gbdt.n_trees},
                 {"max_depth", c.gbdt.max_depth},
                 {"learning_rate", c.gbdt.learning_rate},
                 {"lambda_leaf", c.gbdt.lambda_leaf},
                 {"min_child_weight", c.gbdt.min_child_weight},
                 {"base_score", c.gbdt.base_score}};
    return j;
}

// Applies the keys present in `j` onto `c`; unknown keys are config errors so
// typos fail loudly instead of silently running defaults.
inline void apply_train_config_json(TrainConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    try {
        for (const auto& [key, val] : j.items()) {
            if (key == "variant") c.variant = pipeline_variant_from_name(val.get<std::string>());
            else if (key == "aggregator") c.aggregator = aggregator_from_name(val.get<std::string>());
            else if (key == "hidden") c.hidden = val.get<std::size_t>();
            else if (key == "layers") c.layers = val.get<std::size_t>();
            else if (key == "leaky_slope") c.leaky_slope = val.get<double>();
            else if (key == "fanouts") c.fanouts = val.get<std::vector<std::size_t>>();
            else if (key == "pretrain_epochs") c.pretrain_epochs = val.get<std::size_t>();
            else if (key == "finetune_epochs") c.finetune_epochs = val.get<std::size_t>();
            else if (key == "batch_size") c.batch_size = val.get<std::size_t>();
            else if (key == "learning_rate") c.learning_rate = val.get<double>();
            else if (key == "finetune_learning_rate") c.finetune_learning_rate = val.get<double>();
            else if (key == "lookahead") c.lookahead = val.get<bool>();
            else if (key == "lookahead_sync") c.lookahead_sync = val.get<std::size_t>();
            else if (key == "lookahead_interp") c.lookahead_interp = val.get<double>();
            else if (key == "alpha_revenue") c.alpha_revenue = val.get<double>();
            else if (key == "lambda_reg") c.lambda_reg = val.get<double>();
            else if (key == "negatives") c.negatives = val.get<std::size_t>();
            else if (key == "max_positives") c.max_positives = val.get<std::size_t>();
            else if (key == "patience") c.patience = val.get<std::size_t>();
            else if (key == "early_stop_percent") c.early_stop_percent = val.get<double>();
            else if (key == "pretrain_graph") c.pretrain_graph = graph_variant_from_name(val.get<std::string>());
            else if (key == "finetune_graph") c.finetune_graph = graph_variant_from_name(val.get<std::string>());
            else if (key == "drop_key") c.drop_key = key_kind_from_name(val.get<std::string>());
            else if (key == "hs_prefix_key") c.hs_prefix_key = val.get<bool>();
            else if (key == "ranking") c.ranking = ranking_key_from_name(val.get<std::string>());
            else if (key == "eval_percents") c.eval_percents = val.get<std::vector<double>>();
            else if (key == "seed") c.seed = val.get<std::uint64_t>();
            else if (key == "gbdt") {
                for (const auto& [gk, gv] : val.items()) {
                    if (gk == "n_trees") c.gbdt.n_trees = gv.get<std::size_t>();
                    else if (gk == "max_depth") c.gbdt.max_depth = gv.get<std::size_t>();
                    else if (gk == "learning_rate") c.gbdt.learning_rate = gv.get<double>();
                    else if (gk == "lambda_leaf") c.gbdt.lambda_leaf = gv.get<double>();
                    else if (gk == "min_child_weight") c.gbdt.min_child_weight = gv.get<double>();
                    else if (gk == "base_score") c.gbdt.base_score = gv.get<double>();
                    else throw ConfigError("unknown gbdt config key: '" + gk + "'");
                }
            } else {
                throw ConfigError("unknown train config key: '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad train config value: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Optimizer: Adam with bias correction plus optional lookahead slow weights.
// ---------------------------------------------------------------------------

class AdamLookahead {
  public:
    AdamLookahead(ModelParams& params, double lr, bool use_lookahead,
                  std::size_t sync_period = 6, double interp = 0.5)
        : params_(params),
          lr_(lr),
          use_lookahead_(use_lookahead),
          sync_period_(sync_period),
          interp_(interp),
          m_(params.zeros_like()),
          v_(params.zeros_like()),
          slow_(params) {}

    std::uint64_t steps() const { return t_; }

    void step(ModelParams& grads) {
        ++t_;
        auto pv = tensor_views(params_);
        auto gv = tensor_views(grads);
        auto mv = tensor_views(m_);
        auto vv = tensor_views(v_);
        if (gv.size() != pv.size()) throw InternalError("optimizer: tensor layout mismatch");
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < pv.size(); ++i) {
            if (gv[i].size != pv[i].size) throw InternalError("optimizer: tensor size mismatch");
            for (std::size_t j = 0; j < pv[i].size; ++j) {
                const double g = gv[i].data[j];
                double& m = mv[i].data[j];
                double& v = vv[i].data[j];
                m = kBeta1 * m + (1.0 - kBeta1) * g;
                v = kBeta2 * v + (1.0 - kBeta2) * g * g;
                pv[i].data[j] -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + kEps);
            }
        }
        if (use_lookahead_ && t_ % sync_period_ == 0) {
            auto sv = tensor_views(slow_);
            for (std::size_t i = 0; i < pv.size(); ++i) {
                for (std::size_t j = 0; j < pv[i].size; ++j) {
                    double& s = sv[i].data[j];
                    s += interp_ * (pv[i].data[j] - s);
                    pv[i].data[j] = s;
                }
            }
        }
    }

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

  private:
    ModelParams& params_;
    double lr_;
    bool use_lookahead_;
    std::size_t sync_period_;
    double interp_;
    std::uint64_t t_ = 0;
    ModelParams m_, v_, slow_;
};

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

// Neighbor contrastive loss for one anchor embedding u:
//   L = -(1/P) Σ_pos log σ(u·v)  -  (1/R) Σ_neg log σ(-u·v)
// with gradients for the anchor and every positive/negative embedding.
struct ContrastGrad {
    double loss = 0.0;
    Vec danchor;
    std::vector<Vec> dpos;
    std::vector<Vec> dneg;
};

inline ContrastGrad contrastive_loss(const Vec& u, const std::vector<const Vec*>& pos,
                                     const std::vector<const Vec*>& neg) {
    if (pos.empty()) throw InternalError("contrastive_loss: anchor has no positives");
    ContrastGrad g;
    g.danchor = Vec::Zero(u.size());
    g.dpos.reserve(pos.size());
    const double invp = 1.0 / static_cast<double>(pos.size());
    for (const Vec* v : pos) {
        const double dot = u.dot(*v);
        g.loss -= invp * log_sigmoid(dot);
        const double c = invp * (1.0 - sigmoid(dot));
        g.danchor -= c * (*v);
        g.dpos.push_back((-c * u).eval());
    }
    if (!neg.empty()) {
        g.dneg.reserve(neg.size());
        const double invr = 1.0 / static_cast<double>(neg.size());
        for (const Vec* v : neg) {
            const double dot = u.dot(*v);
            g.loss -= invr * log_sigmoid(-dot);
            const double c = invr * sigmoid(dot);
            g.danchor += c * (*v);
            g.dneg.push_back((c * u).eval());
        }
    }
    return g;
}

struct HeadOut {
    double logit = 0.0;
    double p = 0.0;
    double rev = 0.0;
};

inline HeadOut head_forward(const ModelParams& mp, const Vec& s) {
    HeadOut h;
    h.logit = mp.cls_w.dot(s) + mp.cls_b;
    h.p = sigmoid(h.logit);
    h.rev = mp.rev_w.dot(s) + mp.rev_b;
    return h;
}

// Numerically stable binary cross-entropy from the pre-sigmoid logit.
inline double bce_from_logit(double logit, bool y) {
    return -(y ? log_sigmoid(logit) : log_sigmoid(-logit));
}

// Standardizes log1p(surcharge); the regression head predicts z-scores and
// predictions are mapped back to currency units for ranking.
struct RevenueScaler {
    double mu = 0.0;
    double sd = 1.0;

    double transform(double raised) const { return (std::log1p(raised) - mu) / sd; }
    double inverse(double z) const { return std::expm1(mu + sd * z); }

    static RevenueScaler fit(const Dataset& d, const std::vector<std::uint32_t>& rows) {
        if (rows.empty()) throw DataError("revenue scaler: empty row subset");
        RevenueScaler s;
        double sum = 0.0;
        for (auto r : rows) sum += std::log1p(d.records[r].raised_revenue);
        s.mu = sum / static_cast<double>(rows.size());
        double var = 0.0;
        for (auto r : rows) {
            const double dlt = std::log1p(d.records[r].raised_revenue) - s.mu;
            var += dlt * dlt;
        }
        s.sd = std::sqrt(var / static_cast<double>(rows.size()));
        if (s.sd == 0.0) s.sd = 1.0;
        return s;
    }
};

// ---------------------------------------------------------------------------
// Negative sampling pools.
// ---------------------------------------------------------------------------

// Flattened views of a graph's two sides: message-carrying transaction rows
// and all virtual nodes (active kinds concatenated in slot order).
struct NodePools {
    std::vector<std::uint32_t> message_rows;  // ascending dataset rows
    std::vector<NodeKind> kinds;              // active kinds, slot order
    std::vector<std::size_t> kind_offset;     // prefix sums, size kinds+1

    static NodePools build(const TransactionGraph& g) {
        NodePools p;
        for (std::uint32_t row = 0; row < g.role.size(); ++row) {
            if (g.role[row] == TxnRole::Message) p.message_rows.push_back(row);
        }
        p.kind_offset.push_back(0);
        for (std::size_t s = 0; s < kMaxVirtualKinds; ++s) {
            if (g.virtual_side[s].size() == 0) continue;
            p.kinds.push_back(static_cast<NodeKind>(s + 1));
            p.kind_offset.push_back(p.kind_offset.back() + g.virtual_side[s].size());
        }
        return p;
    }

    std::size_t n_virtual() const { return kind_offset.back(); }

    NodeRef virtual_at(std::size_t i) const {
        for (std::size_t k = 0; k < kinds.size(); ++k) {
            if (i < kind_offset[k + 1]) {
                return {kinds[k], static_cast<std::uint32_t>(i - kind_offset[k])};
            }
        }
        throw InternalError("NodePools::virtual_at: index out of range");
    }

    // Canonical anchor order: message transactions, then virtual nodes.
    std::vector<NodeRef> all_nodes() const {
        std::vector<NodeRef> out;
        out.reserve(message_rows.size() + n_virtual());
        for (auto row : message_rows) out.push_back({NodeKind::Txn, row});
        for (std::size_t i = 0; i < n_virtual(); ++i) out.push_back(virtual_at(i));
        return out;
    }
};

// `count` distinct nodes drawn uniformly without replacement from the
// opposite side of the graph, excluding the anchor's actual neighbors.
inline std::vector<NodeRef> sample_negatives(const TransactionGraph& g, const NodePools& pools,
                                             const NodeRef& anchor, std::size_t count, Rng& rng) {
    std::vector<NodeRef> out;
    if (count == 0) return out;

    // Pool = opposite-side nodes in canonical enumeration order; `excluded`
    // holds the ascending pool positions of the anchor's actual neighbors.
    std::size_t pool = 0;
    std::vector<std::size_t> excluded;
    if (anchor.is_txn()) {
        pool = pools.n_virtual();
        for (const auto& n : g.txn_neighbors(anchor.index)) {
            for (std::size_t k = 0; k < pools.kinds.size(); ++k) {
                if (pools.kinds[k] == n.kind) {
                    excluded.push_back(pools.kind_offset[k] + n.index);
                    break;
                }
            }
        }
        std::sort(excluded.begin(), excluded.end());
    } else {
        pool = pools.message_rows.size();
        const auto children = g.virtual_children(anchor.kind, anchor.index);
        for (const std::uint32_t* p = children.first; p != children.second; ++p) {
            const auto it =
                std::lower_bound(pools.message_rows.begin(), pools.message_rows.end(), *p);
            if (it != pools.message_rows.end() && *it == *p) {
                excluded.push_back(static_cast<std::size_t>(it - pools.message_rows.begin()));
            }
        }
        // Children ascend, so the collected positions already do too.
    }
    const std::size_t allowed = pool - excluded.size();
    if (allowed < count) {
        throw DataError("negative sampling: pool exhausted (" + std::to_string(allowed) +
                        " candidates for " + std::to_string(count) + " draws)");
    }

    out.reserve(count);
    for (auto rank : rng.sample_without_replacement(allowed, count)) {
        std::size_t pos = rank;
        for (auto e : excluded) {
            if (e <= pos) {
                ++pos;
            } else {
                break;
            }
        }
        out.push_back(anchor.is_txn() ? pools.virtual_at(pos)
                                      : NodeRef{NodeKind::Txn, pools.message_rows[pos]});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Feature construction and scoring.
// ---------------------------------------------------------------------------

struct BuiltFeatures {
    std::shared_ptr<FeatureTable> table;
    TreeEnsemble ensemble;   // empty when cross features are disabled
    ColumnStats raw_stats;   // standardization stats for the raw-feature path
};

inline BuiltFeatures build_features(const Dataset& d, const TrainConfig& cfg) {
    BuiltFeatures out;
    const auto train_rows = d.indices_of(Split::Train);
    if (train_rows.empty()) throw DataError("training split is empty");
    if (!cfg.uses_cross_features()) {
        FeatureMatrix m = raw_features(d);
        out.raw_stats = column_stats(m, train_rows);
        standardize_columns(m, out.raw_stats);
        out.table = std::make_shared<FeatureTable>(FeatureTable::from_dense(std::move(m)));
        return out;
    }
    const FeatureMatrix m = engineered_features(d);
    std::vector<std::uint32_t> labeled_rows;
    for (auto r : train_rows) {
        if (d.is_labeled(r)) labeled_rows.push_back(r);
    }
    if (labeled_rows.empty()) throw DataError("no labeled training rows");
    FeatureMatrix sub(labeled_rows.size(), m.cols);
    std::vector<std::uint8_t> y(labeled_rows.size());
    for (std::size_t i = 0; i < labeled_rows.size(); ++i) {
        for (std::size_t c = 0; c < m.cols; ++c) sub.at(i, c) = m.at(labeled_rows[i], c);
        y[i] = d.records[labeled_rows[i]].illicit ? 1 : 0;
    }
    out.ensemble = fit_gbdt(sub, y, cfg.gbdt);
    out.table = std::make_shared<FeatureTable>(
        cross_features_to_table(encode_multihot(out.ensemble, m)));
    return out;
}

// Re-encodes features for a dataset using an already-fitted model (no refit),
// for scoring with a restored checkpoint.
inline std::shared_ptr<FeatureTable> encode_features_with(const Dataset& d,
                                                          const TreeEnsemble& ensemble,
                                                          const ColumnStats& raw_stats,
                                                          bool uses_cross) {
    if (uses_cross) {
        const FeatureMatrix m = engineered_features(d);
        return std::make_shared<FeatureTable>(
            cross_features_to_table(encode_multihot(ensemble, m)));
    }
    FeatureMatrix m = raw_features(d);
    standardize_columns(m, raw_stats);
    return std::make_shared<FeatureTable>(FeatureTable::from_dense(std::move(m)));
}

// Embeds `rows` as scoring roots and applies both heads. Rows are processed
// in fixed-size batches with per-batch sampling streams, so results depend
// only on (graph, params, seed).
inline std::vector<ScoredTransaction> score_rows(const Dataset& d, const GnnRunner& runner,
                                                 const ModelParams& params,
                                                 const RevenueScaler& rev,
                                                 const std::vector<std::uint32_t>& rows,
                                                 std::size_t batch_size, std::uint64_t seed,
                                                 bool require_outcome) {
    std::vector<ScoredTransaction> out;
    out.reserve(rows.size());
    for (std::size_t begin = 0, b = 0; begin < rows.size(); begin += batch_size, ++b) {
        const std::size_t end = std::min(rows.size(), begin + batch_size);
        std::vector<NodeRef> seeds;
        seeds.reserve(end - begin);
        for (std::size_t i = begin; i < end; ++i) seeds.push_back({NodeKind::Txn, rows[i]});
        const ForwardTape tape =
            runner.forward(params, seeds, derive_seed(seed, "score", {b}));
        for (std::size_t i = begin; i < end; ++i) {
            const auto& r = d.records[rows[i]];
            if (require_outcome && !r.has_outcome) {
                throw DataError("evaluation requires ground-truth outcomes: " + r.txn_id);
            }
            const HeadOut h = head_forward(params, tape.embedding({NodeKind::Txn, rows[i]}));
            out.push_back({r.txn_id, r.illicit, r.raised_revenue, h.p, rev.inverse(h.rev)});
        }
    }
    return out;
}

// Boosted-trees-only baseline: fit on labeled train rows, score the test
// split by predicted illicit probability.
inline std::vector<ScoredTransaction> run_gbdt_baseline(const Dataset& d,
                                                        const GbdtConfig& cfg) {
    const FeatureMatrix m = engineered_features(d);
    std::vector<std::uint32_t> labeled_rows;
    for (auto r : d.indices_of(Split::Train)) {
        if (d.is_labeled(r)) labeled_rows.push_back(r);
    }
    if (labeled_rows.empty()) throw DataError("no labeled training rows");
    FeatureMatrix sub(labeled_rows.size(), m.cols);
    std::vector<std::uint8_t> y(labeled_rows.size());
    for (std::size_t i = 0; i < labeled_rows.size(); ++i) {
        for (std::size_t c = 0; c < m.cols; ++c) sub.at(i, c) = m.at(labeled_rows[i], c);
        y[i] = d.records[labeled_rows[i]].illicit ? 1 : 0;
    }
    const TreeEnsemble ens = fit_gbdt(sub, y, cfg);
    std::vector<ScoredTransaction> out;
    for (auto row : d.indices_of(Split::Test)) {
        const auto& r = d.records[row];
        if (!r.has_outcome) {
            throw DataError("evaluation requires ground-truth outcomes: " + r.txn_id);
        }
        out.push_back({r.txn_id, r.illicit, r.raised_revenue, ens.score(m.row(row)), 0.0});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pipeline.
// ---------------------------------------------------------------------------

struct CurvePoint {
    std::string stage;  // "pretrain" or "finetune"
    std::size_t epoch = 0;
    double loss = 0.0;
    bool has_valid = false;
    double valid_recall = 0.0;
};

inline std::string curve_to_csv(const std::vector<CurvePoint>& curve) {
    std::string out = "stage,epoch,loss,valid_recall\n";
    for (const auto& c : curve) {
        out += c.stage;
        out += ',';
        out += std::to_string(c.epoch);
        out += ',';
        out += format_double_exact(c.loss);
        out += ',';
        if (c.has_valid) out += format_double_exact(c.valid_recall);
        out += '\n';
    }
    return out;
}

// Everything needed to score new data with a trained model.
struct PipelineModel {
    TrainConfig cfg;
    ModelParams params;
    TreeEnsemble ensemble;  // empty when cross features are disabled
    ColumnStats raw_stats;  // raw-feature standardization (no-cross variant)
    RevenueScaler rev;
    GraphKeys keys;
};

struct PipelineResult {
    PipelineModel model;
    std::vector<ScoredTransaction> test_scored;
    EvalReport report;
    std::vector<CurvePoint> curve;
    bool divergence = false;
    std::size_t pretrain_epochs_run = 0;
    std::size_t finetune_epochs_run = 0;
    std::size_t best_epoch = 0;  // fine-tune epoch restored at the end
    double train_seconds = 0.0;
};

namespace train_detail {

struct ContrastBatchSpec {
    std::vector<NodeRef> anchors;
    std::vector<std::vector<NodeRef>> positives;  // per anchor
    std::vector<std::vector<NodeRef>> negatives;  // per anchor
    std::vector<NodeRef> seeds;                   // anchors + positives + negatives
};

// Samples positives/negatives for a batch of anchors and assembles the seed
// list for one forward pass. Anchors without candidates are dropped.
inline ContrastBatchSpec make_contrast_batch(const TransactionGraph& g, const NodePools& pools,
                                             const std::vector<NodeRef>& anchors,
                                             std::size_t max_positives, std::size_t negatives,
                                             Rng& pos_rng, Rng& neg_rng) {
    ContrastBatchSpec spec;
    for (const auto& a : anchors) {
        auto pos = sample_children(g, a, max_positives, pos_rng, kNoCutoff);
        if (pos.empty()) continue;
        auto neg = sample_negatives(g, pools, a, negatives, neg_rng);
        spec.anchors.push_back(a);
        spec.positives.push_back(std::move(pos));
        spec.negatives.push_back(std::move(neg));
    }
    spec.seeds = spec.anchors;
    for (const auto& ps : spec.positives) {
        spec.seeds.insert(spec.seeds.end(), ps.begin(), ps.end());
    }
    for (const auto& ns : spec.negatives) {
        spec.seeds.insert(spec.seeds.end(), ns.begin(), ns.end());
    }
    return spec;
}

// Contrastive loss + upstream gradients for one forward tape, averaged over
// the batch's anchors. Returns the summed (pre-average) loss.
inline double apply_contrast_grads(const ContrastBatchSpec& spec, const ForwardTape& tape,
                                   double inv_batch,
                                   std::vector<std::pair<NodeRef, Vec>>& upstream) {
    double loss_sum = 0.0;
    for (std::size_t a = 0; a < spec.anchors.size(); ++a) {
        const Vec& u = tape.embedding(spec.anchors[a]);
        std::vector<const Vec*> pos, neg;
        pos.reserve(spec.positives[a].size());
        neg.reserve(spec.negatives[a].size());
        for (const auto& n : spec.positives[a]) pos.push_back(&tape.embedding(n));
        for (const auto& n : spec.negatives[a]) neg.push_back(&tape.embedding(n));
        ContrastGrad cg = contrastive_loss(u, pos, neg);
        loss_sum += cg.loss;
        upstream.emplace_back(spec.anchors[a], (inv_batch * cg.danchor).eval());
        for (std::size_t i = 0; i < pos.size(); ++i) {
            upstream.emplace_back(spec.positives[a][i], (inv_batch * cg.dpos[i]).eval());
        }
        for (std::size_t i = 0; i < neg.size(); ++i) {
            upstream.emplace_back(spec.negatives[a][i], (inv_batch * cg.dneg[i]).eval());
        }
    }
    return loss_sum;
}

}  // namespace train_detail

inline PipelineResult run_pipeline(const Dataset& d, const TrainConfig& cfg) {
    cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();

    const auto train_rows = d.indices_of(Split::Train);
    const auto valid_rows = d.indices_of(Split::Valid);
    const auto test_rows = d.indices_of(Split::Test);
    if (train_rows.empty()) throw DataError("training split is empty");
    if (test_rows.empty()) throw DataError("test split is empty");
    std::vector<std::uint32_t> labeled_rows;
    for (auto r : train_rows) {
        if (d.is_labeled(r)) labeled_rows.push_back(r);
    }
    if (labeled_rows.empty()) throw DataError("no labeled training rows");

    PipelineResult res;
    res.model.cfg = cfg;
    res.model.keys = cfg.graph_keys();

    BuiltFeatures feats = build_features(d, cfg);
    res.model.ensemble = std::move(feats.ensemble);
    res.model.raw_stats = std::move(feats.raw_stats);
    res.model.rev = RevenueScaler::fit(d, labeled_rows);

    ModelParams& params = res.model.params;
    params.init(feats.table->width, cfg.hidden, cfg.layers, cfg.aggregator, cfg.seed);
    ModelParams grads = params.zeros_like();

    // ---- self-supervised pretraining ----
    if (cfg.pretrains() && cfg.pretrain_epochs > 0) {
        const TransactionGraph g_pre = build_graph(
            d, feats.table, {cfg.pretrain_graph, res.model.keys, train_rows, {}});
        const GnnRunner runner(g_pre, cfg.fanouts);
        const NodePools pools = NodePools::build(g_pre);
        const std::vector<NodeRef> anchors = pools.all_nodes();
        if (anchors.empty()) throw DataError("pretraining graph has no nodes");
        AdamLookahead opt(params, cfg.learning_rate, cfg.lookahead, cfg.lookahead_sync,
                          cfg.lookahead_interp);
        std::vector<double> epoch_losses;
        for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
            std::vector<NodeRef> order = anchors;
            Rng order_rng(derive_seed(cfg.seed, "pretrain_order", {epoch}));
            order_rng.shuffle(order);
            double loss_sum = 0.0;
            std::size_t n_anchors = 0;
            for (std::size_t begin = 0, b = 0; begin < order.size();
                 begin += cfg.batch_size, ++b) {
                const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
                const std::vector<NodeRef> batch(order.begin() + begin, order.begin() + end);
                Rng pos_rng(derive_seed(cfg.seed, "pretrain_pos", {epoch, b}));
                Rng neg_rng(derive_seed(cfg.seed, "pretrain_neg", {epoch, b}));
                const auto spec = train_detail::make_contrast_batch(
                    g_pre, pools, batch, cfg.max_positives, cfg.negatives, pos_rng, neg_rng);
                if (spec.anchors.empty()) continue;
                const ForwardTape tape = runner.forward(
                    params, spec.seeds, derive_seed(cfg.seed, "pretrain_plan", {epoch, b}));
                std::vector<std::pair<NodeRef, Vec>> upstream;
                const double inv = 1.0 / static_cast<double>(spec.anchors.size());
                loss_sum += train_detail::apply_contrast_grads(spec, tape, inv, upstream);
                n_anchors += spec.anchors.size();
                grads.set_zero();
                runner.backward(params, tape, upstream, grads);
                opt.step(grads);
            }
            const double mean_loss =
                n_anchors ? loss_sum / static_cast<double>(n_anchors) : 0.0;
            epoch_losses.push_back(mean_loss);
            res.curve.push_back({"pretrain", epoch, mean_loss, false, 0.0});
            ++res.pretrain_epochs_run;
            if (!std::isfinite(mean_loss)) {
                res.divergence = true;
                break;
            }
        }
        // The loss must fall monotonically over the first five epochs; any
        // uptick in that window marks the run as divergent.
        const std::size_t window = std::min<std::size_t>(5, epoch_losses.size());
        for (std::size_t i = 0; i + 1 < window; ++i) {
            if (epoch_losses[i + 1] > epoch_losses[i]) res.divergence = true;
        }
    }

    // ---- fine-tuning ----
    const TransactionGraph g_fin =
        build_graph(d, feats.table, {cfg.finetune_graph, res.model.keys, train_rows, {}});
    const GnnRunner runner_fin(g_fin, cfg.fanouts);
    const NodePools pools_fin = NodePools::build(g_fin);
    const bool joint = cfg.variant == PipelineVariant::Joint;

    std::vector<double> rev_target(d.size(), 0.0);
    for (auto r : labeled_rows) rev_target[r] = res.model.rev.transform(d.records[r].raised_revenue);

    // Valid-set scoring graph (reused every epoch; fixed sampling stream so
    // the early-stopping signal is comparable across epochs).
    std::unique_ptr<TransactionGraph> g_val;
    std::unique_ptr<GnnRunner> runner_val;
    if (!valid_rows.empty()) {
        g_val = std::make_unique<TransactionGraph>(build_graph(
            d, feats.table, {cfg.finetune_graph, res.model.keys, train_rows, valid_rows}));
        runner_val = std::make_unique<GnnRunner>(*g_val, cfg.fanouts);
    }
    const std::uint64_t valid_seed = derive_seed(cfg.seed, "valid_score");

    AdamLookahead opt(params, cfg.finetune_lr(), cfg.lookahead, cfg.lookahead_sync,
                      cfg.lookahead_interp);
    ModelParams best_params = params;
    double best_metric = -1.0;
    bool have_best = false;
    std::size_t patience_left = cfg.patience;

    for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
        std::vector<std::uint32_t> order = labeled_rows;
        Rng order_rng(derive_seed(cfg.seed, "finetune_order", {epoch}));
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t n_roots = 0;
        for (std::size_t begin = 0, b = 0; begin < order.size(); begin += cfg.batch_size, ++b) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            std::vector<NodeRef> roots;
            roots.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) roots.push_back({NodeKind::Txn, order[i]});

            train_detail::ContrastBatchSpec spec;
            std::vector<NodeRef> seeds = roots;
            if (joint) {
                Rng pos_rng(derive_seed(cfg.seed, "joint_pos", {epoch, b}));
                Rng neg_rng(derive_seed(cfg.seed, "joint_neg", {epoch, b}));
                spec = train_detail::make_contrast_batch(g_fin, pools_fin, roots,
                                                         cfg.max_positives, cfg.negatives,
                                                         pos_rng, neg_rng);
                seeds.insert(seeds.end(), spec.seeds.begin(), spec.seeds.end());
            }
            const ForwardTape tape = runner_fin.forward(
                params, seeds, derive_seed(cfg.seed, "finetune_plan", {epoch, b}));

            grads.set_zero();
            std::vector<std::pair<NodeRef, Vec>> upstream;
            upstream.reserve(seeds.size());
            const double inv = 1.0 / static_cast<double>(roots.size());
            for (const auto& root : roots) {
                const Vec& s = tape.embedding(root);
                const auto& rec = d.records[root.index];
                const HeadOut h = head_forward(params, s);
                const double y = rec.illicit ? 1.0 : 0.0;
                const double z = rev_target[root.index];
                const double err = h.rev - z;
                loss_sum += bce_from_logit(h.logit, rec.illicit) +
                            cfg.alpha_revenue * err * err;
                const double dt = (h.p - y) * inv;
                const double dr = 2.0 * cfg.alpha_revenue * err * inv;
                upstream.emplace_back(root, (dt * params.cls_w + dr * params.rev_w).eval());
                grads.cls_w += dt * s;
                grads.cls_b += dt;
                grads.rev_w += dr * s;
                grads.rev_b += dr;
            }
            n_roots += roots.size();
            if (joint && !spec.anchors.empty()) {
                loss_sum += train_detail::apply_contrast_grads(
                    spec, tape, 1.0 / static_cast<double>(spec.anchors.size()), upstream);
            }
            runner_fin.backward(params, tape, upstream, grads);
            if (cfg.lambda_reg > 0.0) {
                auto pv = tensor_views(params);
                auto gv = tensor_views(grads);
                for (std::size_t i = 0; i < pv.size(); ++i) {
                    for (std::size_t j = 0; j < pv[i].size; ++j) {
                        gv[i].data[j] += 2.0 * cfg.lambda_reg * pv[i].data[j];
                    }
                }
            }
            opt.step(grads);
        }
        const double mean_loss =
            (n_roots ? loss_sum / static_cast<double>(n_roots) : 0.0) +
            cfg.lambda_reg * squared_norm(params);
        ++res.finetune_epochs_run;

        if (runner_val) {
            const auto scored = score_rows(d, *runner_val, params, res.model.rev, valid_rows,
                                           cfg.batch_size, valid_seed, true);
            const auto ranked = rank(scored, cfg.ranking);
            const double rec =
                precision_recall_at(ranked, cfg.early_stop_percent).recall;
            res.curve.push_back({"finetune", epoch, mean_loss, true, rec});
            if (rec > best_metric) {
                best_metric = rec;
                best_params = params;
                have_best = true;
                res.best_epoch = epoch;
                patience_left = cfg.patience;
            } else if (--patience_left == 0) {
                break;
            }
        } else {
            res.curve.push_back({"finetune", epoch, mean_loss, false, 0.0});
        }
    }
    if (have_best) params = best_params;

    // ---- test scoring ----
    const TransactionGraph g_test = build_graph(
        d, feats.table, {cfg.finetune_graph, res.model.keys, train_rows, test_rows});
    const GnnRunner runner_test(g_test, cfg.fanouts);
    res.test_scored = score_rows(d, runner_test, params, res.model.rev, test_rows,
                                 cfg.batch_size, derive_seed(cfg.seed, "test_score"), true);
    res.report = build_eval_report(res.test_scored, cfg.eval_percents, cfg.ranking,
                                   pipeline_variant_name(cfg.variant), cfg.seed);
    res.report.osr_importer = osr_row(compute_osr(d, KeyKind::Importer));
    res.report.osr_hs = osr_row(compute_osr(d, KeyKind::HsCode));
    res.report.divergence_flag = res.divergence;

    res.train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return res;
}

// Scores an arbitrary split with a restored model: features are re-encoded
// with the stored encoders, the graph universe is the train split, and the
// requested rows enter as scoring-only roots.
inline std::vector<ScoredTransaction> score_with_model(const Dataset& d, PipelineModel& model,
                                                       const std::vector<std::uint32_t>& rows,
                                                       bool require_outcome = true) {
    model.cfg.validate();
    const auto train_rows = d.indices_of(Split::Train);
    if (train_rows.empty()) throw DataError("training split is empty");
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
    return score_rows(d, runner, model.params, model.rev, rows, model.cfg.batch_size,
                      derive_seed(model.cfg.seed, "test_score"), require_outcome);
}

// Writes per-row embeddings (one column per hidden dim, plus the ground-truth
// label or empty when unknown) for the given rows.
inline void export_embeddings(const std::string& path, const Dataset& d,
                              const GnnRunner& runner, const ModelParams& params,
                              const std::vector<std::uint32_t>& rows, std::size_t batch_size,
                              std::uint64_t seed) {
    std::string out;
    for (std::size_t c = 0; c < params.hidden; ++c) {
        out += "e" + std::to_string(c) + ",";
    }
    out += "label\n";
    for (std::size_t begin = 0, b = 0; begin < rows.size(); begin += batch_size, ++b) {
        const std::size_t end = std::min(rows.size(), begin + batch_size);
        std::vector<NodeRef> seeds;
        for (std::size_t i = begin; i < end; ++i) seeds.push_back({NodeKind::Txn, rows[i]});
        const ForwardTape tape = runner.forward(params, seeds, derive_seed(seed, "score", {b}));
        for (std::size_t i = begin; i < end; ++i) {
            const Vec& s = tape.embedding({NodeKind::Txn, rows[i]});
            for (Eigen::Index c = 0; c < s.size(); ++c) {
                out += format_double_exact(s[c]);
                out += ',';
            }
            const auto& r = d.records[rows[i]];
            if (r.has_outcome) out += r.illicit ? '1' : '0';
            out += '\n';
        }
    }
    write_text_file(path, out);
}

// ---------------------------------------------------------------------------
// Checkpoint bundling: model tensors live in the binary section; everything
// else needed to score (encoders, scaler, config echo) rides in `extra`.
// ---------------------------------------------------------------------------

inline nlohmann::json model_extra_json(PipelineModel& model) {
    nlohmann::json j;
    j["pipeline"] = {{"variant", pipeline_variant_name(model.cfg.variant)},
                     {"uses_cross_features", model.cfg.uses_cross_features()},
                     {"keys",
                      {{"importer", model.keys.importer},
                       {"hs", model.keys.hs},
                       {"hs_prefix", model.keys.hs_prefix}}},
                     {"rev_scaler",
                      {{"mu", format_double_exact(model.rev.mu)},
                       {"sd", format_double_exact(model.rev.sd)}}},
                     {"train_config", train_config_to_json(model.cfg)}};
    if (model.cfg.uses_cross_features()) {
        j["gbdt"] = ensemble_to_json(model.ensemble);
    } else {
        nlohmann::json mean = nlohmann::json::array();
        nlohmann::json std_ = nlohmann::json::array();
        for (double v : model.raw_stats.mean) mean.push_back(format_double_exact(v));
        for (double v : model.raw_stats.std) std_.push_back(format_double_exact(v));
        j["raw_stats"] = {{"mean", mean}, {"std", std_}};
    }
    return j;
}

inline PipelineModel model_from_checkpoint(LoadedCheckpoint&& lc) {
    PipelineModel model;
    model.params = std::move(lc.params);
    try {
        const auto& p = lc.extra.at("pipeline");
        apply_train_config_json(model.cfg, p.at("train_config"));
        model.keys.importer = p.at("keys").at("importer").get<bool>();
        model.keys.hs = p.at("keys").at("hs").get<bool>();
        model.keys.hs_prefix = p.at("keys").at("hs_prefix").get<bool>();
        model.rev.mu = std::strtod(
            p.at("rev_scaler").at("mu").get<std::string>().c_str(), nullptr);
        model.rev.sd = std::strtod(
            p.at("rev_scaler").at("sd").get<std::string>().c_str(), nullptr);
        if (p.at("uses_cross_features").get<bool>()) {
            model.ensemble = ensemble_from_json(lc.extra.at("gbdt"));
        } else {
            for (const auto& v : lc.extra.at("raw_stats").at("mean")) {
                model.raw_stats.mean.push_back(
                    std::strtod(v.get<std::string>().c_str(), nullptr));
            }
            for (const auto& v : lc.extra.at("raw_stats").at("std")) {
                model.raw_stats.std.push_back(
                    std::strtod(v.get<std::string>().c_str(), nullptr));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint is missing pipeline metadata: ") + e.what());
    }
    return model;
}

}  // namespace graphfc
