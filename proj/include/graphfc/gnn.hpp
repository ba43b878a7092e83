#pragma once

// Message passing over the bipartite transaction graph.
//
// Update order alternates sides: odd layers fully update virtual (key) nodes
// from their sampled transaction children, even layers fully update
// transaction nodes from the freshly updated virtual nodes. A node whose side
// is not being updated at layer k carries a self-projection
// ReLU(W2^(k) s^(k-1)) so widths line up (layer 1 consumes the raw feature
// width, later layers the hidden width) and so transaction nodes never
// aggregate the uninitialized zero embeddings of virtual nodes.
//
// Per full update of node m with pool P = sampled children ∪ {m}:
//   attention:       e_j   = LeakyReLU(r · [W1 s_j ‖ W1 s_m])
//                    α     = softmax over P of e
//                    s_m'  = ReLU(Σ_{j∈P} α_j W2 s_j)
//   mean:            s_m'  = ReLU(1/|P| Σ_{j∈P} W2 s_j)
//   relation-typed:  s_m'  = ReLU(1/|P| (W2 s_m + Σ_{j≠m} W2[rel(m,j)] s_j))
//
// Forward/backward are hand-derived over an explicit per-batch tape; the
// backward pass is validated against central finite differences in the tests.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "graphfc/common.hpp"
#include "graphfc/graph.hpp"

namespace graphfc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Aggregator : std::uint8_t { Attention = 0, Mean = 1, RelationTyped = 2 };

inline const char* aggregator_name(Aggregator a) {
    switch (a) {
        case Aggregator::Attention: return "attention";
        case Aggregator::Mean: return "mean";
        case Aggregator::RelationTyped: return "relation_typed";
    }
    return "?";
}

inline Aggregator aggregator_from_name(const std::string& s) {
    if (s == "attention") return Aggregator::Attention;
    if (s == "mean") return Aggregator::Mean;
    if (s == "relation_typed") return Aggregator::RelationTyped;
    throw ConfigError("unknown aggregator: '" + s + "'");
}

// ---------------------------------------------------------------------------
// Parameters. The same struct doubles as the gradient accumulator (identical
// shapes, zero-initialized), so one tensor walker serves both.
// ---------------------------------------------------------------------------

struct ModelParams {
    std::size_t input_width = 0;  // layer-1 input width (feature width W)
    std::size_t hidden = 32;      // embedding width d
    Aggregator aggregator = Aggregator::Attention;
    double leaky_slope = 0.2;

    struct Layer {
        Mat w1;  // attention projection, d_out x d_in
        Mat w2;  // message transform, d_out x d_in
        Vec r;   // attention vector, 2*d_out
        std::array<Mat, kMaxVirtualKinds> w2_rel;  // per-edge-kind transforms
    };
    std::vector<Layer> layers;

    Vec cls_w;  // classification head
    double cls_b = 0.0;
    Vec rev_w;  // revenue head
    double rev_b = 0.0;

    std::size_t n_layers() const { return layers.size(); }

    std::size_t layer_in_width(std::size_t k) const { return k == 0 ? input_width : hidden; }

    void init(std::size_t width, std::size_t d, std::size_t n_layers, Aggregator agg,
              std::uint64_t seed) {
        input_width = width;
        hidden = d;
        aggregator = agg;
        layers.assign(n_layers, {});
        Rng rng(derive_seed(seed, "gnn_init"));
        auto fill = [&](Mat& m, std::size_t rows, std::size_t cols) {
            m.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
            const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                for (Eigen::Index r0 = 0; r0 < m.rows(); ++r0) m(r0, c) = rng.uniform(-lim, lim);
            }
        };
        for (std::size_t k = 0; k < n_layers; ++k) {
            const std::size_t din = layer_in_width(k);
            fill(layers[k].w1, d, din);
            fill(layers[k].w2, d, din);
            layers[k].r.resize(static_cast<Eigen::Index>(2 * d));
            const double lim_r = std::sqrt(6.0 / static_cast<double>(2 * d + 1));
            for (Eigen::Index i = 0; i < layers[k].r.size(); ++i) {
                layers[k].r[i] = rng.uniform(-lim_r, lim_r);
            }
            if (agg == Aggregator::RelationTyped) {
                for (auto& m : layers[k].w2_rel) fill(m, d, din);
            }
        }
        init_heads(derive_seed(seed, "gnn_init_heads"));
    }

    // Fresh head weights (used when fine-tuning starts from pretrained layers).
    void init_heads(std::uint64_t seed) {
        Rng rng(seed);
        cls_w.resize(static_cast<Eigen::Index>(hidden));
        rev_w.resize(static_cast<Eigen::Index>(hidden));
        const double lim = std::sqrt(6.0 / static_cast<double>(hidden + 1));
        for (Eigen::Index i = 0; i < cls_w.size(); ++i) cls_w[i] = rng.uniform(-lim, lim);
        for (Eigen::Index i = 0; i < rev_w.size(); ++i) rev_w[i] = rng.uniform(-lim, lim);
        cls_b = 0.0;
        rev_b = 0.0;
    }

    // Same shapes, all zeros (gradient accumulator / optimizer state).
    ModelParams zeros_like() const {
        ModelParams z = *this;
        for (auto& l : z.layers) {
            l.w1.setZero();
            l.w2.setZero();
            l.r.setZero();
            for (auto& m : l.w2_rel) m.setZero();
        }
        z.cls_w.setZero();
        z.rev_w.setZero();
        z.cls_b = 0.0;
        z.rev_b = 0.0;
        return z;
    }

    void set_zero() {
        for (auto& l : layers) {
            l.w1.setZero();
            l.w2.setZero();
            l.r.setZero();
            for (auto& m : l.w2_rel) m.setZero();
        }
        cls_w.setZero();
        rev_w.setZero();
        cls_b = 0.0;
        rev_b = 0.0;
    }
};

struct TensorView {
    std::string name;
    double* data;
    std::size_t size;
};

// Canonical flat view over every learnable tensor (layers, then heads).
inline std::vector<TensorView> tensor_views(ModelParams& p) {
    std::vector<TensorView> out;
    auto add = [&](std::string name, double* data, std::size_t size) {
        out.push_back({std::move(name), data, size});
    };
    for (std::size_t k = 0; k < p.layers.size(); ++k) {
        auto& l = p.layers[k];
        const std::string base = "layer" + std::to_string(k);
        add(base + ".w1", l.w1.data(), static_cast<std::size_t>(l.w1.size()));
        add(base + ".w2", l.w2.data(), static_cast<std::size_t>(l.w2.size()));
        add(base + ".r", l.r.data(), static_cast<std::size_t>(l.r.size()));
        if (p.aggregator == Aggregator::RelationTyped) {
            for (std::size_t s = 0; s < kMaxVirtualKinds; ++s) {
                add(base + ".w2_rel" + std::to_string(s), l.w2_rel[s].data(),
                    static_cast<std::size_t>(l.w2_rel[s].size()));
            }
        }
    }
    add("head.cls_w", p.cls_w.data(), static_cast<std::size_t>(p.cls_w.size()));
    add("head.cls_b", &p.cls_b, 1);
    add("head.rev_w", p.rev_w.data(), static_cast<std::size_t>(p.rev_w.size()));
    add("head.rev_b", &p.rev_b, 1);
    return out;
}

inline std::size_t parameter_count(ModelParams& p) {
    std::size_t n = 0;
    for (const auto& v : tensor_views(p)) n += v.size;
    return n;
}

// Sum of squares over all learnable tensors (for L2 regularization).
inline double squared_norm(ModelParams& p) {
    double s = 0.0;
    for (const auto& v : tensor_views(p)) {
        for (std::size_t i = 0; i < v.size; ++i) s += v.data[i] * v.data[i];
    }
    return s;
}

// ---------------------------------------------------------------------------
// Attention primitive: given the W1-projections of a candidate pool whose
// LAST entry is the target node itself, the logit for candidate j is
// rᵀ[p_j ∥ p_self]; the weights are the softmax of the LeakyReLU'd logits.
// Returns (pre-activation logits, weights).
// ---------------------------------------------------------------------------

inline std::pair<Vec, Vec> attention_pool_weights(const Vec& r, double leaky_slope,
                                                  const std::vector<const Vec*>& proj_pool) {
    if (proj_pool.empty()) throw InternalError("attention_pool_weights: empty pool");
    const auto d = static_cast<Eigen::Index>(r.size() / 2);
    const auto np = static_cast<Eigen::Index>(proj_pool.size());
    const auto r1 = r.head(d);
    const auto r2 = r.tail(d);
    const double self_part = r2.dot(*proj_pool.back());
    Vec pre(np);
    for (Eigen::Index j = 0; j < np; ++j) pre[j] = r1.dot(*proj_pool[j]) + self_part;
    Vec logit = pre.unaryExpr([&](double x) { return x >= 0.0 ? x : leaky_slope * x; });
    const double mx = logit.maxCoeff();
    Vec alpha = (logit.array() - mx).exp();
    alpha /= alpha.sum();
    return {pre, alpha};
}

// ---------------------------------------------------------------------------
// Batched forward/backward over sampled neighborhoods.
// ---------------------------------------------------------------------------

namespace gnn_detail {

struct Member {
    std::uint32_t ref = 0;        // index into the previous level's inputs
    std::uint8_t matrix_id = 0;   // 0 = w2; 1+slot = w2_rel[slot]
    bool is_self = false;
};

struct Unit {
    NodeRef node;
    bool full = false;            // full pool update vs self projection
    std::vector<Member> members;  // full: children then self; selfproj: {self}
};

inline constexpr std::size_t kNumMatrixIds = 1 + kMaxVirtualKinds;

}  // namespace gnn_detail

struct ForwardTape {
    // Plan (filled by GnnRunner::forward).
    std::vector<NodeRef> base_nodes;  // level-0 inputs
    std::unordered_map<std::uint64_t, std::uint32_t> base_index;
    struct Level {
        std::vector<gnn_detail::Unit> units;
        std::unordered_map<std::uint64_t, std::uint32_t> index;
        // Forward results.
        std::vector<Vec> emb;                 // post-ReLU outputs
        std::vector<Vec> att_logits_pre;      // pre-LeakyReLU logits (attention)
        std::vector<Vec> att_alpha;           // softmax weights (attention)
        // Projections of this layer's *inputs* (the previous level).
        std::vector<Vec> proj1;                                        // W1 · input
        std::array<std::vector<Vec>, gnn_detail::kNumMatrixIds> projm; // Mat · input
        std::vector<std::uint8_t> need1;
        std::array<std::vector<std::uint8_t>, gnn_detail::kNumMatrixIds> needm;
    };
    std::vector<Level> levels;  // levels[k-1] holds layer-k units

    const Vec& embedding(const NodeRef& n) const {
        const auto& top = levels.back();
        const auto it = top.index.find(n.uid());
        if (it == top.index.end()) {
            throw InternalError("ForwardTape::embedding: node was not a seed");
        }
        return top.emb[it->second];
    }
};

class GnnRunner {
  public:
    GnnRunner(const TransactionGraph& g, std::vector<std::size_t> fanouts,
              DateDays cutoff = kNoCutoff)
        : g_(g), fanouts_(std::move(fanouts)), cutoff_(cutoff) {
        if (fanouts_.empty()) throw ConfigError("GnnRunner: fanouts must be non-empty");
        for (auto f : fanouts_) {
            if (f == 0) throw ConfigError("GnnRunner: fanouts must be positive");
        }
    }

    const TransactionGraph& graph() const { return g_; }

    // Builds the sampled computation plan for `seeds` and runs the forward
    // pass. K = p.n_layers() must equal fanouts.size().
    ForwardTape forward(const ModelParams& p, const std::vector<NodeRef>& seeds,
                        std::uint64_t plan_seed) const {
        const std::size_t K = p.n_layers();
        if (K != fanouts_.size()) {
            throw ConfigError("GnnRunner: fanouts length must equal layer count");
        }
        if (seeds.empty()) throw InternalError("GnnRunner::forward: empty seed set");
        ForwardTape t;
        build_plan(t, seeds, K, plan_seed);
        run_forward(p, t);
        return t;
    }

    // Accumulates parameter gradients for upstream seed gradients dL/ds^{(K)}.
    void backward(const ModelParams& p, const ForwardTape& t,
                  const std::vector<std::pair<NodeRef, Vec>>& upstream,
                  ModelParams& grads) const {
        const std::size_t K = t.levels.size();
        // Per-level embedding gradients.
        std::vector<std::vector<Vec>> demb(K);
        for (std::size_t k = 0; k < K; ++k) {
            demb[k].assign(t.levels[k].units.size(),
                           Vec::Zero(static_cast<Eigen::Index>(p.hidden)));
        }
        for (const auto& [node, grad] : upstream) {
            const auto it = t.levels[K - 1].index.find(node.uid());
            if (it == t.levels[K - 1].index.end()) {
                throw InternalError("GnnRunner::backward: upstream node was not a seed");
            }
            demb[K - 1][it->second] += grad;
        }

        for (std::size_t k = K; k >= 1; --k) {
            const auto& lv = t.levels[k - 1];
            const auto& lp = p.layers[k - 1];
            auto& lg = grads.layers[k - 1];
            const std::size_t n_inputs =
                (k == 1) ? t.base_nodes.size() : t.levels[k - 2].units.size();
            const auto d = static_cast<Eigen::Index>(p.hidden);

            std::vector<Vec> dproj1;
            std::array<std::vector<Vec>, gnn_detail::kNumMatrixIds> dprojm;
            if (!lv.proj1.empty()) dproj1.assign(n_inputs, Vec());
            for (std::size_t m = 0; m < gnn_detail::kNumMatrixIds; ++m) {
                if (!lv.projm[m].empty()) dprojm[m].assign(n_inputs, Vec());
            }
            auto add_dproj = [&](std::vector<Vec>& acc, std::uint32_t ref, const Vec& v) {
                if (acc[ref].size() == 0) {
                    acc[ref] = v;
                } else {
                    acc[ref] += v;
                }
            };

            for (std::size_t u = 0; u < lv.units.size(); ++u) {
                const auto& unit = lv.units[u];
                const Vec& out = lv.emb[u];
                const Vec& dout = demb[k - 1][u];
                if (dout.isZero(0.0)) continue;
                Vec dz = (out.array() > 0.0).select(dout, Vec::Zero(d));
                if (dz.isZero(0.0)) continue;

                if (!unit.full) {
                    add_dproj(dprojm[0], unit.members[0].ref, dz);
                    continue;
                }
                const std::size_t np = unit.members.size();
                if (p.aggregator == Aggregator::Attention) {
                    const Vec& alpha = lv.att_alpha[u];
                    const Vec& pre = lv.att_logits_pre[u];
                    const std::uint32_t self_ref = unit.members.back().ref;
                    Vec dalpha(static_cast<Eigen::Index>(np));
                    for (std::size_t j = 0; j < np; ++j) {
                        const auto& mj = unit.members[j];
                        dalpha[static_cast<Eigen::Index>(j)] = lv.projm[0][mj.ref].dot(dz);
                        add_dproj(dprojm[0], mj.ref,
                                  (alpha[static_cast<Eigen::Index>(j)] * dz).eval());
                    }
                    const double dot_ad = alpha.dot(dalpha);
                    double dpre_sum = 0.0;
                    const auto r1 = lp.r.head(d);
                    const auto r2 = lp.r.tail(d);
                    for (std::size_t j = 0; j < np; ++j) {
                        const auto ej = static_cast<Eigen::Index>(j);
                        const double de = alpha[ej] * (dalpha[ej] - dot_ad);
                        const double dpre = de * (pre[ej] >= 0.0 ? 1.0 : p.leaky_slope);
                        dpre_sum += dpre;
                        lg.r.head(d) += dpre * lv.proj1[unit.members[j].ref];
                        add_dproj(dproj1, unit.members[j].ref, (dpre * r1).eval());
                    }
                    lg.r.tail(d) += dpre_sum * lv.proj1[self_ref];
                    add_dproj(dproj1, self_ref, (dpre_sum * r2).eval());
                } else {
                    const double inv = 1.0 / static_cast<double>(np);
                    Vec share = inv * dz;
                    for (const auto& mj : unit.members) {
                        add_dproj(dprojm[mj.matrix_id], mj.ref, share);
                    }
                }
            }

            // Push projection gradients into parameter matrices and inputs.
            auto input_grad_target = [&](std::uint32_t ref) -> Vec* {
                if (k == 1) return nullptr;  // level-0 inputs are constants
                return &demb[k - 2][ref];
            };
            for (std::uint32_t ref = 0; ref < n_inputs; ++ref) {
                const bool base_level = (k == 1);
                const NodeRef src =
                    base_level ? t.base_nodes[ref] : t.levels[k - 2].units[ref].node;
                if (!dproj1.empty() && dproj1[ref].size() != 0) {
                    accumulate_matrix_grad(lg.w1, dproj1[ref], t, k, ref, src);
                    if (Vec* de = input_grad_target(ref)) *de += lp.w1.transpose() * dproj1[ref];
                }
                for (std::size_t m = 0; m < gnn_detail::kNumMatrixIds; ++m) {
                    if (dprojm[m].empty() || dprojm[m][ref].size() == 0) continue;
                    Mat& gm = (m == 0) ? lg.w2 : lg.w2_rel[m - 1];
                    const Mat& pm = (m == 0) ? lp.w2 : lp.w2_rel[m - 1];
                    accumulate_matrix_grad(gm, dprojm[m][ref], t, k, ref, src);
                    if (Vec* de = input_grad_target(ref)) *de += pm.transpose() * dprojm[m][ref];
                }
            }
        }
    }

  private:
    const TransactionGraph& g_;
    std::vector<std::size_t> fanouts_;
    DateDays cutoff_;

    static bool full_update_at(const NodeRef& n, std::size_t layer_k) {
        const bool odd = (layer_k % 2) == 1;
        return odd != n.is_txn();  // odd layers update virtual nodes, even update txn
    }

    std::uint8_t member_matrix_id(Aggregator agg, const NodeRef& consumer,
                                  const NodeRef& child) const {
        if (agg != Aggregator::RelationTyped) return 0;
        const NodeKind vk = child.is_txn() ? consumer.kind : child.kind;
        return static_cast<std::uint8_t>(1 + TransactionGraph::kind_slot(vk));
    }

    void build_plan(ForwardTape& t, const std::vector<NodeRef>& seeds, std::size_t K,
                    std::uint64_t plan_seed) const {
        t.levels.resize(K);
        // Unique seeds in first-appearance order become the top level's units.
        auto& top = t.levels[K - 1];
        for (const auto& s : seeds) {
            if (top.index.emplace(s.uid(), static_cast<std::uint32_t>(top.units.size())).second) {
                gnn_detail::Unit u;
                u.node = s;
                top.units.push_back(std::move(u));
            }
        }

        for (std::size_t k = K; k >= 1; --k) {
            auto& lv = t.levels[k - 1];
            auto get_or_add_input = [&](const NodeRef& n) -> std::uint32_t {
                if (k == 1) {
                    auto [it, inserted] = t.base_index.emplace(
                        n.uid(), static_cast<std::uint32_t>(t.base_nodes.size()));
                    if (inserted) t.base_nodes.push_back(n);
                    return it->second;
                }
                auto& below = t.levels[k - 2];
                auto [it, inserted] = below.index.emplace(
                    n.uid(), static_cast<std::uint32_t>(below.units.size()));
                if (inserted) {
                    gnn_detail::Unit u;
                    u.node = n;
                    below.units.push_back(std::move(u));
                }
                return it->second;
            };

            const std::size_t hop_fanout = fanouts_[K - k];
            for (std::size_t ui = 0; ui < lv.units.size(); ++ui) {
                auto& unit = lv.units[ui];
                unit.full = full_update_at(unit.node, k);
                if (unit.full) {
                    Rng rng(derive_seed(plan_seed, "plan",
                                        {unit.node.uid(), static_cast<std::uint64_t>(k)}));
                    for (const auto& child :
                         sample_children(g_, unit.node, hop_fanout, rng, cutoff_)) {
                        // matrix_id is assigned in run_forward once the
                        // aggregator is known.
                        unit.members.push_back({get_or_add_input(child), 0, false});
                    }
                }
                unit.members.push_back({get_or_add_input(unit.node), 0, true});
            }
        }
    }

    void run_forward(const ModelParams& p, ForwardTape& t) const {
        const std::size_t K = t.levels.size();
        const auto d = static_cast<Eigen::Index>(p.hidden);

        // Assign relation matrix ids now that the aggregator is known.
        for (std::size_t k = 1; k <= K; ++k) {
            auto& lv = t.levels[k - 1];
            for (auto& unit : lv.units) {
                if (!unit.full) continue;
                for (auto& m : unit.members) {
                    if (m.is_self) {
                        m.matrix_id = 0;
                        continue;
                    }
                    const NodeRef child = (k == 1) ? t.base_nodes[m.ref]
                                                   : t.levels[k - 2].units[m.ref].node;
                    m.matrix_id = member_matrix_id(p.aggregator, unit.node, child);
                }
            }
        }

        for (std::size_t k = 1; k <= K; ++k) {
            auto& lv = t.levels[k - 1];
            const auto& lp = p.layers[k - 1];
            const std::size_t n_inputs =
                (k == 1) ? t.base_nodes.size() : t.levels[k - 2].units.size();

            // Which projections of the inputs does this layer need?
            lv.need1.assign(n_inputs, 0);
            for (auto& nm : lv.needm) nm.assign(n_inputs, 0);
            for (const auto& unit : lv.units) {
                for (const auto& m : unit.members) {
                    lv.needm[m.matrix_id][m.ref] = 1;
                    if (unit.full && p.aggregator == Aggregator::Attention) lv.need1[m.ref] = 1;
                }
            }

            auto project = [&](const Mat& mat, std::uint32_t ref) -> Vec {
                if (k > 1) return mat * t.levels[k - 2].emb[ref];
                const NodeRef n = t.base_nodes[ref];
                if (!n.is_txn()) return Vec::Zero(d);  // virtual features are zero
                const auto& ft = *g_.features;
                if (ft.sparse) {
                    Vec out = Vec::Zero(d);
                    for (auto idx : ft.multihot[n.index]) {
                        out += mat.col(static_cast<Eigen::Index>(idx));
                    }
                    return out;
                }
                Eigen::Map<const Vec> row(ft.dense.row(n.index),
                                          static_cast<Eigen::Index>(ft.dense.cols));
                return mat * row;
            };

            lv.proj1.assign(n_inputs, Vec());
            for (std::size_t m = 0; m < gnn_detail::kNumMatrixIds; ++m) {
                if (std::any_of(lv.needm[m].begin(), lv.needm[m].end(),
                                [](std::uint8_t b) { return b != 0; })) {
                    lv.projm[m].assign(n_inputs, Vec());
                } else {
                    lv.projm[m].clear();
                }
            }
            bool any_need1 = std::any_of(lv.need1.begin(), lv.need1.end(),
                                         [](std::uint8_t b) { return b != 0; });
            if (!any_need1) lv.proj1.clear();

            for (std::uint32_t ref = 0; ref < n_inputs; ++ref) {
                if (!lv.proj1.empty() && lv.need1[ref]) lv.proj1[ref] = project(lp.w1, ref);
                for (std::size_t m = 0; m < gnn_detail::kNumMatrixIds; ++m) {
                    if (lv.projm[m].empty() || !lv.needm[m][ref]) continue;
                    const Mat& mat = (m == 0) ? lp.w2 : lp.w2_rel[m - 1];
                    lv.projm[m][ref] = project(mat, ref);
                }
            }

            // Unit outputs.
            lv.emb.assign(lv.units.size(), Vec());
            if (p.aggregator == Aggregator::Attention) {
                lv.att_logits_pre.assign(lv.units.size(), Vec());
                lv.att_alpha.assign(lv.units.size(), Vec());
            }
            for (std::size_t u = 0; u < lv.units.size(); ++u) {
                const auto& unit = lv.units[u];
                Vec z = Vec::Zero(d);
                if (!unit.full) {
                    z = lv.projm[0][unit.members[0].ref];
                } else if (p.aggregator == Aggregator::Attention) {
                    const std::size_t np = unit.members.size();
                    std::vector<const Vec*> pool;
                    pool.reserve(np);
                    for (const auto& mj : unit.members) pool.push_back(&lv.proj1[mj.ref]);
                    auto [pre, alpha] = attention_pool_weights(lp.r, p.leaky_slope, pool);
                    for (std::size_t j = 0; j < np; ++j) {
                        z += alpha[static_cast<Eigen::Index>(j)] *
                             lv.projm[0][unit.members[j].ref];
                    }
                    lv.att_logits_pre[u] = std::move(pre);
                    lv.att_alpha[u] = std::move(alpha);
                } else {
                    const double inv = 1.0 / static_cast<double>(unit.members.size());
                    for (const auto& mj : unit.members) z += lv.projm[mj.matrix_id][mj.ref];
                    z *= inv;
                }
                lv.emb[u] = z.cwiseMax(0.0);
            }
        }
    }

    // grads_matrix += dproj ⊗ input^T, exploiting sparse level-0 inputs.
    void accumulate_matrix_grad(Mat& gm, const Vec& dproj, const ForwardTape& t, std::size_t k,
                                std::uint32_t ref, const NodeRef& src) const {
        if (k > 1) {
            gm.noalias() += dproj * t.levels[k - 2].emb[ref].transpose();
            return;
        }
        if (!src.is_txn()) return;  // zero features: no gradient contribution
        const auto& ft = *g_.features;
        if (ft.sparse) {
            for (auto idx : ft.multihot[src.index]) {
                gm.col(static_cast<Eigen::Index>(idx)) += dproj;
            }
        } else {
            Eigen::Map<const Vec> row(ft.dense.row(src.index),
                                      static_cast<Eigen::Index>(ft.dense.cols));
            gm.noalias() += dproj * row.transpose();
        }
    }
};

// ---------------------------------------------------------------------------
// Checkpoint I/O: "GFCK" magic, u32 version, u64 JSON-manifest length, the
// manifest (aggregator, dims, tensor shapes, caller extras), then the tensor
// data as little-endian f64 in manifest order (column-major matrices).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, ModelParams& params,
                            const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json manifest;
    manifest["format"] = "gnn-checkpoint";
    manifest["aggregator"] = aggregator_name(params.aggregator);
    manifest["input_width"] = params.input_width;
    manifest["hidden"] = params.hidden;
    manifest["n_layers"] = params.n_layers();
    manifest["leaky_slope"] = format_double_exact(params.leaky_slope);
    manifest["layout"] = "col_major_f64_le";
    nlohmann::json tensors = nlohmann::json::array();
    auto views = tensor_views(params);
    for (const auto& v : views) {
        tensors.push_back(nlohmann::json{{"name", v.name}, {"size", v.size}});
    }
    manifest["tensors"] = std::move(tensors);
    manifest["extra"] = extra;

    const std::string mjson = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out.write("GFCK", 4);
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const std::uint64_t len = mjson.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    for (const auto& v : views) {
        out.write(reinterpret_cast<const char*>(v.data),
                  static_cast<std::streamsize>(v.size * sizeof(double)));
    }
    if (!out) throw DataError("checkpoint write failed: " + path);
}

struct LoadedCheckpoint {
    ModelParams params;
    nlohmann::json extra;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "GFCK", 4) != 0) {
        throw DataError("not a checkpoint file: " + path);
    }
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    std::string mjson(len, '\0');
    in.read(mjson.data(), static_cast<std::streamsize>(len));
    if (!in) throw DataError("truncated checkpoint manifest: " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mjson);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    LoadedCheckpoint lc;
    try {
        lc.params.init(manifest.at("input_width").get<std::size_t>(),
                       manifest.at("hidden").get<std::size_t>(),
                       manifest.at("n_layers").get<std::size_t>(),
                       aggregator_from_name(manifest.at("aggregator").get<std::string>()),
                       /*seed=*/0);
        lc.params.leaky_slope =
            std::strtod(manifest.at("leaky_slope").get<std::string>().c_str(), nullptr);
        lc.extra = manifest.value("extra", nlohmann::json::object());
        auto views = tensor_views(lc.params);
        const auto& tensors = manifest.at("tensors");
        if (tensors.size() != views.size()) throw DataError("checkpoint tensor list mismatch");
        for (std::size_t i = 0; i < views.size(); ++i) {
            if (tensors[i].at("size").get<std::size_t>() != views[i].size) {
                throw DataError("checkpoint tensor size mismatch at " +
                                std::string(views[i].name));
            }
            in.read(reinterpret_cast<char*>(views[i].data),
                    static_cast<std::streamsize>(views[i].size * sizeof(double)));
        }
        if (!in) throw DataError("truncated checkpoint data: " + path);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    return lc;
}

}  // namespace graphfc
