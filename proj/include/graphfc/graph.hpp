#pragma once

// Bipartite transaction graph: one node per transaction, one virtual node per
// distinct key value (importer, HS code, optional dense HS prefix), and an
// edge between each transaction and each of its key nodes. Virtual nodes
// carry implicit zero features; transactions carry rows of a FeatureTable.
//
// Also provides fixed-fan-out neighbor sampling with a history cutoff so that
// scoring-time roots only ever see historical transactions as neighbors.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "graphfc/common.hpp"
#include "graphfc/data.hpp"
#include "graphfc/features.hpp"

namespace graphfc {

enum class NodeKind : std::uint8_t { Txn = 0, Importer = 1, HsCode = 2, HsPrefix = 3 };

inline constexpr std::size_t kMaxVirtualKinds = 3;
inline constexpr std::uint32_t kNoNode = std::numeric_limits<std::uint32_t>::max();

inline const char* node_kind_name(NodeKind k) {
    switch (k) {
        case NodeKind::Txn: return "txn";
        case NodeKind::Importer: return "importer";
        case NodeKind::HsCode: return "hs_code";
        case NodeKind::HsPrefix: return "hs_prefix";
    }
    return "?";
}

struct NodeRef {
    NodeKind kind = NodeKind::Txn;
    std::uint32_t index = 0;  // Txn: dataset row id; virtual: per-kind node id

    bool operator==(const NodeRef& o) const { return kind == o.kind && index == o.index; }
    bool is_txn() const { return kind == NodeKind::Txn; }
    std::uint64_t uid() const {
        return (static_cast<std::uint64_t>(kind) << 32) | static_cast<std::uint64_t>(index);
    }
};

enum class GraphVariant : std::uint8_t { Full = 0, LabeledOnly = 1, UnlabeledOnly = 2 };

inline const char* graph_variant_name(GraphVariant v) {
    switch (v) {
        case GraphVariant::Full: return "full";
        case GraphVariant::LabeledOnly: return "labeled_only";
        case GraphVariant::UnlabeledOnly: return "unlabeled_only";
    }
    return "?";
}

inline GraphVariant graph_variant_from_name(const std::string& s) {
    if (s == "full") return GraphVariant::Full;
    if (s == "labeled_only") return GraphVariant::LabeledOnly;
    if (s == "unlabeled_only") return GraphVariant::UnlabeledOnly;
    throw ConfigError("unknown graph variant: '" + s + "'");
}

// Which virtual-key kinds participate in the graph. The HS-prefix key (first
// four digits) is the optional dense variant.
struct GraphKeys {
    bool importer = true;
    bool hs = true;
    bool hs_prefix = false;

    std::size_t active() const {
        return (importer ? 1u : 0u) + (hs ? 1u : 0u) + (hs_prefix ? 1u : 0u);
    }
};

// Role of a transaction row inside a built graph.
enum class TxnRole : std::uint8_t {
    Absent = 0,
    Message = 1,  // participates in message passing and candidate pools
    Scoring = 2,  // root-only: never sampled as anyone's neighbor
};

struct GraphBuildSpec {
    GraphVariant variant = GraphVariant::Full;
    GraphKeys keys;
    // Rows considered for inclusion (filtered by `variant`); empty = all rows.
    std::vector<std::uint32_t> universe;
    // Rows force-included as scoring-only roots (bypass the variant filter).
    std::vector<std::uint32_t> scoring_rows;
};

struct TransactionGraph {
    std::shared_ptr<const FeatureTable> features;  // row-aligned with the dataset
    GraphKeys keys;
    GraphVariant variant = GraphVariant::Full;

    std::vector<TxnRole> role;          // per dataset row
    std::vector<DateDays> txn_date;     // per dataset row
    std::vector<std::uint8_t> labeled;  // per dataset row (visible outcome)

    // Per dataset row: virtual neighbor node id per kind slot (kNoNode = none).
    std::array<std::vector<std::uint32_t>, kMaxVirtualKinds> txn_virtual;

    // Per virtual kind: key value strings and CSR adjacency to txn rows.
    struct VirtualSide {
        std::vector<std::string> values;         // node id -> key value
        std::vector<std::uint32_t> offsets{0};   // CSR into txn_ids
        std::vector<std::uint32_t> txn_ids;      // dataset row ids, build order
        std::size_t size() const { return values.size(); }
    };
    std::array<VirtualSide, kMaxVirtualKinds> virtual_side;

    std::size_t n_txn = 0;    // included transaction nodes (message + scoring)
    std::size_t n_edges = 0;  // txn-virtual incidences

    std::size_t n_virtual() const {
        std::size_t n = 0;
        for (const auto& s : virtual_side) n += s.size();
        return n;
    }
    std::size_t n_nodes() const { return n_txn + n_virtual(); }

    bool txn_included(std::uint32_t row) const { return role[row] != TxnRole::Absent; }

    static std::size_t kind_slot(NodeKind k) {
        return static_cast<std::size_t>(k) - 1;  // Importer=0, HsCode=1, HsPrefix=2
    }

    // Virtual neighbors of a transaction row (at most one per active kind).
    std::vector<NodeRef> txn_neighbors(std::uint32_t row) const {
        std::vector<NodeRef> out;
        for (std::size_t s = 0; s < kMaxVirtualKinds; ++s) {
            if (txn_virtual[s].empty()) continue;
            const std::uint32_t v = txn_virtual[s][row];
            if (v != kNoNode) out.push_back({static_cast<NodeKind>(s + 1), v});
        }
        return out;
    }

    std::pair<const std::uint32_t*, const std::uint32_t*> virtual_children(NodeKind kind,
                                                                           std::uint32_t id) const {
        const auto& side = virtual_side[kind_slot(kind)];
        return {side.txn_ids.data() + side.offsets[id],
                side.txn_ids.data() + side.offsets[id + 1]};
    }

    std::size_t degree(const NodeRef& n) const {
        if (n.is_txn()) return txn_neighbors(n.index).size();
        const auto [b, e] = virtual_children(n.kind, n.index);
        return static_cast<std::size_t>(e - b);
    }

    // Approximate resident size of graph-owned containers, in bytes.
    std::size_t memory_bytes() const {
        auto vec_bytes = [](const auto& v) { return v.capacity() * sizeof(v[0]); };
        std::size_t total = vec_bytes(role) + vec_bytes(txn_date) + vec_bytes(labeled);
        for (const auto& tv : txn_virtual) total += vec_bytes(tv);
        for (const auto& s : virtual_side) {
            total += vec_bytes(s.offsets) + vec_bytes(s.txn_ids);
            total += s.values.capacity() * sizeof(std::string);
            for (const auto& v : s.values) {
                if (v.size() > sizeof(std::string)) total += v.capacity();
            }
        }
        return total;
    }
};

inline TransactionGraph build_graph(const Dataset& d,
                                    std::shared_ptr<const FeatureTable> features,
                                    const GraphBuildSpec& spec) {
    if (!features) throw InternalError("build_graph: null feature table");
    if (features->rows() != d.size()) {
        throw DataError("build_graph: feature table rows (" + std::to_string(features->rows()) +
                        ") do not align with dataset records (" + std::to_string(d.size()) + ")");
    }
    if (spec.keys.active() == 0) throw ConfigError("build_graph: no virtual-key kinds enabled");

    TransactionGraph g;
    g.features = std::move(features);
    g.keys = spec.keys;
    g.variant = spec.variant;
    g.role.assign(d.size(), TxnRole::Absent);
    g.txn_date.resize(d.size());
    g.labeled.assign(d.size(), 0);

    auto passes_variant = [&](std::uint32_t row) {
        switch (spec.variant) {
            case GraphVariant::Full: return true;
            case GraphVariant::LabeledOnly: return d.is_labeled(row);
            case GraphVariant::UnlabeledOnly: return !d.is_labeled(row);
        }
        return true;
    };

    if (spec.universe.empty()) {
        for (std::uint32_t row = 0; row < d.size(); ++row) {
            if (passes_variant(row)) g.role[row] = TxnRole::Message;
        }
    } else {
        for (auto row : spec.universe) {
            if (row >= d.size()) throw InternalError("build_graph: universe row out of range");
            if (passes_variant(row)) g.role[row] = TxnRole::Message;
        }
    }
    for (auto row : spec.scoring_rows) {
        if (row >= d.size()) throw InternalError("build_graph: scoring row out of range");
        if (g.role[row] == TxnRole::Message) {
            throw InternalError("build_graph: row is both message and scoring: " +
                                d.records[row].txn_id);
        }
        g.role[row] = TxnRole::Scoring;
    }

    const bool use_kind[kMaxVirtualKinds] = {spec.keys.importer, spec.keys.hs,
                                             spec.keys.hs_prefix};
    std::array<std::unordered_map<std::string, std::uint32_t>, kMaxVirtualKinds> key_ids;
    for (std::size_t s = 0; s < kMaxVirtualKinds; ++s) {
        if (use_kind[s]) g.txn_virtual[s].assign(d.size(), kNoNode);
    }

    auto key_of = [&](const TransactionRecord& r, std::size_t slot) -> std::string {
        switch (slot) {
            case 0: return r.importer_id;
            case 1: return r.hs_code;
            default: return r.hs_code.substr(0, 4);
        }
    };

    // First pass: assign virtual node ids in first-appearance order and count
    // children for CSR sizing.
    for (std::uint32_t row = 0; row < d.size(); ++row) {
        if (g.role[row] == TxnRole::Absent) continue;
        ++g.n_txn;
        g.txn_date[row] = d.records[row].date;
        g.labeled[row] = d.is_labeled(row) ? 1 : 0;
        for (std::size_t s = 0; s < kMaxVirtualKinds; ++s) {
            if (!use_kind[s]) continue;
            auto& side = g.virtual_side[s];
            const std::string key = key_of(d.records[row], s);
            auto [it, inserted] =
                key_ids[s].emplace(key, static_cast<std::uint32_t>(side.values.size()));
            if (inserted) {
                side.values.push_back(key);
                side.offsets.push_back(0);
            }
            g.txn_virtual[s][row] = it->second;
            ++side.offsets[it->second + 1];
            ++g.n_edges;
        }
    }
    // Prefix-sum offsets, then a second pass fills adjacency in row order, so
    // each virtual node's child list is stable across rebuilds.
    for (std::size_t s = 0; s < kMaxVirtualKinds; ++s) {
        auto& side = g.virtual_side[s];
        for (std::size_t i = 1; i < side.offsets.size(); ++i) side.offsets[i] += side.offsets[i - 1];
        side.txn_ids.resize(side.offsets.back());
    }
    std::array<std::vector<std::uint32_t>, kMaxVirtualKinds> cursor;
    for (std::size_t s = 0; s < kMaxVirtualKinds; ++s) {
        cursor[s].assign(g.virtual_side[s].size(), 0);
    }
    for (std::uint32_t row = 0; row < d.size(); ++row) {
        if (g.role[row] == TxnRole::Absent) continue;
        for (std::size_t s = 0; s < kMaxVirtualKinds; ++s) {
            if (!use_kind[s]) continue;
            const std::uint32_t v = g.txn_virtual[s][row];
            auto& side = g.virtual_side[s];
            side.txn_ids[side.offsets[v] + cursor[s][v]++] = row;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Fixed-fan-out sampling.
// ---------------------------------------------------------------------------

inline constexpr DateDays kNoCutoff = std::numeric_limits<DateDays>::max();

// Child candidates of `node` that may carry messages: scoring-only rows and
// rows dated after `cutoff` are excluded. Order follows adjacency order.
inline std::vector<NodeRef> message_candidates(const TransactionGraph& g, const NodeRef& node,
                                               DateDays cutoff = kNoCutoff) {
    std::vector<NodeRef> out;
    if (node.is_txn()) {
        return g.txn_neighbors(node.index);  // virtual nodes are timeless
    }
    const auto [b, e] = g.virtual_children(node.kind, node.index);
    out.reserve(static_cast<std::size_t>(e - b));
    for (const auto* p = b; p != e; ++p) {
        if (g.role[*p] != TxnRole::Message) continue;
        if (g.txn_date[*p] > cutoff) continue;
        out.push_back({NodeKind::Txn, *p});
    }
    return out;
}

// min(fanout, |candidates|) distinct children, uniform without replacement,
// returned in candidate order. Fully determined by (rng stream, graph).
inline std::vector<NodeRef> sample_children(const TransactionGraph& g, const NodeRef& node,
                                            std::size_t fanout, Rng& rng,
                                            DateDays cutoff = kNoCutoff) {
    std::vector<NodeRef> cand = message_candidates(g, node, cutoff);
    if (cand.size() <= fanout) return cand;
    const auto keep = rng.sample_without_replacement(cand.size(), fanout);
    std::vector<NodeRef> out;
    out.reserve(keep.size());
    for (auto k : keep) out.push_back(cand[k]);
    return out;
}

// Rooted sampled tree: positions[0] is the root; children are contiguous and
// recorded via parent links. Node kinds alternate by construction.
struct SampledSubgraph {
    struct Position {
        NodeRef node;
        std::int32_t parent = -1;
        std::uint8_t depth = 0;
    };
    std::vector<Position> positions;

    std::size_t node_count() const { return positions.size(); }

    std::vector<std::uint32_t> children_of(std::uint32_t pos) const {
        std::vector<std::uint32_t> out;
        for (std::uint32_t i = pos + 1; i < positions.size(); ++i) {
            if (positions[i].parent == static_cast<std::int32_t>(pos)) out.push_back(i);
        }
        return out;
    }
};

// Upper bound on sampled positions per root used by the complexity guard.
inline std::size_t sampled_node_budget(const std::vector<std::size_t>& fanouts) {
    std::size_t prod = 1;
    for (auto f : fanouts) prod *= f;
    return prod + 1;
}

inline SampledSubgraph sample_subgraph(const TransactionGraph& g, const NodeRef& root,
                                       const std::vector<std::size_t>& fanouts,
                                       std::uint64_t seed, DateDays cutoff = kNoCutoff) {
    if (fanouts.empty()) throw ConfigError("sample_subgraph: fanouts must be non-empty");
    for (auto f : fanouts) {
        if (f == 0) throw ConfigError("sample_subgraph: fanouts must be positive");
    }
    if (root.is_txn()) {
        if (root.index >= g.role.size() || g.role[root.index] == TxnRole::Absent) {
            throw DataError("sample_subgraph: root transaction not in graph");
        }
    } else if (root.index >= g.virtual_side[TransactionGraph::kind_slot(root.kind)].size()) {
        throw DataError("sample_subgraph: root virtual node not in graph");
    }

    SampledSubgraph sg;
    sg.positions.push_back({root, -1, 0});
    std::size_t level_begin = 0, level_end = 1;
    for (std::size_t hop = 0; hop < fanouts.size(); ++hop) {
        for (std::size_t p = level_begin; p < level_end; ++p) {
            const NodeRef parent = sg.positions[p].node;
            Rng rng(derive_seed(seed, "sample_subgraph",
                                {parent.uid(), static_cast<std::uint64_t>(hop)}));
            for (const auto& child : sample_children(g, parent, fanouts[hop], rng, cutoff)) {
                sg.positions.push_back(
                    {child, static_cast<std::int32_t>(p), static_cast<std::uint8_t>(hop + 1)});
            }
        }
        level_begin = level_end;
        level_end = sg.positions.size();
    }
    return sg;
}

// ---------------------------------------------------------------------------
// Debug dump: one JSON header line with counts, then little-endian
// (u32 kind, u64 id) pairs, two per edge (txn then virtual endpoint).
// ---------------------------------------------------------------------------

inline void dump_graph(const TransactionGraph& g, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open graph dump for writing: " + path);
    nlohmann::json header;
    header["n_txn"] = g.n_txn;
    header["n_virtual"] = g.n_virtual();
    header["n_edges"] = g.n_edges;
    header["variant"] = graph_variant_name(g.variant);
    out << header.dump() << "\n";
    auto put_pair = [&](std::uint32_t kind, std::uint64_t id) {
        char buf[12];
        std::memcpy(buf, &kind, 4);
        std::memcpy(buf + 4, &id, 8);
        out.write(buf, sizeof(buf));
    };
    for (std::size_t s = 0; s < kMaxVirtualKinds; ++s) {
        const auto& side = g.virtual_side[s];
        for (std::uint32_t v = 0; v < side.size(); ++v) {
            for (std::uint32_t k = side.offsets[v]; k < side.offsets[v + 1]; ++k) {
                put_pair(static_cast<std::uint32_t>(NodeKind::Txn), side.txn_ids[k]);
                put_pair(static_cast<std::uint32_t>(s + 1), v);
            }
        }
    }
    if (!out) throw DataError("graph dump write failed: " + path);
}

}  // namespace graphfc
