// Bipartite transaction-graph construction, neighbor enumeration, fixed
// fan-out sampling, and the sampled-tree size guard.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>
#include <json.hpp>

#include "graphfc/data.hpp"
#include "graphfc/graph.hpp"
#include "graphfc/synth.hpp"

using namespace graphfc;
using Catch::Matchers::ContainsSubstring;

namespace {

TransactionRecord rec(std::string id, std::string imp, std::string hs,
                      const char* date = "2018-06-01") {
    TransactionRecord r;
    r.txn_id = std::move(id);
    r.importer_id = std::move(imp);
    r.hs_code = std::move(hs);
    r.date = parse_iso_date(date);
    r.declared_value = 100.0;
    r.quantity = 1.0;
    r.gross_weight = 2.0;
    r.tariff_rate = 0.1;
    r.paid_tax = 10.0;
    r.has_outcome = true;
    r.illicit = false;
    r.raised_revenue = 0.0;
    return r;
}

// All rows tagged Train and labeled unless changed afterwards.
Dataset graph_dataset(std::vector<TransactionRecord> recs) {
    Dataset d;
    d.records = std::move(recs);
    d.reset_tags();
    for (auto& s : d.split) s = Split::Train;
    for (auto& l : d.labeled) l = 1;
    return d;
}

std::shared_ptr<const FeatureTable> stub_features(std::size_t n, std::size_t width = 4) {
    return std::make_shared<FeatureTable>(
        FeatureTable::from_multihot(std::vector<std::vector<std::uint32_t>>(n), width));
}

TransactionGraph build_full(const Dataset& d) {
    return build_graph(d, stub_features(d.size()), GraphBuildSpec{});
}

std::vector<std::uint32_t> children_rows(const TransactionGraph& g, NodeKind kind,
                                         std::uint32_t id) {
    const auto [b, e] = g.virtual_children(kind, id);
    return std::vector<std::uint32_t>(b, e);
}

}  // namespace

TEST_CASE("three transactions over two importers and two hs codes") {
    Dataset d = graph_dataset({
        rec("t0", "impA", "850440"),
        rec("t1", "impA", "010121"),
        rec("t2", "impB", "850440"),
    });
    TransactionGraph g = build_full(d);

    REQUIRE(g.n_txn == 3);
    REQUIRE(g.n_virtual() == 4);
    REQUIRE(g.n_nodes() == 7);
    REQUIRE(g.n_edges == 6);
    REQUIRE(g.n_edges == 2 * g.n_txn);

    // Virtual node ids follow first appearance in row order.
    const auto& imp = g.virtual_side[TransactionGraph::kind_slot(NodeKind::Importer)];
    const auto& hs = g.virtual_side[TransactionGraph::kind_slot(NodeKind::HsCode)];
    REQUIRE(imp.values == std::vector<std::string>{"impA", "impB"});
    REQUIRE(hs.values == std::vector<std::string>{"850440", "010121"});

    // Each transaction touches exactly its importer node and its HS node.
    REQUIRE(g.txn_neighbors(0) ==
            std::vector<NodeRef>{{NodeKind::Importer, 0}, {NodeKind::HsCode, 0}});
    REQUIRE(g.txn_neighbors(1) ==
            std::vector<NodeRef>{{NodeKind::Importer, 0}, {NodeKind::HsCode, 1}});
    REQUIRE(g.txn_neighbors(2) ==
            std::vector<NodeRef>{{NodeKind::Importer, 1}, {NodeKind::HsCode, 0}});

    // CSR child lists are in row order.
    REQUIRE(children_rows(g, NodeKind::Importer, 0) == std::vector<std::uint32_t>{0, 1});
    REQUIRE(children_rows(g, NodeKind::Importer, 1) == std::vector<std::uint32_t>{2});
    REQUIRE(children_rows(g, NodeKind::HsCode, 0) == std::vector<std::uint32_t>{0, 2});
    REQUIRE(children_rows(g, NodeKind::HsCode, 1) == std::vector<std::uint32_t>{1});

    REQUIRE(g.degree({NodeKind::Txn, 0}) == 2);
    REQUIRE(g.degree({NodeKind::Importer, 0}) == 2);
    REQUIRE(g.degree({NodeKind::Importer, 1}) == 1);
    REQUIRE(g.degree({NodeKind::HsCode, 0}) == 2);
}

TEST_CASE("edge and node counts on synthetic data") {
    SynthConfig sc;
    sc.n_transactions = 2000;
    sc.n_importers = 80;
    sc.n_hs_codes = 40;
    sc.seed = 7;
    Dataset d = generate_synthetic(sc);
    temporal_split(d, parse_iso_date("2019-01-01"), 0.2);
    mask_labels(d, 0.3, 5);

    SECTION("full graph covers every row with two edges each") {
        TransactionGraph g = build_full(d);
        REQUIRE(g.n_txn == d.size());
        REQUIRE(g.n_edges == 2 * g.n_txn);

        std::set<std::string> importers, codes;
        for (const auto& r : d.records) {
            importers.insert(r.importer_id);
            codes.insert(r.hs_code);
        }
        REQUIRE(g.n_nodes() == d.size() + importers.size() + codes.size());
        REQUIRE(g.virtual_side[0].size() == importers.size());
        REQUIRE(g.virtual_side[1].size() == codes.size());
    }

    SECTION("restricting the universe restricts nodes and edges consistently") {
        GraphBuildSpec spec;
        spec.universe = d.indices_of(Split::Train);
        TransactionGraph g = build_graph(d, stub_features(d.size()), spec);
        REQUIRE(g.n_txn == d.count_of(Split::Train));
        REQUIRE(g.n_edges == 2 * g.n_txn);

        std::set<std::string> importers, codes;
        for (auto row : spec.universe) {
            importers.insert(d.records[row].importer_id);
            codes.insert(d.records[row].hs_code);
        }
        REQUIRE(g.n_nodes() == g.n_txn + importers.size() + codes.size());
    }

    SECTION("hs-prefix key adds a third edge per transaction") {
        GraphBuildSpec spec;
        spec.keys.hs_prefix = true;
        TransactionGraph g = build_graph(d, stub_features(d.size()), spec);
        REQUIRE(g.n_edges == 3 * g.n_txn);
        const auto& prefixes = g.virtual_side[TransactionGraph::kind_slot(NodeKind::HsPrefix)];
        std::set<std::string> expect;
        for (const auto& r : d.records) expect.insert(r.hs_code.substr(0, 4));
        REQUIRE(prefixes.size() == expect.size());
        for (const auto& v : prefixes.values) REQUIRE(v.size() == 4);
    }

    SECTION("child lists are identical across rebuilds") {
        TransactionGraph a = build_full(d);
        TransactionGraph b = build_full(d);
        for (std::size_t s = 0; s < kMaxVirtualKinds; ++s) {
            REQUIRE(a.virtual_side[s].values == b.virtual_side[s].values);
            REQUIRE(a.virtual_side[s].offsets == b.virtual_side[s].offsets);
            REQUIRE(a.virtual_side[s].txn_ids == b.virtual_side[s].txn_ids);
        }
    }
}

TEST_CASE("graph variants filter rows by label visibility") {
    Dataset d = graph_dataset({
        rec("t0", "a", "111111"),
        rec("t1", "a", "111111"),
        rec("t2", "b", "222222"),
        rec("t3", "b", "222222"),
        rec("t4", "c", "333333"),
        rec("t5", "c", "333333"),
    });
    for (std::size_t i = 2; i < d.size(); ++i) d.labeled[i] = 0;

    auto with_variant = [&](GraphVariant v) {
        GraphBuildSpec spec;
        spec.variant = v;
        return build_graph(d, stub_features(d.size()), spec);
    };

    SECTION("labeled-only keeps the two labeled rows") {
        TransactionGraph g = with_variant(GraphVariant::LabeledOnly);
        REQUIRE(g.n_txn == 2);
        REQUIRE(g.n_edges == 4);
        REQUIRE(g.txn_included(0));
        REQUIRE_FALSE(g.txn_included(2));
        REQUIRE(g.virtual_side[0].values == std::vector<std::string>{"a"});
    }

    SECTION("unlabeled-only keeps the complement") {
        TransactionGraph g = with_variant(GraphVariant::UnlabeledOnly);
        REQUIRE(g.n_txn == 4);
        REQUIRE_FALSE(g.txn_included(0));
        REQUIRE(g.txn_included(4));
    }

    SECTION("full keeps everything") {
        REQUIRE(with_variant(GraphVariant::Full).n_txn == 6);
    }

    SECTION("labeled-only over an all-unlabeled dataset builds an empty graph") {
        for (auto& l : d.labeled) l = 0;
        TransactionGraph g = with_variant(GraphVariant::LabeledOnly);
        REQUIRE(g.n_txn == 0);
        REQUIRE(g.n_edges == 0);
        REQUIRE(g.n_virtual() == 0);
    }
}

TEST_CASE("scoring rows join the graph but never carry messages") {
    Dataset d = graph_dataset({
        rec("t0", "a", "111111"),
        rec("t1", "a", "111111"),
        rec("t2", "a", "111111"),
    });
    GraphBuildSpec spec;
    spec.universe = {0, 1};
    spec.scoring_rows = {2};
    TransactionGraph g = build_graph(d, stub_features(d.size()), spec);

    REQUIRE(g.n_txn == 3);
    REQUIRE(g.role[2] == TxnRole::Scoring);
    REQUIRE(g.txn_neighbors(2).size() == 2);  // edges exist for the root itself

    // ...but the importer's message candidates exclude the scoring row.
    const auto cands = message_candidates(g, {NodeKind::Importer, 0});
    REQUIRE(cands == std::vector<NodeRef>{{NodeKind::Txn, 0}, {NodeKind::Txn, 1}});

    SECTION("a row listed as both message and scoring is rejected") {
        spec.scoring_rows = {1};
        REQUIRE_THROWS_AS(build_graph(d, stub_features(d.size()), spec), InternalError);
    }
}

TEST_CASE("message candidates respect the history cutoff") {
    Dataset d = graph_dataset({
        rec("t0", "a", "111111", "2018-01-10"),
        rec("t1", "a", "111111", "2018-03-10"),
        rec("t2", "a", "111111", "2018-05-10"),
    });
    TransactionGraph g = build_full(d);
    const NodeRef imp{NodeKind::Importer, 0};

    REQUIRE(message_candidates(g, imp).size() == 3);
    const auto upto_march = message_candidates(g, imp, parse_iso_date("2018-03-10"));
    REQUIRE(upto_march == std::vector<NodeRef>{{NodeKind::Txn, 0}, {NodeKind::Txn, 1}});
    REQUIRE(message_candidates(g, imp, parse_iso_date("2017-12-31")).empty());

    // Virtual neighbors of a transaction are timeless.
    REQUIRE(message_candidates(g, {NodeKind::Txn, 2}, parse_iso_date("2017-01-01")).size() == 2);
}

TEST_CASE("fixed fan-out child sampling") {
    std::vector<TransactionRecord> recs;
    for (int i = 0; i < 100; ++i) {
        recs.push_back(rec("t" + std::to_string(i), "big",
                           std::string("1111") + char('0' + i % 10) + char('0' + i / 10 % 10)));
    }
    Dataset d = graph_dataset(std::move(recs));
    TransactionGraph g = build_full(d);
    const NodeRef imp{NodeKind::Importer, 0};
    REQUIRE(g.degree(imp) == 100);

    SECTION("a fan-out under the degree keeps distinct children in candidate order") {
        Rng rng(derive_seed(42, "fanout-test", {0}));
        const auto picked = sample_children(g, imp, 10, rng);
        REQUIRE(picked.size() == 10);
        for (std::size_t i = 1; i < picked.size(); ++i) {
            REQUIRE(picked[i - 1].index < picked[i].index);  // order + distinctness
        }
        for (const auto& c : picked) {
            REQUIRE(c.kind == NodeKind::Txn);
            REQUIRE(c.index < 100);
        }
    }

    SECTION("a fan-out at or above the degree returns every candidate") {
        Rng rng(derive_seed(42, "fanout-test", {1}));
        const auto all = sample_children(g, imp, 100, rng);
        REQUIRE(all.size() == 100);
        Rng rng2(derive_seed(42, "fanout-test", {2}));
        REQUIRE(sample_children(g, imp, 250, rng2).size() == 100);
    }

    SECTION("identical rng streams reproduce the draw, fresh streams move it") {
        Rng a(12345), b(12345), c(99999);
        const auto pa = sample_children(g, imp, 10, a);
        const auto pb = sample_children(g, imp, 10, b);
        REQUIRE(pa == pb);
        bool any_diff = false;
        for (int trial = 0; trial < 20 && !any_diff; ++trial) {
            any_diff = sample_children(g, imp, 10, c) != pa;
        }
        REQUIRE(any_diff);
    }
}

TEST_CASE("rooted subgraph sampling") {
    SynthConfig sc;
    sc.n_transactions = 1500;
    sc.n_importers = 25;
    sc.n_hs_codes = 12;
    sc.seed = 19;
    Dataset d = generate_synthetic(sc);
    d.reset_tags();
    for (auto& s : d.split) s = Split::Train;
    for (auto& l : d.labeled) l = 1;
    TransactionGraph g = build_full(d);

    SECTION("a transaction root expands to its two virtual keys, then their children") {
        const NodeRef root{NodeKind::Txn, 3};
        const SampledSubgraph sg = sample_subgraph(g, root, {25, 10}, 77);
        REQUIRE(sg.positions[0].node == root);
        REQUIRE(sg.positions[0].parent == -1);

        const auto hop1 = sg.children_of(0);
        REQUIRE(hop1.size() == 2);  // transaction degree is one per key kind
        REQUIRE(sg.positions[hop1[0]].node == g.txn_neighbors(3)[0]);
        REQUIRE(sg.positions[hop1[1]].node == g.txn_neighbors(3)[1]);

        for (const auto& p : sg.positions) {
            if (p.depth == 0 || p.depth == 2) {
                REQUIRE(p.node.is_txn());
            } else {
                REQUIRE_FALSE(p.node.is_txn());  // kinds alternate by depth
            }
            if (p.parent >= 0) {
                const auto cands =
                    message_candidates(g, sg.positions[static_cast<std::size_t>(p.parent)].node);
                REQUIRE(std::find(cands.begin(), cands.end(), p.node) != cands.end());
            }
        }
    }

    SECTION("same root and seed reproduce the tree; another seed moves it") {
        const NodeRef root{NodeKind::Txn, 10};
        const auto a = sample_subgraph(g, root, {25, 10}, 5);
        const auto b = sample_subgraph(g, root, {25, 10}, 5);
        REQUIRE(a.positions.size() == b.positions.size());
        for (std::size_t i = 0; i < a.positions.size(); ++i) {
            REQUIRE(a.positions[i].node == b.positions[i].node);
            REQUIRE(a.positions[i].parent == b.positions[i].parent);
            REQUIRE(a.positions[i].depth == b.positions[i].depth);
        }
        bool differs = false;
        for (std::uint64_t s = 6; s < 16 && !differs; ++s) {
            const auto c = sample_subgraph(g, root, {25, 10}, s);
            differs = c.positions.size() != a.positions.size();
            for (std::size_t i = 0; !differs && i < c.positions.size(); ++i) {
                differs = !(c.positions[i].node == a.positions[i].node);
            }
        }
        REQUIRE(differs);
    }

    SECTION("history cutoff removes later transactions from every pool") {
        const DateDays cutoff = parse_iso_date("2018-06-01");
        std::uint32_t late_root = 0;
        while (d.records[late_root].date <= cutoff) ++late_root;
        const auto sg = sample_subgraph(g, {NodeKind::Txn, late_root}, {25, 25}, 3, cutoff);
        for (std::size_t i = 1; i < sg.positions.size(); ++i) {
            const auto& p = sg.positions[i];
            if (p.node.is_txn()) REQUIRE(g.txn_date[p.node.index] <= cutoff);
        }
        const NodeRef imp = g.txn_neighbors(late_root)[0];
        REQUIRE(message_candidates(g, imp, cutoff).size() < message_candidates(g, imp).size());
    }

    SECTION("tree size stays within the fan-out product budget") {
        REQUIRE(sampled_node_budget({25, 10}) == 251);
        REQUIRE(sampled_node_budget({25, 25}) == 626);
        Rng pick(derive_seed(4, "budget-roots", {}));
        for (int trial = 0; trial < 40; ++trial) {
            const std::vector<std::size_t> fanouts{5 + pick.below(26), 5 + pick.below(26)};
            NodeRef root;
            if (trial % 3 == 0) {
                root = {NodeKind::Importer, static_cast<std::uint32_t>(
                                                pick.below(g.virtual_side[0].size()))};
            } else {
                root = {NodeKind::Txn, static_cast<std::uint32_t>(pick.below(d.size()))};
            }
            const auto sg = sample_subgraph(g, root, fanouts, 1000 + trial);
            REQUIRE(sg.node_count() <= sampled_node_budget(fanouts));
        }
    }

    SECTION("invalid roots and fan-outs are rejected") {
        REQUIRE_THROWS_AS(sample_subgraph(g, {NodeKind::Txn, 0}, {}, 1), ConfigError);
        REQUIRE_THROWS_AS(sample_subgraph(g, {NodeKind::Txn, 0}, {5, 0}, 1), ConfigError);
        REQUIRE_THROWS_AS(
            sample_subgraph(g, {NodeKind::Txn, static_cast<std::uint32_t>(d.size())}, {5, 5}, 1),
            DataError);
        REQUIRE_THROWS_AS(sample_subgraph(g, {NodeKind::Importer, 9999}, {5, 5}, 1), DataError);
        Dataset part = d;
        part.labeled[7] = 0;
        GraphBuildSpec spec;
        spec.variant = GraphVariant::LabeledOnly;
        TransactionGraph gl = build_graph(part, stub_features(part.size()), spec);
        REQUIRE_THROWS_WITH(sample_subgraph(gl, {NodeKind::Txn, 7}, {5, 5}, 1),
                            ContainsSubstring("root transaction not in graph"));
    }
}

TEST_CASE("graph construction rejects bad inputs") {
    Dataset d = graph_dataset({rec("t0", "a", "111111")});
    REQUIRE_THROWS_AS(build_graph(d, nullptr, GraphBuildSpec{}), InternalError);
    REQUIRE_THROWS_AS(build_graph(d, stub_features(5), GraphBuildSpec{}), DataError);
    GraphBuildSpec nokeys;
    nokeys.keys = {false, false, false};
    REQUIRE_THROWS_AS(build_graph(d, stub_features(1), nokeys), ConfigError);
    GraphBuildSpec badrow;
    badrow.universe = {3};
    REQUIRE_THROWS_AS(build_graph(d, stub_features(1), badrow), InternalError);
}

TEST_CASE("graph dump carries counts and every edge") {
    Dataset d = graph_dataset({
        rec("t0", "impA", "850440"),
        rec("t1", "impA", "010121"),
        rec("t2", "impB", "850440"),
    });
    TransactionGraph g = build_full(d);
    const auto path =
        (std::filesystem::temp_directory_path() / "graphfc_dump_test.bin").string();
    dump_graph(g, path);

    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::string header_line;
    std::getline(in, header_line);
    const auto header = nlohmann::json::parse(header_line);
    REQUIRE(header.at("n_txn").get<std::size_t>() == 3);
    REQUIRE(header.at("n_virtual").get<std::size_t>() == 4);
    REQUIRE(header.at("n_edges").get<std::size_t>() == 6);
    REQUIRE(header.at("variant").get<std::string>() == "full");

    std::set<std::pair<std::uint64_t, std::uint64_t>> edges;
    for (std::size_t e = 0; e < 6; ++e) {
        std::uint32_t kind_a = 0, kind_b = 0;
        std::uint64_t id_a = 0, id_b = 0;
        in.read(reinterpret_cast<char*>(&kind_a), 4);
        in.read(reinterpret_cast<char*>(&id_a), 8);
        in.read(reinterpret_cast<char*>(&kind_b), 4);
        in.read(reinterpret_cast<char*>(&id_b), 8);
        REQUIRE(in.good());
        REQUIRE(kind_a == 0);
        REQUIRE((kind_b == 1 || kind_b == 2));
        edges.emplace((static_cast<std::uint64_t>(kind_b) << 32) | id_b, id_a);
    }
    in.get();
    REQUIRE(in.eof());

    std::set<std::pair<std::uint64_t, std::uint64_t>> expect;
    for (std::uint32_t row = 0; row < 3; ++row) {
        for (const auto& v : g.txn_neighbors(row)) {
            expect.emplace(v.uid(), row);
        }
    }
    REQUIRE(edges == expect);
    std::filesystem::remove(path);
}
