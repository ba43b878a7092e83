// Inspection-rate evaluation: ranking with deterministic tie-breaks, the
// top-n% precision/recall/revenue metrics against brute-force recounts,
// report serialization, and the embedding export format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>
#include <json.hpp>

#include "graphfc/data.hpp"
#include "graphfc/eval.hpp"
#include "graphfc/gnn.hpp"
#include "graphfc/graph.hpp"
#include "graphfc/training.hpp"

using namespace graphfc;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

ScoredTransaction scored(std::string id, double y_cls, bool illicit, double revenue = 0.0,
                         double y_rev = 0.0) {
    ScoredTransaction s;
    s.txn_id = std::move(id);
    s.y_cls = y_cls;
    s.illicit = illicit;
    s.raised_revenue = revenue;
    s.y_rev = y_rev;
    return s;
}

std::vector<std::string> ids(const std::vector<ScoredTransaction>& v) {
    std::vector<std::string> out;
    for (const auto& s : v) out.push_back(s.txn_id);
    return out;
}

// Independent mirror of the ranking contract used for the brute-force
// recount: descending value, ascending id among exact ties.
std::vector<ScoredTransaction> brute_rank(std::vector<ScoredTransaction> v, RankingKey key) {
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
        return a.txn_id < b.txn_id;
    });
    std::stable_sort(v.begin(), v.end(), [key](const auto& a, const auto& b) {
        double va = 0.0, vb = 0.0;
        switch (key) {
            case RankingKey::Cls: va = a.y_cls; vb = b.y_cls; break;
            case RankingKey::Rev: va = a.y_rev; vb = b.y_rev; break;
            case RankingKey::Combined:
                va = a.y_cls * std::max(a.y_rev, 0.0);
                vb = b.y_cls * std::max(b.y_rev, 0.0);
                break;
        }
        return va > vb;
    });
    return v;
}

TransactionRecord rec(std::string id, std::string imp, std::string hs) {
    TransactionRecord r;
    r.txn_id = std::move(id);
    r.importer_id = std::move(imp);
    r.hs_code = std::move(hs);
    r.date = parse_iso_date("2018-06-01");
    r.declared_value = 100.0;
    r.quantity = 1.0;
    r.gross_weight = 2.0;
    r.tariff_rate = 0.1;
    r.paid_tax = 10.0;
    r.has_outcome = true;
    return r;
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("ranking is descending with deterministic tie-breaks") {
    SECTION("plain descending order") {
        auto r = rank({scored("b", 0.2, false), scored("a", 0.9, true), scored("c", 0.5, true)},
                      RankingKey::Cls);
        CHECK(ids(r) == std::vector<std::string>{"a", "c", "b"});
    }

    SECTION("exact score ties fall back to ascending transaction id") {
        auto r = rank({scored("z", 0.5, false), scored("m", 0.5, false), scored("a", 0.5, false),
                       scored("q", 0.7, false)},
                      RankingKey::Cls);
        CHECK(ids(r) == std::vector<std::string>{"q", "a", "m", "z"});
    }

    SECTION("revenue key ranks by the regression output") {
        auto r = rank({scored("a", 0.9, false, 0.0, 1.0), scored("b", 0.1, false, 0.0, 7.0)},
                      RankingKey::Rev);
        CHECK(ids(r) == std::vector<std::string>{"b", "a"});
    }

    SECTION("combined key clamps negative revenue predictions to zero") {
        // b would win on raw product (0.9 * -5 = -4.5 vs 0.05), but negative
        // predicted surcharge means "expect to recover nothing".
        auto r = rank({scored("a", 0.5, false, 0.0, 0.1), scored("b", 0.9, false, 0.0, -5.0)},
                      RankingKey::Combined);
        CHECK(ids(r) == std::vector<std::string>{"a", "b"});
        // Clamped products tie at zero; the id breaks the tie.
        auto t = rank({scored("y", 0.9, false, 0.0, -5.0), scored("x", 0.8, false, 0.0, -1.0)},
                      RankingKey::Combined);
        CHECK(ids(t) == std::vector<std::string>{"x", "y"});
    }
}

TEST_CASE("inspect count is the ceiling of the percentage and never zero") {
    CHECK(inspect_count(1000, 5.0) == 50);
    CHECK(inspect_count(1000, 0.05) == 1);   // ceil(0.5)
    CHECK(inspect_count(3, 50.0) == 2);      // ceil(1.5)
    CHECK(inspect_count(10, 100.0) == 10);
    CHECK(inspect_count(1, 0.001) == 1);
    CHECK(inspect_count(123, 1.0) == 2);     // ceil(1.23)
    CHECK_THROWS_AS(inspect_count(10, 0.0), ConfigError);
    CHECK_THROWS_AS(inspect_count(10, 100.5), ConfigError);
}

TEST_CASE("precision and recall at fixed cuts match hand values") {
    SECTION("half the positives land in the top half") {
        const auto ranked = rank({scored("a", 0.9, true), scored("b", 0.8, false),
                                  scored("c", 0.1, true), scored("d", 0.05, false)},
                                 RankingKey::Cls);
        const auto m = precision_recall_at(ranked, 50.0);
        CHECK(m.k == 2);
        CHECK_THAT(m.precision, WithinAbs(0.5, 1e-15));
        CHECK_THAT(m.recall, WithinAbs(0.5, 1e-15));
        CHECK(!m.no_positives);
    }

    SECTION("a perfect ranking gives precision and recall one") {
        const auto ranked = rank({scored("a", 0.9, true), scored("b", 0.8, true),
                                  scored("c", 0.1, false), scored("d", 0.05, false)},
                                 RankingKey::Cls);
        const auto m = precision_recall_at(ranked, 50.0);
        CHECK(m.precision == 1.0);
        CHECK(m.recall == 1.0);
    }

    SECTION("zero ground-truth positives are flagged") {
        const auto ranked = rank({scored("a", 0.9, false), scored("b", 0.8, false)},
                                 RankingKey::Cls);
        const auto m = precision_recall_at(ranked, 50.0);
        CHECK(m.precision == 0.0);
        CHECK(m.recall == 0.0);
        CHECK(m.no_positives);
    }

    SECTION("an empty ranking is a data error") {
        CHECK_THROWS_AS(precision_recall_at({}, 5.0), DataError);
        CHECK_THROWS_AS(revenue_at({}, 5.0), DataError);
    }
}

TEST_CASE("revenue share at fixed cuts matches hand values") {
    SECTION("only illicit rows contribute to the recoverable total") {
        // The licit row carries (spurious) revenue that must not count.
        const auto ranked = rank({scored("a", 0.9, true, 10.0), scored("b", 0.8, true, 5.0),
                                  scored("c", 0.1, false, 99.0)},
                                 RankingKey::Cls);
        const auto top1 = revenue_at(ranked, 34.0);  // k = ceil(1.02) = 2 -> use 1% for k=1
        CHECK(top1.k == 2);
        CHECK_THAT(top1.revenue_ratio, WithinAbs(1.0, 1e-15));
        const auto narrow = revenue_at(ranked, 33.0);  // k = ceil(0.99) = 1
        CHECK(narrow.k == 1);
        CHECK_THAT(narrow.revenue_ratio, WithinAbs(10.0 / 15.0, 1e-15));
    }

    SECTION("ratio hits one when every illicit row is inspected") {
        const auto ranked = rank({scored("a", 0.9, true, 3.0), scored("b", 0.8, false, 0.0),
                                  scored("c", 0.7, true, 4.0)},
                                 RankingKey::Cls);
        CHECK(revenue_at(ranked, 100.0).revenue_ratio == 1.0);
    }

    SECTION("zero total surcharge is flagged") {
        const auto ranked = rank({scored("a", 0.9, true, 0.0), scored("b", 0.8, false, 0.0)},
                                 RankingKey::Cls);
        const auto m = revenue_at(ranked, 50.0);
        CHECK(m.revenue_ratio == 0.0);
        CHECK(m.no_revenue);
    }

    SECTION("captured share is monotone in the inspection rate") {
        Rng rng(derive_seed(31, "rev-monotone"));
        std::vector<ScoredTransaction> v;
        for (int i = 0; i < 40; ++i) {
            v.push_back(scored("t" + std::to_string(i), rng.normal(0.0, 1.0), rng.below(2) == 0,
                               static_cast<double>(rng.below(50))));
        }
        const auto ranked = rank(v, RankingKey::Cls);
        double prev = 0.0;
        for (double p : {5.0, 10.0, 25.0, 50.0, 75.0, 100.0}) {
            const double r = revenue_at(ranked, p).revenue_ratio;
            CHECK(r >= prev);
            prev = r;
        }
        CHECK(prev == 1.0);
    }
}

TEST_CASE("metrics on random fixtures agree with a brute-force recount") {
    Rng rng(derive_seed(77, "eval-fixtures"));
    const double percents[] = {1.0, 5.0, 10.0, 26.7, 50.0, 100.0};
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + rng.below(60);
        std::vector<ScoredTransaction> v;
        for (std::size_t i = 0; i < n; ++i) {
            // Coarse score grid on purpose: exact ties must be common enough
            // to exercise the id tie-break in every batch of fixtures.
            const double y = static_cast<double>(rng.below(8)) / 8.0;
            const double yr = static_cast<double>(rng.below(5)) - 2.0;
            v.push_back(scored("t" + std::to_string(i), y, rng.below(3) == 0,
                               static_cast<double>(rng.below(20)), yr));
        }
        const auto key = static_cast<RankingKey>(rng.below(3));
        const auto ranked = rank(v, key);
        const auto mirror = brute_rank(v, key);
        REQUIRE(ids(ranked) == ids(mirror));

        const double p = percents[rng.below(6)];
        const std::size_t k = inspect_count(n, p);
        std::size_t tp = 0, positives = 0;
        double captured = 0.0, total = 0.0;
        for (std::size_t i = 0; i < mirror.size(); ++i) {
            if (!mirror[i].illicit) continue;
            ++positives;
            total += mirror[i].raised_revenue;
            if (i < k) {
                ++tp;
                captured += mirror[i].raised_revenue;
            }
        }
        const auto pr = precision_recall_at(ranked, p);
        const auto rv = revenue_at(ranked, p);
        REQUIRE(pr.k == k);
        REQUIRE(pr.precision == static_cast<double>(tp) / static_cast<double>(k));
        if (positives == 0) {
            REQUIRE(pr.no_positives);
            REQUIRE(pr.recall == 0.0);
        } else {
            REQUIRE(pr.recall == static_cast<double>(tp) / static_cast<double>(positives));
        }
        if (total == 0.0) {
            REQUIRE(rv.no_revenue);
            REQUIRE(rv.revenue_ratio == 0.0);
        } else {
            REQUIRE(rv.revenue_ratio == captured / total);
        }
    }
}

TEST_CASE("reports assemble metric rows and serialize canonically") {
    std::vector<ScoredTransaction> v = {
        scored("a", 0.9, true, 10.0, 2.0),
        scored("b", 0.8, false, 0.0, 1.0),
        scored("c", 0.3, true, 6.0, 0.5),
        scored("d", 0.1, false, 0.0, 0.0),
    };
    EvalReport rep = build_eval_report(v, {25.0, 50.0, 100.0}, RankingKey::Cls, "full", 7);

    SECTION("rows carry merged precision/recall/revenue columns") {
        REQUIRE(rep.metrics.size() == 3);
        CHECK(rep.variant == "full");
        CHECK(rep.ranking_key == "cls");
        CHECK(rep.seed == 7);
        CHECK(rep.n_scored == 4);
        CHECK(rep.metrics[0].k == 1);
        CHECK_THAT(rep.metrics[0].precision, WithinAbs(1.0, 1e-15));
        CHECK_THAT(rep.metrics[0].recall, WithinAbs(0.5, 1e-15));
        CHECK_THAT(rep.metrics[0].revenue_ratio, WithinAbs(10.0 / 16.0, 1e-15));
        CHECK_THAT(rep.metrics[2].recall, WithinAbs(1.0, 1e-15));
        CHECK_THAT(rep.metrics[2].revenue_ratio, WithinAbs(1.0, 1e-15));
    }

    SECTION("metric_at retrieves by percent and name") {
        CHECK(metric_at(rep, 25.0, "precision") == rep.metrics[0].precision);
        CHECK(metric_at(rep, 50.0, "recall") == rep.metrics[1].recall);
        CHECK(metric_at(rep, 100.0, "revenue") == rep.metrics[2].revenue_ratio);
        CHECK_THROWS_AS(metric_at(rep, 33.0, "recall"), InternalError);
        CHECK_THROWS_AS(metric_at(rep, 25.0, "f1"), InternalError);
    }

    SECTION("identical reports dump identical canonical json") {
        EvalReport again = build_eval_report(v, {25.0, 50.0, 100.0}, RankingKey::Cls, "full", 7);
        const auto j = report_to_json(rep);
        CHECK(j.dump() == report_to_json(again).dump());
        CHECK(j.at("format") == "eval-report");
        CHECK(j.at("version") == 1);
        CHECK(j.at("metrics").size() == 3);
        CHECK(j.at("metrics")[0].at("k") == 1);
        CHECK(j.at("osr").contains("importer"));
        CHECK(j.at("osr").contains("hs_code"));
        // Volatile runtime never enters the canonical payload.
        CHECK(!j.contains("runtime_seconds"));
    }

    SECTION("csv rows are flat and exact") {
        std::string out = kReportCsvHeader;
        out += '\n';
        append_report_csv_rows(rep, out);
        const auto lines = split_lines(out);
        REQUIRE(lines.size() == 4);
        CHECK(lines[0] ==
              "variant,subset,ranking_key,seed,n_percent,k,precision,recall,revenue_ratio,"
              "no_positives,no_revenue");
        CHECK_THAT(lines[1], ContainsSubstring("full,test,cls,7,25,1,1,0.5,0.625,0,0"));
    }
}

TEST_CASE("embedding export writes one row per transaction plus its label") {
    Dataset d;
    d.records = {rec("t0", "impA", "100000"), rec("t1", "impA", "100001"),
                 rec("t2", "impB", "100000"), rec("t3", "impB", "100001"),
                 rec("t4", "impC", "100000"), rec("t5", "impC", "100001")};
    d.records[1].illicit = true;
    d.records[4].has_outcome = false;  // label column stays empty for this row
    d.reset_tags();
    for (auto& s : d.split) s = Split::Train;
    for (auto& l : d.labeled) l = 1;

    FeatureMatrix fm(6, 4);
    Rng frng(derive_seed(3, "emb-feats"));
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t c = 0; c < 4; ++c) fm.at(i, c) = frng.normal(0.0, 1.0);
    }
    const auto feats =
        std::make_shared<FeatureTable>(FeatureTable::from_dense(std::move(fm)));
    const auto g = build_graph(d, feats, GraphBuildSpec{});

    ModelParams params;
    params.init(4, 3, 2, Aggregator::Attention, 19);
    const GnnRunner runner(g, {5, 5});

    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "graphfc_test_emb.csv").string();
    const std::vector<std::uint32_t> rows = {0, 1, 2, 3, 4, 5};
    export_embeddings(path, d, runner, params, rows, 4, 9);  // two batches of <=4

    const auto text = slurp(path);
    const auto lines = split_lines(text);
    REQUIRE(lines.size() == 7);
    CHECK(lines[0] == "e0,e1,e2,label");
    CHECK(lines[1].back() == '0');  // t0: licit
    CHECK(lines[2].back() == '1');  // t1: illicit
    CHECK(lines[5].back() == ',');  // t4: unknown outcome -> empty label cell

    // Values reproduce the batched forward passes exactly, including the
    // per-batch plan seeds.
    const auto tape0 = runner.forward(params, {{NodeKind::Txn, 0}, {NodeKind::Txn, 1},
                                               {NodeKind::Txn, 2}, {NodeKind::Txn, 3}},
                                      derive_seed(9, "score", {0}));
    const auto tape1 = runner.forward(params, {{NodeKind::Txn, 4}, {NodeKind::Txn, 5}},
                                      derive_seed(9, "score", {1}));
    auto expect_line = [&](const ForwardTape& tape, std::uint32_t row) {
        const Vec& s = tape.embedding({NodeKind::Txn, row});
        std::string out;
        for (Eigen::Index c = 0; c < s.size(); ++c) {
            out += format_double_exact(s[c]);
            out += ',';
        }
        return out;
    };
    CHECK(lines[1] == expect_line(tape0, 0) + "0");
    CHECK(lines[4] == expect_line(tape0, 3) + "0");
    CHECK(lines[5] == expect_line(tape1, 4));
    CHECK(lines[6] == expect_line(tape1, 5) + "0");

    // Re-export is byte-identical.
    const auto path2 = (fs::temp_directory_path() / "graphfc_test_emb2.csv").string();
    export_embeddings(path2, d, runner, params, rows, 4, 9);
    CHECK(slurp(path2) == text);
    fs::remove(path);
    fs::remove(path2);
}
