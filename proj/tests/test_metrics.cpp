#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "slimrec/metrics.hpp"
#include "test_util.hpp"

using namespace slimrec;
using testutil::randt;

namespace {

// Brute-force oracle: full sort with the same tie rules, then scan.
struct OracleMetrics {
    double recall, mrr, ndcg;
};

OracleMetrics oracle_metrics(const std::vector<real>& scores, int target, int k) {
    std::vector<int> ids;
    for (int v = 1; v <= static_cast<int>(scores.size()); ++v) ids.push_back(v);
    std::sort(ids.begin(), ids.end(), [&](int a, int b) {
        if (scores[static_cast<size_t>(a - 1)] != scores[static_cast<size_t>(b - 1)])
            return scores[static_cast<size_t>(a - 1)] > scores[static_cast<size_t>(b - 1)];
        return a < b;
    });
    int rank = 1 + static_cast<int>(std::find(ids.begin(), ids.end(), target) - ids.begin());
    OracleMetrics o{0, 0, 0};
    if (rank <= k) {
        o.recall = 1;
        o.mrr = 1.0 / rank;
        o.ndcg = 1.0 / std::log2(rank + 1.0);
    }
    return o;
}

}  // namespace

TEST_CASE("rank_items") {
    SECTION("descending by score") {
        std::vector<real> s{real(0.9), real(0.1), real(0.5)};
        REQUIRE(rank_items(s) == std::vector<int>{1, 3, 2});
    }
    SECTION("ties break by ascending id") {
        std::vector<real> s{real(0.5), real(0.5)};
        REQUIRE(rank_items(s) == std::vector<int>{1, 2});
    }
    SECTION("excluded ids never appear") {
        std::vector<real> s{real(0.9), real(0.8), real(0.7)};
        REQUIRE(rank_items(s, {1}) == std::vector<int>{2, 3});
    }
    SECTION("agrees with a naive full sort on random rows") {
        Rng rng(3);
        for (int rep = 0; rep < 30; ++rep) {
            Tensor row = randt({1, 20}, rng);
            // quantize so ties actually occur
            for (auto& v : row.vec()) v = std::floor(v * 4) / 4;
            std::vector<real> s(row.vec().begin(), row.vec().end());
            auto ranked = rank_items(s);
            std::vector<int> ids;
            for (int v = 1; v <= 20; ++v) ids.push_back(v);
            std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
                if (s[static_cast<size_t>(a - 1)] != s[static_cast<size_t>(b - 1)])
                    return s[static_cast<size_t>(a - 1)] > s[static_cast<size_t>(b - 1)];
                return a < b;
            });
            REQUIRE(ranked == ids);
        }
    }
}

TEST_CASE("metrics_at_k spot values") {
    SECTION("rank 1 -> (1, 1, 1)") {
        auto c = metrics_at_k(1, 10);
        REQUIRE(c.recall == 1.0);
        REQUIRE(c.mrr == 1.0);
        REQUIRE(c.ndcg == 1.0);
    }
    SECTION("rank 3 -> (1, 1/3, 1/2)") {
        auto c = metrics_at_k(3, 10);
        REQUIRE(c.recall == 1.0);
        REQUIRE_THAT(c.mrr, Catch::Matchers::WithinAbs(1.0 / 3, 1e-15));
        REQUIRE_THAT(c.ndcg, Catch::Matchers::WithinAbs(0.5, 1e-15));
    }
    SECTION("rank 11 at k=10 -> (0, 0, 0)") {
        auto c = metrics_at_k(11, 10);
        REQUIRE(c.recall == 0.0);
        REQUIRE(c.mrr == 0.0);
        REQUIRE(c.ndcg == 0.0);
    }
    SECTION("monotone in rank") {
        for (int k : {5, 10}) {
            auto prev = metrics_at_k(1, k);
            for (int rank = 2; rank <= 15; ++rank) {
                auto cur = metrics_at_k(rank, k);
                REQUIRE(cur.recall <= prev.recall);
                REQUIRE(cur.mrr <= prev.mrr);
                REQUIRE(cur.ndcg <= prev.ndcg);
                prev = cur;
            }
        }
    }
}

TEST_CASE("rank_of_target matches full ranking") {
    Rng rng(7);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor row = randt({1, 15}, rng);
        for (auto& v : row.vec()) v = std::floor(v * 3) / 3;
        std::vector<real> s(row.vec().begin(), row.vec().end());
        auto ranked = rank_items(s);
        for (int target = 1; target <= 15; ++target) {
            int want = 1 + static_cast<int>(std::find(ranked.begin(), ranked.end(), target) - ranked.begin());
            REQUIRE(rank_of_target(s, target) == want);
        }
    }
}

TEST_CASE("evaluate_ranking") {
    // 40 users, 25 items, deterministic split
    SplitSpec split;
    split.item_count = 25;
    Rng gen(13);
    for (int u = 0; u < 40; ++u) {
        std::vector<int> p;
        for (int i = 0; i < 4; ++i) p.push_back(1 + static_cast<int>(gen.uniform_index(25)));
        split.train_prefix.push_back(p);
        split.val_target.push_back(1 + static_cast<int>(gen.uniform_index(25)));
        split.test_target.push_back(1 + static_cast<int>(gen.uniform_index(25)));
    }
    EvalOptions eo;
    eo.k = 10;

    SECTION("an oracle model that always ranks the target first scores 1.0 everywhere") {
        auto report = evaluate_ranking(split, BatchPurpose::Val, 6, eo, [&](const SequenceBatch& b) {
            Tensor out({b.batch, 25});
            for (int r = 0; r < b.batch; ++r) out.at2(r, b.targets[static_cast<size_t>(r)] - 1) = 1;
            return out;
        });
        REQUIRE(report.recall == 1.0);
        REQUIRE(report.mrr == 1.0);
        REQUIRE(report.ndcg == 1.0);
        REQUIRE(report.examples == 40);
    }
    SECTION("means are the exact arithmetic mean of per-user contributions") {
        Rng srng(5);
        std::vector<Tensor> rows;
        auto report = evaluate_ranking(split, BatchPurpose::Test, 6, eo, [&](const SequenceBatch& b) {
            Tensor out({b.batch, 25});
            for (size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<real>(srng.uniform());
            rows.push_back(out);
            return out;
        });
        double recall = 0, mrr = 0, ndcg = 0;
        size_t n = 0, row_at = 0, user = 0;
        for (const Tensor& chunk : rows) {
            for (int r = 0; r < chunk.dim(0); ++r, ++user) {
                std::vector<real> s(chunk.data() + static_cast<size_t>(r) * 25,
                                    chunk.data() + static_cast<size_t>(r + 1) * 25);
                auto o = oracle_metrics(s, split.test_target[user], 10);
                recall += o.recall;
                mrr += o.mrr;
                ndcg += o.ndcg;
                ++n;
            }
            ++row_at;
        }
        REQUIRE(n == report.examples);
        REQUIRE_THAT(report.recall, Catch::Matchers::WithinAbs(recall / n, 1e-15));
        REQUIRE_THAT(report.mrr, Catch::Matchers::WithinAbs(mrr / n, 1e-15));
        REQUIRE_THAT(report.ndcg, Catch::Matchers::WithinAbs(ndcg / n, 1e-15));
    }
    SECTION("evaluation is pure: repeated calls give identical reports") {
        auto scorer = [&](const SequenceBatch& b) {
            Tensor out({b.batch, 25});
            for (int r = 0; r < b.batch; ++r)
                for (int v = 0; v < 25; ++v) out.at2(r, v) = static_cast<real>((v * 13 + r) % 7);
            return out;
        };
        auto r1 = evaluate_ranking(split, BatchPurpose::Val, 6, eo, scorer);
        auto r2 = evaluate_ranking(split, BatchPurpose::Val, 6, eo, scorer);
        REQUIRE(r1.recall == r2.recall);
        REQUIRE(r1.mrr == r2.mrr);
        REQUIRE(r1.ndcg == r2.ndcg);
    }
    SECTION("all metrics stay in [0,1]") {
        Rng srng(17);
        auto report = evaluate_ranking(split, BatchPurpose::Val, 6, eo, [&](const SequenceBatch& b) {
            Tensor out({b.batch, 25});
            for (size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<real>(srng.uniform(-5, 5));
            return out;
        });
        for (double m : {report.recall, report.mrr, report.ndcg}) {
            REQUIRE(m >= 0.0);
            REQUIRE(m <= 1.0);
        }
    }
}

TEST_CASE("random scores hit the combinatorial recall expectation") {
    SplitSpec split;
    split.item_count = 100;
    for (int u = 0; u < 1000; ++u) {
        split.train_prefix.push_back({1, 2});
        split.val_target.push_back(1 + (u % 100));
        split.test_target.push_back(1 + (u % 100));
    }
    EvalOptions eo;
    eo.k = 10;
    Rng srng(23);
    auto report = evaluate_ranking(split, BatchPurpose::Val, 4, eo, [&](const SequenceBatch& b) {
        Tensor out({b.batch, 100});
        for (size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<real>(srng.uniform());
        return out;
    });
    // expected Recall@10 = k/|V| = 0.1, Monte-Carlo tolerance over 1000 users
    REQUIRE(report.recall > 0.07);
    REQUIRE(report.recall < 0.13);
}

TEST_CASE("popularity baseline") {
    SplitSpec split;
    split.item_count = 5;
    split.train_prefix = {{1, 1, 1, 2}, {1, 2, 3}};
    split.val_target = {4, 4};
    split.test_target = {5, 5};
    PopularityBaseline base = popularity_baseline(split);
    SECTION("heavily seen item outranks rare ones") {
        auto ranked = rank_items(base.scores);
        REQUIRE(ranked[0] == 1);  // seen 4 times
        REQUIRE(ranked[1] == 2);  // seen twice
        REQUIRE(ranked[2] == 3);  // seen once
    }
    SECTION("frequency ties break by id") {
        REQUIRE(rank_items(base.scores)[3] == 4);  // items 4 and 5 both unseen
        REQUIRE(rank_items(base.scores)[4] == 5);
    }
    SECTION("empty train split rejected") {
        SplitSpec empty;
        empty.item_count = 3;
        empty.train_prefix = {{}};
        REQUIRE_THROWS_AS(popularity_baseline(empty), UsageError);
    }
}

TEST_CASE("brute-force script equivalence on 100 random ranked lists") {
    Rng rng(31);
    for (int rep = 0; rep < 100; ++rep) {
        int V = 10 + static_cast<int>(rng.uniform_index(40));
        Tensor row = randt({1, V}, rng);
        for (auto& v : row.vec()) v = std::floor(v * 5) / 5;  // force ties
        std::vector<real> s(row.vec().begin(), row.vec().end());
        int target = 1 + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(V)));
        auto o = oracle_metrics(s, target, 10);
        auto c = metrics_at_k(rank_of_target(s, target), 10);
        REQUIRE(c.recall == o.recall);
        REQUIRE(c.mrr == o.mrr);
        REQUIRE(c.ndcg == o.ndcg);
    }
}
