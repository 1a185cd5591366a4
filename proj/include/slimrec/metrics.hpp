#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <vector>

#include "slimrec/common.hpp"
#include "slimrec/data.hpp"
#include "slimrec/tensor.hpp"

namespace slimrec {

struct MetricsReport {
    double recall = 0;
    double mrr = 0;
    double ndcg = 0;
    int k = 0;
    size_t examples = 0;
};

// Full descending ranking of item ids 1..V by score, ties broken by
// ascending id; excluded ids (and the padding item) never appear.
inline std::vector<int> rank_items(const std::vector<real>& scores, const std::vector<int>& excluded = {}) {
    const int V = static_cast<int>(scores.size());
    std::set<int> excl(excluded.begin(), excluded.end());
    std::vector<int> ids;
    ids.reserve(static_cast<size_t>(V));
    for (int v = 1; v <= V; ++v)
        if (!excl.count(v)) ids.push_back(v);
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        real sa = scores[static_cast<size_t>(a - 1)], sb = scores[static_cast<size_t>(b - 1)];
        if (sa != sb) return sa > sb;
        return a < b;
    });
    return ids;
}

// Rank (1-based) of `target` under the same ordering rules, without sorting.
inline int rank_of_target(const std::vector<real>& scores, int target, const std::vector<int>& excluded = {}) {
    if (target < 1 || target > static_cast<int>(scores.size())) throw UsageError("rank target out of range");
    std::set<int> excl(excluded.begin(), excluded.end());
    if (excl.count(target)) throw UsageError("rank target is excluded from the ranking");
    const real st = scores[static_cast<size_t>(target - 1)];
    int rank = 1;
    for (int v = 1; v <= static_cast<int>(scores.size()); ++v) {
        if (v == target || excl.count(v)) continue;
        real sv = scores[static_cast<size_t>(v - 1)];
        if (sv > st || (sv == st && v < target)) ++rank;
    }
    return rank;
}

// Leave-one-out single-target contributions at cutoff k. The lone relevant
// item makes IDCG 1, so NDCG reduces to 1/log2(rank+1).
struct MetricContribution {
    double recall = 0, mrr = 0, ndcg = 0;
};

inline MetricContribution metrics_at_k(int rank, int k) {
    if (rank < 1) throw UsageError("rank must be >= 1");
    MetricContribution c;
    if (rank <= k) {
        c.recall = 1.0;
        c.mrr = 1.0 / rank;
        c.ndcg = 1.0 / std::log2(static_cast<double>(rank) + 1.0);
    }
    return c;
}

struct EvalOptions {
    int k = 10;
    bool exclude_seen = false;  // drop the user's input items from the ranking
    int batch_size = 256;
};

// Evaluates any scorer over one split. The scorer maps a batch to a B x V
// score matrix. Per-user contributions are averaged in user order.
inline MetricsReport evaluate_ranking(const SplitSpec& split, BatchPurpose purpose, int seq_len,
                                      const EvalOptions& opt,
                                      const std::function<Tensor(const SequenceBatch&)>& scorer) {
    BatchOptions bo;
    bo.seq_len = seq_len;
    bo.batch_size = opt.batch_size;
    Rng unused(0);
    auto batches = make_batches(split, purpose, bo, unused);
    MetricsReport report;
    report.k = opt.k;
    for (const auto& batch : batches) {
        Tensor scores = scorer(batch);
        if (scores.rank() != 2 || scores.dim(0) != batch.batch || scores.dim(1) != split.item_count)
            throw ShapeError("scorer returned " + scores.shape_str());
        for (int b = 0; b < batch.batch; ++b) {
            std::vector<real> row(scores.data() + static_cast<size_t>(b) * scores.dim(1),
                                  scores.data() + static_cast<size_t>(b + 1) * scores.dim(1));
            std::vector<int> excluded;
            if (opt.exclude_seen) {
                for (int t = 0; t < batch.seq_len; ++t) {
                    int id = batch.items[static_cast<size_t>(b) * batch.seq_len + t];
                    if (id != 0 && id != batch.targets[static_cast<size_t>(b)]) excluded.push_back(id);
                }
            }
            int rank = rank_of_target(row, batch.targets[static_cast<size_t>(b)], excluded);
            MetricContribution c = metrics_at_k(rank, opt.k);
            report.recall += c.recall;
            report.mrr += c.mrr;
            report.ndcg += c.ndcg;
            ++report.examples;
        }
    }
    if (report.examples > 0) {
        report.recall /= static_cast<double>(report.examples);
        report.mrr /= static_cast<double>(report.examples);
        report.ndcg /= static_cast<double>(report.examples);
    }
    return report;
}

// Static ranker by global item frequency in the training prefixes, ties by
// ascending id. Serves as the learning-free yardstick.
struct PopularityBaseline {
    std::vector<real> scores;  // index v-1 holds the frequency of item v

    Tensor score_batch(const SequenceBatch& batch) const {
        Tensor out({batch.batch, static_cast<int>(scores.size())});
        for (int b = 0; b < batch.batch; ++b)
            for (size_t v = 0; v < scores.size(); ++v)
                out[static_cast<size_t>(b) * scores.size() + v] = scores[v];
        return out;
    }
};

inline PopularityBaseline popularity_baseline(const SplitSpec& split) {
    PopularityBaseline base;
    base.scores.assign(static_cast<size_t>(split.item_count), real(0));
    bool any = false;
    for (const auto& prefix : split.train_prefix)
        for (int id : prefix) {
            base.scores[static_cast<size_t>(id - 1)] += 1;
            any = true;
        }
    if (!any) throw UsageError("popularity baseline needs a non-empty train split");
    return base;
}

}  // namespace slimrec
