#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "slimrec/common.hpp"
#include "slimrec/rng.hpp"

namespace slimrec {

// User-item interaction logs after ingestion. Item ids are densely remapped
// to [1, item_count]; id 0 is reserved for padding. Every retained user has
// at least 3 interactions, the minimum a leave-one-out split needs.
struct InteractionDataset {
    int user_count = 0;
    int item_count = 0;
    std::vector<std::vector<int>> sequences;      // chronological, per user
    std::vector<std::string> user_names;          // original ids, by dense index
    std::vector<std::string> item_names;          // original ids, by dense index (1-based slot 0 unused)
};

struct SplitSpec {
    // Per user: training prefix s[0..n-3], validation target s[n-2], test
    // target s[n-1]. Validation and test therefore both have user_count rows.
    std::vector<std::vector<int>> train_prefix;
    std::vector<int> val_target;
    std::vector<int> test_target;
    int item_count = 0;

    size_t user_count() const { return val_target.size(); }
};

struct SequenceBatch {
    int batch = 0;
    int seq_len = 0;
    std::vector<int> items;    // batch x seq_len, left-padded with 0
    std::vector<int> targets;  // one per row
    std::vector<int> lengths;  // true (unpadded) length per row
    std::vector<int> users;    // dataset user index per row

    int last_position(int row) const { return seq_len - 1; }  // newest item is always rightmost
};

enum class BatchPurpose { Train, Val, Test };

namespace detail {

inline bool split_row(const std::string& line, std::vector<std::string>& cols) {
    cols.clear();
    // Accept tab, comma, or the "::" style some public rating dumps use.
    std::string sep;
    if (line.find('\t') != std::string::npos) sep = "\t";
    else if (line.find("::") != std::string::npos) sep = "::";
    else if (line.find(',') != std::string::npos) sep = ",";
    else return false;
    size_t pos = 0;
    while (true) {
        size_t next = line.find(sep, pos);
        if (next == std::string::npos) {
            cols.push_back(line.substr(pos));
            break;
        }
        cols.push_back(line.substr(pos, next - pos));
        pos = next + sep.size();
    }
    return cols.size() >= 3;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \r\n");
    size_t b = s.find_last_not_of(" \r\n");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

}  // namespace detail

// Reads `user_id, item_id, timestamp` rows (tab/comma separated; 4-column
// "user::item::rating::timestamp" rows are accepted with the rating ignored),
// sorts each user's items by timestamp with ties broken by file order, remaps
// ids densely in first-appearance order, and drops users with fewer than 3
// interactions.
inline InteractionDataset load_interactions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);

    struct Row {
        int user, item;
        int64_t ts;
        size_t order;
    };
    std::vector<Row> rows;
    std::map<std::string, int> user_ids;   // ordered: deterministic iteration for names
    std::map<std::string, int> item_ids;
    std::vector<std::string> user_names, item_names;
    item_names.push_back("");  // padding slot

    std::string line;
    std::vector<std::string> cols;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (!detail::split_row(t, cols))
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected user, item, timestamp");
        const std::string& user_s = detail::trim(cols[0]);
        const std::string& item_s = detail::trim(cols[1]);
        const std::string& ts_s = detail::trim(cols.size() >= 4 ? cols[3] : cols[2]);
        int64_t ts = 0;
        try {
            ts = std::stoll(ts_s);
        } catch (...) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": bad timestamp '" + ts_s + "'");
        }
        int uid;
        auto uit = user_ids.find(user_s);
        if (uit == user_ids.end()) {
            uid = static_cast<int>(user_names.size());
            user_ids.emplace(user_s, uid);
            user_names.push_back(user_s);
        } else {
            uid = uit->second;
        }
        int iid;
        auto iit = item_ids.find(item_s);
        if (iit == item_ids.end()) {
            iid = static_cast<int>(item_names.size());
            item_ids.emplace(item_s, iid);
            item_names.push_back(item_s);
        } else {
            iid = iit->second;
        }
        rows.push_back(Row{uid, iid, ts, rows.size()});
    }
    if (rows.empty()) throw ParseError(path + ": no interactions found");

    std::vector<std::vector<Row>> by_user(user_names.size());
    for (const Row& r : rows) by_user[static_cast<size_t>(r.user)].push_back(r);

    InteractionDataset ds;
    ds.item_count = static_cast<int>(item_names.size()) - 1;
    ds.item_names = item_names;
    for (size_t u = 0; u < by_user.size(); ++u) {
        auto& ur = by_user[u];
        if (ur.size() < 3) continue;  // too short for leave-one-out
        std::stable_sort(ur.begin(), ur.end(), [](const Row& a, const Row& b) {
            if (a.ts != b.ts) return a.ts < b.ts;
            return a.order < b.order;
        });
        std::vector<int> seq;
        seq.reserve(ur.size());
        for (const Row& r : ur) seq.push_back(r.item);
        ds.sequences.push_back(std::move(seq));
        ds.user_names.push_back(user_names[u]);
    }
    ds.user_count = static_cast<int>(ds.sequences.size());
    if (ds.user_count == 0) throw ParseError(path + ": no user has 3 or more interactions");
    return ds;
}

// Leave-one-out protocol: penultimate item for validation, last for test.
inline SplitSpec leave_one_out_split(const InteractionDataset& ds) {
    SplitSpec split;
    split.item_count = ds.item_count;
    split.train_prefix.reserve(ds.sequences.size());
    for (const auto& seq : ds.sequences) {
        if (seq.size() < 3)
            throw UsageError("sequence of length " + std::to_string(seq.size()) + " cannot be split");
        split.train_prefix.emplace_back(seq.begin(), seq.end() - 2);
        split.val_target.push_back(seq[seq.size() - 2]);
        split.test_target.push_back(seq.back());
    }
    return split;
}

struct BatchOptions {
    int seq_len = 50;          // N
    int batch_size = 128;      // B
    bool sliding_windows = false;  // emit every in-prefix next-item example
    int window_stride = 1;
};

// Builds the (input window, target) example list for one purpose.
//   Train: targets come from inside the training prefix. By default one
//   example per user (the prefix's own final transition); sliding windows
//   are behind a flag. Prefixes with fewer than 2 items yield no example.
//   Val:   input = training prefix, target = validation item.
//   Test:  input = training prefix + validation item, target = test item.
inline std::vector<std::pair<std::vector<int>, int>> make_examples(const SplitSpec& split,
                                                                   BatchPurpose purpose,
                                                                   const BatchOptions& opt,
                                                                   std::vector<int>* user_of_example = nullptr) {
    std::vector<std::pair<std::vector<int>, int>> out;
    if (user_of_example) user_of_example->clear();
    const int N = opt.seq_len;
    auto window_before = [&](const std::vector<int>& seq, size_t end) {
        // Most recent N items strictly before `end`.
        size_t start = end > static_cast<size_t>(N) ? end - static_cast<size_t>(N) : 0;
        return std::vector<int>(seq.begin() + static_cast<std::ptrdiff_t>(start),
                                seq.begin() + static_cast<std::ptrdiff_t>(end));
    };
    for (size_t u = 0; u < split.user_count(); ++u) {
        const auto& prefix = split.train_prefix[u];
        if (purpose == BatchPurpose::Train) {
            if (prefix.size() < 2) continue;
            if (opt.sliding_windows) {
                size_t last = prefix.size() - 1;
                for (size_t j = last;; j -= static_cast<size_t>(opt.window_stride)) {
                    if (j < 1) break;
                    out.emplace_back(window_before(prefix, j), prefix[j]);
                    if (user_of_example) user_of_example->push_back(static_cast<int>(u));
                    if (j < static_cast<size_t>(opt.window_stride)) break;
                }
            } else {
                out.emplace_back(window_before(prefix, prefix.size() - 1), prefix.back());
                if (user_of_example) user_of_example->push_back(static_cast<int>(u));
            }
        } else if (purpose == BatchPurpose::Val) {
            out.emplace_back(window_before(prefix, prefix.size()), split.val_target[u]);
            if (user_of_example) user_of_example->push_back(static_cast<int>(u));
        } else {
            std::vector<int> full = prefix;
            full.push_back(split.val_target[u]);
            out.emplace_back(window_before(full, full.size()), split.test_target[u]);
            if (user_of_example) user_of_example->push_back(static_cast<int>(u));
        }
    }
    return out;
}

// Packs examples into left-padded batches. Train batches come out in a
// seeded random order; val/test batches keep user order.
inline std::vector<SequenceBatch> make_batches(const SplitSpec& split, BatchPurpose purpose,
                                               const BatchOptions& opt, Rng& rng) {
    if (opt.seq_len < 1 || opt.batch_size < 1) throw ConfigError("batch options must be positive");
    std::vector<int> users;
    auto examples = make_examples(split, purpose, opt, &users);
    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (purpose == BatchPurpose::Train) order = rng.permutation(examples.size());

    std::vector<SequenceBatch> batches;
    const int N = opt.seq_len;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(opt.batch_size)) {
        size_t n = std::min(static_cast<size_t>(opt.batch_size), order.size() - at);
        SequenceBatch b;
        b.batch = static_cast<int>(n);
        b.seq_len = N;
        b.items.assign(n * static_cast<size_t>(N), 0);
        for (size_t r = 0; r < n; ++r) {
            const auto& [window, target] = examples[order[at + r]];
            int len = static_cast<int>(window.size());
            for (int j = 0; j < len; ++j) b.items[r * static_cast<size_t>(N) + (N - len + j)] = window[static_cast<size_t>(j)];
            b.targets.push_back(target);
            b.lengths.push_back(len);
            b.users.push_back(users[order[at + r]]);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

// First-order Markov interaction generator for desk-scale experiments. Every
// item owns a small successor set; walks follow it with high probability, so
// the next item is strongly predictable from the last one while global item
// frequencies stay nearly flat.
struct SyntheticSpec {
    int users = 1000;
    int items = 100;
    int min_len = 10;
    int max_len = 30;
    int successors = 5;
    double follow_prob = 0.85;
    uint64_t seed = 1;
};

inline void write_synthetic_markov(const SyntheticSpec& spec, const std::string& path) {
    Rng rng(Rng::derive_seed(spec.seed, "synthetic"));
    std::vector<std::vector<int>> succ(static_cast<size_t>(spec.items) + 1);
    for (int v = 1; v <= spec.items; ++v) {
        // Deterministic successor sets with a random offset pattern.
        for (int s = 0; s < spec.successors; ++s) {
            int nxt = 1 + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(spec.items)));
            succ[static_cast<size_t>(v)].push_back(nxt);
        }
    }
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write " + path);
    for (int u = 0; u < spec.users; ++u) {
        int len = spec.min_len + static_cast<int>(rng.uniform_index(
                      static_cast<uint64_t>(spec.max_len - spec.min_len + 1)));
        int cur = 1 + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(spec.items)));
        for (int t = 0; t < len; ++t) {
            out << "u" << u << "\t" << cur << "\t" << t << "\n";
            const auto& options = succ[static_cast<size_t>(cur)];
            if (rng.uniform() < spec.follow_prob) {
                cur = options[rng.uniform_index(options.size())];
            } else {
                cur = 1 + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(spec.items)));
            }
        }
    }
}

}  // namespace slimrec
