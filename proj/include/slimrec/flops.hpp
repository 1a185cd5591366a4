#pragma once

#include <cstdint>
#include <vector>

#include "slimrec/common.hpp"
#include "slimrec/model.hpp"
#include "slimrec/supernet.hpp"
#include "slimrec/tape.hpp"

namespace slimrec {

// Analytic FLOPs accounting for one candidate transformer block. All
// counting rules live in this one place:
//   - one multiply-accumulate        = 2 FLOPs
//   - activations (elu/relu/gelu/sigmoid), L2 and layer normalizations
//                                    = 5 FLOPs per element
//   - plain elementwise ops          = 1 FLOP per element
//   - effective widths are the surviving channels, d_eff and D_eff
//   - embedding lookups are excluded
struct FlopsRules {
    static constexpr int64_t kMac = 2;
    static constexpr int64_t kActivation = 5;
    static constexpr int64_t kNormalization = 5;
    static constexpr int64_t kElementwise = 1;
};

// FLOPs of one forward pass of candidate (gamma, gamma_prime) at sequence
// length N with gate depth L_d, counted per the implemented evaluation order
// (the attention core is the two narrow products, linear in N).
inline int64_t flops_of_candidate(const SupernetConfig& cfg, double gamma, double gamma_prime, int N,
                                  int gate_depth) {
    if (N < 1) throw ConfigError("sequence length must be positive");
    MaskSpec mask = make_mask(gamma, gamma_prime, cfg.d, cfg.D, cfg.heads);
    const int64_t n = N;
    const int64_t d = cfg.d;
    const int64_t d_eff = mask.d_eff;
    const int64_t D_eff = mask.D_eff;
    const int64_t heads = cfg.heads;

    int64_t total = 0;
    // Q, K, V and output projections: 4 masked d -> d_eff products from a
    // d-wide input.
    total += 4 * FlopsRules::kMac * n * d * d_eff;
    // Linear attention core: per head, (A2^T V) then A1 * core.
    total += 2 * FlopsRules::kMac * n * d_eff * d_eff / heads;
    // elu(Q), elu(K) and the two normalization maps.
    total += 2 * FlopsRules::kActivation * n * d_eff;
    total += 2 * FlopsRules::kNormalization * n * d_eff;
    // Feed-forward pair.
    total += FlopsRules::kMac * n * (d_eff * D_eff + D_eff * d_eff);
    total += FlopsRules::kActivation * n * D_eff;  // GeLU
    // Data-aware gates: gate 1 targets the hidden width, gate 2 the inner
    // width. Hidden crossings keep width d and read the d-wide input batch.
    if (gate_depth > 0) {
        for (int64_t out_w : {d_eff, D_eff}) {
            total += (gate_depth - 1) * (FlopsRules::kMac * n * d * d + FlopsRules::kActivation * n * d);
            total += FlopsRules::kMac * n * d * out_w;
            total += FlopsRules::kActivation * n * out_w;  // sigmoid
            total += FlopsRules::kElementwise * n * out_w; // scale into (0,2)
        }
        // Gate injections delta . S and delta . F1.
        total += FlopsRules::kElementwise * n * (d_eff + D_eff);
    }
    // Residual adds and the two layer norms.
    total += 2 * FlopsRules::kElementwise * n * d_eff;
    total += 2 * FlopsRules::kNormalization * n * d_eff;
    return total;
}

// Per-(candidate, layer) cost table. Entry (i, l) is the cost of producing
// candidate i's layer-l output from the input, i.e. the cumulative cost of
// the first l+1 blocks: exiting deeper costs more, which is what gives the
// depth controller its resource gradient. Read-only once built.
struct FlopsTable {
    int m = 0;
    int L = 0;
    std::vector<int64_t> flops;  // m x L, row-major, cumulative over layers

    int64_t at(int candidate, int layer) const {
        return flops[static_cast<size_t>(candidate) * static_cast<size_t>(L) + static_cast<size_t>(layer)];
    }

    // Cost of running candidate k for the first `depth` layers.
    int64_t path_cost(int candidate, int depth) const { return at(candidate, depth - 1); }

    // Cost of the largest full-depth architecture; the search loss uses it
    // as the scale reference for the resource penalty.
    int64_t full_network_cost() const {
        int64_t best = 0;
        for (int i = 0; i < m; ++i) best = std::max(best, at(i, L - 1));
        return best;
    }
};

inline FlopsTable build_flops_table(const SupernetConfig& cfg, int N) {
    cfg.validate();
    FlopsTable t;
    t.m = cfg.m();
    t.L = cfg.L;
    t.flops.resize(static_cast<size_t>(t.m) * static_cast<size_t>(t.L));
    for (int i = 0; i < t.m; ++i) {
        int64_t block = flops_of_candidate(cfg, cfg.gammas[static_cast<size_t>(i)],
                                           cfg.gamma_primes[static_cast<size_t>(i)], N, cfg.gate_depth);
        if (block <= 0) throw ConfigError("non-positive FLOPs count");
        for (int l = 0; l < t.L; ++l)
            t.flops[static_cast<size_t>(i) * static_cast<size_t>(t.L) + static_cast<size_t>(l)] =
                block * static_cast<int64_t>(l + 1);
    }
    return t;
}

// Dynamic resource constraint: (L_t / L) * sum_j sum_i p_i q_j FLOPs(i, j),
// differentiable in p and q; the table entries are constants.
inline Val resource_loss(Tape& tape, Val p, Val q, const FlopsTable& table, int L_t, int L) {
    if (L_t < 1 || L_t > L) throw ConfigError("dynamic depth L_t out of [1, L]");
    if (static_cast<int>(tape.value(p).numel()) != table.m || static_cast<int>(tape.value(q).numel()) != table.L)
        throw ShapeError("fusion weights do not match the FLOPs table");
    Val total{};
    for (int j = 0; j < table.L; ++j) {
        Val inner{};
        for (int i = 0; i < table.m; ++i) {
            Val term = tape.scale_const(tape.pick(p, i), static_cast<real>(table.at(i, j)));
            inner = inner.valid() ? tape.add(inner, term) : term;
        }
        Val weighted = tape.mul(tape.pick(q, j), inner);
        total = total.valid() ? tape.add(total, weighted) : weighted;
    }
    return tape.scale_const(total, static_cast<real>(L_t) / static_cast<real>(L));
}

inline double resource_loss_value(const std::vector<real>& p, const std::vector<real>& q,
                                  const FlopsTable& table, int L_t) {
    if (L_t < 1 || L_t > table.L) throw ConfigError("dynamic depth L_t out of [1, L]");
    double s = 0;
    for (int j = 0; j < table.L; ++j)
        for (int i = 0; i < table.m; ++i)
            s += static_cast<double>(p[static_cast<size_t>(i)]) * static_cast<double>(q[static_cast<size_t>(j)]) *
                 static_cast<double>(table.at(i, j));
    return s * static_cast<double>(L_t) / static_cast<double>(table.L);
}

}  // namespace slimrec
