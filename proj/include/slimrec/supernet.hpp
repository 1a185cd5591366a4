#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "slimrec/common.hpp"
#include "slimrec/model.hpp"
#include "slimrec/rng.hpp"
#include "slimrec/tape.hpp"

namespace slimrec {

struct SupernetConfig {
    int d = 64;
    int D = 256;
    int N = 50;
    int L = 4;
    int heads = 4;
    std::vector<double> gammas = {0.0, 0.25, 0.5};
    std::vector<double> gamma_primes = {0.0, 0.25, 0.5};
    double lambda = 0.1;
    int gate_depth = 2;   // L_d
    double dropout = 0.2;
    int batch_search = 1024;
    int batch_retrain = 2048;
    int top_k = 10;

    int m() const { return static_cast<int>(gammas.size()); }

    void validate() const {
        if (gammas.empty() || gammas.size() != gamma_primes.size())
            throw ConfigError("need equally many gamma and gamma_prime intensities");
        for (double g : gammas)
            if (g < 0 || g >= 1) throw ConfigError("gamma out of [0,1)");
        for (double g : gamma_primes)
            if (g < 0 || g >= 1) throw ConfigError("gamma_prime out of [0,1)");
        if (L < 1) throw ConfigError("layer count must be >= 1");
        if (d < 1 || D < 1 || N < 1) throw ConfigError("model dimensions must be positive");
        if (d % heads != 0) throw ConfigError("hidden size must divide across heads");
        if (gate_depth < 0 || gate_depth > 4) throw ConfigError("gate depth must be in 0..4");
        if (dropout < 0 || dropout >= 1) throw ConfigError("dropout rate must be in [0,1)");
        if (lambda < 0) throw ConfigError("lambda must be non-negative");
        if (top_k < 1) throw ConfigError("top_k must be positive");
    }
};

// Candidate masks for every pruning intensity pair of the config.
inline std::vector<MaskSpec> make_masks(const SupernetConfig& cfg, std::vector<std::string>* warnings = nullptr) {
    cfg.validate();
    std::vector<MaskSpec> masks;
    masks.reserve(cfg.gammas.size());
    for (size_t i = 0; i < cfg.gammas.size(); ++i) {
        std::string warn;
        masks.push_back(make_mask(cfg.gammas[i], cfg.gamma_primes[i], cfg.d, cfg.D, cfg.heads, &warn));
        if (!warn.empty() && warnings) warnings->push_back("candidate " + std::to_string(i + 1) + ": " + warn);
    }
    return masks;
}

// Architecture weights. alpha is shared by all layers of a candidate; both
// vectors are stored as unconstrained logits (log alpha, log beta), so
// positivity needs no projection and Eq-style log(alpha) is the raw value.
struct ArchParams {
    Parameter alpha_logits;  // [m]
    Parameter beta_logits;   // [L]

    void init(int m, int L) {
        alpha_logits = Parameter("arch.alpha", Tensor::zeros({m}));
        beta_logits = Parameter("arch.beta", Tensor::zeros({L}));
    }

    std::vector<real> alpha() const {
        std::vector<real> a(alpha_logits.value.vec().begin(), alpha_logits.value.vec().end());
        for (auto& v : a) v = std::exp(v);
        return a;
    }
    std::vector<real> beta() const {
        std::vector<real> b(beta_logits.value.vec().begin(), beta_logits.value.vec().end());
        for (auto& v : b) v = std::exp(v);
        return b;
    }
};

enum class FusionMode { Sample, Expected, Hard };

// One draw of decision weights used for a whole forward pass.
struct FusionWeights {
    Val p;                     // [m] on tape
    Val q;                     // [L] on tape
    std::vector<real> p_values;
    std::vector<real> q_values;
};

// Gumbel-softmax over positive weights: softmax((log w + g)/tau) with fresh
// standard Gumbel noise in Sample mode and no noise in Expected mode.
inline Val gumbel_softmax(Tape& tape, Val log_weights, real tau, Rng& rng, FusionMode mode) {
    if (tau <= 0) throw ConfigError("gumbel-softmax temperature must be positive");
    const size_t k = tape.value(log_weights).numel();
    Val z = log_weights;
    if (mode == FusionMode::Sample) {
        Tensor noise({static_cast<int>(k)});
        for (size_t i = 0; i < k; ++i) noise[i] = static_cast<real>(rng.gumbel());
        z = tape.add(z, tape.leaf(std::move(noise)));
    }
    return tape.softmax_lastdim(tape.scale_const(z, real(1) / tau));
}

// Convenience overload for plain positive weights (off-tape callers).
inline std::vector<real> gumbel_softmax(const std::vector<real>& weights, real tau, Rng& rng, FusionMode mode) {
    for (real w : weights)
        if (w <= 0) throw ConfigError("gumbel-softmax weights must be positive");
    Tape tape;
    Tensor logw({static_cast<int>(weights.size())});
    for (size_t i = 0; i < weights.size(); ++i) logw[i] = std::log(weights[i]);
    Val p = gumbel_softmax(tape, tape.leaf(std::move(logw)), tau, rng, mode);
    const auto& v = tape.value(p).vec();
    return std::vector<real>(v.begin(), v.end());
}

template <typename Vec>
inline int argmax_lowest_tie(const Vec& v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
}

// The m-candidate, L-layer supernet with bilevel controllers.
class Supernet {
public:
    SupernetConfig cfg;
    EmbeddingParams emb;
    std::vector<CandidateParams> candidates;
    ArchParams arch;
    std::vector<std::string> mask_warnings;

    void init(int vocab, uint64_t seed) {
        cfg.validate();
        Rng rng = Rng::substream(seed, "init");
        emb.init(vocab, cfg.N, cfg.d, rng);
        auto masks = make_masks(cfg, &mask_warnings);
        candidates.clear();
        candidates.resize(static_cast<size_t>(cfg.m()));
        for (int i = 0; i < cfg.m(); ++i)
            candidates[static_cast<size_t>(i)].init("cand" + std::to_string(i + 1), masks[static_cast<size_t>(i)],
                                                    cfg.L, cfg.d, cfg.D, cfg.gate_depth, rng);
        arch.init(cfg.m(), cfg.L);
    }

    std::vector<Parameter*> weight_params() {
        std::vector<Parameter*> out{&emb.item_table, &emb.pos_table};
        for (auto& c : candidates) c.collect(out);
        return out;
    }

    std::vector<Parameter*> arch_param_list() { return {&arch.alpha_logits, &arch.beta_logits}; }

    // Draws decision weights (p over candidates, q over depth options). One
    // draw serves the whole forward pass. Hard mode emits exact one-hot
    // vectors at the argmax of the stored logits.
    FusionWeights draw_fusion(Tape& tape, real tau, FusionMode mode, Rng& gumbel_rng) {
        FusionWeights f;
        if (mode == FusionMode::Hard) {
            Tensor p(std::vector<int>{cfg.m()});
            Tensor q(std::vector<int>{cfg.L});
            p[static_cast<size_t>(argmax_lowest_tie(arch.alpha_logits.value.vec()))] = 1;
            q[static_cast<size_t>(argmax_lowest_tie(arch.beta_logits.value.vec()))] = 1;
            f.p_values.assign(p.vec().begin(), p.vec().end());
            f.q_values.assign(q.vec().begin(), q.vec().end());
            f.p = tape.leaf(std::move(p));
            f.q = tape.leaf(std::move(q));
            return f;
        }
        f.p = gumbel_softmax(tape, tape.param(arch.alpha_logits), tau, gumbel_rng, mode);
        f.q = gumbel_softmax(tape, tape.param(arch.beta_logits), tau, gumbel_rng, mode);
        const auto& pv = tape.value(f.p).vec();
        const auto& qv = tape.value(f.q).vec();
        f.p_values.assign(pv.begin(), pv.end());
        f.q_values.assign(qv.begin(), qv.end());
        return f;
    }

    // Y = sum_j q_j T^(j) with T^(j) = sum_i p_i T_i^(j); layer l+1 consumes
    // the p-fused state of layer l.
    Val forward(Tape& tape, const SequenceBatch& batch, const FusionWeights& fusion, DropoutMode mode,
                Rng* dropout_rng) {
        ForwardCtx ctx = make_forward_ctx(tape, batch, emb, static_cast<real>(cfg.dropout), mode, dropout_rng);
        Val prev = ctx.E;
        std::vector<Val> depth_states;
        depth_states.reserve(static_cast<size_t>(cfg.L));
        for (int l = 0; l < cfg.L; ++l) {
            std::vector<Val> outs;
            outs.reserve(static_cast<size_t>(cfg.m()));
            for (int i = 0; i < cfg.m(); ++i)
                outs.push_back(candidate_forward(ctx, prev, candidates[static_cast<size_t>(i)], l));
            Val fused = tape.weighted_sum(outs, fusion.p);
            depth_states.push_back(fused);
            prev = fused;
        }
        return tape.weighted_sum(depth_states, fusion.q);
    }

    // Single-candidate masked path: candidate `k1` run for `depth` layers
    // with no fusion arithmetic. This is the network the hard selection
    // keeps, still expressed through zero masks.
    Val forward_hard_path(Tape& tape, const SequenceBatch& batch, int k1, int depth, DropoutMode mode,
                          Rng* dropout_rng) {
        if (k1 < 0 || k1 >= cfg.m()) throw UsageError("candidate index out of range");
        if (depth < 1 || depth > cfg.L) throw UsageError("depth out of range");
        ForwardCtx ctx = make_forward_ctx(tape, batch, emb, static_cast<real>(cfg.dropout), mode, dropout_rng);
        Val prev = ctx.E;
        for (int l = 0; l < depth; ++l)
            prev = candidate_forward(ctx, prev, candidates[static_cast<size_t>(k1)], l);
        return prev;
    }

    Val logits_for(Tape& tape, Val y, const SequenceBatch& batch) {
        return score_items(tape, y, batch, emb);
    }
};

}  // namespace slimrec
