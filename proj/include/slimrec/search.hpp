#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "slimrec/adam.hpp"
#include "slimrec/common.hpp"
#include "slimrec/data.hpp"
#include "slimrec/flops.hpp"
#include "slimrec/metrics.hpp"
#include "slimrec/model.hpp"
#include "slimrec/supernet.hpp"
#include "slimrec/tape.hpp"

namespace slimrec {

// tau = max(0.01, 1 - 0.00005 t)
inline double temperature_at(int64_t t) {
    if (t < 0) throw UsageError("negative iteration count");
    return std::max(0.01, 1.0 - 0.00005 * static_cast<double>(t));
}

struct SearchState {
    int64_t iteration = 0;
    double tau = 1.0;
    int dynamic_depth = 1;  // L_t
    int refresh_every = 100;
    int epochs_without_improvement = 0;
};

// L_t follows the currently strongest depth option (temporary hard
// selection in the depth controller), ties to the lowest index.
inline int update_dynamic_depth(SearchState& state, const std::vector<real>& beta) {
    state.dynamic_depth = argmax_lowest_tie(beta) + 1;
    return state.dynamic_depth;
}

struct TrainConfig {
    real lr = real(0.001);            // xi
    double lambda = 0.1;
    int batch_search = 1024;
    int batch_retrain = 2048;
    int max_epochs_search = 50;
    int max_epochs_retrain = 200;
    int patience = 10;
    uint64_t seed = 1;
    int refresh_every = 100;          // f
    bool sliding_windows = false;
    int window_stride = 1;
    bool verify_isolation = false;

    void validate() const {
        if (lambda < 0) throw ConfigError("lambda must be non-negative");
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (refresh_every < 1) throw ConfigError("refresh cadence f must be >= 1");
        if (batch_search < 1 || batch_retrain < 1) throw ConfigError("batch sizes must be positive");
        if (window_stride < 1) throw ConfigError("window stride must be >= 1");
        if (lr <= 0) throw ConfigError("learning rate must be positive");
    }
};

struct ArchChoice {
    int candidate = 0;  // 0-based index into the candidate list
    int depth = 1;      // L_o
    double gamma = 0;
    double gamma_prime = 0;
    int d_eff = 0;
    int D_eff = 0;
    int64_t flops = 0;  // cost of the chosen path (candidate over depth layers)
};

// Eq-style hard selection: k1 = argmax alpha, k2 = argmax beta, ties to the
// lowest index; the depth choice keeps the first L_o layers.
inline ArchChoice hard_select(const std::vector<real>& alpha, const std::vector<real>& beta,
                              const SupernetConfig& cfg, const FlopsTable& table) {
    ArchChoice c;
    c.candidate = argmax_lowest_tie(alpha);
    c.depth = argmax_lowest_tie(beta) + 1;
    c.gamma = cfg.gammas.at(static_cast<size_t>(c.candidate));
    c.gamma_prime = cfg.gamma_primes.at(static_cast<size_t>(c.candidate));
    MaskSpec m = make_mask(c.gamma, c.gamma_prime, cfg.d, cfg.D, cfg.heads);
    c.d_eff = m.d_eff;
    c.D_eff = m.D_eff;
    c.flops = table.path_cost(c.candidate, c.depth);
    return c;
}

struct IterationLog {
    int64_t t = 0;
    double tau = 0;
    int dynamic_depth = 0;
    double ce = 0;
    double rc = 0;  // raw Eq.-form resource term
    std::vector<real> p, q;
};

struct SearchResult {
    ArchChoice choice;
    std::vector<IterationLog> log;
    std::vector<double> val_recall_per_epoch;
    int epochs_run = 0;
    bool stopped_early = false;
    double wall_seconds = 0;
    bool isolation_ok = true;
    int64_t reference_flops = 0;  // penalty normalizer (largest architecture)
};

namespace detail {

inline std::vector<Tensor> snapshot(const std::vector<Parameter*>& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Parameter* p : params) out.push_back(p->value);
    return out;
}

inline bool snapshots_equal(const std::vector<Tensor>& snap, const std::vector<Parameter*>& params) {
    for (size_t i = 0; i < params.size(); ++i)
        if (!bit_equal(snap[i], params[i]->value)) return false;
    return true;
}

}  // namespace detail

// The bilevel search loop. Each iteration takes one training batch to update
// model weights and one validation batch to update {alpha, beta}; both use
// the combined loss L_CE + lambda * L_RC with the resource term scaled by
// the full-architecture FLOPs so lambda is comparable across model sizes.
// Every f iterations the dynamic depth L_t follows argmax beta. Stops after
// `patience` epochs without validation Recall@k improvement of the current
// hard-selected path, or at max epochs.
inline SearchResult search(Supernet& net, const SplitSpec& split, const TrainConfig& tc) {
    tc.validate();
    net.cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();

    FlopsTable table = build_flops_table(net.cfg, net.cfg.N);
    const double ref_flops = static_cast<double>(table.full_network_cost());

    Rng shuffle_rng = Rng::substream(tc.seed, "search-shuffle");
    Rng gumbel_rng = Rng::substream(tc.seed, "gumbel");
    Rng dropout_rng = Rng::substream(tc.seed, "search-dropout");

    BatchOptions train_opt{net.cfg.N, tc.batch_search, tc.sliding_windows, tc.window_stride};
    BatchOptions val_opt{net.cfg.N, tc.batch_search, false, 1};
    Rng fixed(0);
    std::vector<SequenceBatch> val_batches = make_batches(split, BatchPurpose::Val, val_opt, fixed);
    if (val_batches.empty()) throw UsageError("validation split is empty");

    std::vector<Parameter*> weights = net.weight_params();
    std::vector<Parameter*> arch = net.arch_param_list();
    Adam opt_w(weights, AdamConfig{tc.lr});
    Adam opt_a(arch, AdamConfig{tc.lr});

    auto is_arch_param = [&](const Parameter& p) {
        return &p == &net.arch.alpha_logits || &p == &net.arch.beta_logits;
    };

    SearchResult result;
    result.reference_flops = static_cast<int64_t>(ref_flops);
    SearchState state;
    state.refresh_every = tc.refresh_every;
    update_dynamic_depth(state, net.arch.beta());

    auto eval_hard_path = [&]() {
        ArchChoice c = hard_select(net.arch.alpha(), net.arch.beta(), net.cfg, table);
        EvalOptions eo;
        eo.k = net.cfg.top_k;
        eo.batch_size = tc.batch_search;
        return evaluate_ranking(split, BatchPurpose::Val, net.cfg.N, eo, [&](const SequenceBatch& b) {
            Tape tape;
            tape.param_filter = [](const Parameter&) { return false; };
            Val y = net.forward_hard_path(tape, b, c.candidate, c.depth, DropoutMode::Eval, nullptr);
            return tape.value(net.logits_for(tape, y, b));
        });
    };

    double best_recall = -1;
    size_t val_cursor = 0;

    auto run_batch = [&](const SequenceBatch& batch, bool arch_step) {
        Tape tape;
        if (arch_step) tape.param_filter = is_arch_param;
        FusionWeights fusion = net.draw_fusion(tape, static_cast<real>(state.tau), FusionMode::Sample, gumbel_rng);
        Val y = net.forward(tape, batch, fusion, DropoutMode::Train, &dropout_rng);
        Val logits = net.logits_for(tape, y, batch);
        Val ce = ce_loss(tape, logits, batch.targets);
        Val rc = resource_loss(tape, fusion.p, fusion.q, table, state.dynamic_depth, net.cfg.L);
        Val loss = tape.add(ce, tape.scale_const(rc, static_cast<real>(tc.lambda / ref_flops)));
        double ce_v = tape.value(ce).item();
        double rc_v = tape.value(rc).item();
        if (!std::isfinite(ce_v) || !std::isfinite(rc_v))
            throw NumericError("search diverged at t=" + std::to_string(state.iteration) +
                               " (tau=" + std::to_string(state.tau) + ", L_t=" + std::to_string(state.dynamic_depth) +
                               ", L_CE=" + std::to_string(ce_v) + ", L_RC=" + std::to_string(rc_v) + ")");
        tape.backward(loss);
        if (arch_step)
            opt_a.step(tape);
        else
            opt_w.step(tape);
        if (!arch_step) {
            IterationLog il;
            il.t = state.iteration;
            il.tau = state.tau;
            il.dynamic_depth = state.dynamic_depth;
            il.ce = ce_v;
            il.rc = rc_v;
            il.p = fusion.p_values;
            il.q = fusion.q_values;
            result.log.push_back(std::move(il));
        }
    };

    for (int epoch = 0; epoch < tc.max_epochs_search; ++epoch) {
        std::vector<SequenceBatch> train_batches = make_batches(split, BatchPurpose::Train, train_opt, shuffle_rng);
        if (train_batches.empty()) throw UsageError("training split produced no examples");
        for (const SequenceBatch& tb : train_batches) {
            state.tau = temperature_at(state.iteration);
            if (state.iteration % state.refresh_every == 0) update_dynamic_depth(state, net.arch.beta());

            std::vector<Tensor> arch_before, w_before;
            if (tc.verify_isolation) arch_before = detail::snapshot(arch);
            run_batch(tb, /*arch_step=*/false);
            if (tc.verify_isolation && !detail::snapshots_equal(arch_before, arch)) result.isolation_ok = false;

            if (tc.verify_isolation) w_before = detail::snapshot(weights);
            run_batch(val_batches[val_cursor], /*arch_step=*/true);
            if (tc.verify_isolation && !detail::snapshots_equal(w_before, weights)) result.isolation_ok = false;

            val_cursor = (val_cursor + 1) % val_batches.size();
            ++state.iteration;
        }
        ++result.epochs_run;

        MetricsReport val = eval_hard_path();
        result.val_recall_per_epoch.push_back(val.recall);
        if (val.recall > best_recall) {
            best_recall = val.recall;
            state.epochs_without_improvement = 0;
        } else if (++state.epochs_without_improvement >= tc.patience) {
            result.stopped_early = true;
            break;
        }
    }

    result.choice = hard_select(net.arch.alpha(), net.arch.beta(), net.cfg, table);
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

// ---------------------------------------------------------------------------
// Compact reconstruction
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor take_rows_cols(const Tensor& m, const std::vector<int>& rows, const std::vector<int>& cols) {
    Tensor out({static_cast<int>(rows.size()), static_cast<int>(cols.size())});
    for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < cols.size(); ++c)
            out[r * cols.size() + c] = m.at2(rows[r], cols[c]);
    return out;
}

inline Tensor take_vec(const Tensor& v, const std::vector<int>& idx) {
    Tensor out({static_cast<int>(idx.size())});
    for (size_t i = 0; i < idx.size(); ++i) out[i] = v[static_cast<size_t>(idx[i])];
    return out;
}

inline std::vector<int> iota_indices(int n) {
    std::vector<int> v(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
    return v;
}

}  // namespace detail

// The hard-selected architecture materialized with physically small
// matrices: masked trailing channels are sliced away, gates and embeddings
// come along, and the scoring head stays weight-tied to the item table.
class CompactModel {
public:
    int d_full = 0;   // embedding width (layer-1 input)
    int d_eff = 0;
    int D_eff = 0;
    int depth = 0;
    int heads = 0;
    int head_dim_eff = 0;
    int seq_len = 0;
    int gate_depth = 0;
    real dropout_rate = 0;
    int top_k = 10;
    std::vector<int> keep;  // hidden channels kept, ascending
    ArchChoice choice;

    EmbeddingParams emb;
    std::vector<LayerParams> layers;

    std::vector<Parameter*> params() {
        std::vector<Parameter*> out{&emb.item_table, &emb.pos_table};
        for (auto& l : layers) l.collect(out);
        return out;
    }

    Val forward(Tape& tape, const SequenceBatch& batch, DropoutMode mode, Rng* dropout_rng) {
        ForwardCtx ctx = make_forward_ctx(tape, batch, emb, dropout_rate, mode, dropout_rng);
        Val h = ctx.E;
        for (int l = 0; l < depth; ++l) h = block_forward(ctx, h, l);
        return h;  // [B, N, d_eff]
    }

    Val logits_for(Tape& tape, Val y, const SequenceBatch& batch) {
        std::vector<int> pos(static_cast<size_t>(batch.batch));
        for (int b = 0; b < batch.batch; ++b) pos[static_cast<size_t>(b)] = batch.last_position(b);
        Val last = tape.rows_at(y, pos);
        // Weight tying: surviving channels score against the matching
        // columns of the full item table.
        Val padded = tape.scatter_lastdim(last, keep, d_full);
        return tape.score_items(padded, tape.param(emb.item_table));
    }

    Tensor score_batch(const SequenceBatch& batch) {
        Tape tape;
        tape.param_filter = [](const Parameter&) { return false; };
        Val y = forward(tape, batch, DropoutMode::Eval, nullptr);
        return tape.value(logits_for(tape, y, batch));
    }

private:
    Val block_forward(ForwardCtx& ctx, Val h, int layer_index) {
        Tape& t = ctx.tape;
        LayerParams& layer = layers.at(static_cast<size_t>(layer_index));
        Val q = t.elu(t.dense(h, t.param(layer.wq)));
        Val k = t.elu(t.dense(h, t.param(layer.wk)));
        Val v = t.dense(h, t.param(layer.wv));
        std::vector<Val> head_outs;
        head_outs.reserve(static_cast<size_t>(heads));
        for (int hh = 0; hh < heads; ++hh) {
            int off = hh * head_dim_eff;
            Val a1 = t.l2_normalize(t.slice_lastdim(q, off, head_dim_eff), Axis::Rows, head_dim_eff);
            Val a2 = t.l2_normalize(t.slice_lastdim(k, off, head_dim_eff), Axis::Cols, head_dim_eff);
            Val core = t.bmm(a2, t.slice_lastdim(v, off, head_dim_eff), /*trans_a=*/true);
            head_outs.push_back(t.bmm(a1, core));
        }
        Val cat = heads == 1 ? head_outs[0] : t.concat_lastdim(head_outs);
        Val out = t.dense(cat, t.param(layer.wo));
        // Layer 1 consumes the d-wide embedding; its residual uses only the
        // surviving channels.
        Val res = layer_index == 0 ? t.gather_lastdim(h, keep) : h;
        Val s = t.layer_norm(t.add(res, out), t.param(layer.ln_attn_gain), t.param(layer.ln_attn_bias),
                             kLayerNormEps);
        s = t.mul_mask_rows(s, ctx.row_mask);

        Val f1_in = s;
        if (layer.gate1.depth > 0) f1_in = t.mul(gate_forward(ctx, layer.gate1), s);
        Val f1 = t.gelu(t.dense(f1_in, t.param(layer.w_f1), t.param(layer.b_f1)));
        Val f2_in = f1;
        if (layer.gate2.depth > 0) f2_in = t.mul(gate_forward(ctx, layer.gate2), f1);
        Val f2 = t.dense(f2_in, t.param(layer.w_f2), t.param(layer.b_f2));
        if (ctx.mode == DropoutMode::Train && ctx.dropout_rate > 0) {
            if (!ctx.dropout_rng) throw UsageError("train-mode forward needs a dropout rng");
            f2 = t.dropout(f2, ctx.dropout_rate, DropoutMode::Train, *ctx.dropout_rng);
        }
        Val o = t.layer_norm(t.add(s, f2), t.param(layer.ln_out_gain), t.param(layer.ln_out_bias), kLayerNormEps);
        return t.mul_mask_rows(o, ctx.row_mask);
    }
};

// Transfers the selected candidate's surviving weights into a compact model:
// trailing masked channels are sliced off every projection, bias, norm and
// final gate layer; the first L_o layers are kept.
inline CompactModel build_compact_model(Supernet& net, const ArchChoice& choice) {
    if (choice.candidate < 0 || choice.candidate >= net.cfg.m()) throw UsageError("choice candidate out of range");
    if (choice.depth < 1 || choice.depth > net.cfg.L) throw UsageError("choice depth out of range");
    CandidateParams& cand = net.candidates[static_cast<size_t>(choice.candidate)];
    const MaskSpec& mask = cand.mask;
    if (mask.d_eff != choice.d_eff || mask.D_eff != choice.D_eff)
        throw UsageError("architecture choice does not match the candidate masks");

    CompactModel cm;
    cm.d_full = net.cfg.d;
    cm.d_eff = mask.d_eff;
    cm.D_eff = mask.D_eff;
    cm.depth = choice.depth;
    cm.heads = net.cfg.heads;
    cm.head_dim_eff = mask.head_dim_eff;
    cm.seq_len = net.cfg.N;
    cm.gate_depth = net.cfg.gate_depth;
    cm.dropout_rate = static_cast<real>(net.cfg.dropout);
    cm.top_k = net.cfg.top_k;
    cm.keep = mask.hidden_keep;
    cm.choice = choice;

    cm.emb.item_table = Parameter("emb.item", net.emb.item_table.value);
    cm.emb.pos_table = Parameter("emb.pos", net.emb.pos_table.value);

    const std::vector<int> all_d = detail::iota_indices(net.cfg.d);
    const std::vector<int> inner_keep = detail::iota_indices(cm.D_eff);
    cm.layers.resize(static_cast<size_t>(choice.depth));
    for (int l = 0; l < choice.depth; ++l) {
        const LayerParams& src = cand.layers[static_cast<size_t>(l)];
        LayerParams& dst = cm.layers[static_cast<size_t>(l)];
        const std::vector<int>& in_keep = (l == 0) ? all_d : mask.hidden_keep;
        const std::string name = "compact.layer" + std::to_string(l + 1);
        dst.wq = Parameter(name + ".wq", detail::take_rows_cols(src.wq.value, in_keep, mask.hidden_keep));
        dst.wk = Parameter(name + ".wk", detail::take_rows_cols(src.wk.value, in_keep, mask.hidden_keep));
        dst.wv = Parameter(name + ".wv", detail::take_rows_cols(src.wv.value, in_keep, mask.hidden_keep));
        dst.wo = Parameter(name + ".wo", detail::take_rows_cols(src.wo.value, mask.hidden_keep, mask.hidden_keep));
        dst.w_f1 = Parameter(name + ".w_f1", detail::take_rows_cols(src.w_f1.value, mask.hidden_keep, inner_keep));
        dst.b_f1 = Parameter(name + ".b_f1", detail::take_vec(src.b_f1.value, inner_keep));
        dst.w_f2 = Parameter(name + ".w_f2", detail::take_rows_cols(src.w_f2.value, inner_keep, mask.hidden_keep));
        dst.b_f2 = Parameter(name + ".b_f2", detail::take_vec(src.b_f2.value, mask.hidden_keep));
        dst.ln_attn_gain = Parameter(name + ".ln_attn.g", detail::take_vec(src.ln_attn_gain.value, mask.hidden_keep));
        dst.ln_attn_bias = Parameter(name + ".ln_attn.b", detail::take_vec(src.ln_attn_bias.value, mask.hidden_keep));
        dst.ln_out_gain = Parameter(name + ".ln_out.g", detail::take_vec(src.ln_out_gain.value, mask.hidden_keep));
        dst.ln_out_bias = Parameter(name + ".ln_out.b", detail::take_vec(src.ln_out_bias.value, mask.hidden_keep));

        auto transfer_gate = [&](const GateParams& g_src, GateParams& g_dst, const std::vector<int>& out_keep,
                                 const char* tag) {
            g_dst.depth = g_src.depth;
            g_dst.out_width = static_cast<int>(out_keep.size());
            g_dst.weights.clear();
            g_dst.biases.clear();
            for (int gl = 0; gl < g_src.depth; ++gl) {
                bool final_layer = (gl == g_src.depth - 1);
                const Tensor& w = g_src.weights[static_cast<size_t>(gl)].value;
                const Tensor& b = g_src.biases[static_cast<size_t>(gl)].value;
                std::string base = name + "." + tag + ".w" + std::to_string(gl + 1);
                std::string bbase = name + "." + tag + ".b" + std::to_string(gl + 1);
                if (final_layer) {
                    g_dst.weights.emplace_back(base, detail::take_rows_cols(w, detail::iota_indices(w.dim(0)), out_keep));
                    g_dst.biases.emplace_back(bbase, detail::take_vec(b, out_keep));
                } else {
                    g_dst.weights.emplace_back(base, w);
                    g_dst.biases.emplace_back(bbase, b);
                }
            }
        };
        transfer_gate(src.gate1, dst.gate1, mask.hidden_keep, "gate1");
        transfer_gate(src.gate2, dst.gate2, inner_keep, "gate2");
    }
    return cm;
}

// ---------------------------------------------------------------------------
// Retraining
// ---------------------------------------------------------------------------

struct RetrainResult {
    MetricsReport epoch0_val;  // transferred weights, before any update
    MetricsReport best_val;
    std::vector<double> train_loss_per_epoch;
    std::vector<double> val_recall_per_epoch;
    int epochs_run = 0;
    bool stopped_early = false;
};

// Standard training of the reconstructed model with the cross-entropy loss
// only (the architecture is fixed, so no resource term enters any gradient).
// Early stopping keeps the best-validation weights.
inline RetrainResult retrain(CompactModel& model, const SplitSpec& split, const TrainConfig& tc) {
    tc.validate();
    Rng shuffle_rng = Rng::substream(tc.seed, "retrain-shuffle");
    Rng dropout_rng = Rng::substream(tc.seed, "retrain-dropout");

    BatchOptions train_opt{model.seq_len, tc.batch_retrain, tc.sliding_windows, tc.window_stride};
    std::vector<Parameter*> params = model.params();
    Adam opt(params, AdamConfig{tc.lr});

    EvalOptions eo;
    eo.k = model.top_k;
    auto eval_val = [&]() {
        return evaluate_ranking(split, BatchPurpose::Val, model.seq_len, eo,
                                [&](const SequenceBatch& b) { return model.score_batch(b); });
    };

    RetrainResult result;
    result.epoch0_val = eval_val();
    double best_recall = result.epoch0_val.recall;
    std::vector<Tensor> best_params = detail::snapshot(params);
    int stale = 0;

    for (int epoch = 0; epoch < tc.max_epochs_retrain; ++epoch) {
        auto batches = make_batches(split, BatchPurpose::Train, train_opt, shuffle_rng);
        if (batches.empty()) throw UsageError("training split produced no examples");
        double loss_sum = 0;
        for (const SequenceBatch& batch : batches) {
            Tape tape;
            Val y = model.forward(tape, batch, DropoutMode::Train, &dropout_rng);
            Val loss = ce_loss(tape, model.logits_for(tape, y, batch), batch.targets);
            double lv = tape.value(loss).item();
            if (!std::isfinite(lv))
                throw NumericError("retraining diverged at epoch " + std::to_string(epoch));
            loss_sum += lv;
            tape.backward(loss);
            opt.step(tape);
        }
        result.train_loss_per_epoch.push_back(loss_sum / static_cast<double>(batches.size()));
        ++result.epochs_run;

        MetricsReport val = eval_val();
        result.val_recall_per_epoch.push_back(val.recall);
        if (val.recall > best_recall) {
            best_recall = val.recall;
            best_params = detail::snapshot(params);
            result.best_val = val;
            stale = 0;
        } else if (++stale >= tc.patience) {
            result.stopped_early = true;
            break;
        }
    }
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
    if (result.best_val.examples == 0) result.best_val = result.epoch0_val;
    return result;
}

}  // namespace slimrec
