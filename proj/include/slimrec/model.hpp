#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "slimrec/common.hpp"
#include "slimrec/data.hpp"
#include "slimrec/rng.hpp"
#include "slimrec/tape.hpp"
#include "slimrec/tensor.hpp"

namespace slimrec {

constexpr real kLayerNormEps = real(1e-8);
constexpr real kGateScale = real(2);  // bounds gate outputs to (0, 2)

// ---------------------------------------------------------------------------
// Zero masks
// ---------------------------------------------------------------------------

// Channel masks that emulate a narrower transformer without reshaping
// weights. Hidden zeros occupy the trailing fraction of each head's slice so
// that pruning never deletes whole heads and compaction is a contiguous
// per-head slice; inner zeros are plain trailing positions.
struct MaskSpec {
    double gamma = 0;
    double gamma_prime = 0;
    int heads = 1;
    int head_dim = 0;        // structural per-head width d/n
    int head_dim_eff = 0;    // kept per-head width
    int d_eff = 0;
    int D_eff = 0;
    std::vector<real> hidden;     // length d, entries in {0,1}
    std::vector<real> inner;      // length D
    std::vector<int> hidden_keep; // kept hidden channel indices, ascending

    bool is_identity() const { return d_eff == static_cast<int>(hidden.size()) && D_eff == static_cast<int>(inner.size()); }
};

// A requested zero count that is not per-head uniform is adjusted down to the
// nearest uniform count; `warning` receives a note when that happens.
inline MaskSpec make_mask(double gamma, double gamma_prime, int d, int D, int heads,
                          std::string* warning = nullptr) {
    if (gamma < 0 || gamma >= 1 || gamma_prime < 0 || gamma_prime >= 1)
        throw ConfigError("pruning intensities must lie in [0,1)");
    if (d % heads != 0)
        throw ConfigError("hidden size " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    MaskSpec m;
    m.gamma = gamma;
    m.gamma_prime = gamma_prime;
    m.heads = heads;
    m.head_dim = d / heads;

    int hidden_zeros = static_cast<int>(std::llround(gamma * d));
    if (hidden_zeros % heads != 0) {
        int adjusted = (hidden_zeros / heads) * heads;
        if (warning)
            *warning = "hidden zero count " + std::to_string(hidden_zeros) + " for gamma=" + std::to_string(gamma) +
                       " is not per-head uniform; using " + std::to_string(adjusted);
        hidden_zeros = adjusted;
    }
    if (hidden_zeros > d - heads) hidden_zeros = d - heads;  // keep at least one channel per head
    int zeros_per_head = hidden_zeros / heads;
    m.head_dim_eff = m.head_dim - zeros_per_head;
    m.d_eff = d - hidden_zeros;
    m.hidden.assign(static_cast<size_t>(d), real(1));
    for (int h = 0; h < heads; ++h)
        for (int j = m.head_dim_eff; j < m.head_dim; ++j)
            m.hidden[static_cast<size_t>(h * m.head_dim + j)] = real(0);
    for (int j = 0; j < d; ++j)
        if (m.hidden[static_cast<size_t>(j)] != real(0)) m.hidden_keep.push_back(j);

    int inner_zeros = static_cast<int>(std::llround(gamma_prime * D));
    if (inner_zeros > D - 1) inner_zeros = D - 1;
    m.D_eff = D - inner_zeros;
    m.inner.assign(static_cast<size_t>(D), real(1));
    for (int j = m.D_eff; j < D; ++j) m.inner[static_cast<size_t>(j)] = real(0);
    return m;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

inline real fan_in_bound(int fan_in) { return real(1) / std::sqrt(static_cast<real>(fan_in)); }

inline Tensor fan_in_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
    real b = fan_in_bound(fan_in);
    return Tensor::uniform(std::move(shape), -b, b, rng);
}

struct EmbeddingParams {
    Parameter item_table;  // (vocab+1) x d; row 0 all-zero and frozen
    Parameter pos_table;   // N x d

    void init(int vocab, int seq_len, int d, Rng& rng) {
        item_table = Parameter("emb.item", fan_in_uniform({vocab + 1, d}, d, rng));
        for (int j = 0; j < d; ++j) item_table.value[static_cast<size_t>(j)] = 0;
        pos_table = Parameter("emb.pos", fan_in_uniform({seq_len, d}, d, rng));
    }

    int vocab() const { return item_table.value.dim(0) - 1; }
    int width() const { return item_table.value.dim(1); }
};

// One data-aware gate: a stack of `depth` dense layers reading the embedded
// input batch. Hidden layers are ReLU feature crossings of width d; the final
// layer emits a sigmoid score scaled into (0, gate_scale). Depth 0 means the
// gate is absent and the caller treats delta as 1.
struct GateParams {
    std::vector<Parameter> weights;
    std::vector<Parameter> biases;
    int out_width = 0;
    int depth = 0;

    void init(const std::string& name, int in_width, int out, int gate_depth, Rng& rng) {
        out_width = out;
        depth = gate_depth;
        weights.clear();
        biases.clear();
        for (int l = 0; l < gate_depth; ++l) {
            bool final_layer = (l == gate_depth - 1);
            int cols = final_layer ? out : in_width;
            std::string wname = name + ".w" + std::to_string(l + 1);
            std::string bname = name + ".b" + std::to_string(l + 1);
            if (final_layer) {
                // Zero start makes sigmoid emit 0.5 and delta start neutral at 1.
                weights.emplace_back(wname, Tensor::zeros({in_width, cols}));
                biases.emplace_back(bname, Tensor::zeros({cols}));
            } else {
                weights.emplace_back(wname, fan_in_uniform({in_width, cols}, in_width, rng));
                biases.emplace_back(bname, Tensor::zeros({cols}));
            }
        }
    }
};

struct LayerParams {
    Parameter wq, wk, wv, wo;           // d x d attention projections
    Parameter w_f1, b_f1;               // d x D and D
    Parameter w_f2, b_f2;               // D x d and d
    Parameter ln_attn_gain, ln_attn_bias;
    Parameter ln_out_gain, ln_out_bias;
    GateParams gate1, gate2;            // bound to F1 / F2 inputs

    void init(const std::string& name, int d, int D, int gate_depth, Rng& rng) {
        wq = Parameter(name + ".wq", fan_in_uniform({d, d}, d, rng));
        wk = Parameter(name + ".wk", fan_in_uniform({d, d}, d, rng));
        wv = Parameter(name + ".wv", fan_in_uniform({d, d}, d, rng));
        wo = Parameter(name + ".wo", fan_in_uniform({d, d}, d, rng));
        w_f1 = Parameter(name + ".w_f1", fan_in_uniform({d, D}, d, rng));
        b_f1 = Parameter(name + ".b_f1", Tensor::zeros({D}));
        w_f2 = Parameter(name + ".w_f2", fan_in_uniform({D, d}, D, rng));
        b_f2 = Parameter(name + ".b_f2", Tensor::zeros({d}));
        ln_attn_gain = Parameter(name + ".ln_attn.g", Tensor::full({d}, 1));
        ln_attn_bias = Parameter(name + ".ln_attn.b", Tensor::zeros({d}));
        ln_out_gain = Parameter(name + ".ln_out.g", Tensor::full({d}, 1));
        ln_out_bias = Parameter(name + ".ln_out.b", Tensor::zeros({d}));
        gate1.init(name + ".gate1", d, d, gate_depth, rng);
        gate2.init(name + ".gate2", d, D, gate_depth, rng);
    }

    void collect(std::vector<Parameter*>& out) {
        for (Parameter* p : {&wq, &wk, &wv, &wo, &w_f1, &b_f1, &w_f2, &b_f2,
                             &ln_attn_gain, &ln_attn_bias, &ln_out_gain, &ln_out_bias})
            out.push_back(p);
        for (auto& w : gate1.weights) out.push_back(&w);
        for (auto& b : gate1.biases) out.push_back(&b);
        for (auto& w : gate2.weights) out.push_back(&w);
        for (auto& b : gate2.biases) out.push_back(&b);
    }
};

// One pruned transformer candidate: L layers sharing a single MaskSpec.
struct CandidateParams {
    MaskSpec mask;
    std::vector<LayerParams> layers;

    void init(const std::string& name, MaskSpec m, int num_layers, int d, int D, int gate_depth, Rng& rng) {
        mask = std::move(m);
        layers.resize(static_cast<size_t>(num_layers));
        for (int l = 0; l < num_layers; ++l)
            layers[static_cast<size_t>(l)].init(name + ".layer" + std::to_string(l + 1), d, D, gate_depth, rng);
    }

    void collect(std::vector<Parameter*>& out) {
        for (auto& l : layers) l.collect(out);
    }
};

// ---------------------------------------------------------------------------
// Forward math
// ---------------------------------------------------------------------------

// Per-forward context: the batch geometry, the row mask for padded cells, and
// the embedded input E, which is also the data-aware gates' input X.
struct ForwardCtx {
    Tape& tape;
    const SequenceBatch& batch;
    std::vector<real> row_mask;  // B*N entries, 1 for real cells
    Val E;                       // [B,N,d] after padding rows are forced to zero
    int B = 0, N = 0;
    real dropout_rate = 0;
    DropoutMode mode = DropoutMode::Eval;
    Rng* dropout_rng = nullptr;
};

inline std::vector<real> padding_row_mask(const SequenceBatch& batch) {
    std::vector<real> rm(batch.items.size());
    for (size_t i = 0; i < rm.size(); ++i) rm[i] = batch.items[i] == 0 ? real(0) : real(1);
    return rm;
}

// E[b,t] = item embedding + positional embedding; padded cells stay exactly
// zero so they are inert in the attention sums.
inline Val embed(Tape& tape, const SequenceBatch& batch, EmbeddingParams& emb) {
    for (int id : batch.items)
        if (id < 0 || id > emb.vocab())
            throw UsageError("item id " + std::to_string(id) + " outside vocabulary of " + std::to_string(emb.vocab()));
    return tape.embed_sequences(tape.param(emb.item_table), tape.param(emb.pos_table), batch.items,
                                batch.batch, batch.seq_len);
}

inline ForwardCtx make_forward_ctx(Tape& tape, const SequenceBatch& batch, EmbeddingParams& emb,
                                   real dropout_rate, DropoutMode mode, Rng* dropout_rng) {
    ForwardCtx ctx{tape, batch, padding_row_mask(batch), Val{}, batch.batch, batch.seq_len,
                   dropout_rate, mode, dropout_rng};
    ctx.E = tape.mul_mask_rows(embed(tape, batch, emb), ctx.row_mask);
    return ctx;
}

// A'(Q,K,V) = A1(elu(Q)) (A2(elu(K))^T V), evaluated right-to-left so cost is
// linear in sequence length. A1/A2 scale rows/columns to norm 1/sqrt(dim_scale).
inline Val linear_attention(Tape& tape, Val q, Val k, Val v, int dim_scale) {
    Val a1 = tape.l2_normalize(tape.elu(q), Axis::Rows, dim_scale);
    Val a2 = tape.l2_normalize(tape.elu(k), Axis::Cols, dim_scale);
    Val core = tape.bmm(a2, v, /*trans_a=*/true);  // [B, dh, dh]
    return tape.bmm(a1, core);                     // [B, N, dh]
}

// Multi-head masked linear attention sublayer:
//   per-head attention on slices of (H Wq, H Wk, H Wv), concatenated, output
//   projected, hidden-masked, then residual + layer norm over surviving
//   channels; padded rows re-zeroed. The elu is applied once at full width
//   before head slicing, which is elementwise-identical to per-head elu.
inline Val multi_head_forward(ForwardCtx& ctx, Val h, LayerParams& layer, const MaskSpec& mask) {
    Tape& t = ctx.tape;
    const int d = static_cast<int>(mask.hidden.size());
    if (d % mask.heads != 0) throw ConfigError("hidden size not divisible by head count");
    Val q = t.elu(t.dense(h, t.param(layer.wq), Val{}, &mask.hidden));
    Val k = t.elu(t.dense(h, t.param(layer.wk), Val{}, &mask.hidden));
    Val v = t.dense(h, t.param(layer.wv), Val{}, &mask.hidden);
    std::vector<Val> heads;
    heads.reserve(static_cast<size_t>(mask.heads));
    for (int hh = 0; hh < mask.heads; ++hh) {
        int off = hh * mask.head_dim;
        Val a1 = t.l2_normalize(t.slice_lastdim(q, off, mask.head_dim), Axis::Rows, mask.head_dim_eff);
        Val a2 = t.l2_normalize(t.slice_lastdim(k, off, mask.head_dim), Axis::Cols, mask.head_dim_eff);
        Val core = t.bmm(a2, t.slice_lastdim(v, off, mask.head_dim), /*trans_a=*/true);
        heads.push_back(t.bmm(a1, core));
    }
    Val cat = mask.heads == 1 ? heads[0] : t.concat_lastdim(heads);
    Val out = t.dense(cat, t.param(layer.wo), Val{}, &mask.hidden);
    Val s = t.layer_norm(t.add(h, out), t.param(layer.ln_attn_gain), t.param(layer.ln_attn_bias),
                         kLayerNormEps, mask.is_identity() ? nullptr : &mask.hidden);
    return t.mul_mask_rows(s, ctx.row_mask);
}

// delta_k = gate_scale * sigmoid(last layer of ReLU feature crossings over X).
inline Val gate_forward(ForwardCtx& ctx, GateParams& gate) {
    Tape& t = ctx.tape;
    if (gate.depth == 0) throw UsageError("gate_forward called on an absent gate");
    Val h = ctx.E;
    for (int l = 0; l + 1 < gate.depth; ++l)
        h = t.relu(t.dense(h, t.param(gate.weights[static_cast<size_t>(l)]),
                           t.param(gate.biases[static_cast<size_t>(l)])));
    Val z = t.dense(h, t.param(gate.weights[static_cast<size_t>(gate.depth - 1)]),
                    t.param(gate.biases[static_cast<size_t>(gate.depth - 1)]));
    return t.scale_const(t.sigmoid(z), kGateScale);
}

// One full candidate transformer block:
//   S  = multi-head attention sublayer of `prev`
//   F1 = inner_mask . GeLU((delta1 . S) W_F1 + b_F1)
//   F2 = hidden_mask . ((delta2 . F1) W_F2 + b_F2)
//   T  = LayerNorm(S + Dropout(F2)) over surviving channels, padded rows zeroed
inline Val candidate_forward(ForwardCtx& ctx, Val prev, CandidateParams& cand, int layer_index) {
    Tape& t = ctx.tape;
    LayerParams& layer = cand.layers.at(static_cast<size_t>(layer_index));
    const MaskSpec& mask = cand.mask;

    Val s = multi_head_forward(ctx, prev, layer, mask);

    Val f1_in = s;
    if (layer.gate1.depth > 0) f1_in = t.mul(gate_forward(ctx, layer.gate1), s);
    Val f1 = t.mul_mask_lastdim(t.gelu(t.dense(f1_in, t.param(layer.w_f1), t.param(layer.b_f1))), mask.inner);

    Val f2_in = f1;
    if (layer.gate2.depth > 0) f2_in = t.mul(gate_forward(ctx, layer.gate2), f1);
    Val f2 = t.dense(f2_in, t.param(layer.w_f2), t.param(layer.b_f2), &mask.hidden);

    if (ctx.mode == DropoutMode::Train && ctx.dropout_rate > 0) {
        if (!ctx.dropout_rng) throw UsageError("train-mode forward needs a dropout rng");
        f2 = t.dropout(f2, ctx.dropout_rate, DropoutMode::Train, *ctx.dropout_rng);
    }
    Val out = t.layer_norm(t.add(s, f2), t.param(layer.ln_out_gain), t.param(layer.ln_out_bias),
                           kLayerNormEps, mask.is_identity() ? nullptr : &mask.hidden);
    return t.mul_mask_rows(out, ctx.row_mask);
}

// logits[b, v] = <Y[b, last real position], item embedding of v>, items
// 1..vocab (padding never scored). Weight-tied to the input embedding.
inline Val score_items(Tape& tape, Val y, const SequenceBatch& batch, EmbeddingParams& emb) {
    std::vector<int> pos(static_cast<size_t>(batch.batch));
    for (int b = 0; b < batch.batch; ++b) pos[static_cast<size_t>(b)] = batch.last_position(b);
    Val last = tape.rows_at(y, pos);
    return tape.score_items(last, tape.param(emb.item_table));
}

// Mean full-softmax cross entropy over the item vocabulary. Targets are item
// ids; the padding id is rejected.
inline Val ce_loss(Tape& tape, Val logits, const std::vector<int>& target_ids) {
    std::vector<int> zero_based;
    zero_based.reserve(target_ids.size());
    for (int id : target_ids) {
        if (id <= 0) throw UsageError("cross-entropy target is the padding id");
        zero_based.push_back(id - 1);
    }
    return tape.cross_entropy_mean(logits, zero_based);
}

}  // namespace slimrec
