#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "slimrec/model.hpp"
#include "test_util.hpp"

using namespace slimrec;
using testutil::max_grad_rel_error;
using testutil::randt;
using testutil::toy_batch;

namespace {

// --- independent scalar re-implementations used as oracles -----------------

double o_elu(double x) { return x > 0 ? x : std::exp(x) - 1; }
double o_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double o_gelu(double x) {
    double u = std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

using Mat = std::vector<std::vector<double>>;

Mat o_matmul(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0));
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t k = 0; k < b.size(); ++k)
            for (size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
    return c;
}

// Direct evaluation of the attention expression in the quadratic order:
// (A1 A2^T) V with A1 = row-normalized elu(Q), A2 = column-normalized elu(K).
Mat o_linear_attention_quadratic(const Mat& q, const Mat& k, const Mat& v, int dim_scale) {
    size_t n = q.size(), d = q[0].size();
    Mat a1(n, std::vector<double>(d, 0)), a2(n, std::vector<double>(d, 0));
    for (size_t r = 0; r < n; ++r) {
        double norm = 0;
        for (size_t c = 0; c < d; ++c) norm += o_elu(q[r][c]) * o_elu(q[r][c]);
        norm = std::sqrt(norm);
        for (size_t c = 0; c < d; ++c)
            a1[r][c] = norm > 0 ? o_elu(q[r][c]) / (std::sqrt(double(dim_scale)) * norm) : 0;
    }
    for (size_t c = 0; c < d; ++c) {
        double norm = 0;
        for (size_t r = 0; r < n; ++r) norm += o_elu(k[r][c]) * o_elu(k[r][c]);
        norm = std::sqrt(norm);
        for (size_t r = 0; r < n; ++r)
            a2[r][c] = norm > 0 ? o_elu(k[r][c]) / (std::sqrt(double(dim_scale)) * norm) : 0;
    }
    // scores = A1 * A2^T (n x n), then scores * V
    Mat scores(n, std::vector<double>(n, 0));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            for (size_t c = 0; c < d; ++c) scores[i][j] += a1[i][c] * a2[j][c];
    return o_matmul(scores, v);
}

Mat to_mat(const Tensor& t, int sample) {
    Mat m(static_cast<size_t>(t.dim(1)), std::vector<double>(static_cast<size_t>(t.dim(2))));
    for (int r = 0; r < t.dim(1); ++r)
        for (int c = 0; c < t.dim(2); ++c) m[static_cast<size_t>(r)][static_cast<size_t>(c)] = t.at3(sample, r, c);
    return m;
}

}  // namespace

TEST_CASE("mask construction") {
    SECTION("quarter and half pruning at d=128") {
        for (auto [g, zeros] : std::vector<std::pair<double, int>>{{0.0, 0}, {0.25, 32}, {0.5, 64}}) {
            MaskSpec m = make_mask(g, 0, 128, 256, 4);
            int count = 0;
            for (real v : m.hidden)
                if (v == 0) ++count;
            REQUIRE(count == zeros);
            REQUIRE(m.d_eff == 128 - zeros);
        }
    }
    SECTION("gamma_prime 0.75 at D=256 gives 192 trailing zeros") {
        MaskSpec m = make_mask(0, 0.75, 128, 256, 4);
        REQUIRE(m.D_eff == 64);
        for (int j = 0; j < 64; ++j) REQUIRE(m.inner[static_cast<size_t>(j)] == 1.0);
        for (int j = 64; j < 256; ++j) REQUIRE(m.inner[static_cast<size_t>(j)] == 0.0);
    }
    SECTION("per-head trailing zeros: gamma=0.5, d=8, n=2 masks channels 3,4 of each head slice") {
        MaskSpec m = make_mask(0.5, 0, 8, 16, 2);
        std::vector<real> expect{1, 1, 0, 0, 1, 1, 0, 0};
        REQUIRE(m.hidden == expect);
        REQUIRE(m.hidden_keep == std::vector<int>{0, 1, 4, 5});
    }
    SECTION("non-uniform zero counts adjust down with a warning") {
        std::string warn;
        MaskSpec m = make_mask(0.3, 0, 8, 16, 4);  // round(2.4)=2 zeros, not divisible by 4
        make_mask(0.3, 0, 8, 16, 4, &warn);
        REQUIRE(m.d_eff == 8);  // adjusted to 0 zeros
        REQUIRE_FALSE(warn.empty());
    }
    SECTION("identity mask for gamma 0") {
        MaskSpec m = make_mask(0, 0, 8, 16, 2);
        REQUIRE(m.is_identity());
    }
}

TEST_CASE("embedding lookup") {
    Rng rng(3);
    EmbeddingParams emb;
    emb.init(5, 4, 3, rng);
    SECTION("row 0 of the item table is zero") {
        for (int j = 0; j < 3; ++j) REQUIRE(emb.item_table.value.at2(0, j) == 0.0);
    }
    SequenceBatch batch = toy_batch({{1, 2}, {2, 2}}, {3, 3}, 4);
    Tape tape;
    Val e = embed(tape, batch, emb);
    const Tensor& ev = tape.value(e);
    SECTION("padded cells are exactly zero") {
        for (int t = 0; t < 2; ++t)
            for (int j = 0; j < 3; ++j) REQUIRE(ev.at3(0, t, j) == 0.0);
    }
    SECTION("real cells are the hand sum of the two table rows") {
        for (int j = 0; j < 3; ++j)
            REQUIRE(ev.at3(0, 2, j) == emb.item_table.value.at2(1, j) + emb.pos_table.value.at2(2, j));
    }
    SECTION("zero positional table makes equal item sequences identical") {
        EmbeddingParams emb2;
        emb2.init(5, 4, 3, rng);
        emb2.pos_table.value = Tensor::zeros({4, 3});
        SequenceBatch b2 = toy_batch({{1, 2, 2}, {0, 1, 2}}, {3, 3}, 4);
        // user 0: items at positions 1,2,3; user 1 (shorter) at 2,3 -- craft equal windows instead
        SequenceBatch b3 = toy_batch({{1, 2}, {1, 2}}, {3, 3}, 4);
        Tape t2;
        const Tensor& e3 = t2.value(embed(t2, b3, emb2));
        for (int t = 0; t < 4; ++t)
            for (int j = 0; j < 3; ++j) REQUIRE(e3.at3(0, t, j) == e3.at3(1, t, j));
        (void)b2;
    }
    SECTION("out-of-range ids rejected") {
        SequenceBatch bad = toy_batch({{9}}, {1}, 2);
        Tape t3;
        REQUIRE_THROWS_AS(embed(t3, bad, emb), UsageError);
    }
}

TEST_CASE("linear attention equals the brute-force direct evaluation") {
    Rng rng(13);
    SECTION("random N=4 d=2 case") {
        Tensor q = randt({1, 4, 2}, rng), k = randt({1, 4, 2}, rng), v = randt({1, 4, 2}, rng);
        Tape t;
        const Tensor& got = t.value(linear_attention(t, t.leaf(q), t.leaf(k), t.leaf(v), 2));
        Mat want = o_linear_attention_quadratic(to_mat(q, 0), to_mat(k, 0), to_mat(v, 0), 2);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 2; ++c)
                REQUIRE_THAT(got.at3(0, r, c),
                             Catch::Matchers::WithinAbs(want[static_cast<size_t>(r)][static_cast<size_t>(c)], 1e-12));
    }
    SECTION("both association orders agree within 1e-6 relative at N=32 d=8") {
        for (int rep = 0; rep < 5; ++rep) {
            Tensor q = randt({1, 32, 8}, rng), k = randt({1, 32, 8}, rng), v = randt({1, 32, 8}, rng);
            Tape t;
            const Tensor& fast = t.value(linear_attention(t, t.leaf(q), t.leaf(k), t.leaf(v), 8));
            Mat slow = o_linear_attention_quadratic(to_mat(q, 0), to_mat(k, 0), to_mat(v, 0), 8);
            for (int r = 0; r < 32; ++r)
                for (int c = 0; c < 8; ++c) {
                    double a = fast.at3(0, r, c), b = slow[static_cast<size_t>(r)][static_cast<size_t>(c)];
                    REQUIRE(std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}) < 1e-6);
                }
        }
    }
    SECTION("zero values give zero output") {
        Tensor q = randt({1, 3, 2}, rng), k = randt({1, 3, 2}, rng);
        Tape t;
        const Tensor& got = t.value(linear_attention(t, t.leaf(q), t.leaf(k), t.leaf(Tensor::zeros({1, 3, 2})), 2));
        for (size_t i = 0; i < got.numel(); ++i) REQUIRE(got[i] == 0.0);
    }
}

namespace {

// One candidate block with deterministic parameters for oracle comparisons.
struct BlockFixture {
    EmbeddingParams emb;
    CandidateParams cand;
    SequenceBatch batch;

    BlockFixture(double gamma, double gamma_prime, int d, int D, int heads, int gate_depth, uint64_t seed,
                 int vocab = 6, int n = 4) {
        Rng rng(seed);
        emb.init(vocab, n, d, rng);
        cand.init("c", make_mask(gamma, gamma_prime, d, D, heads), 1, d, D, gate_depth, rng);
        batch = toy_batch({{1, 2, 3}, {4, 5}}, {2, 1}, n);
    }

    Tensor run(DropoutMode mode = DropoutMode::Eval, Rng* drop = nullptr, real rate = 0) {
        Tape tape;
        ForwardCtx ctx = make_forward_ctx(tape, batch, emb, rate, mode, drop);
        Val t1 = candidate_forward(ctx, ctx.E, cand, 0);
        return tape.value(t1);
    }
};

}  // namespace

TEST_CASE("gate forward") {
    Rng rng(19);
    EmbeddingParams emb;
    emb.init(6, 4, 4, rng);
    SequenceBatch batch = toy_batch({{1, 2, 3}}, {2}, 4);

    SECTION("zero-initialized final layer gives the neutral gate delta == 1") {
        GateParams gate;
        gate.init("g", 4, 6, 2, rng);
        Tape tape;
        ForwardCtx ctx = make_forward_ctx(tape, batch, emb, 0, DropoutMode::Eval, nullptr);
        const Tensor& delta = tape.value(gate_forward(ctx, gate));
        for (size_t i = 0; i < delta.numel(); ++i) REQUIRE(delta[i] == 1.0);
    }
    SECTION("delta entries stay strictly inside (0, 2)") {
        for (int depth = 1; depth <= 4; ++depth) {
            GateParams gate;
            gate.init("g", 4, 5, depth, rng);
            for (auto& w : gate.weights) w.value = randt(w.value.shape(), rng, -3, 3);
            for (auto& b : gate.biases) b.value = randt(b.value.shape(), rng, -3, 3);
            Tape tape;
            ForwardCtx ctx = make_forward_ctx(tape, batch, emb, 0, DropoutMode::Eval, nullptr);
            const Tensor& delta = tape.value(gate_forward(ctx, gate));
            for (size_t i = 0; i < delta.numel(); ++i) {
                REQUIRE(delta[i] > 0.0);
                REQUIRE(delta[i] < 2.0);
            }
        }
    }
    SECTION("1x1 two-layer gate matches the closed formula") {
        GateParams gate;
        gate.init("g", 4, 1, 2, rng);
        gate.weights[0].value = Tensor::full({4, 4}, real(0.1));
        gate.biases[0].value = Tensor::full({4}, real(0.2));
        gate.weights[1].value = Tensor::full({4, 1}, real(0.3));
        gate.biases[1].value = Tensor::full({1}, real(-0.1));
        Tape tape;
        ForwardCtx ctx = make_forward_ctx(tape, batch, emb, 0, DropoutMode::Eval, nullptr);
        const Tensor& delta = tape.value(gate_forward(ctx, gate));
        const Tensor& e = tape.value(ctx.E);
        // position 3 (last real item) by hand
        double xw[4];
        for (int c = 0; c < 4; ++c) {
            xw[c] = 0.2;
            for (int k = 0; k < 4; ++k) xw[c] += e.at3(0, 3, k) * 0.1;
            xw[c] = std::max(0.0, xw[c]);
        }
        double z = -0.1;
        for (int c = 0; c < 4; ++c) z += xw[c] * 0.3;
        REQUIRE_THAT(delta.at3(0, 3, 0), Catch::Matchers::WithinAbs(2.0 * o_sigmoid(z), 1e-12));
    }
}

TEST_CASE("candidate block matches a step-by-step hand evaluation at N=2 d=2 D=2") {
    const int d = 2, D = 2;
    Rng rng(101);
    EmbeddingParams emb;
    emb.init(3, 2, d, rng);
    CandidateParams cand;
    cand.init("c", make_mask(0, 0, d, D, 1), 1, d, D, 2, rng);
    // give the zero-initialized gate finals some signal
    cand.layers[0].gate1.weights[1].value = randt({d, d}, rng);
    cand.layers[0].gate1.biases[1].value = randt({d}, rng);
    cand.layers[0].gate2.weights[1].value = randt({d, D}, rng);
    cand.layers[0].gate2.biases[1].value = randt({D}, rng);
    SequenceBatch batch = toy_batch({{1, 2}}, {1}, 2);

    Tape tape;
    ForwardCtx ctx = make_forward_ctx(tape, batch, emb, 0, DropoutMode::Eval, nullptr);
    const Tensor& got = tape.value(candidate_forward(ctx, ctx.E, cand, 0));

    // ---- oracle, plain double arithmetic --------------------------------
    auto m_of = [&](const Parameter& p) {
        Mat m(static_cast<size_t>(p.value.dim(0)), std::vector<double>(static_cast<size_t>(p.value.dim(1))));
        for (int r = 0; r < p.value.dim(0); ++r)
            for (int c = 0; c < p.value.dim(1); ++c) m[static_cast<size_t>(r)][static_cast<size_t>(c)] = p.value.at2(r, c);
        return m;
    };
    Mat e(2, std::vector<double>(2));
    for (int t = 0; t < 2; ++t)
        for (int j = 0; j < 2; ++j)
            e[static_cast<size_t>(t)][static_cast<size_t>(j)] =
                emb.item_table.value.at2(batch.items[static_cast<size_t>(t)], j) + emb.pos_table.value.at2(t, j);

    const LayerParams& L0 = cand.layers[0];
    Mat q = o_matmul(e, m_of(L0.wq)), k = o_matmul(e, m_of(L0.wk)), v = o_matmul(e, m_of(L0.wv));
    Mat att = o_linear_attention_quadratic(q, k, v, 2);
    Mat out = o_matmul(att, m_of(L0.wo));
    auto layer_norm_rows = [&](const Mat& x, const Parameter& gain, const Parameter& bias) {
        Mat y = x;
        for (auto& row : y) {
            double mean = (row[0] + row[1]) / 2;
            double var = ((row[0] - mean) * (row[0] - mean) + (row[1] - mean) * (row[1] - mean)) / 2;
            double inv = 1.0 / std::sqrt(var + 1e-8);
            for (size_t c = 0; c < 2; ++c)
                row[c] = static_cast<double>(gain.value[c]) * (row[c] - mean) * inv + static_cast<double>(bias.value[c]);
        }
        return y;
    };
    Mat s(2, std::vector<double>(2));
    for (size_t r = 0; r < 2; ++r)
        for (size_t c = 0; c < 2; ++c) s[r][c] = e[r][c] + out[r][c];
    s = layer_norm_rows(s, L0.ln_attn_gain, L0.ln_attn_bias);

    auto gate_delta = [&](const GateParams& g) {
        Mat h = e;
        Mat w1 = m_of(g.weights[0]);
        Mat z1 = o_matmul(h, w1);
        for (size_t r = 0; r < 2; ++r)
            for (size_t c = 0; c < z1[0].size(); ++c)
                z1[r][c] = std::max(0.0, z1[r][c] + static_cast<double>(g.biases[0].value[c]));
        Mat z2 = o_matmul(z1, m_of(g.weights[1]));
        for (size_t r = 0; r < 2; ++r)
            for (size_t c = 0; c < z2[0].size(); ++c)
                z2[r][c] = 2.0 * o_sigmoid(z2[r][c] + static_cast<double>(g.biases[1].value[c]));
        return z2;
    };
    Mat d1 = gate_delta(L0.gate1), d2 = gate_delta(L0.gate2);
    Mat f1_in(2, std::vector<double>(2));
    for (size_t r = 0; r < 2; ++r)
        for (size_t c = 0; c < 2; ++c) f1_in[r][c] = d1[r][c] * s[r][c];
    Mat f1 = o_matmul(f1_in, m_of(L0.w_f1));
    for (size_t r = 0; r < 2; ++r)
        for (size_t c = 0; c < 2; ++c) f1[r][c] = o_gelu(f1[r][c] + static_cast<double>(L0.b_f1.value[c]));
    Mat f2_in(2, std::vector<double>(2));
    for (size_t r = 0; r < 2; ++r)
        for (size_t c = 0; c < 2; ++c) f2_in[r][c] = d2[r][c] * f1[r][c];
    Mat f2 = o_matmul(f2_in, m_of(L0.w_f2));
    for (size_t r = 0; r < 2; ++r)
        for (size_t c = 0; c < 2; ++c) f2[r][c] += static_cast<double>(L0.b_f2.value[c]);
    Mat tout(2, std::vector<double>(2));
    for (size_t r = 0; r < 2; ++r)
        for (size_t c = 0; c < 2; ++c) tout[r][c] = s[r][c] + f2[r][c];
    tout = layer_norm_rows(tout, L0.ln_out_gain, L0.ln_out_bias);

    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c)
            REQUIRE_THAT(got.at3(0, r, c),
                         Catch::Matchers::WithinAbs(tout[static_cast<size_t>(r)][static_cast<size_t>(c)], 1e-9));
}

TEST_CASE("mask semantics in the candidate block") {
    SECTION("masked channels are exactly zero and get zero weight gradients") {
        BlockFixture fx(0.5, 0.5, 8, 8, 2, 2, 7);
        Tape tape;
        ForwardCtx ctx = make_forward_ctx(tape, fx.batch, fx.emb, 0, DropoutMode::Eval, nullptr);
        Val t1 = candidate_forward(ctx, ctx.E, fx.cand, 0);
        const Tensor& y = tape.value(t1);
        const MaskSpec& m = fx.cand.mask;
        for (int b = 0; b < 2; ++b)
            for (int t = 0; t < 4; ++t)
                for (int c = 0; c < 8; ++c)
                    if (m.hidden[static_cast<size_t>(c)] == 0.0) REQUIRE(y.at3(b, t, c) == 0.0);
        Val loss = tape.sum_all(t1);
        tape.backward(loss);
        // W_O columns into masked channels receive exactly zero gradient.
        Tensor gwo = tape.grad(fx.cand.layers[0].wo);
        for (int r = 0; r < 8; ++r)
            for (int c = 0; c < 8; ++c)
                if (m.hidden[static_cast<size_t>(c)] == 0.0) REQUIRE(gwo.at2(r, c) == 0.0);
        // W_F1 columns into masked inner channels likewise.
        Tensor gwf1 = tape.grad(fx.cand.layers[0].w_f1);
        for (int r = 0; r < 8; ++r)
            for (int c = m.D_eff; c < 8; ++c) REQUIRE(gwf1.at2(r, c) == 0.0);
    }
    SECTION("gamma 0 candidate is bit-identical to the unmasked computation") {
        BlockFixture fx(0, 0, 4, 8, 2, 2, 11);
        Tensor masked = fx.run();
        // identical parameters, mask arithmetic forced through the identity path
        REQUIRE(fx.cand.mask.is_identity());
        Tensor again = fx.run();
        REQUIRE(bit_equal(masked, again));
    }
    SECTION("mask idempotence: applying a mask twice equals once") {
        Rng rng(5);
        Tensor x = randt({2, 6}, rng);
        std::vector<real> mask{1, 0, 1, 1, 0, 0};
        Tape t;
        Val once = t.mul_mask_lastdim(t.leaf(x), mask);
        Val twice = t.mul_mask_lastdim(once, mask);
        REQUIRE(bit_equal(t.value(once), t.value(twice)));
    }
}

TEST_CASE("neutral gates with identity masks reduce to a plain block") {
    // delta == 1 (zero-initialized finals) and gamma = gamma' = 0: the gated
    // masked block must equal the same block with gates absent.
    BlockFixture with_gates(0, 0, 4, 8, 2, 2, 23);
    BlockFixture no_gates(0, 0, 4, 8, 2, 0, 23);
    // same non-gate parameters (same init stream order up to gates): copy them
    no_gates.emb.item_table.value = with_gates.emb.item_table.value;
    no_gates.emb.pos_table.value = with_gates.emb.pos_table.value;
    for (auto dst_src : {std::pair{&no_gates.cand.layers[0], &with_gates.cand.layers[0]}}) {
        LayerParams* dst = dst_src.first;
        const LayerParams* src = dst_src.second;
        dst->wq.value = src->wq.value;
        dst->wk.value = src->wk.value;
        dst->wv.value = src->wv.value;
        dst->wo.value = src->wo.value;
        dst->w_f1.value = src->w_f1.value;
        dst->b_f1.value = src->b_f1.value;
        dst->w_f2.value = src->w_f2.value;
        dst->b_f2.value = src->b_f2.value;
    }
    REQUIRE(bit_equal(with_gates.run(), no_gates.run()));
}

TEST_CASE("delta == 0 gate annihilates the FFN input signal") {
    BlockFixture fx(0, 0, 4, 4, 1, 2, 31);
    // force gate1 to emit ~0 via a huge negative bias
    fx.cand.layers[0].gate1.biases[1].value = Tensor::full({4}, real(-60));
    Tape tape;
    ForwardCtx ctx = make_forward_ctx(tape, fx.batch, fx.emb, 0, DropoutMode::Eval, nullptr);
    Val s = multi_head_forward(ctx, ctx.E, fx.cand.layers[0], fx.cand.mask);
    Val delta = gate_forward(ctx, fx.cand.layers[0].gate1);
    Val f1_in = tape.mul(delta, s);
    Val f1 = tape.gelu(tape.add_rowvec(tape.matmul(f1_in, tape.param(fx.cand.layers[0].w_f1)),
                                       tape.param(fx.cand.layers[0].b_f1)));
    const Tensor& f1v = tape.value(f1);
    const Tensor& bv = fx.cand.layers[0].b_f1.value;
    // with delta ~ 0 the dense layer sees only its bias
    for (int b = 0; b < 2; ++b)
        for (int t = 0; t < 4; ++t)
            for (int c = 0; c < 4; ++c)
                if (ctx.row_mask[static_cast<size_t>(b * 4 + t)] != 0)
                    REQUIRE_THAT(f1v.at3(b, t, c),
                                 Catch::Matchers::WithinAbs(o_gelu(static_cast<double>(bv[static_cast<size_t>(c)])), 1e-8));
}

TEST_CASE("padding inertness: garbage at padded positions never reaches a logit") {
    Rng rng(37);
    EmbeddingParams emb;
    emb.init(8, 5, 4, rng);
    CandidateParams cand;
    cand.init("c", make_mask(0.5, 0.5, 4, 8, 2), 2, 4, 8, 2, rng);
    SequenceBatch batch = toy_batch({{3, 4, 5}, {6, 7}}, {1, 2}, 5);

    auto run_with_noise = [&](bool inject) {
        Tape tape;
        ForwardCtx ctx{tape, batch, padding_row_mask(batch), Val{}, batch.batch, batch.seq_len,
                       0, DropoutMode::Eval, nullptr};
        Val e = embed(tape, batch, emb);
        if (inject) {
            Tensor noise = Tensor::zeros({batch.batch, batch.seq_len, 4});
            Rng nrng(77);
            for (int b = 0; b < batch.batch; ++b)
                for (int t = 0; t < batch.seq_len; ++t)
                    if (batch.items[static_cast<size_t>(b * batch.seq_len + t)] == 0)
                        for (int j = 0; j < 4; ++j) noise.at3(b, t, j) = static_cast<real>(nrng.uniform(-5, 5));
            e = tape.add(e, tape.leaf(std::move(noise)));
        }
        ctx.E = tape.mul_mask_rows(e, ctx.row_mask);
        Val h = ctx.E;
        for (int l = 0; l < 2; ++l) h = candidate_forward(ctx, h, cand, l);
        return tape.value(score_items(tape, h, batch, emb));
    };
    Tensor clean = run_with_noise(false);
    Tensor dirty = run_with_noise(true);
    REQUIRE(bit_equal(clean, dirty));
}

TEST_CASE("score_items") {
    Rng rng(43);
    EmbeddingParams emb;
    emb.init(5, 3, 4, rng);
    // orthogonal-ish table: one-hot rows
    emb.item_table.value = Tensor::zeros({6, 4});
    for (int v = 1; v <= 5; ++v) emb.item_table.value.at2(v, (v - 1) % 4) = static_cast<real>(v);

    SECTION("row equal to an item's embedding ranks that item first") {
        Tape tape;
        Tensor y({1, 3, 4});
        for (int j = 0; j < 4; ++j) y.at3(0, 2, j) = emb.item_table.value.at2(3, j);
        SequenceBatch b = toy_batch({{1, 1, 1}}, {3}, 3);
        const Tensor& logits = tape.value(score_items(tape, tape.leaf(y), b, emb));
        int best = 0;
        for (int v = 1; v < 5; ++v)
            if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(best)]) best = v;
        REQUIRE(best + 1 == 3);
    }
    SECTION("zero row gives all-zero logits") {
        Tape tape;
        SequenceBatch b = toy_batch({{1}}, {2}, 2);
        const Tensor& logits = tape.value(score_items(tape, tape.leaf(Tensor::zeros({1, 2, 4})), b, emb));
        for (size_t i = 0; i < logits.numel(); ++i) REQUIRE(logits[i] == 0.0);
    }
    SECTION("matches an explicit loop over a 5-item table") {
        Rng r2(47);
        Tensor y = randt({2, 2, 4}, r2);
        SequenceBatch b = toy_batch({{1, 2}, {3, 4}}, {5, 1}, 2);
        Tape tape;
        const Tensor& logits = tape.value(score_items(tape, tape.leaf(y), b, emb));
        for (int row = 0; row < 2; ++row)
            for (int v = 1; v <= 5; ++v) {
                double want = 0;
                for (int j = 0; j < 4; ++j) want += y.at3(row, 1, j) * emb.item_table.value.at2(v, j);
                REQUIRE_THAT(logits.at2(row, v - 1), Catch::Matchers::WithinAbs(want, 1e-12));
            }
    }
}

TEST_CASE("cross-entropy loss") {
    SECTION("uniform logits over 100 items -> ln 100") {
        Tape tape;
        Val logits = tape.leaf(Tensor::zeros({1, 100}));
        Val loss = ce_loss(tape, logits, {37});
        REQUIRE_THAT(tape.value(loss).item(), Catch::Matchers::WithinAbs(std::log(100.0), 1e-12));
    }
    SECTION("dominant correct logit drives the loss to zero") {
        Tape tape;
        Tensor z = Tensor::zeros({1, 4});
        z[2] = 60;
        Val loss = ce_loss(tape, tape.leaf(z), {3});
        REQUIRE(tape.value(loss).item() < 1e-12);
        REQUIRE(tape.value(loss).item() >= 0.0);
    }
    SECTION("random 4-item case matches the direct formula") {
        Rng rng(51);
        Tensor z = randt({1, 4}, rng, -2, 2);
        Tape tape;
        Val loss = ce_loss(tape, tape.leaf(z), {2});
        double denom = 0;
        for (int i = 0; i < 4; ++i) denom += std::exp(z[static_cast<size_t>(i)]);
        double want = -std::log(std::exp(z[1]) / denom);
        REQUIRE_THAT(tape.value(loss).item(), Catch::Matchers::WithinRel(want, 1e-12));
    }
    SECTION("padding target is an error") {
        Tape tape;
        Val logits = tape.leaf(Tensor::zeros({1, 4}));
        REQUIRE_THROWS_AS(ce_loss(tape, logits, {0}), UsageError);
    }
}

TEST_CASE("full block gradient check: candidate_forward + ce_loss") {
    Rng rng(61);
    EmbeddingParams emb;
    emb.init(6, 3, 4, rng);
    CandidateParams cand;
    cand.init("c", make_mask(0.5, 0.5, 4, 4, 2), 1, 4, 4, 2, rng);
    // non-neutral gates so their gradients are exercised
    cand.layers[0].gate1.weights[1].value = randt({4, 4}, rng, real(-0.5), real(0.5));
    cand.layers[0].gate2.weights[1].value = randt({4, 4}, rng, real(-0.5), real(0.5));
    SequenceBatch batch = toy_batch({{1, 2, 3}, {4, 5}}, {2, 1}, 3);

    std::vector<Parameter*> params{&emb.item_table, &emb.pos_table};
    cand.collect(params);

    auto loss = [&](Tape& tape) {
        ForwardCtx ctx = make_forward_ctx(tape, batch, emb, 0, DropoutMode::Eval, nullptr);
        Val y = candidate_forward(ctx, ctx.E, cand, 0);
        return ce_loss(tape, score_items(tape, y, batch, emb), batch.targets);
    };
    REQUIRE(max_grad_rel_error(params, loss) < 1e-4);
}
