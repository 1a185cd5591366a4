#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "slimrec/tape.hpp"
#include "slimrec/tensor.hpp"
#include "test_util.hpp"

using namespace slimrec;
using testutil::max_grad_rel_error;
using testutil::randt;

namespace {
constexpr double kTol = 1e-5;
}

TEST_CASE("finite differences confirm every primitive backward") {
    Rng rng(17);

    SECTION("matmul") {
        Parameter a("a", randt({3, 4}, rng));
        Parameter b("b", randt({4, 2}, rng));
        auto loss = [&](Tape& t) { return t.sum_all(t.matmul(t.param(a), t.param(b))); };
        REQUIRE(max_grad_rel_error({&a, &b}, loss) < kTol);
    }
    SECTION("matmul with batched left operand and transposed right") {
        Parameter a("a", randt({2, 3, 4}, rng));
        Parameter b("b", randt({5, 4}, rng));
        auto loss = [&](Tape& t) { return t.sum_all(t.elu(t.matmul(t.param(a), t.param(b), true))); };
        REQUIRE(max_grad_rel_error({&a, &b}, loss) < kTol);
    }
    SECTION("bmm both orientations") {
        Parameter a("a", randt({2, 3, 4}, rng));
        Parameter b("b", randt({2, 3, 5}, rng));
        auto loss = [&](Tape& t) { return t.sum_all(t.bmm(t.param(a), t.param(b), /*trans_a=*/true)); };
        REQUIRE(max_grad_rel_error({&a, &b}, loss) < kTol);
        Parameter c("c", randt({2, 4, 5}, rng));
        auto loss2 = [&](Tape& t) { return t.sum_all(t.sigmoid(t.bmm(t.param(a), t.param(c), false))); };
        REQUIRE(max_grad_rel_error({&a, &c}, loss2) < kTol);
    }
    SECTION("add, sub, mul, scale") {
        Parameter a("a", randt({2, 3}, rng));
        Parameter b("b", randt({2, 3}, rng));
        auto loss = [&](Tape& t) {
            Val s = t.add(t.param(a), t.param(b));
            Val d = t.sub(s, t.mul(t.param(a), t.param(b)));
            return t.sum_all(t.scale_const(d, real(0.7)));
        };
        REQUIRE(max_grad_rel_error({&a, &b}, loss) < kTol);
    }
    SECTION("scale_by_scalar routes gradient to both sides") {
        Parameter a("a", randt({2, 3}, rng));
        Parameter s("s", Tensor::scalar(real(0.4)));
        auto loss = [&](Tape& t) { return t.sum_all(t.mul(t.scale_by_scalar(t.param(a), t.param(s)), t.param(a))); };
        REQUIRE(max_grad_rel_error({&a, &s}, loss) < kTol);
    }
    SECTION("rowvec broadcast ops") {
        Parameter x("x", randt({3, 4}, rng));
        Parameter v("v", randt({4}, rng));
        auto loss = [&](Tape& t) { return t.sum_all(t.gelu(t.add_rowvec(t.mul_rowvec(t.param(x), t.param(v)), t.param(v)))); };
        REQUIRE(max_grad_rel_error({&x, &v}, loss) < kTol);
    }
    SECTION("activations") {
        Parameter x("x", randt({3, 5}, rng, -2, 2));
        for (auto kind : {0, 1, 2, 3}) {
            auto loss = [&, kind](Tape& t) {
                Val v = t.param(x);
                switch (kind) {
                    case 0: v = t.elu(v); break;
                    case 1: v = t.relu(v); break;
                    case 2: v = t.gelu(v); break;
                    default: v = t.sigmoid(v); break;
                }
                return t.sum_all(t.mul(v, v));
            };
            REQUIRE(max_grad_rel_error({&x}, loss) < kTol);
        }
    }
    SECTION("l2 normalize rows and cols") {
        Parameter x("x", randt({2, 3, 4}, rng, real(0.5), real(2)));
        auto loss_rows = [&](Tape& t) { return t.sum_all(t.mul(t.l2_normalize(t.param(x), Axis::Rows, 4), t.param(x))); };
        REQUIRE(max_grad_rel_error({&x}, loss_rows) < kTol);
        auto loss_cols = [&](Tape& t) { return t.sum_all(t.mul(t.l2_normalize(t.param(x), Axis::Cols, 3), t.param(x))); };
        REQUIRE(max_grad_rel_error({&x}, loss_cols) < kTol);
    }
    SECTION("layer norm with and without keep mask") {
        Parameter x("x", randt({4, 6}, rng, -2, 2));
        Parameter g("g", randt({6}, rng, real(0.5), real(1.5)));
        Parameter b("b", randt({6}, rng));
        auto loss = [&](Tape& t) {
            return t.sum_all(t.mul(t.layer_norm(t.param(x), t.param(g), t.param(b), real(1e-6)), t.param(x)));
        };
        REQUIRE(max_grad_rel_error({&x, &g, &b}, loss) < kTol);
        std::vector<real> keep{1, 1, 0, 1, 0, 1};
        auto loss_masked = [&](Tape& t) {
            return t.sum_all(t.mul(t.layer_norm(t.param(x), t.param(g), t.param(b), real(1e-6), &keep), t.param(x)));
        };
        REQUIRE(max_grad_rel_error({&x, &g, &b}, loss_masked) < kTol);
    }
    SECTION("softmax") {
        Parameter x("x", randt({3, 5}, rng, -2, 2));
        Parameter w("w", randt({3, 5}, rng));
        auto loss = [&](Tape& t) { return t.sum_all(t.mul(t.softmax_lastdim(t.param(x)), t.param(w))); };
        REQUIRE(max_grad_rel_error({&x, &w}, loss) < kTol);
    }
    SECTION("cross entropy") {
        Parameter x("x", randt({4, 6}, rng, -2, 2));
        std::vector<int> targets{0, 3, 5, 1};
        auto loss = [&](Tape& t) { return t.cross_entropy_mean(t.param(x), targets); };
        REQUIRE(max_grad_rel_error({&x}, loss) < kTol);
    }
    SECTION("dropout backward uses the saved mask") {
        Parameter x("x", randt({8, 8}, rng));
        auto loss = [&](Tape& t) {
            Rng drop(123);  // fixed: the same mask on every evaluation
            return t.sum_all(t.mul(t.dropout(t.param(x), real(0.3), DropoutMode::Train, drop), t.param(x)));
        };
        REQUIRE(max_grad_rel_error({&x}, loss) < kTol);
    }
    SECTION("embedding gather") {
        Parameter items("items", randt({6, 3}, rng));
        for (int j = 0; j < 3; ++j) items.value[static_cast<size_t>(j)] = 0;  // frozen padding row
        Parameter pos("pos", randt({4, 3}, rng));
        std::vector<int> ids{1, 2, 0, 3, 5, 5, 0, 0};  // B=2, N=4, with padding
        auto loss = [&](Tape& t) {
            Val e = t.embed_sequences(t.param(items), t.param(pos), ids, 2, 4);
            return t.sum_all(t.mul(e, e));
        };
        REQUIRE(max_grad_rel_error({&items, &pos}, loss) < kTol);
    }
    SECTION("rows_at, score_items, pick, gather, scatter, slice, concat") {
        Parameter y("y", randt({2, 3, 4}, rng));
        Parameter table("table", randt({5, 4}, rng));
        std::vector<int> pos{2, 1};
        std::vector<int> idx{0, 2};
        auto loss = [&](Tape& t) {
            Val last = t.rows_at(t.param(y), pos);
            Val logits = t.score_items(last, t.param(table));
            Val p = t.pick(logits, 1);
            Val g = t.gather_lastdim(t.param(y), idx);
            Val sc = t.scatter_lastdim(g, idx, 4);
            Val sl = t.slice_lastdim(t.param(y), 1, 2);
            Val cc = t.concat_lastdim({sl, sl});
            return t.add(t.add(p, t.sum_all(sc)), t.mean_all(cc));
        };
        REQUIRE(max_grad_rel_error({&y, &table}, loss) < kTol);
    }
    SECTION("fused dense layer with bias and mask") {
        Parameter x("x", randt({2, 3, 4}, rng));
        Parameter w("w", randt({4, 5}, rng));
        Parameter b("b", randt({5}, rng));
        std::vector<real> mask{1, 0, 1, 1, 0};
        auto loss = [&](Tape& t) {
            Val y = t.dense(t.param(x), t.param(w), t.param(b), &mask);
            return t.sum_all(t.mul(y, y));
        };
        REQUIRE(max_grad_rel_error({&x, &w, &b}, loss) < kTol);
        // dense == matmul + bias + mask composed
        Tape t;
        Val fused = t.dense(t.param(x), t.param(w), t.param(b), &mask);
        Val composed = t.mul_mask_lastdim(t.add_rowvec(t.matmul(t.param(x), t.param(w)), t.param(b)), mask);
        REQUIRE(max_rel_diff(t.value(fused), t.value(composed)) < 1e-14);
    }
    SECTION("weighted sum routes gradients to inputs and weights") {
        Parameter a("a", randt({2, 3}, rng));
        Parameter b("b", randt({2, 3}, rng));
        Parameter w("w", Tensor({2}, {real(0.3), real(0.7)}));
        auto loss = [&](Tape& t) {
            Val y = t.weighted_sum({t.param(a), t.param(b)}, t.param(w));
            return t.sum_all(t.mul(y, y));
        };
        REQUIRE(max_grad_rel_error({&a, &b, &w}, loss) < kTol);
    }
    SECTION("masks pass gradient only through kept entries") {
        Parameter x("x", randt({2, 4}, rng));
        std::vector<real> mask{1, 0, 1, 0};
        auto loss = [&](Tape& t) { return t.sum_all(t.mul(t.mul_mask_lastdim(t.param(x), mask), t.param(x))); };
        REQUIRE(max_grad_rel_error({&x}, loss) < kTol);
    }
}

TEST_CASE("loss = sum(W x) gives the exact hand-derived gradient") {
    Rng rng(23);
    Parameter w("w", randt({3, 2}, rng));
    Tensor x = randt({2, 1}, rng);
    Tape t;
    Val loss = t.sum_all(t.matmul(t.param(w), t.leaf(x)));
    t.backward(loss);
    Tensor g = t.grad(w);
    // d/dW sum(Wx) = ones * x^T: every row of the gradient equals x.
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 2; ++c) REQUIRE(g.at2(r, c) == x[static_cast<size_t>(c)]);
}

TEST_CASE("backward visits ops in exact reverse execution order") {
    Tape t;
    Parameter a("a", Tensor::scalar(2));
    Val v1 = t.param(a);          // node 0
    Val v2 = t.scale_const(v1, 3);  // node 1
    Val v3 = t.elu(v2);             // node 2
    Val v4 = t.mul(v3, v2);         // node 3
    Val loss = t.sum_all(v4);       // node 4
    t.backward(loss);
    const auto& order = t.last_backward_order();
    REQUIRE(order.size() >= 4);
    for (size_t i = 1; i < order.size(); ++i) REQUIRE(order[i - 1] > order[i]);
    REQUIRE(order.front() == loss.id);
    (void)v4;
}

TEST_CASE("parameters outside the active subgraph get exactly zero gradient") {
    Rng rng(29);
    Parameter used("used", randt({2, 2}, rng));
    Parameter untouched("untouched", randt({2, 2}, rng));
    Tape t;
    Val loss = t.sum_all(t.param(used));
    t.backward(loss);
    Tensor g = t.grad(untouched);
    for (size_t i = 0; i < g.numel(); ++i) REQUIRE(g[i] == 0.0);
    REQUIRE_FALSE(t.touched(untouched));
}

TEST_CASE("masked-out channels give exactly zero weight gradients") {
    Rng rng(31);
    Parameter w("w", randt({3, 4}, rng));
    Parameter x("x", randt({2, 3}, rng));
    std::vector<real> mask{1, 1, 0, 0};
    Tape t;
    Val y = t.mul_mask_lastdim(t.matmul(t.param(x), t.param(w)), mask);
    Val loss = t.sum_all(t.mul(y, y));
    t.backward(loss);
    Tensor gw = t.grad(w);
    // Columns 2 and 3 of W feed only masked channels.
    for (int r = 0; r < 3; ++r) {
        REQUIRE(gw.at2(r, 2) == 0.0);
        REQUIRE(gw.at2(r, 3) == 0.0);
        REQUIRE(gw.at2(r, 0) != 0.0);
    }
}

TEST_CASE("backward rejects non-scalar or foreign losses") {
    Tape t;
    Val v = t.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
    REQUIRE_THROWS_AS(t.backward(v), UsageError);
    REQUIRE_THROWS_AS(t.backward(Val{}), UsageError);
}

TEST_CASE("identical seeds give bit-identical forwards and gradients") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Parameter w("w", randt({4, 4}, rng));
        Tape t;
        Rng drop(seed + 1);
        Val y = t.dropout(t.gelu(t.matmul(t.param(w), t.param(w))), real(0.2), DropoutMode::Train, drop);
        Val loss = t.sum_all(y);
        t.backward(loss);
        return std::make_pair(t.value(loss).item(), t.grad(w));
    };
    auto [l1, g1] = run(99);
    auto [l2, g2] = run(99);
    REQUIRE(l1 == l2);
    REQUIRE(bit_equal(g1, g2));
}
