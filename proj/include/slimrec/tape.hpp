#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "slimrec/common.hpp"
#include "slimrec/rng.hpp"
#include "slimrec/tensor.hpp"

namespace slimrec {

// ---------------------------------------------------------------------------
// Matrix kernels. Each output element is produced by exactly one thread with
// a sequential inner reduction, so results are bit-identical for any thread
// count.
// ---------------------------------------------------------------------------
namespace kernels {

// Output rows short enough for this stack buffer accumulate in L1 and store
// once; longer rows fall back to read-modify-write in place. Acc selects
// accumulate (+=) versus overwrite semantics.
constexpr size_t kRowBuf = 512;

template <bool Acc>
inline void mm_nn_row(const real* __restrict arow, const real* __restrict B, real* __restrict crow,
                      size_t K, size_t Cc) {
    if (Cc <= kRowBuf) {
        real cbuf[kRowBuf];
        if constexpr (Acc)
            for (size_t j = 0; j < Cc; ++j) cbuf[j] = crow[j];
        else
            for (size_t j = 0; j < Cc; ++j) cbuf[j] = 0;
        for (size_t k = 0; k < K; ++k) {
            const real a = arow[k];
            const real* brow = B + k * Cc;
            for (size_t j = 0; j < Cc; ++j) cbuf[j] += a * brow[j];
        }
        for (size_t j = 0; j < Cc; ++j) crow[j] = cbuf[j];
    } else {
        if constexpr (!Acc)
            for (size_t j = 0; j < Cc; ++j) crow[j] = 0;
        for (size_t k = 0; k < K; ++k) {
            const real a = arow[k];
            const real* brow = B + k * Cc;
            for (size_t j = 0; j < Cc; ++j) crow[j] += a * brow[j];
        }
    }
}

template <bool Acc>
inline void mm_tn_row(const real* __restrict A, size_t i, size_t R, const real* __restrict B,
                      real* __restrict crow, size_t K, size_t Cc) {
    if (Cc <= kRowBuf) {
        real cbuf[kRowBuf];
        if constexpr (Acc)
            for (size_t j = 0; j < Cc; ++j) cbuf[j] = crow[j];
        else
            for (size_t j = 0; j < Cc; ++j) cbuf[j] = 0;
        for (size_t k = 0; k < K; ++k) {
            const real a = A[k * R + i];
            const real* brow = B + k * Cc;
            for (size_t j = 0; j < Cc; ++j) cbuf[j] += a * brow[j];
        }
        for (size_t j = 0; j < Cc; ++j) crow[j] = cbuf[j];
    } else {
        if constexpr (!Acc)
            for (size_t j = 0; j < Cc; ++j) crow[j] = 0;
        for (size_t k = 0; k < K; ++k) {
            const real a = A[k * R + i];
            const real* brow = B + k * Cc;
            for (size_t j = 0; j < Cc; ++j) crow[j] += a * brow[j];
        }
    }
}

template <bool Acc>
inline void mm_nt_row(const real* __restrict arow, const real* __restrict B, real* __restrict crow,
                      size_t K, size_t Cc) {
    for (size_t j = 0; j < Cc; ++j) {
        const real* brow = B + j * K;
        real s = 0;
        for (size_t k = 0; k < K; ++k) s += arow[k] * brow[k];
        if constexpr (Acc)
            crow[j] += s;
        else
            crow[j] = s;
    }
}

// C = A * B (or +=); parallel over output rows, each produced by one thread.
template <bool Acc>
inline void mm_nn(const real* A, const real* B, real* C, size_t R, size_t K, size_t Cc) {
#pragma omp parallel for schedule(static) if (R * K * Cc > 65536)
    for (long long i = 0; i < static_cast<long long>(R); ++i)
        mm_nn_row<Acc>(A + static_cast<size_t>(i) * K, B, C + static_cast<size_t>(i) * Cc, K, Cc);
}

// C = A * B^T (B given as [C,K])
template <bool Acc>
inline void mm_nt(const real* A, const real* B, real* C, size_t R, size_t K, size_t Cc) {
#pragma omp parallel for schedule(static) if (R * K * Cc > 65536)
    for (long long i = 0; i < static_cast<long long>(R); ++i)
        mm_nt_row<Acc>(A + static_cast<size_t>(i) * K, B, C + static_cast<size_t>(i) * Cc, K, Cc);
}

// C = A^T * B (A given as [K,R])
template <bool Acc>
inline void mm_tn(const real* A, const real* B, real* C, size_t R, size_t K, size_t Cc) {
#pragma omp parallel for schedule(static) if (R * K * Cc > 65536)
    for (long long i = 0; i < static_cast<long long>(R); ++i)
        mm_tn_row<Acc>(A, static_cast<size_t>(i), R, B, C + static_cast<size_t>(i) * Cc, K, Cc);
}

// Serial variants for callers that already parallelize an outer loop.
template <bool Acc>
inline void mm_nn_serial(const real* A, const real* B, real* C, size_t R, size_t K, size_t Cc) {
    for (size_t i = 0; i < R; ++i) mm_nn_row<Acc>(A + i * K, B, C + i * Cc, K, Cc);
}
template <bool Acc>
inline void mm_nt_serial(const real* A, const real* B, real* C, size_t R, size_t K, size_t Cc) {
    for (size_t i = 0; i < R; ++i) mm_nt_row<Acc>(A + i * K, B, C + i * Cc, K, Cc);
}
template <bool Acc>
inline void mm_tn_serial(const real* A, const real* B, real* C, size_t R, size_t K, size_t Cc) {
    for (size_t i = 0; i < R; ++i) mm_tn_row<Acc>(A, i, R, B, C + i * Cc, K, Cc);
}

// Accumulating aliases used by the backward passes.
inline void mm_nn_acc(const real* A, const real* B, real* C, size_t R, size_t K, size_t Cc) {
    mm_nn<true>(A, B, C, R, K, Cc);
}
inline void mm_nt_acc(const real* A, const real* B, real* C, size_t R, size_t K, size_t Cc) {
    mm_nt<true>(A, B, C, R, K, Cc);
}
inline void mm_tn_acc(const real* A, const real* B, real* C, size_t R, size_t K, size_t Cc) {
    mm_tn<true>(A, B, C, R, K, Cc);
}

}  // namespace kernels

class Tape;

// Handle to a value recorded on a tape.
struct Val {
    int id = -1;
    bool valid() const { return id >= 0; }
};

enum class Axis { Rows, Cols };
enum class DropoutMode { Train, Eval };

// Reverse-mode tape over a fixed vocabulary of primitives. One tape records
// one forward pass; backward() replays the recorded ops in exact reverse
// execution order, which also fixes the gradient accumulation order.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- leaves ----------------------------------------------------------

    Val leaf(Tensor v) { return make(std::move(v), false); }

    // Restricts which parameters are treated as trainable on this tape; set
    // it before recording the forward pass. Inference tapes use an
    // all-false filter so backward bookkeeping is skipped entirely.
    std::function<bool(const Parameter&)> param_filter;

    Val param(Parameter& p) {
        auto it = param_ids_.find(&p);
        if (it != param_ids_.end()) return Val{it->second};
        bool track = !param_filter || param_filter(p);
        Val v = make(p.value, track);
        param_ids_[&p] = v.id;
        return v;
    }

    const Tensor& value(Val v) const { return node(v).value; }

    // Gradient of a parameter after backward(); exactly zero if the
    // parameter never entered the forward pass.
    Tensor grad(const Parameter& p) const {
        auto it = param_ids_.find(&p);
        if (it == param_ids_.end() || grads_[static_cast<size_t>(it->second)].numel() == 0)
            return Tensor::zeros(p.value.shape());
        return grads_[static_cast<size_t>(it->second)];
    }

    bool touched(const Parameter& p) const { return param_ids_.count(&p) > 0; }

    // ---- elementwise -----------------------------------------------------

    Val add(Val a, Val b) {
        check_same(a, b, "add");
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        Tensor out = Tensor::uninit(ta.shape());
        const size_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > 16384)
        for (long long i = 0; i < static_cast<long long>(n); ++i)
            out[static_cast<size_t>(i)] = ta[static_cast<size_t>(i)] + tb[static_cast<size_t>(i)];
        return binary_ew(std::move(out), a, b, /*db_sign=*/+1);
    }

    Val sub(Val a, Val b) {
        check_same(a, b, "sub");
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        Tensor out = Tensor::uninit(ta.shape());
        for (size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] - tb[i];
        return binary_ew(std::move(out), a, b, /*db_sign=*/-1);
    }

    Val mul(Val a, Val b) {
        check_same(a, b, "mul");
        const Tensor& ta0 = value(a);
        const Tensor& tb0 = value(b);
        Tensor out = Tensor::uninit(ta0.shape());
        const size_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > 16384)
        for (long long i = 0; i < static_cast<long long>(n); ++i)
            out[static_cast<size_t>(i)] = ta0[static_cast<size_t>(i)] * tb0[static_cast<size_t>(i)];
        Val o = make(std::move(out), needs_grad(a) || needs_grad(b));
        if (needs_grad(o)) set_back(o, [this, o, a, b] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            const Tensor& ta = value(a);
            const Tensor& tb2 = value(b);
            if (needs_grad(a)) {
                Tensor& ga = grad_slot(a);
                for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * tb2[i];
            }
            if (needs_grad(b)) {
                Tensor& gb = grad_slot(b);
                for (size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * ta[i];
            }
        });
        return o;
    }

    Val scale_const(Val x, real c) {
        const Tensor& tx = value(x);
        Tensor out = Tensor::uninit(tx.shape());
        for (size_t i = 0; i < out.numel(); ++i) out[i] = tx[i] * c;
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, c] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            Tensor& gx = grad_slot(x);
            for (size_t i = 0; i < g.numel(); ++i) gx[i] += c * g[i];
        });
        return o;
    }

    // out = sum_i weights[i] * xs[i], one node for a whole fused mixture.
    Val weighted_sum(const std::vector<Val>& xs, Val weights) {
        if (xs.empty()) throw ShapeError("weighted_sum of nothing");
        if (value(weights).numel() != xs.size())
            throw ShapeError("weighted_sum wants one weight per input");
        const Tensor& t0 = value(xs[0]);
        bool req = needs_grad(weights);
        for (Val x : xs) {
            check_same(x, xs[0], "weighted_sum");
            req = req || needs_grad(x);
        }
        const Tensor& w = value(weights);
        Tensor out = Tensor::uninit(t0.shape());
        const size_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > 16384)
        for (long long i = 0; i < static_cast<long long>(n); ++i) {
            real acc = 0;
            for (size_t k = 0; k < xs.size(); ++k) acc += w[k] * value(xs[k])[static_cast<size_t>(i)];
            out[static_cast<size_t>(i)] = acc;
        }
        Val o = make(std::move(out), req);
        if (needs_grad(o)) set_back(o, [this, o, xs, weights] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            const Tensor& w2 = value(weights);
            const size_t n2 = g.numel();
            for (size_t k = 0; k < xs.size(); ++k) {
                const Tensor& xk = value(xs[k]);
                if (needs_grad(xs[k])) {
                    Tensor& gx = grad_slot(xs[k]);
                    const real wk = w2[k];
#pragma omp parallel for schedule(static) if (n2 > 16384)
                    for (long long i = 0; i < static_cast<long long>(n2); ++i)
                        gx[static_cast<size_t>(i)] += wk * g[static_cast<size_t>(i)];
                }
                if (needs_grad(weights)) {
                    real acc = 0;
                    for (size_t i = 0; i < n2; ++i) acc += xk[i] * g[i];
                    grad_slot(weights)[k] += acc;
                }
            }
        });
        return o;
    }

    // y = x * s, s a tracked scalar (used by the fusion weights).
    Val scale_by_scalar(Val x, Val s) {
        if (value(s).numel() != 1) throw ShapeError("scale_by_scalar wants scalar, got " + value(s).shape_str());
        real sv = value(s).item();
        const Tensor& tx0 = value(x);
        Tensor out = Tensor::uninit(tx0.shape());
        for (size_t i = 0; i < out.numel(); ++i) out[i] = tx0[i] * sv;
        Val o = make(std::move(out), needs_grad(x) || needs_grad(s));
        if (needs_grad(o)) set_back(o, [this, o, x, s, sv] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            if (needs_grad(x)) {
                Tensor& gx = grad_slot(x);
                for (size_t i = 0; i < g.numel(); ++i) gx[i] += sv * g[i];
            }
            if (needs_grad(s)) {
                const Tensor& tx = value(x);
                real acc = 0;
                for (size_t i = 0; i < g.numel(); ++i) acc += tx[i] * g[i];
                grad_slot(s)[0] += acc;
            }
        });
        return o;
    }

    // Bias broadcast over leading dims: y[..., j] = x[..., j] + v[j].
    Val add_rowvec(Val x, Val v) {
        check_rowvec(x, v, "add_rowvec");
        const size_t rows = value(x).lead_rows();
        const size_t d = static_cast<size_t>(value(x).last_dim());
        const Tensor& tx0 = value(x);
        const Tensor& tv = value(v);
        Tensor out = Tensor::uninit(tx0.shape());
#pragma omp parallel for schedule(static) if (rows * d > 16384)
        for (long long r = 0; r < static_cast<long long>(rows); ++r)
            for (size_t j = 0; j < d; ++j)
                out[static_cast<size_t>(r) * d + j] = tx0[static_cast<size_t>(r) * d + j] + tv[j];
        Val o = make(std::move(out), needs_grad(x) || needs_grad(v));
        if (needs_grad(o)) set_back(o, [this, o, x, v, rows, d] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            if (needs_grad(x)) {
                Tensor& gx = grad_slot(x);
                for (size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
            }
            if (needs_grad(v)) {
                Tensor& gv = grad_slot(v);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < d; ++j) gv[j] += g[r * d + j];
            }
        });
        return o;
    }

    // Feature-axis broadcast product: y[..., j] = x[..., j] * v[j].
    Val mul_rowvec(Val x, Val v) {
        check_rowvec(x, v, "mul_rowvec");
        const size_t rows = value(x).lead_rows();
        const size_t d = static_cast<size_t>(value(x).last_dim());
        const Tensor& tx0 = value(x);
        const Tensor& tv = value(v);
        Tensor out = Tensor::uninit(tx0.shape());
        for (size_t r = 0; r < rows; ++r)
            for (size_t j = 0; j < d; ++j) out[r * d + j] = tx0[r * d + j] * tv[j];
        Val o = make(std::move(out), needs_grad(x) || needs_grad(v));
        if (needs_grad(o)) set_back(o, [this, o, x, v, rows, d] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            const Tensor& tx = value(x);
            const Tensor& tv2 = value(v);
            if (needs_grad(x)) {
                Tensor& gx = grad_slot(x);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * tv2[j];
            }
            if (needs_grad(v)) {
                Tensor& gv = grad_slot(v);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < d; ++j) gv[j] += g[r * d + j] * tx[r * d + j];
            }
        });
        return o;
    }

    // Constant {0,1} mask over the last axis. Gradients through masked
    // channels are exactly zero.
    Val mul_mask_lastdim(Val x, const std::vector<real>& mask) {
        const size_t d = static_cast<size_t>(value(x).last_dim());
        if (mask.size() != d)
            throw ShapeError("mask size " + std::to_string(mask.size()) + " vs last dim " + std::to_string(d));
        const size_t rows = value(x).lead_rows();
        const Tensor& tx0 = value(x);
        Tensor out = Tensor::uninit(tx0.shape());
#pragma omp parallel for schedule(static) if (rows * d > 16384)
        for (long long r = 0; r < static_cast<long long>(rows); ++r)
            for (size_t j = 0; j < d; ++j)
                out[static_cast<size_t>(r) * d + j] = tx0[static_cast<size_t>(r) * d + j] * mask[j];
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, mask, rows, d] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            Tensor& gx = grad_slot(x);
#pragma omp parallel for schedule(static) if (rows * d > 16384)
            for (long long r = 0; r < static_cast<long long>(rows); ++r)
                for (size_t j = 0; j < d; ++j)
                    gx[static_cast<size_t>(r) * d + j] += g[static_cast<size_t>(r) * d + j] * mask[j];
        });
        return o;
    }

    // Constant {0,1} mask over positions: x is [..., N, d], mask has one
    // entry per leading row (padded positions stay exactly zero).
    Val mul_mask_rows(Val x, const std::vector<real>& rowmask) {
        const size_t rows = value(x).lead_rows();
        const size_t d = static_cast<size_t>(value(x).last_dim());
        if (rowmask.size() != rows)
            throw ShapeError("row mask size " + std::to_string(rowmask.size()) + " vs rows " + std::to_string(rows));
        const Tensor& tx0 = value(x);
        Tensor out = Tensor::uninit(tx0.shape());
#pragma omp parallel for schedule(static) if (rows * d > 16384)
        for (long long r = 0; r < static_cast<long long>(rows); ++r)
            for (size_t j = 0; j < d; ++j)
                out[static_cast<size_t>(r) * d + j] = tx0[static_cast<size_t>(r) * d + j] * rowmask[static_cast<size_t>(r)];
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, rowmask, rows, d] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            Tensor& gx = grad_slot(x);
#pragma omp parallel for schedule(static) if (rows * d > 16384)
            for (long long r = 0; r < static_cast<long long>(rows); ++r)
                for (size_t j = 0; j < d; ++j)
                    gx[static_cast<size_t>(r) * d + j] += g[static_cast<size_t>(r) * d + j] * rowmask[static_cast<size_t>(r)];
        });
        return o;
    }

    // ---- activations -----------------------------------------------------

    Val elu(Val x) {
        return unary(x, [](real v) { return v > 0 ? v : std::expm1(v); },
                     [](real v, real y) { return v > 0 ? real(1) : y + real(1); });
    }

    Val relu(Val x) {
        return unary(x, [](real v) { return v > 0 ? v : real(0); },
                     [](real v, real) { return v > 0 ? real(1) : real(0); });
    }

    Val sigmoid(Val x) {
        return unary(x, [](real v) { return real(1) / (real(1) + std::exp(-v)); },
                     [](real, real y) { return y * (real(1) - y); });
    }

    // tanh approximation of GeLU; its closed-form derivative keeps the
    // backward analytic.
    Val gelu(Val x) {
        constexpr real kC = real(0.7978845608028654);  // sqrt(2/pi)
        constexpr real kA = real(0.044715);
        return unary(x,
                     [](real v) {
                         real u = kC * (v + kA * v * v * v);
                         return real(0.5) * v * (real(1) + std::tanh(u));
                     },
                     [](real v, real) {
                         real u = kC * (v + kA * v * v * v);
                         real th = std::tanh(u);
                         real sech2 = real(1) - th * th;
                         return real(0.5) * (real(1) + th) + real(0.5) * v * sech2 * kC * (real(1) + real(3) * kA * v * v);
                     });
    }

    // ---- matrix products -------------------------------------------------

    // C = A * B (or A * B^T). A may carry leading batch dims, which are
    // flattened; B is a plain matrix.
    Val matmul(Val a, Val b, bool trans_b = false) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() < 2 || tb.rank() != 2)
            throw ShapeError("matmul wants [.." + std::string("]x[k,c], got ") + ta.shape_str() + " and " + tb.shape_str());
        const size_t R = ta.lead_rows();
        const size_t K = static_cast<size_t>(ta.last_dim());
        const size_t Kb = static_cast<size_t>(trans_b ? tb.dim(1) : tb.dim(0));
        const size_t C = static_cast<size_t>(trans_b ? tb.dim(0) : tb.dim(1));
        if (K != Kb)
            throw ShapeError("matmul inner extents disagree: " + ta.shape_str() + " vs " + tb.shape_str());
        std::vector<int> out_shape(ta.shape().begin(), ta.shape().end() - 1);
        out_shape.push_back(static_cast<int>(C));
        Tensor out = Tensor::uninit(out_shape);
        if (trans_b)
            kernels::mm_nt<false>(ta.data(), tb.data(), out.data(), R, K, C);
        else
            kernels::mm_nn<false>(ta.data(), tb.data(), out.data(), R, K, C);
        Val o = make(std::move(out), needs_grad(a) || needs_grad(b));
        if (needs_grad(o)) set_back(o, [this, o, a, b, trans_b, R, K, C] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            const Tensor& ta2 = value(a);
            const Tensor& tb2 = value(b);
            if (needs_grad(a)) {
                Tensor& ga = grad_slot(a);
                if (trans_b)
                    kernels::mm_nn_acc(g.data(), tb2.data(), ga.data(), R, C, K);
                else
                    kernels::mm_nt_acc(g.data(), tb2.data(), ga.data(), R, C, K);
            }
            if (needs_grad(b)) {
                Tensor& gb = grad_slot(b);
                if (trans_b)
                    kernels::mm_tn_acc(g.data(), ta2.data(), gb.data(), C, R, K);
                else
                    kernels::mm_tn_acc(ta2.data(), g.data(), gb.data(), K, R, C);
            }
        });
        return o;
    }

    // Fused dense layer: out = mask . (x W + b), with bias and channel mask
    // optional. One node instead of three keeps tape traffic down on the
    // hot path; gradients are the composition of the three backwards.
    Val dense(Val x, Val w, Val bias = Val{}, const std::vector<real>* mask = nullptr) {
        const Tensor& tx = value(x);
        const Tensor& tw = value(w);
        if (tx.rank() < 2 || tw.rank() != 2)
            throw ShapeError("dense wants [..,k]x[k,c], got " + tx.shape_str() + " and " + tw.shape_str());
        const size_t R = tx.lead_rows();
        const size_t K = static_cast<size_t>(tx.last_dim());
        const size_t C = static_cast<size_t>(tw.dim(1));
        if (K != static_cast<size_t>(tw.dim(0)))
            throw ShapeError("dense inner extents disagree: " + tx.shape_str() + " vs " + tw.shape_str());
        if (bias.valid() && value(bias).numel() != C) throw ShapeError("dense bias width mismatch");
        if (mask && mask->size() != C) throw ShapeError("dense mask width mismatch");
        std::vector<int> out_shape(tx.shape().begin(), tx.shape().end() - 1);
        out_shape.push_back(static_cast<int>(C));
        Tensor out = Tensor::uninit(out_shape);
        kernels::mm_nn<false>(tx.data(), tw.data(), out.data(), R, K, C);
        if (bias.valid()) {
            const Tensor& tb = value(bias);
#pragma omp parallel for schedule(static) if (R * C > 16384)
            for (long long r = 0; r < static_cast<long long>(R); ++r)
                for (size_t j = 0; j < C; ++j) out[static_cast<size_t>(r) * C + j] += tb[j];
        }
        if (mask) {
#pragma omp parallel for schedule(static) if (R * C > 16384)
            for (long long r = 0; r < static_cast<long long>(R); ++r)
                for (size_t j = 0; j < C; ++j) out[static_cast<size_t>(r) * C + j] *= (*mask)[j];
        }
        bool req = needs_grad(x) || needs_grad(w) || (bias.valid() && needs_grad(bias));
        Val o = make(std::move(out), req);
        if (needs_grad(o)) set_back(o, [this, o, x, w, bias, mask_copy = mask ? *mask : std::vector<real>{},
                                        has_mask = mask != nullptr, R, K, C] {
            const Tensor& g_raw = grads_[static_cast<size_t>(o.id)];
            Tensor masked;
            const Tensor* g = &g_raw;
            if (has_mask) {
                masked = Tensor::uninit(g_raw.shape());
#pragma omp parallel for schedule(static) if (R * C > 16384)
                for (long long r = 0; r < static_cast<long long>(R); ++r)
                    for (size_t j = 0; j < C; ++j)
                        masked[static_cast<size_t>(r) * C + j] = g_raw[static_cast<size_t>(r) * C + j] * mask_copy[j];
                g = &masked;
            }
            if (needs_grad(x))
                kernels::mm_nt_acc(g->data(), value(w).data(), grad_slot(x).data(), R, C, K);
            if (needs_grad(w))
                kernels::mm_tn_acc(value(x).data(), g->data(), grad_slot(w).data(), K, R, C);
            if (bias.valid() && needs_grad(bias)) {
                Tensor& gb = grad_slot(bias);
                for (size_t r = 0; r < R; ++r)
                    for (size_t j = 0; j < C; ++j) gb[j] += (*g)[r * C + j];
            }
        });
        return o;
    }

    // Batched product over matching leading extent: C[i] = A[i] * B[i],
    // optionally transposing each A[i].
    Val bmm(Val a, Val b, bool trans_a = false) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0))
            throw ShapeError("bmm wants [B,r,k]x[B,k,c], got " + ta.shape_str() + " and " + tb.shape_str());
        const int B = ta.dim(0);
        const size_t R = static_cast<size_t>(trans_a ? ta.dim(2) : ta.dim(1));
        const size_t K = static_cast<size_t>(trans_a ? ta.dim(1) : ta.dim(2));
        if (K != static_cast<size_t>(tb.dim(1)))
            throw ShapeError("bmm inner extents disagree: " + ta.shape_str() + " vs " + tb.shape_str());
        const size_t C = static_cast<size_t>(tb.dim(2));
        Tensor out = Tensor::uninit({B, static_cast<int>(R), static_cast<int>(C)});
        const size_t sa = static_cast<size_t>(ta.dim(1)) * ta.dim(2);
        const size_t sb = K * C;
        const size_t so = R * C;
#pragma omp parallel for schedule(static) if (static_cast<size_t>(B) * R * K * C > 65536)
        for (int i = 0; i < B; ++i) {
            if (trans_a)
                kernels::mm_tn_serial<false>(ta.data() + i * sa, tb.data() + i * sb, out.data() + i * so, R, K, C);
            else
                kernels::mm_nn_serial<false>(ta.data() + i * sa, tb.data() + i * sb, out.data() + i * so, R, K, C);
        }
        Val o = make(std::move(out), needs_grad(a) || needs_grad(b));
        if (needs_grad(o)) set_back(o, [this, o, a, b, trans_a, B, R, K, C, sa, sb, so] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            const Tensor& ta2 = value(a);
            const Tensor& tb2 = value(b);
            if (needs_grad(a)) {
                Tensor& ga = grad_slot(a);
#pragma omp parallel for schedule(static) if (static_cast<size_t>(B) * R * K * C > 65536)
                for (int i = 0; i < B; ++i) {
                    // dA = dC * B^T, or for transposed A, dA = B * dC^T.
                    if (trans_a)
                        kernels::mm_nt_serial<true>(tb2.data() + i * sb, g.data() + i * so, ga.data() + i * sa, K, C, R);
                    else
                        kernels::mm_nt_serial<true>(g.data() + i * so, tb2.data() + i * sb, ga.data() + i * sa, R, C, K);
                }
            }
            if (needs_grad(b)) {
                Tensor& gb = grad_slot(b);
#pragma omp parallel for schedule(static) if (static_cast<size_t>(B) * R * K * C > 65536)
                for (int i = 0; i < B; ++i) {
                    // dB = A^T * dC (A already transposed when trans_a).
                    if (trans_a)
                        kernels::mm_nn_serial<true>(ta2.data() + i * sa, g.data() + i * so, gb.data() + i * sb, K, R, C);
                    else
                        kernels::mm_tn_serial<true>(ta2.data() + i * sa, g.data() + i * so, gb.data() + i * sb, K, R, C);
                }
            }
        });
        return o;
    }

    // ---- normalizations --------------------------------------------------

    // Scales each row (Axis::Rows, over the last dim) or column
    // (Axis::Cols, over the second-to-last dim) to L2 norm 1/sqrt(dim_scale).
    // All-zero slices map to zero.
    Val l2_normalize(Val x, Axis axis, int dim_scale) {
        if (dim_scale <= 0) throw ConfigError("l2_normalize dim_scale must be positive");
        const Tensor& tx = value(x);
        if (tx.rank() < 2) throw ShapeError("l2_normalize wants rank>=2, got " + tx.shape_str());
        const real inv_root = real(1) / std::sqrt(static_cast<real>(dim_scale));
        Tensor out = Tensor::uninit(tx.shape());
        auto [count, len, stride] = slice_geometry(tx, axis);
        Tensor inv_norms({static_cast<int>(count)});
        for (size_t s = 0; s < count; ++s) {
            size_t base = slice_base(tx, axis, s);
            real ss = 0;
            for (size_t i = 0; i < len; ++i) {
                real v = tx[base + i * stride];
                ss += v * v;
            }
            real inv = ss > 0 ? inv_root / std::sqrt(ss) : real(0);
            inv_norms[s] = ss > 0 ? real(1) / std::sqrt(ss) : real(0);
            for (size_t i = 0; i < len; ++i) out[base + i * stride] = tx[base + i * stride] * inv;
        }
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, axis, inv_root, inv_norms = std::move(inv_norms)] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            const Tensor& tx2 = value(x);
            Tensor& gx = grad_slot(x);
            auto [count, len, stride] = slice_geometry(tx2, axis);
            for (size_t s = 0; s < count; ++s) {
                size_t base = slice_base(tx2, axis, s);
                real ir = inv_norms[s];
                if (ir == real(0)) continue;  // all-zero slice: zero gradient
                real dot = 0;
                for (size_t i = 0; i < len; ++i) dot += tx2[base + i * stride] * ir * g[base + i * stride];
                for (size_t i = 0; i < len; ++i) {
                    real vhat = tx2[base + i * stride] * ir;
                    gx[base + i * stride] += inv_root * ir * (g[base + i * stride] - vhat * dot);
                }
            }
        });
        return o;
    }

    // Per-row layer normalization over the last axis, with optional channel
    // keep-mask: statistics run over kept channels only and masked channels
    // emit exactly zero. gain/bias have the full channel extent.
    Val layer_norm(Val x, Val gain, Val bias, real eps, const std::vector<real>* keep = nullptr) {
        if (eps <= 0) throw ConfigError("layer_norm eps must be positive");
        const Tensor& tx = value(x);
        const size_t d = static_cast<size_t>(tx.last_dim());
        const size_t rows = tx.lead_rows();
        if (value(gain).numel() != d || value(bias).numel() != d)
            throw ShapeError("layer_norm gain/bias " + value(gain).shape_str() + "/" + value(bias).shape_str() +
                             " vs channels " + std::to_string(d));
        if (keep && keep->size() != d) throw ShapeError("layer_norm keep mask size mismatch");
        size_t m = 0;
        for (size_t j = 0; j < d; ++j) m += (!keep || (*keep)[j] != real(0)) ? 1 : 0;
        if (m == 0) throw ShapeError("layer_norm keep mask drops every channel");

        Tensor out = Tensor::uninit(tx.shape());
        Tensor xhat = Tensor::uninit(tx.shape());
        Tensor inv_std({static_cast<int>(rows)});
        const Tensor& tg = value(gain);
        const Tensor& tb = value(bias);
        for (size_t r = 0; r < rows; ++r) {
            const real* xr = tx.data() + r * d;
            real mean = 0;
            for (size_t j = 0; j < d; ++j)
                if (!keep || (*keep)[j] != real(0)) mean += xr[j];
            mean /= static_cast<real>(m);
            real var = 0;
            for (size_t j = 0; j < d; ++j)
                if (!keep || (*keep)[j] != real(0)) {
                    real c = xr[j] - mean;
                    var += c * c;
                }
            var /= static_cast<real>(m);
            real is = real(1) / std::sqrt(var + eps);
            inv_std[r] = is;
            for (size_t j = 0; j < d; ++j) {
                if (keep && (*keep)[j] == real(0)) {
                    xhat[r * d + j] = 0;
                    out[r * d + j] = 0;
                } else {
                    real h = (xr[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = tg[j] * h + tb[j];
                }
            }
        }
        Val o = make(std::move(out), needs_grad(x) || needs_grad(gain) || needs_grad(bias));
        if (needs_grad(o)) set_back(o, [this, o, x, gain, bias, keep_copy = keep ? *keep : std::vector<real>{},
                                      has_keep = keep != nullptr, rows, d, m,
                                      xhat = std::move(xhat), inv_std = std::move(inv_std)] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            const Tensor& tg2 = value(gain);
            auto kept = [&](size_t j) { return !has_keep || keep_copy[j] != real(0); };
            if (needs_grad(gain)) {
                Tensor& gg = grad_slot(gain);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < d; ++j)
                        if (kept(j)) gg[j] += g[r * d + j] * xhat[r * d + j];
            }
            if (needs_grad(bias)) {
                Tensor& gb = grad_slot(bias);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < d; ++j)
                        if (kept(j)) gb[j] += g[r * d + j];
            }
            if (needs_grad(x)) {
                Tensor& gx = grad_slot(x);
                const real invm = real(1) / static_cast<real>(m);
                for (size_t r = 0; r < rows; ++r) {
                    real sum_dy = 0, sum_dy_xhat = 0;
                    for (size_t j = 0; j < d; ++j)
                        if (kept(j)) {
                            real dy = g[r * d + j] * tg2[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[r * d + j];
                        }
                    for (size_t j = 0; j < d; ++j)
                        if (kept(j)) {
                            real dy = g[r * d + j] * tg2[j];
                            gx[r * d + j] += inv_std[r] * (dy - invm * sum_dy - xhat[r * d + j] * invm * sum_dy_xhat);
                        }
                }
            }
        });
        return o;
    }

    // ---- regularization / distributions -----------------------------------

    Val dropout(Val x, real p, DropoutMode mode, Rng& rng) {
        if (p < 0 || p >= 1) throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(p));
        if (mode == DropoutMode::Eval || p == real(0)) return x;
        const real keep_scale = real(1) / (real(1) - p);
        const Tensor& tx = value(x);
        std::vector<real> mask(tx.numel());
        for (auto& mv : mask) mv = rng.uniform() < p ? real(0) : keep_scale;
        Tensor out = Tensor::uninit(tx.shape());
        for (size_t i = 0; i < out.numel(); ++i) out[i] = tx[i] * mask[i];
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, mask = std::move(mask)] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            Tensor& gx = grad_slot(x);
            for (size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * mask[i];
        });
        return o;
    }

    // Row softmax with max-subtraction stabilization.
    Val softmax_lastdim(Val x) {
        const Tensor& tx = value(x);
        const size_t d = static_cast<size_t>(tx.last_dim());
        const size_t rows = tx.lead_rows();
        Tensor out = Tensor::uninit(tx.shape());
        for (size_t r = 0; r < rows; ++r) {
            const real* xr = tx.data() + r * d;
            real mx = xr[0];
            for (size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
            real z = 0;
            for (size_t j = 0; j < d; ++j) {
                real e = std::exp(xr[j] - mx);
                out[r * d + j] = e;
                z += e;
            }
            for (size_t j = 0; j < d; ++j) out[r * d + j] /= z;
        }
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, rows, d] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            const Tensor& y = value(o);
            Tensor& gx = grad_slot(x);
            for (size_t r = 0; r < rows; ++r) {
                real dot = 0;
                for (size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                for (size_t j = 0; j < d; ++j) gx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
            }
        });
        return o;
    }

    // Mean over the batch of -log softmax(logits)[target]. Targets are
    // 0-based column indices.
    Val cross_entropy_mean(Val logits, const std::vector<int>& targets) {
        const Tensor& tz = value(logits);
        if (tz.rank() != 2) throw ShapeError("cross_entropy wants [B,V], got " + tz.shape_str());
        const size_t B = static_cast<size_t>(tz.dim(0));
        const size_t V = static_cast<size_t>(tz.dim(1));
        if (targets.size() != B) throw ShapeError("cross_entropy targets size mismatch");
        Tensor probs = Tensor::uninit({static_cast<int>(B), static_cast<int>(V)});
        real loss = 0;
        for (size_t b = 0; b < B; ++b) {
            int t = targets[b];
            if (t < 0 || static_cast<size_t>(t) >= V)
                throw UsageError("cross_entropy target " + std::to_string(t) + " out of range");
            const real* zr = tz.data() + b * V;
            real mx = zr[0];
            for (size_t j = 1; j < V; ++j) mx = std::max(mx, zr[j]);
            real z = 0;
            for (size_t j = 0; j < V; ++j) {
                real e = std::exp(zr[j] - mx);
                probs[b * V + j] = e;
                z += e;
            }
            for (size_t j = 0; j < V; ++j) probs[b * V + j] /= z;
            loss += std::log(z) + mx - zr[static_cast<size_t>(t)];
        }
        loss /= static_cast<real>(B);
        Val o = make(Tensor::scalar(loss), needs_grad(logits));
        if (needs_grad(o)) set_back(o, [this, o, logits, targets, B, V, probs = std::move(probs)] {
            const real g = grads_[static_cast<size_t>(o.id)][0];
            Tensor& gz = grad_slot(logits);
            const real inv_b = real(1) / static_cast<real>(B);
            for (size_t b = 0; b < B; ++b) {
                for (size_t j = 0; j < V; ++j) gz[b * V + j] += g * inv_b * probs[b * V + j];
                gz[b * V + static_cast<size_t>(targets[b])] -= g * inv_b;
            }
        });
        return o;
    }

    // ---- lookup / gather ---------------------------------------------------

    // E[b,t] = item_table[ids[b,t]] + pos_table[t] for real cells; padded
    // cells (id 0) are exactly zero. Row 0 of the item table never receives
    // gradient, which keeps it frozen.
    Val embed_sequences(Val item_table, Val pos_table, const std::vector<int>& ids, int B, int N) {
        const Tensor& ti = value(item_table);
        const Tensor& tp = value(pos_table);
        if (ti.rank() != 2 || tp.rank() != 2 || ti.dim(1) != tp.dim(1))
            throw ShapeError("embed tables " + ti.shape_str() + " / " + tp.shape_str());
        if (tp.dim(0) < N) throw ShapeError("positional table shorter than sequence length");
        if (ids.size() != static_cast<size_t>(B) * N) throw ShapeError("ids size mismatch");
        const int d = ti.dim(1);
        Tensor out({B, N, d});
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < N; ++t) {
                int id = ids[static_cast<size_t>(b) * N + t];
                if (id == 0) continue;
                if (id < 0 || id >= ti.dim(0))
                    throw UsageError("item id " + std::to_string(id) + " out of range [0," +
                                     std::to_string(ti.dim(0) - 1) + "]");
                real* o = out.data() + (static_cast<size_t>(b) * N + t) * d;
                const real* ir = ti.data() + static_cast<size_t>(id) * d;
                const real* pr = tp.data() + static_cast<size_t>(t) * d;
                for (int j = 0; j < d; ++j) o[j] = ir[j] + pr[j];
            }
        Val o = make(std::move(out), needs_grad(item_table) || needs_grad(pos_table));
        if (needs_grad(o)) set_back(o, [this, o, item_table, pos_table, ids, B, N, d] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            for (int b = 0; b < B; ++b)
                for (int t = 0; t < N; ++t) {
                    int id = ids[static_cast<size_t>(b) * N + t];
                    if (id == 0) continue;
                    const real* gr = g.data() + (static_cast<size_t>(b) * N + t) * d;
                    if (needs_grad(item_table)) {
                        real* dst = grad_slot(item_table).data() + static_cast<size_t>(id) * d;
                        for (int j = 0; j < d; ++j) dst[j] += gr[j];
                    }
                    if (needs_grad(pos_table)) {
                        real* dst = grad_slot(pos_table).data() + static_cast<size_t>(t) * d;
                        for (int j = 0; j < d; ++j) dst[j] += gr[j];
                    }
                }
        });
        return o;
    }

    // Picks one row per batch sample: out[b] = x[b, pos[b], :].
    Val rows_at(Val x, const std::vector<int>& pos) {
        const Tensor& tx = value(x);
        if (tx.rank() != 3) throw ShapeError("rows_at wants [B,N,d], got " + tx.shape_str());
        const int B = tx.dim(0), N = tx.dim(1), d = tx.dim(2);
        if (pos.size() != static_cast<size_t>(B)) throw ShapeError("rows_at positions size mismatch");
        Tensor out = Tensor::uninit({B, d});
        for (int b = 0; b < B; ++b) {
            if (pos[b] < 0 || pos[b] >= N) throw UsageError("rows_at position out of range");
            const real* src = tx.data() + (static_cast<size_t>(b) * N + pos[b]) * d;
            for (int j = 0; j < d; ++j) out[static_cast<size_t>(b) * d + j] = src[j];
        }
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, pos, B, N, d] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            Tensor& gx = grad_slot(x);
            for (int b = 0; b < B; ++b) {
                real* dst = gx.data() + (static_cast<size_t>(b) * N + pos[b]) * d;
                for (int j = 0; j < d; ++j) dst[j] += g[static_cast<size_t>(b) * d + j];
            }
        });
        return o;
    }

    // logits[b,v] = <y[b], table[v+1]> for items 1..V (row 0 is the padding
    // item and never scored).
    Val score_items(Val y, Val table) {
        const Tensor& ty = value(y);
        const Tensor& tt = value(table);
        if (ty.rank() != 2 || tt.rank() != 2 || ty.dim(1) != tt.dim(1))
            throw ShapeError("score_items shapes " + ty.shape_str() + " vs " + tt.shape_str());
        const size_t B = static_cast<size_t>(ty.dim(0));
        const size_t d = static_cast<size_t>(ty.dim(1));
        const size_t V = static_cast<size_t>(tt.dim(0)) - 1;
        Tensor out = Tensor::uninit({static_cast<int>(B), static_cast<int>(V)});
        kernels::mm_nt<false>(ty.data(), tt.data() + d, out.data(), B, d, V);
        Val o = make(std::move(out), needs_grad(y) || needs_grad(table));
        if (needs_grad(o)) set_back(o, [this, o, y, table, B, d, V] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            if (needs_grad(y)) {
                Tensor& gy = grad_slot(y);
                kernels::mm_nn_acc(g.data(), value(table).data() + d, gy.data(), B, V, d);
            }
            if (needs_grad(table)) {
                Tensor& gt = grad_slot(table);
                kernels::mm_tn_acc(g.data(), value(y).data(), gt.data() + d, V, B, d);
            }
        });
        return o;
    }

    // ---- slicing / reshaping ----------------------------------------------

    Val slice_lastdim(Val x, int start, int len) {
        const Tensor& tx = value(x);
        const int d = tx.last_dim();
        if (start < 0 || len <= 0 || start + len > d)
            throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") out of last dim " + std::to_string(d));
        const size_t rows = tx.lead_rows();
        std::vector<int> shape = tx.shape();
        shape.back() = len;
        Tensor out = Tensor::uninit(shape);
        for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < len; ++j)
                out[r * len + j] = tx[r * d + start + j];
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, start, len, d, rows] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            Tensor& gx = grad_slot(x);
            for (size_t r = 0; r < rows; ++r)
                for (int j = 0; j < len; ++j)
                    gx[r * d + start + j] += g[r * static_cast<size_t>(len) + j];
        });
        return o;
    }

    // Channel selection by index set: out[..., j] = x[..., idx[j]].
    Val gather_lastdim(Val x, const std::vector<int>& indices) {
        const Tensor& tx = value(x);
        const int d = tx.last_dim();
        const int len = static_cast<int>(indices.size());
        if (len == 0) throw ShapeError("gather of no channels");
        for (int idx : indices)
            if (idx < 0 || idx >= d) throw ShapeError("gather index out of range");
        const size_t rows = tx.lead_rows();
        std::vector<int> shape = tx.shape();
        shape.back() = len;
        Tensor out = Tensor::uninit(shape);
        for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < len; ++j)
                out[r * static_cast<size_t>(len) + j] = tx[r * static_cast<size_t>(d) + indices[static_cast<size_t>(j)]];
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, indices, d, len, rows] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            Tensor& gx = grad_slot(x);
            for (size_t r = 0; r < rows; ++r)
                for (int j = 0; j < len; ++j)
                    gx[r * static_cast<size_t>(d) + indices[static_cast<size_t>(j)]] +=
                        g[r * static_cast<size_t>(len) + j];
        });
        return o;
    }

    // Inverse of slice by index set: out[..., idx[j]] = x[..., j], other
    // channels exactly zero.
    Val scatter_lastdim(Val x, const std::vector<int>& indices, int full_width) {
        const Tensor& tx = value(x);
        const int len = tx.last_dim();
        if (static_cast<size_t>(len) != indices.size())
            throw ShapeError("scatter index count " + std::to_string(indices.size()) + " vs last dim " +
                             std::to_string(len));
        const size_t rows = tx.lead_rows();
        std::vector<int> shape = tx.shape();
        shape.back() = full_width;
        Tensor out(shape);
        for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < len; ++j) {
                int dst = indices[static_cast<size_t>(j)];
                if (dst < 0 || dst >= full_width) throw ShapeError("scatter index out of range");
                out[r * static_cast<size_t>(full_width) + dst] = tx[r * static_cast<size_t>(len) + j];
            }
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, indices, full_width, len, rows] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            Tensor& gx = grad_slot(x);
            for (size_t r = 0; r < rows; ++r)
                for (int j = 0; j < len; ++j)
                    gx[r * static_cast<size_t>(len) + j] +=
                        g[r * static_cast<size_t>(full_width) + indices[static_cast<size_t>(j)]];
        });
        return o;
    }

    Val concat_lastdim(const std::vector<Val>& parts) {
        if (parts.empty()) throw ShapeError("concat of nothing");
        const Tensor& t0 = value(parts[0]);
        std::vector<int> lead(t0.shape().begin(), t0.shape().end() - 1);
        int total = 0;
        bool req = false;
        for (Val p : parts) {
            const Tensor& tp = value(p);
            std::vector<int> pl(tp.shape().begin(), tp.shape().end() - 1);
            if (pl != lead) throw ShapeError("concat leading dims disagree: " + tp.shape_str() + " vs " + t0.shape_str());
            total += tp.last_dim();
            req = req || needs_grad(p);
        }
        std::vector<int> shape = lead;
        shape.push_back(total);
        Tensor out = Tensor::uninit(shape);
        const size_t rows = out.lead_rows();
        int off = 0;
        std::vector<int> offs, lens;
        for (Val p : parts) {
            const Tensor& tp = value(p);
            int len = tp.last_dim();
            for (size_t r = 0; r < rows; ++r)
                for (int j = 0; j < len; ++j)
                    out[r * static_cast<size_t>(total) + off + j] = tp[r * static_cast<size_t>(len) + j];
            offs.push_back(off);
            lens.push_back(len);
            off += len;
        }
        Val o = make(std::move(out), req);
        if (needs_grad(o)) set_back(o, [this, o, parts, offs, lens, total, rows] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            for (size_t pi = 0; pi < parts.size(); ++pi) {
                if (!needs_grad(parts[pi])) continue;
                Tensor& gp = grad_slot(parts[pi]);
                const int len = lens[pi], off2 = offs[pi];
                for (size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < len; ++j)
                        gp[r * static_cast<size_t>(len) + j] += g[r * static_cast<size_t>(total) + off2 + j];
            }
        });
        return o;
    }

    // ---- reductions --------------------------------------------------------

    Val sum_all(Val x) {
        real s = 0;
        for (real v : value(x).vec()) s += v;
        Val o = make(Tensor::scalar(s), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x] {
            const real g = grads_[static_cast<size_t>(o.id)][0];
            Tensor& gx = grad_slot(x);
            for (auto& v : gx.vec()) v += g;
        });
        return o;
    }

    Val mean_all(Val x) { return scale_const(sum_all(x), real(1) / static_cast<real>(value(x).numel())); }

    Val pick(Val x, int index) {
        const Tensor& tx = value(x);
        if (index < 0 || static_cast<size_t>(index) >= tx.numel())
            throw ShapeError("pick index " + std::to_string(index) + " out of " + std::to_string(tx.numel()));
        Val o = make(Tensor::scalar(tx[static_cast<size_t>(index)]), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, index] {
            grad_slot(x)[static_cast<size_t>(index)] += grads_[static_cast<size_t>(o.id)][0];
        });
        return o;
    }

    // ---- backward ----------------------------------------------------------

    void backward(Val loss) {
        if (!loss.valid() || loss.id >= static_cast<int>(nodes_.size()))
            throw UsageError("backward: loss was not produced through this tape");
        if (value(loss).numel() != 1) throw UsageError("backward: loss must be a scalar");
        grad_slot(loss)[0] += real(1);
        backward_order_.clear();
        for (int id = loss.id; id >= 0; --id) {
            auto& n = nodes_[static_cast<size_t>(id)];
            if (!n.backprop) continue;
            if (grads_[static_cast<size_t>(id)].numel() == 0) continue;  // not reached from the loss
            backward_order_.push_back(id);
            n.backprop();
        }
    }

    // Node visitation order of the last backward() call (for tests).
    const std::vector<int>& last_backward_order() const { return backward_order_; }

    size_t size() const { return nodes_.size(); }

    bool value_finite(Val v) const { return value(v).all_finite(); }

private:
    struct Node {
        Tensor value;
        bool req = false;
        std::function<void()> backprop;
    };

    Val make(Tensor v, bool req) {
        nodes_.push_back(Node{std::move(v), req, nullptr});
        grads_.emplace_back();
        return Val{static_cast<int>(nodes_.size()) - 1};
    }

    template <typename F>
    void set_back(Val v, F&& f) {
        nodes_[static_cast<size_t>(v.id)].backprop = std::forward<F>(f);
    }

    Node& node(Val v) { return nodes_.at(static_cast<size_t>(v.id)); }
    const Node& node(Val v) const { return nodes_.at(static_cast<size_t>(v.id)); }
    bool needs_grad(Val v) const { return node(v).req; }

    Tensor& grad_slot(Val v) {
        Tensor& g = grads_[static_cast<size_t>(v.id)];
        if (g.numel() == 0) g = Tensor::zeros(node(v).value.shape());
        return g;
    }

    void check_same(Val a, Val b, const char* op) const {
        if (!value(a).same_shape(value(b)))
            throw ShapeError(std::string(op) + ": " + value(a).shape_str() + " vs " + value(b).shape_str());
    }

    void check_rowvec(Val x, Val v, const char* op) const {
        if (value(v).rank() != 1 || value(v).last_dim() != value(x).last_dim())
            throw ShapeError(std::string(op) + ": vector " + value(v).shape_str() + " vs last dim of " +
                             value(x).shape_str());
    }

    Val binary_ew(Tensor out, Val a, Val b, int db_sign) {
        Val o = make(std::move(out), needs_grad(a) || needs_grad(b));
        if (needs_grad(o)) set_back(o, [this, o, a, b, db_sign] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            if (needs_grad(a)) {
                Tensor& ga = grad_slot(a);
                for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            }
            if (needs_grad(b)) {
                Tensor& gb = grad_slot(b);
                const real s = static_cast<real>(db_sign);
                for (size_t i = 0; i < g.numel(); ++i) gb[i] += s * g[i];
            }
        });
        return o;
    }

    template <typename Fwd, typename Bwd>
    Val unary(Val x, Fwd fwd, Bwd bwd) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape());
        const size_t n = tx.numel();
#pragma omp parallel for schedule(static) if (n > 16384)
        for (long long i = 0; i < static_cast<long long>(n); ++i)
            out[static_cast<size_t>(i)] = fwd(tx[static_cast<size_t>(i)]);
        Val o = make(std::move(out), needs_grad(x));
        if (needs_grad(o)) set_back(o, [this, o, x, bwd] {
            const Tensor& g = grads_[static_cast<size_t>(o.id)];
            const Tensor& tx2 = value(x);
            const Tensor& y = value(o);
            Tensor& gx = grad_slot(x);
            const size_t n2 = g.numel();
#pragma omp parallel for schedule(static) if (n2 > 16384)
            for (long long i = 0; i < static_cast<long long>(n2); ++i)
                gx[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * bwd(tx2[static_cast<size_t>(i)], y[static_cast<size_t>(i)]);
        });
        return o;
    }

    // (slice count, slice length, element stride) for l2_normalize.
    static std::tuple<size_t, size_t, size_t> slice_geometry(const Tensor& t, Axis axis) {
        const size_t last = static_cast<size_t>(t.last_dim());
        const size_t mid = static_cast<size_t>(t.dim(t.rank() - 2));
        const size_t lead = t.numel() / (last * mid);
        if (axis == Axis::Rows) return {lead * mid, last, 1};
        return {lead * last, mid, last};
    }

    static size_t slice_base(const Tensor& t, Axis axis, size_t s) {
        const size_t last = static_cast<size_t>(t.last_dim());
        const size_t mid = static_cast<size_t>(t.dim(t.rank() - 2));
        if (axis == Axis::Rows) return s * last;
        size_t block = s / last, col = s % last;
        return block * mid * last + col;
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<int> backward_order_;
    std::unordered_map<const Parameter*, int> param_ids_;
};

}  // namespace slimrec
