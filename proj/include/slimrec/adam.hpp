#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "slimrec/common.hpp"
#include "slimrec/tape.hpp"
#include "slimrec/tensor.hpp"

namespace slimrec {

struct AdamConfig {
    real lr = real(0.001);
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real eps = real(1e-8);
};

// Reference Adam with bias correction over a fixed parameter group. Moments
// are kept in group order, so updates are deterministic given inputs.
class Adam {
public:
    Adam(std::vector<Parameter*> params, AdamConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Parameter* p : params_) {
            m_.push_back(Tensor::zeros(p->value.shape()));
            v_.push_back(Tensor::zeros(p->value.shape()));
        }
    }

    const std::vector<Parameter*>& params() const { return params_; }
    int64_t steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    void step(const Tape& tape) {
        std::vector<Tensor> grads;
        grads.reserve(params_.size());
        for (const Parameter* p : params_) grads.push_back(tape.grad(*p));
        step_with(grads);
    }

    void step_with(const std::vector<Tensor>& grads) {
        if (grads.size() != params_.size()) throw ShapeError("adam: grads/params count mismatch");
        ++t_;
        const real bc1 = real(1) - std::pow(cfg_.beta1, static_cast<real>(t_));
        const real bc2 = real(1) - std::pow(cfg_.beta2, static_cast<real>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& theta = params_[i]->value;
            const Tensor& g = grads[i];
            if (!g.same_shape(theta))
                throw ShapeError("adam: grad " + g.shape_str() + " vs param " + theta.shape_str() +
                                 " (" + params_[i]->name + ")");
            if (!g.all_finite()) throw NumericError("non-finite gradient for " + params_[i]->name);
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (size_t j = 0; j < theta.numel(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (real(1) - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (real(1) - cfg_.beta2) * g[j] * g[j];
                const real mhat = m[j] / bc1;
                const real vhat = v[j] / bc2;
                theta[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    std::vector<Parameter*> params_;
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace slimrec
