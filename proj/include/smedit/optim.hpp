#pragma once

#include <cmath>
#include <vector>

#include "smedit/matrix.hpp"

namespace smedit {

struct UpdateReport {
    bool applied = false;
    double grad_norm = 0;   // global norm before clipping
    double clip_scale = 1;  // factor applied to gradients
};

// Adam with optional global gradient-norm clipping. max_norm <= 0 disables
// clipping. Non-finite gradients skip the update and report it.
class AdamOptimizer {
public:
    AdamOptimizer() = default;
    AdamOptimizer(double beta1, double beta2, double eps)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    UpdateReport step(std::vector<Matrix*> params, const std::vector<Matrix>& grads, double lr,
                      double max_norm = 0);

    long step_count() const { return step_; }
    const std::vector<Matrix>& first_moments() const { return m_; }
    const std::vector<Matrix>& second_moments() const { return v_; }
    double beta1() const { return beta1_; }
    double beta2() const { return beta2_; }
    double eps() const { return eps_; }

    // checkpoint support
    void restore(std::vector<Matrix> m, std::vector<Matrix> v, long step);

private:
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long step_ = 0;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
};

inline UpdateReport AdamOptimizer::step(std::vector<Matrix*> params,
                                        const std::vector<Matrix>& grads, double lr,
                                        double max_norm) {
    if (params.size() != grads.size()) {
        throw_error(ErrorKind::contract, "adam: gradient count does not match parameter count");
    }
    UpdateReport report;
    double sq = 0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!grads[i].same_shape(*params[i])) {
            throw_error(ErrorKind::contract, "adam: gradient shape does not match parameter");
        }
        if (!grads[i].all_finite()) {
            report.applied = false;
            return report;
        }
        sq += static_cast<double>(squared_frobenius(grads[i]));
    }
    report.grad_norm = std::sqrt(sq);
    report.clip_scale = 1;
    if (max_norm > 0 && report.grad_norm > max_norm) {
        report.clip_scale = max_norm / report.grad_norm;
    }

    if (m_.empty()) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const Matrix* p : params) {
            m_.emplace_back(p->rows(), p->cols());
            v_.emplace_back(p->rows(), p->cols());
        }
    } else if (m_.size() != params.size()) {
        throw_error(ErrorKind::contract, "adam: parameter set changed between steps");
    }

    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i];
        Matrix& m = m_[i];
        Matrix& v = v_[i];
        const real_t* g = grads[i].data();
        real_t* pd = p.data();
        real_t* md = m.data();
        real_t* vd = v.data();
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = static_cast<double>(g[k]) * report.clip_scale;
            md[k] = static_cast<real_t>(beta1_ * md[k] + (1.0 - beta1_) * gk);
            vd[k] = static_cast<real_t>(beta2_ * vd[k] + (1.0 - beta2_) * gk * gk);
            const double mhat = md[k] / bc1;
            const double vhat = vd[k] / bc2;
            pd[k] -= static_cast<real_t>(lr * mhat / (std::sqrt(vhat) + eps_));
        }
    }
    report.applied = true;
    return report;
}

inline void AdamOptimizer::restore(std::vector<Matrix> m, std::vector<Matrix> v, long step) {
    m_ = std::move(m);
    v_ = std::move(v);
    step_ = step;
}

}  // namespace smedit
