#pragma once

#include <stdexcept>
#include <vector>

#include "sepkit/precondition.hpp"
#include "sepkit/samplers.hpp"
#include "sepkit/schedule.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

// Batch losses carry both the scalar objective and its per-sample breakdown.
struct LossValue {
    double scalar = 0.0;
    std::vector<double> per_sample;
};

inline LossValue finalize_loss(std::vector<double> per) {
    if (per.empty()) throw std::invalid_argument("loss needs at least one sample");
    LossValue v;
    double s = 0.0;
    for (double x : per) s += x;
    v.scalar = s / static_cast<double>(per.size());
    v.per_sample = std::move(per);
    return v;
}

// Extractor objective: squared error averaged over elements, then over the batch.
inline LossValue det_loss(const std::vector<Tensor>& est, const std::vector<Tensor>& tgt) {
    if (est.size() != tgt.size()) throw std::invalid_argument("batch size mismatch");
    std::vector<double> per;
    for (size_t i = 0; i < est.size(); ++i) {
        require_same_shape(est[i], tgt[i], "loss operands");
        double s = 0.0;
        for (int64_t k = 0; k < est[i].numel(); ++k) {
            double d = est[i].data[static_cast<size_t>(k)] - tgt[i].data[static_cast<size_t>(k)];
            s += d * d;
        }
        per.push_back(s / static_cast<double>(est[i].numel()));
    }
    return finalize_loss(per);
}

// Unweighted denoising error at one noise level: sum of squares against the
// clean signal, no averaging.
template <typename D>
double denoise_sq_error(D&& den, const Tensor& x0, const Tensor& eps, double sigma) {
    require_same_shape(x0, eps, "noise draw");
    if (sigma < 0.0) throw std::domain_error("sigma must be non-negative");
    Tensor xt(x0.shape);
    for (int64_t i = 0; i < x0.numel(); ++i) {
        size_t k = static_cast<size_t>(i);
        xt.data[k] = x0.data[k] + sigma * eps.data[k];
    }
    Tensor dh = den(xt, sigma);
    require_same_shape(dh, x0, "denoiser output");
    double s = 0.0;
    for (int64_t i = 0; i < x0.numel(); ++i) {
        size_t k = static_cast<size_t>(i);
        double d = dh.data[k] - x0.data[k];
        s += d * d;
    }
    return s;
}

// Score-matching objective: per-sample weighted sum of squares, batch mean.
template <typename D>
LossValue dsm_loss(D&& den, const std::vector<Tensor>& x0, const std::vector<Tensor>& eps,
                   const std::vector<double>& sigmas, const EdmPrecondConfig& pc) {
    if (x0.size() != eps.size() || x0.size() != sigmas.size())
        throw std::invalid_argument("batch size mismatch");
    std::vector<double> per;
    for (size_t i = 0; i < x0.size(); ++i)
        per.push_back(dsm_weight(sigmas[i], pc) * denoise_sq_error(den, x0[i], eps[i], sigmas[i]));
    return finalize_loss(per);
}

// Consistency objective for one sample: the student's output at (x_t, sigma_t)
// must match the frozen-average student applied after the teacher walks h
// solver steps down the grid to sigma_{t-h}.
template <typename Stu, typename Sg, typename Tea>
double cd_sample_loss(Stu&& student, Sg&& sg_student, Tea&& teacher, const Tensor& x0,
                      const Tensor& eps, const NoiseSchedule& sched, int t, int h) {
    sched.validate();
    if (t < 2 || t > sched.T) throw std::out_of_range("t must lie in [2, T]");
    if (h < 1 || h > t - 1) throw std::out_of_range("h must lie in [1, t-1]");
    require_same_shape(x0, eps, "noise draw");
    double st = karras_sigma(t, sched);
    double sth = karras_sigma(t - h, sched);
    Tensor xt(x0.shape);
    for (int64_t i = 0; i < x0.numel(); ++i) {
        size_t k = static_cast<size_t>(i);
        xt.data[k] = x0.data[k] + st * eps.data[k];
    }
    Tensor pred = student(xt, st);
    require_same_shape(pred, x0, "student output");
    Tensor hop = heun_solve(teacher, xt, sched, t, t - h);
    Tensor tgt = sg_student(hop, sth);
    require_same_shape(tgt, x0, "target output");
    double s = 0.0;
    for (int64_t i = 0; i < x0.numel(); ++i) {
        size_t k = static_cast<size_t>(i);
        double d = pred.data[k] - tgt.data[k];
        s += d * d;
    }
    return s;
}

template <typename Stu, typename Sg, typename Tea>
LossValue cd_loss(Stu&& student, Sg&& sg_student, Tea&& teacher, const std::vector<Tensor>& x0,
                  const std::vector<Tensor>& eps, const NoiseSchedule& sched,
                  const std::vector<int>& ts, const std::vector<int>& hs) {
    if (x0.size() != eps.size() || x0.size() != ts.size() || x0.size() != hs.size())
        throw std::invalid_argument("batch size mismatch");
    std::vector<double> per;
    for (size_t i = 0; i < x0.size(); ++i)
        per.push_back(cd_sample_loss(student, sg_student, teacher, x0[i], eps[i], sched, ts[i], hs[i]));
    return finalize_loss(per);
}

// total = a + lambda * b, per sample and in the mean.
inline LossValue combine_losses(const LossValue& a, const LossValue& b, double lambda) {
    if (a.per_sample.size() != b.per_sample.size())
        throw std::invalid_argument("loss batch sizes differ");
    std::vector<double> per(a.per_sample.size());
    for (size_t i = 0; i < per.size(); ++i) per[i] = a.per_sample[i] + lambda * b.per_sample[i];
    return finalize_loss(std::move(per));
}

}  // namespace sepkit
