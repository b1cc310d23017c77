#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sepkit/rng.hpp"
#include "sepkit/schedule.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

// One second-order step of the probability-flow ODE from sigma_a down to
// sigma_b. The final step to sigma_b == 0 degenerates to Euler, so a full
// T-step solve costs 2T - 1 denoiser calls.
template <typename D>
Tensor heun_step(D&& den, const Tensor& x, double sigma_a, double sigma_b) {
    if (!(sigma_a > 0.0) || sigma_b < 0.0 || sigma_b >= sigma_a)
        throw std::invalid_argument("step requires 0 <= sigma_b < sigma_a");
    Tensor g1 = den(x, sigma_a);
    require_same_shape(g1, x, "denoiser output");
    double h = sigma_b - sigma_a;
    Tensor d1(x.shape), xe(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        size_t k = static_cast<size_t>(i);
        d1.data[k] = (x.data[k] - g1.data[k]) / sigma_a;
        xe.data[k] = x.data[k] + h * d1.data[k];
    }
    if (sigma_b == 0.0) return xe;
    Tensor g2 = den(xe, sigma_b);
    require_same_shape(g2, x, "denoiser output");
    Tensor out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        size_t k = static_cast<size_t>(i);
        double d2 = (xe.data[k] - g2.data[k]) / sigma_b;
        out.data[k] = x.data[k] + h * 0.5 * (d1.data[k] + d2);
    }
    return out;
}

// Integrates along the discrete grid from step t_from down to t_to; t_to == 0
// continues past sigma(1) to zero noise.
template <typename D>
Tensor heun_solve(D&& den, Tensor x, const NoiseSchedule& sched, int t_from, int t_to) {
    sched.validate();
    if (t_from < 1 || t_from > sched.T || t_to < 0 || t_to >= t_from)
        throw std::out_of_range("solve range must satisfy 0 <= t_to < t_from <= T");
    for (int t = t_from; t > t_to; --t) {
        double sa = karras_sigma(t, sched);
        double sb = (t - 1 == 0) ? 0.0 : karras_sigma(t - 1, sched);
        x = heun_step(den, x, sa, sb);
    }
    return x;
}

// Stochastic first-order solver with churn-and-correct rounds. With zero
// churn and a single round it reduces, bit for bit, to the Euler chain. Noise
// is only drawn when the corresponding amplitude is live, so the zero-churn
// path leaves the generator untouched.
template <typename D>
Tensor edm_solve(D&& den, Tensor x, const NoiseSchedule& sched, int correction, double s_churn,
                 Rng& rng) {
    sched.validate();
    if (correction < 1) throw std::invalid_argument("correction rounds must be >= 1");
    if (s_churn < 0.0) throw std::invalid_argument("churn must be non-negative");
    double gamma = std::min(s_churn / static_cast<double>(sched.T), std::sqrt(2.0) - 1.0);
    for (int t = sched.T; t >= 1; --t) {
        double st = karras_sigma(t, sched);
        double sprev = (t == 1) ? 0.0 : karras_sigma(t - 1, sched);
        for (int r = 1; r <= correction; ++r) {
            double shat = st * (gamma + 1.0);
            Tensor xc = x;
            if (gamma > 0.0) {
                double amp = std::sqrt(shat * shat - st * st);
                for (auto& v : xc.data) v += amp * rng.normal();
            }
            Tensor g = den(xc, shat);
            require_same_shape(g, x, "denoiser output");
            for (int64_t i = 0; i < x.numel(); ++i) {
                size_t k = static_cast<size_t>(i);
                x.data[k] = xc.data[k] + (sprev - shat) * (xc.data[k] - g.data[k]) / shat;
            }
            if (r < correction) {
                double amp2 = st * st - sprev * sprev;
                double amp = amp2 > 0.0 ? std::sqrt(amp2) : 0.0;
                for (auto& v : x.data) v += amp * rng.normal();
            }
        }
    }
    return x;
}

// Single-call consistency sampling: jump to max noise around the extractor
// estimate and let the student map straight back.
template <typename D>
Tensor cd_onestep(D&& student, const Tensor& x_det, double sigma_max, Rng& rng) {
    if (!(sigma_max > 0.0)) throw std::domain_error("sigma_max must be positive");
    Tensor x = x_det;
    for (auto& v : x.data) v += sigma_max * rng.normal();
    Tensor out = student(x, sigma_max);
    require_same_shape(out, x_det, "student output");
    return out;
}

// Multi-call refinement on a fresh grid of `steps` noise levels: denoise,
// re-noise to the next level down, repeat, then settle at the floor.
template <typename D>
Tensor cd_multistep(D&& student, const Tensor& x_det, const NoiseSchedule& sched, int steps,
                    Rng& rng) {
    sched.validate();
    if (steps < 2) throw std::domain_error("multistep sampling needs at least 2 levels");
    NoiseSchedule grid{sched.sigma_min, sched.sigma_max, sched.rho, steps};
    Tensor x = x_det;
    double top = karras_sigma(steps, grid);
    for (auto& v : x.data) v += top * rng.normal();
    for (int t = steps; t >= 2; --t) {
        x = student(x, std::max(karras_sigma(t, grid), grid.sigma_min));
        require_same_shape(x, x_det, "student output");
        double sprev = karras_sigma(t - 1, grid);
        double amp2 = sprev * sprev - grid.sigma_min * grid.sigma_min;
        double amp = amp2 > 0.0 ? std::sqrt(amp2) : 0.0;
        for (auto& v : x.data) v += amp * rng.normal();
    }
    Tensor out = student(x, std::max(karras_sigma(1, grid), grid.sigma_min));
    require_same_shape(out, x_det, "student output");
    return out;
}

}  // namespace sepkit
