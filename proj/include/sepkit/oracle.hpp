#pragma once

#include <cmath>
#include <stdexcept>

#include "sepkit/tensor.hpp"

namespace sepkit {

// Isotropic Gaussian clean-data model: x0 ~ N(mu0 * 1, s0^2 I). Everything a
// denoiser or probability-flow solver should produce has a closed form here,
// which makes samplers and losses testable without any trained network.
struct GaussianData {
    double mu0 = 0.0;
    double s0 = 1.0;

    void validate() const {
        if (!(s0 > 0.0)) throw std::domain_error("s0 must be positive");
    }
};

// Posterior mean E[x0 | x_t] for x_t = x0 + sigma * eps.
inline Tensor optimal_denoiser(const Tensor& xt, double sigma, const GaussianData& g) {
    g.validate();
    if (sigma < 0.0) throw std::domain_error("sigma must be nonnegative");
    double s02 = g.s0 * g.s0;
    double shrink = s02 / (s02 + sigma * sigma);
    Tensor y = xt;
    for (auto& v : y.data) v = g.mu0 + shrink * (v - g.mu0);
    return y;
}

// Exact probability-flow transport between noise levels for Gaussian marginals.
inline Tensor analytic_pfode_map(const Tensor& x, double sigma_from, double sigma_to,
                                 const GaussianData& g) {
    g.validate();
    if (sigma_from < 0.0 || sigma_to < 0.0) throw std::domain_error("sigma must be nonnegative");
    double s02 = g.s0 * g.s0;
    double scale = std::sqrt((s02 + sigma_to * sigma_to) / (s02 + sigma_from * sigma_from));
    Tensor y = x;
    for (auto& v : y.data) v = g.mu0 + scale * (v - g.mu0);
    return y;
}

// Expected unit-weight denoising loss (sum over d dimensions) at the optimum:
// the posterior variance d * sigma^2 s0^2 / (s0^2 + sigma^2).
inline double expected_dsm_loss(int64_t d, double sigma, const GaussianData& g) {
    g.validate();
    double s02 = g.s0 * g.s0;
    return static_cast<double>(d) * sigma * sigma * s02 / (s02 + sigma * sigma);
}

}  // namespace sepkit
