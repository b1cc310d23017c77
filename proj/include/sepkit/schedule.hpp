#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "sepkit/rng.hpp"

namespace sepkit {

// Discrete noise grid, increasing in t: sigma(1) = sigma_min, sigma(T) = sigma_max.
struct NoiseSchedule {
    double sigma_min = 1e-4;
    double sigma_max = 10.0;
    double rho = 9.0;
    int T = 18;

    void validate() const {
        if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
            throw std::domain_error("noise schedule requires 0 < sigma_min < sigma_max");
        if (!(rho > 0.0)) throw std::domain_error("rho must be positive");
        if (T < 1) throw std::domain_error("T must be >= 1");
    }
};

inline double karras_sigma(int t, const NoiseSchedule& sched) {
    sched.validate();
    if (t < 1 || t > sched.T) throw std::out_of_range("schedule step out of range");
    if (sched.T == 1) return sched.sigma_max;  // single-step grid starts at max noise
    double inv = 1.0 / sched.rho;
    double lo = std::pow(sched.sigma_min, inv);
    double hi = std::pow(sched.sigma_max, inv);
    double frac = static_cast<double>(t - 1) / static_cast<double>(sched.T - 1);
    return std::pow(lo + frac * (hi - lo), sched.rho);
}

inline std::vector<double> sigma_grid(const NoiseSchedule& sched) {
    std::vector<double> g(static_cast<size_t>(sched.T));
    for (int t = 1; t <= sched.T; ++t) g[static_cast<size_t>(t - 1)] = karras_sigma(t, sched);
    return g;
}

struct LogNormalSigma {
    double p_mean = -3.0;
    double p_std = 1.0;

    void validate() const {
        if (!(p_std > 0.0)) throw std::domain_error("p_std must be positive");
    }
};

inline double sample_lognormal_sigma(Rng& rng, const LogNormalSigma& cfg) {
    cfg.validate();
    return std::exp(cfg.p_mean + cfg.p_std * rng.normal());
}

// First ceil(batch/2) draws are lognormal, the rest come from uniform grid steps.
inline std::vector<double> sample_cd_batch_sigmas(Rng& rng, int batch, const LogNormalSigma& cfg,
                                                  const NoiseSchedule& sched) {
    if (batch < 2) throw std::domain_error("batch must be >= 2");
    std::vector<double> out(static_cast<size_t>(batch));
    int head = (batch + 1) / 2;
    for (int i = 0; i < head; ++i) out[static_cast<size_t>(i)] = sample_lognormal_sigma(rng, cfg);
    for (int i = head; i < batch; ++i) {
        int t = static_cast<int>(rng.uniform_int(1, sched.T));
        out[static_cast<size_t>(i)] = karras_sigma(t, sched);
    }
    return out;
}

}  // namespace sepkit
