#pragma once

#include <cmath>
#include <stdexcept>

#include "sepkit/tensor.hpp"

namespace sepkit {

struct EdmPrecondConfig {
    double sigma_data = 0.2;

    void validate() const {
        if (!(sigma_data > 0.0)) throw std::domain_error("sigma_data must be positive");
    }
};

struct CdPrecondConfig {
    double sigma_data = 0.2;
    double sigma_min = 1e-4;

    void validate() const {
        if (!(sigma_data > 0.0)) throw std::domain_error("sigma_data must be positive");
        if (!(sigma_min > 0.0)) throw std::domain_error("sigma_min must be positive");
    }
};

struct EdmCoeffs {
    double c_skip, c_out, c_in, c_noise;
};

inline EdmCoeffs edm_coeffs(double sigma, const EdmPrecondConfig& cfg) {
    cfg.validate();
    if (!(sigma > 0.0)) throw std::domain_error("sigma must be positive");
    double sd2 = cfg.sigma_data * cfg.sigma_data;
    double s2 = sigma * sigma;
    EdmCoeffs c;
    c.c_skip = sd2 / (s2 + sd2);
    c.c_out = sigma * cfg.sigma_data / std::sqrt(sd2 + s2);
    c.c_in = 1.0 / std::sqrt(s2 + sd2);
    c.c_noise = std::log(sigma) / 4.0;
    return c;
}

struct CdCoeffs {
    double c_skip, c_out;
};

// Boundary-preserving coefficients: exactly (1, 0) at sigma_min so the wrapped
// network is the identity there.
inline CdCoeffs cd_coeffs(double sigma, const CdPrecondConfig& cfg) {
    cfg.validate();
    if (sigma < cfg.sigma_min) throw std::domain_error("sigma below sigma_min");
    double sd2 = cfg.sigma_data * cfg.sigma_data;
    double d = sigma - cfg.sigma_min;
    CdCoeffs c;
    c.c_skip = sd2 / (d * d + sd2);
    c.c_out = cfg.sigma_data * d / std::sqrt(sd2 + sigma * sigma);
    return c;
}

inline double dsm_weight(double sigma, const EdmPrecondConfig& cfg) {
    cfg.validate();
    if (!(sigma > 0.0)) throw std::domain_error("sigma must be positive");
    double sd2 = cfg.sigma_data * cfg.sigma_data;
    double s2 = sigma * sigma;
    return (sd2 + s2) / (s2 * sd2);
}

// raw is called as raw(c_in * x, c_noise) and must return a tensor of x's shape.
template <class Raw>
Tensor edm_wrap(Raw&& raw, const Tensor& x, double sigma, const EdmPrecondConfig& cfg) {
    EdmCoeffs c = edm_coeffs(sigma, cfg);
    Tensor scaled = x;
    for (auto& v : scaled.data) v *= c.c_in;
    Tensor r = raw(scaled, c.c_noise);
    if (!r.same_shape(x)) throw std::invalid_argument("raw network output shape mismatch");
    Tensor y = x;
    for (int64_t i = 0; i < y.numel(); ++i)
        y.data[static_cast<size_t>(i)] = c.c_skip * x.data[static_cast<size_t>(i)] +
                                         c.c_out * r.data[static_cast<size_t>(i)];
    return y;
}

// Consistency wrapper: cd c_skip/c_out with the edm input scaling and noise embedding.
template <class Raw>
Tensor cd_wrap(Raw&& raw, const Tensor& x, double sigma, const CdPrecondConfig& cfg) {
    EdmPrecondConfig ecfg{cfg.sigma_data};
    EdmCoeffs ec = edm_coeffs(sigma, ecfg);
    CdCoeffs cc = cd_coeffs(sigma, cfg);
    Tensor scaled = x;
    for (auto& v : scaled.data) v *= ec.c_in;
    Tensor r = raw(scaled, ec.c_noise);
    if (!r.same_shape(x)) throw std::invalid_argument("raw network output shape mismatch");
    Tensor y = x;
    for (int64_t i = 0; i < y.numel(); ++i)
        y.data[static_cast<size_t>(i)] = cc.c_skip * x.data[static_cast<size_t>(i)] +
                                         cc.c_out * r.data[static_cast<size_t>(i)];
    return y;
}

}  // namespace sepkit
