#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "sepkit/common.hpp"
#include "sepkit/network.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

using GradMap = std::map<std::string, Tensor>;

struct OptimConfig {
    enum class Kind { Adam, RAdam };
    Kind kind = Kind::Adam;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool quantize = true;  // keep all persistent state exactly float32

    void validate() const {
        if (!(lr >= 0.0)) throw std::domain_error("learning rate must be non-negative");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw std::domain_error("betas must lie in [0, 1)");
        if (!(eps > 0.0)) throw std::domain_error("eps must be positive");
    }
};

// First/second-moment optimizer over a named parameter subset. Moments exist
// only for the parameters passed at construction; everything else is frozen
// by omission and a gradient for it is an error.
class Optimizer {
  public:
    Optimizer(const OptimConfig& cfg, const Parameters& trained) : cfg_(cfg) {
        cfg_.validate();
        for (const auto& [k, p] : trained.t) {
            m_[k] = Tensor(p.shape);
            v_[k] = Tensor(p.shape);
        }
    }

    void step(Parameters& params, const GradMap& grads) {
        for (const auto& [k, g] : grads)
            if (!m_.count(k)) throw std::invalid_argument("no optimizer state for " + k);
        for (const auto& [k, m] : m_)
            if (!grads.count(k)) throw std::invalid_argument("gradient missing for " + k);

        ++t_;
        double b1t = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double b2t = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

        bool rectified = true;
        double r = 1.0;
        if (cfg_.kind == OptimConfig::Kind::RAdam) {
            double rho_inf = 2.0 / (1.0 - cfg_.beta2) - 1.0;
            double rho_t = rho_inf - 2.0 * static_cast<double>(t_) *
                                         std::pow(cfg_.beta2, static_cast<double>(t_)) / b2t;
            rectified = rho_t > 4.0;
            if (rectified)
                r = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                              ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
        }

        for (auto& [k, m] : m_) {
            const Tensor& g = grads.at(k);
            Tensor& v = v_[k];
            Tensor& p = params.at(k);
            require_same_shape(g, p, "gradient");
            for (int64_t i = 0; i < p.numel(); ++i) {
                size_t j = static_cast<size_t>(i);
                double gi = g.data[j];
                double mi = cfg_.beta1 * m.data[j] + (1.0 - cfg_.beta1) * gi;
                double vi = cfg_.beta2 * v.data[j] + (1.0 - cfg_.beta2) * gi * gi;
                double mh = mi / b1t;
                double pi;
                if (cfg_.kind == OptimConfig::Kind::Adam)
                    pi = p.data[j] - cfg_.lr * mh / (std::sqrt(vi / b2t) + cfg_.eps);
                else if (rectified)
                    pi = p.data[j] - cfg_.lr * r * mh / (std::sqrt(vi / b2t) + cfg_.eps);
                else
                    pi = p.data[j] - cfg_.lr * mh;
                if (cfg_.quantize) {
                    mi = quantize_f32(mi);
                    vi = quantize_f32(vi);
                    pi = quantize_f32(pi);
                }
                m.data[j] = mi;
                v.data[j] = vi;
                p.data[j] = pi;
            }
        }
    }

    int64_t steps() const { return t_; }
    double lr() const { return cfg_.lr; }
    const std::map<std::string, Tensor>& first_moments() const { return m_; }
    const std::map<std::string, Tensor>& second_moments() const { return v_; }

    // Reinstalls persisted state; key sets and shapes must match construction.
    void restore(const std::map<std::string, Tensor>& m, const std::map<std::string, Tensor>& v,
                 int64_t t) {
        if (t < 0) throw std::invalid_argument("negative step counter");
        auto check = [&](const std::map<std::string, Tensor>& stored,
                         const std::map<std::string, Tensor>& mine) {
            if (stored.size() != mine.size())
                throw std::invalid_argument("optimizer state key sets differ");
            auto a = stored.begin();
            auto b = mine.begin();
            for (; a != stored.end(); ++a, ++b)
                if (a->first != b->first || a->second.shape != b->second.shape)
                    throw std::invalid_argument("optimizer state mismatch at " + a->first);
        };
        check(m, m_);
        check(v, v_);
        m_ = m;
        v_ = v;
        t_ = t;
    }

  private:
    OptimConfig cfg_;
    std::map<std::string, Tensor> m_, v_;
    int64_t t_ = 0;
};

}  // namespace sepkit
