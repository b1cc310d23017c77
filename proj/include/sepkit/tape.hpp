#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sepkit/tensor.hpp"

namespace sepkit {

// Reverse-mode tape over tensor-granularity ops. Each op computes its value
// eagerly and, when any input participates in differentiation, records a
// closure that scatters the output gradient back to the inputs. Values and
// gradients live on the tape and are addressed by node id.
class Tape {
public:
    int push(Tensor val, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(val), Tensor{}, requires_grad});
        Node& n = nodes_.back();
        if (requires_grad) n.grad = Tensor(n.val.shape);
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    const Tensor& grad(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) throw std::logic_error("node does not carry a gradient");
        return n.grad;
    }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // y[co][lo] = b[co] + sum_{ci,k} w[co][ci][k] * x[ci][lo*stride + k - K/2]
    // Zero padding, output length L / stride.
    int conv1d(int x, int w, int b, int stride) {
        const Tensor& xv = nodes_[static_cast<size_t>(x)].val;
        const Tensor& wv = nodes_[static_cast<size_t>(w)].val;
        const Tensor& bv = nodes_[static_cast<size_t>(b)].val;
        if (xv.shape.size() != 2 || wv.shape.size() != 3 || bv.shape.size() != 1)
            throw std::invalid_argument("conv1d expects x[C,L], w[Co,Ci,K], b[Co]");
        int64_t Ci = xv.shape[0], L = xv.shape[1];
        int64_t Co = wv.shape[0], K = wv.shape[2];
        if (wv.shape[1] != Ci || bv.shape[0] != Co)
            throw std::invalid_argument("conv1d channel mismatch");
        if (K % 2 != 1) throw std::invalid_argument("conv1d kernel must be odd");
        if (stride < 1 || L % stride != 0) throw std::invalid_argument("conv1d stride must divide length");
        int64_t Lo = L / stride;
        int64_t P = K / 2;

        Tensor y({Co, Lo});
        for (int64_t co = 0; co < Co; ++co) {
            double* yr = &y.data[static_cast<size_t>(co * Lo)];
            double bias = bv.data[static_cast<size_t>(co)];
            for (int64_t lo = 0; lo < Lo; ++lo) yr[lo] = bias;
            for (int64_t ci = 0; ci < Ci; ++ci) {
                const double* xr = &xv.data[static_cast<size_t>(ci * L)];
                const double* wr = &wv.data[static_cast<size_t>((co * Ci + ci) * K)];
                for (int64_t k = 0; k < K; ++k) {
                    double wk = wr[k];
                    int64_t off = k - P;
                    // need 0 <= lo*stride + off < L
                    int64_t lo_min = off < 0 ? (-off + stride - 1) / stride : 0;
                    int64_t lo_max = (L - 1 - off) / stride;  // inclusive
                    if (lo_max >= Lo) lo_max = Lo - 1;
                    for (int64_t lo = lo_min; lo <= lo_max; ++lo)
                        yr[lo] += wk * xr[lo * stride + off];
                }
            }
        }
        int out = push(std::move(y), any_grad({x, w, b}));
        if (nodes_[static_cast<size_t>(out)].requires_grad) {
            back_.push_back([this, x, w, b, out, Ci, Co, K, L, Lo, P, stride] {
                const Tensor& gy = nodes_[static_cast<size_t>(out)].grad;
                const Tensor& xv2 = nodes_[static_cast<size_t>(x)].val;
                const Tensor& wv2 = nodes_[static_cast<size_t>(w)].val;
                bool gx = nodes_[static_cast<size_t>(x)].requires_grad;
                bool gw = nodes_[static_cast<size_t>(w)].requires_grad;
                bool gb = nodes_[static_cast<size_t>(b)].requires_grad;
                if (gb) {
                    Tensor& dbv = nodes_[static_cast<size_t>(b)].grad;
                    for (int64_t co = 0; co < Co; ++co) {
                        const double* gr = &gy.data[static_cast<size_t>(co * Lo)];
                        double s = 0.0;
                        for (int64_t lo = 0; lo < Lo; ++lo) s += gr[lo];
                        dbv.data[static_cast<size_t>(co)] += s;
                    }
                }
                for (int64_t co = 0; co < Co && (gx || gw); ++co) {
                    const double* gr = &gy.data[static_cast<size_t>(co * Lo)];
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        const double* xr = &xv2.data[static_cast<size_t>(ci * L)];
                        const double* wr = &wv2.data[static_cast<size_t>((co * Ci + ci) * K)];
                        double* dxr = gx ? &nodes_[static_cast<size_t>(x)].grad
                                                .data[static_cast<size_t>(ci * L)]
                                         : nullptr;
                        double* dwr = gw ? &nodes_[static_cast<size_t>(w)].grad
                                                .data[static_cast<size_t>((co * Ci + ci) * K)]
                                         : nullptr;
                        for (int64_t k = 0; k < K; ++k) {
                            int64_t off = k - P;
                            int64_t lo_min = off < 0 ? (-off + stride - 1) / stride : 0;
                            int64_t lo_max = (L - 1 - off) / stride;
                            if (lo_max >= Lo) lo_max = Lo - 1;
                            if (gw) {
                                double s = 0.0;
                                for (int64_t lo = lo_min; lo <= lo_max; ++lo)
                                    s += gr[lo] * xr[lo * stride + off];
                                dwr[k] += s;
                            }
                            if (gx) {
                                double wk = wr[k];
                                for (int64_t lo = lo_min; lo <= lo_max; ++lo)
                                    dxr[lo * stride + off] += wk * gr[lo];
                            }
                        }
                    }
                }
            });
        }
        return out;
    }

    int upsample_nearest(int x, int factor) {
        const Tensor& xv = nodes_[static_cast<size_t>(x)].val;
        if (xv.shape.size() != 2) throw std::invalid_argument("upsample expects [C,L]");
        if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
        int64_t C = xv.shape[0], L = xv.shape[1], Lo = L * factor;
        Tensor y({C, Lo});
        for (int64_t c = 0; c < C; ++c) {
            const double* xr = &xv.data[static_cast<size_t>(c * L)];
            double* yr = &y.data[static_cast<size_t>(c * Lo)];
            for (int64_t l = 0; l < L; ++l)
                for (int64_t r = 0; r < factor; ++r) yr[l * factor + r] = xr[l];
        }
        int out = push(std::move(y), any_grad({x}));
        if (nodes_[static_cast<size_t>(out)].requires_grad) {
            back_.push_back([this, x, out, C, L, factor] {
                const Tensor& gy = nodes_[static_cast<size_t>(out)].grad;
                Tensor& gx = nodes_[static_cast<size_t>(x)].grad;
                int64_t Lo = L * factor;
                for (int64_t c = 0; c < C; ++c) {
                    const double* gr = &gy.data[static_cast<size_t>(c * Lo)];
                    double* dxr = &gx.data[static_cast<size_t>(c * L)];
                    for (int64_t l = 0; l < L; ++l) {
                        double s = 0.0;
                        for (int64_t r = 0; r < factor; ++r) s += gr[l * factor + r];
                        dxr[l] += s;
                    }
                }
            });
        }
        return out;
    }

    int add(int a, int b) { return axpby(1.0, a, 1.0, b); }

    // alpha * x + beta * y, elementwise
    int axpby(double alpha, int x, double beta, int y) {
        const Tensor& xv = nodes_[static_cast<size_t>(x)].val;
        const Tensor& yv = nodes_[static_cast<size_t>(y)].val;
        require_same_shape(xv, yv, "axpby");
        Tensor out_v = xv;
        for (int64_t i = 0; i < out_v.numel(); ++i)
            out_v.data[static_cast<size_t>(i)] =
                alpha * xv.data[static_cast<size_t>(i)] + beta * yv.data[static_cast<size_t>(i)];
        int out = push(std::move(out_v), any_grad({x, y}));
        if (nodes_[static_cast<size_t>(out)].requires_grad) {
            back_.push_back([this, x, y, out, alpha, beta] {
                const Tensor& g = nodes_[static_cast<size_t>(out)].grad;
                if (nodes_[static_cast<size_t>(x)].requires_grad) {
                    Tensor& gx = nodes_[static_cast<size_t>(x)].grad;
                    for (int64_t i = 0; i < g.numel(); ++i)
                        gx.data[static_cast<size_t>(i)] += alpha * g.data[static_cast<size_t>(i)];
                }
                if (nodes_[static_cast<size_t>(y)].requires_grad) {
                    Tensor& gy = nodes_[static_cast<size_t>(y)].grad;
                    for (int64_t i = 0; i < g.numel(); ++i)
                        gy.data[static_cast<size_t>(i)] += beta * g.data[static_cast<size_t>(i)];
                }
            });
        }
        return out;
    }

    int scale(double alpha, int x) {
        const Tensor& xv = nodes_[static_cast<size_t>(x)].val;
        Tensor out_v = xv;
        for (auto& v : out_v.data) v *= alpha;
        int out = push(std::move(out_v), any_grad({x}));
        if (nodes_[static_cast<size_t>(out)].requires_grad) {
            back_.push_back([this, x, out, alpha] {
                const Tensor& g = nodes_[static_cast<size_t>(out)].grad;
                Tensor& gx = nodes_[static_cast<size_t>(x)].grad;
                for (int64_t i = 0; i < g.numel(); ++i)
                    gx.data[static_cast<size_t>(i)] += alpha * g.data[static_cast<size_t>(i)];
            });
        }
        return out;
    }

    // x * sigmoid(x); the sigmoid values are cached for the backward pass.
    int silu(int x) {
        const Tensor& xv = nodes_[static_cast<size_t>(x)].val;
        std::vector<double> sig(xv.data.size());
        Tensor y = xv;
        for (size_t i = 0; i < xv.data.size(); ++i) {
            double s = 1.0 / (1.0 + std::exp(-xv.data[i]));
            sig[i] = s;
            y.data[i] = xv.data[i] * s;
        }
        int out = push(std::move(y), any_grad({x}));
        if (nodes_[static_cast<size_t>(out)].requires_grad) {
            back_.push_back([this, x, out, sig = std::move(sig)] {
                const Tensor& g = nodes_[static_cast<size_t>(out)].grad;
                const Tensor& xv2 = nodes_[static_cast<size_t>(x)].val;
                Tensor& gx = nodes_[static_cast<size_t>(x)].grad;
                for (size_t i = 0; i < sig.size(); ++i) {
                    double s = sig[i];
                    gx.data[i] += g.data[i] * (s * (1.0 + xv2.data[i] * (1.0 - s)));
                }
            });
        }
        return out;
    }

    // Per-channel affine modulation: y[c][l] = x[c][l] * (1 + gamma[c]) + beta[c],
    // with gamma = gb[0..C) and beta = gb[C..2C).
    int film(int x, int gb) {
        const Tensor& xv = nodes_[static_cast<size_t>(x)].val;
        const Tensor& gv = nodes_[static_cast<size_t>(gb)].val;
        if (xv.shape.size() != 2) throw std::invalid_argument("film expects x[C,L]");
        int64_t C = xv.shape[0], L = xv.shape[1];
        if (gv.numel() != 2 * C) throw std::invalid_argument("film expects 2C modulation values");
        Tensor y({C, L});
        for (int64_t c = 0; c < C; ++c) {
            double ga = 1.0 + gv.data[static_cast<size_t>(c)];
            double be = gv.data[static_cast<size_t>(C + c)];
            const double* xr = &xv.data[static_cast<size_t>(c * L)];
            double* yr = &y.data[static_cast<size_t>(c * L)];
            for (int64_t l = 0; l < L; ++l) yr[l] = xr[l] * ga + be;
        }
        int out = push(std::move(y), any_grad({x, gb}));
        if (nodes_[static_cast<size_t>(out)].requires_grad) {
            back_.push_back([this, x, gb, out, C, L] {
                const Tensor& g = nodes_[static_cast<size_t>(out)].grad;
                const Tensor& xv2 = nodes_[static_cast<size_t>(x)].val;
                const Tensor& gv2 = nodes_[static_cast<size_t>(gb)].val;
                bool need_x = nodes_[static_cast<size_t>(x)].requires_grad;
                bool need_g = nodes_[static_cast<size_t>(gb)].requires_grad;
                for (int64_t c = 0; c < C; ++c) {
                    const double* gr = &g.data[static_cast<size_t>(c * L)];
                    const double* xr = &xv2.data[static_cast<size_t>(c * L)];
                    if (need_x) {
                        double ga = 1.0 + gv2.data[static_cast<size_t>(c)];
                        double* dxr = &nodes_[static_cast<size_t>(x)].grad
                                           .data[static_cast<size_t>(c * L)];
                        for (int64_t l = 0; l < L; ++l) dxr[l] += gr[l] * ga;
                    }
                    if (need_g) {
                        Tensor& gg = nodes_[static_cast<size_t>(gb)].grad;
                        double sg = 0.0, sb = 0.0;
                        for (int64_t l = 0; l < L; ++l) {
                            sg += gr[l] * xr[l];
                            sb += gr[l];
                        }
                        gg.data[static_cast<size_t>(c)] += sg;
                        gg.data[static_cast<size_t>(C + c)] += sb;
                    }
                }
            });
        }
        return out;
    }

    // y = W x + b with x[n], W[m,n], b[m]
    int linear(int x, int w, int b) {
        const Tensor& xv = nodes_[static_cast<size_t>(x)].val;
        const Tensor& wv = nodes_[static_cast<size_t>(w)].val;
        const Tensor& bv = nodes_[static_cast<size_t>(b)].val;
        if (xv.shape.size() != 1 || wv.shape.size() != 2 || bv.shape.size() != 1)
            throw std::invalid_argument("linear expects x[n], w[m,n], b[m]");
        int64_t n = xv.shape[0], m = wv.shape[0];
        if (wv.shape[1] != n || bv.shape[0] != m) throw std::invalid_argument("linear shape mismatch");
        Tensor y({m});
        for (int64_t i = 0; i < m; ++i) {
            const double* wr = &wv.data[static_cast<size_t>(i * n)];
            double s = bv.data[static_cast<size_t>(i)];
            for (int64_t j = 0; j < n; ++j) s += wr[j] * xv.data[static_cast<size_t>(j)];
            y.data[static_cast<size_t>(i)] = s;
        }
        int out = push(std::move(y), any_grad({x, w, b}));
        if (nodes_[static_cast<size_t>(out)].requires_grad) {
            back_.push_back([this, x, w, b, out, n, m] {
                const Tensor& g = nodes_[static_cast<size_t>(out)].grad;
                const Tensor& xv2 = nodes_[static_cast<size_t>(x)].val;
                const Tensor& wv2 = nodes_[static_cast<size_t>(w)].val;
                if (nodes_[static_cast<size_t>(b)].requires_grad) {
                    Tensor& gb = nodes_[static_cast<size_t>(b)].grad;
                    for (int64_t i = 0; i < m; ++i)
                        gb.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
                }
                if (nodes_[static_cast<size_t>(w)].requires_grad) {
                    Tensor& gw = nodes_[static_cast<size_t>(w)].grad;
                    for (int64_t i = 0; i < m; ++i) {
                        double gi = g.data[static_cast<size_t>(i)];
                        double* gwr = &gw.data[static_cast<size_t>(i * n)];
                        for (int64_t j = 0; j < n; ++j) gwr[j] += gi * xv2.data[static_cast<size_t>(j)];
                    }
                }
                if (nodes_[static_cast<size_t>(x)].requires_grad) {
                    Tensor& gx = nodes_[static_cast<size_t>(x)].grad;
                    for (int64_t i = 0; i < m; ++i) {
                        double gi = g.data[static_cast<size_t>(i)];
                        const double* wr = &wv2.data[static_cast<size_t>(i * n)];
                        for (int64_t j = 0; j < n; ++j) gx.data[static_cast<size_t>(j)] += gi * wr[j];
                    }
                }
            });
        }
        return out;
    }

    // sum((x - target)^2) -> scalar node
    int sum_sq_diff(int x, Tensor target) {
        const Tensor& xv = nodes_[static_cast<size_t>(x)].val;
        require_same_shape(xv, target, "sum_sq_diff");
        double s = 0.0;
        for (int64_t i = 0; i < xv.numel(); ++i) {
            double d = xv.data[static_cast<size_t>(i)] - target.data[static_cast<size_t>(i)];
            s += d * d;
        }
        int out = push(Tensor({1}, {s}), any_grad({x}));
        if (nodes_[static_cast<size_t>(out)].requires_grad) {
            back_.push_back([this, x, out, target = std::move(target)] {
                double g = nodes_[static_cast<size_t>(out)].grad.data[0];
                const Tensor& xv2 = nodes_[static_cast<size_t>(x)].val;
                Tensor& gx = nodes_[static_cast<size_t>(x)].grad;
                for (int64_t i = 0; i < xv2.numel(); ++i)
                    gx.data[static_cast<size_t>(i)] +=
                        g * 2.0 * (xv2.data[static_cast<size_t>(i)] - target.data[static_cast<size_t>(i)]);
            });
        }
        return out;
    }

    int mean_sq_diff(int x, Tensor target) {
        int64_t n = nodes_[static_cast<size_t>(x)].val.numel();
        int s = sum_sq_diff(x, std::move(target));
        return scale(1.0 / static_cast<double>(n), s);
    }

    void backward(int loss) {
        Node& n = nodes_[static_cast<size_t>(loss)];
        if (n.val.numel() != 1) throw std::logic_error("backward needs a scalar loss");
        if (!n.requires_grad) throw std::logic_error("loss does not depend on any tracked input");
        if (back_.empty()) throw std::logic_error("backward called without a recorded forward");
        n.grad.data[0] = 1.0;
        for (auto it = back_.rbegin(); it != back_.rend(); ++it) (*it)();
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool requires_grad;
    };

    bool any_grad(std::initializer_list<int> ids) const {
        for (int id : ids)
            if (nodes_[static_cast<size_t>(id)].requires_grad) return true;
        return false;
    }

    std::vector<Node> nodes_;
    std::vector<std::function<void()>> back_;
};

}  // namespace sepkit
