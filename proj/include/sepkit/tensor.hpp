#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace sepkit {

// Rank-tagged contiguous array of doubles. Audio chunks, feature maps and
// parameters all use this one type; layout is row-major.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> sh) : shape(std::move(sh)), data(count(shape), 0.0) {}
    Tensor(std::vector<int64_t> sh, std::vector<double> d) : shape(std::move(sh)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != count(shape))
            throw std::invalid_argument("tensor data length does not match shape");
    }

    static int64_t count(const std::vector<int64_t>& sh) {
        int64_t n = 1;
        for (int64_t d : sh) {
            if (d < 0) throw std::invalid_argument("negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int64_t> sh) const {
        if (count(sh) != numel()) throw std::invalid_argument("reshape changes element count");
        return Tensor(std::move(sh), data);
    }

    void fill(double v) { for (auto& x : data) x = v; }

    double rms() const {
        if (data.empty()) return 0.0;
        double s = 0.0;
        for (double v : data) s += v * v;
        return std::sqrt(s / static_cast<double>(data.size()));
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace sepkit
