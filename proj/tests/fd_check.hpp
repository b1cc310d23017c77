#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "sepkit/rng.hpp"
#include "sepkit/tape.hpp"

namespace fd {

// Rebuilds the graph from scratch for every probe so central differences see
// a pure function of the inputs.
using Builder =
    std::function<double(const std::vector<sepkit::Tensor>&, sepkit::Tape*, std::vector<int>*)>;

inline double eval(const Builder& build, const std::vector<sepkit::Tensor>& inputs) {
    return build(inputs, nullptr, nullptr);
}

inline void check_gradients(const Builder& build, std::vector<sepkit::Tensor> inputs, int probes,
                            sepkit::Rng& rng, double tol = 1e-4) {
    sepkit::Tape tape;
    std::vector<int> ids;
    build(inputs, &tape, &ids);

    for (int p = 0; p < probes; ++p) {
        size_t which =
            static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(inputs.size()) - 1));
        size_t entry = static_cast<size_t>(rng.uniform_int(0, inputs[which].numel() - 1));
        const double h = 1e-4;
        std::vector<sepkit::Tensor> plus = inputs, minus = inputs;
        plus[which].data[entry] += h;
        minus[which].data[entry] -= h;
        double fd = (eval(build, plus) - eval(build, minus)) / (2.0 * h);
        double an = tape.grad(ids[which]).data[entry];
        if (std::abs(fd) > 1e-7)
            REQUIRE_THAT(an, Catch::Matchers::WithinRel(fd, tol));
        else
            REQUIRE_THAT(an, Catch::Matchers::WithinAbs(fd, 1e-7));
    }
}

inline sepkit::Tensor random_tensor(std::vector<int64_t> shape, sepkit::Rng& rng) {
    sepkit::Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal();
    return t;
}

}  // namespace fd
