#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <string>

#include "sepkit/common.hpp"
#include "sepkit/optim.hpp"

using namespace sepkit;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Parameters probe_params() {
    Parameters p;
    Tensor w({3});
    w.data = {0.2, -0.1, 0.7};
    p.t["w"] = w;
    return p;
}

// Gradient of 0.5(w0-1)^2 + (w1+0.5)^2 + 0.15 w2^2 at the current iterate.
GradMap probe_grads(const Parameters& p) {
    const Tensor& w = p.t.at("w");
    Tensor g({3});
    g.data = {w.data[0] - 1.0, 2.0 * (w.data[1] + 0.5), 0.3 * w.data[2]};
    return {{"w", g}};
}

void run_steps(Optimizer& opt, Parameters& p, int n) {
    for (int i = 0; i < n; ++i) opt.step(p, probe_grads(p));
}

}  // namespace

TEST_CASE("adam follows the reference trajectory", "[optim]") {
    OptimConfig cfg;
    cfg.kind = OptimConfig::Kind::Adam;
    cfg.lr = 1e-3;
    cfg.quantize = false;
    Parameters p = probe_params();
    Optimizer opt(cfg, p);
    run_steps(opt, p, 8);
    const auto& w = p.t.at("w").data;
    CHECK_THAT(w[0], WithinRel(0.20799786702626627, 1e-12));
    CHECK_THAT(w[1], WithinRel(-0.10799569425038852, 1e-12));
    CHECK_THAT(w[2], WithinRel(0.6920024411946053, 1e-12));
    CHECK(opt.steps() == 8);
}

TEST_CASE("radam switches from plain momentum to rectified updates", "[optim]") {
    OptimConfig cfg;
    cfg.kind = OptimConfig::Kind::RAdam;
    cfg.lr = 1e-3;
    cfg.quantize = false;
    Parameters p = probe_params();
    Optimizer opt(cfg, p);

    run_steps(opt, p, 4);
    {
        const auto& w = p.t.at("w").data;
        CHECK_THAT(w[0], WithinRel(0.20319741846516129, 1e-12));
        CHECK_THAT(w[1], WithinRel(-0.10319483820391361, 1e-12));
        CHECK_THAT(w[2], WithinRel(0.69916020333097606, 1e-12));
    }
    run_steps(opt, p, 1);
    {
        const auto& w = p.t.at("w").data;
        CHECK_THAT(w[0], WithinRel(0.2032147263507002, 1e-12));
        CHECK_THAT(w[1], WithinRel(-0.10321214242869746, 1e-12));
        CHECK_THAT(w[2], WithinRel(0.69914289290932208, 1e-12));
    }
    run_steps(opt, p, 3);
    {
        const auto& w = p.t.at("w").data;
        CHECK_THAT(w[0], WithinRel(0.20331199602926819, 1e-12));
        CHECK_THAT(w[1], WithinRel(-0.10330938326746848, 1e-12));
        CHECK_THAT(w[2], WithinRel(0.69904560357116641, 1e-12));
    }
}

TEST_CASE("float32 state stays near the double trajectory and exactly representable", "[optim]") {
    for (auto kind : {OptimConfig::Kind::Adam, OptimConfig::Kind::RAdam}) {
        OptimConfig cfg;
        cfg.kind = kind;
        cfg.lr = 1e-3;
        cfg.quantize = true;
        Parameters p = probe_params();
        Optimizer opt(cfg, p);
        run_steps(opt, p, 8);
        const auto& w = p.t.at("w").data;
        if (kind == OptimConfig::Kind::Adam) {
            CHECK_THAT(w[0], WithinRel(0.20799786702626627, 1e-5));
            CHECK_THAT(w[1], WithinRel(-0.10799569425038852, 1e-5));
            CHECK_THAT(w[2], WithinRel(0.6920024411946053, 1e-5));
        } else {
            CHECK_THAT(w[0], WithinRel(0.20331199602926819, 1e-5));
            CHECK_THAT(w[1], WithinRel(-0.10330938326746848, 1e-5));
            CHECK_THAT(w[2], WithinRel(0.69904560357116641, 1e-5));
        }
        for (double x : w) CHECK(x == quantize_f32(x));
        for (double x : opt.first_moments().at("w").data) CHECK(x == quantize_f32(x));
        for (double x : opt.second_moments().at("w").data) CHECK(x == quantize_f32(x));
    }
}

TEST_CASE("zero learning rate moves nothing but still accumulates moments", "[optim]") {
    OptimConfig cfg;
    cfg.lr = 0.0;
    Parameters p;
    Tensor w({3});
    w.data = {0.25, -0.125, 0.5};
    p.t["w"] = w;
    Optimizer opt(cfg, p);
    run_steps(opt, p, 3);
    CHECK(p.t.at("w").data[0] == 0.25);
    CHECK(p.t.at("w").data[1] == -0.125);
    CHECK(p.t.at("w").data[2] == 0.5);
    CHECK(opt.first_moments().at("w").data[0] != 0.0);
}

TEST_CASE("parameters outside the trained set are frozen by construction", "[optim]") {
    Parameters all;
    Tensor a({2}), b({2});
    a.data = {1.0, 2.0};
    b.data = {3.0, 4.0};
    all.t["a"] = a;
    all.t["b"] = b;

    Parameters trained;
    trained.t["a"] = a;
    OptimConfig cfg;
    cfg.lr = 1e-2;
    Optimizer opt(cfg, trained);

    Tensor ga({2});
    ga.data = {0.5, -0.5};
    opt.step(all, {{"a", ga}});
    CHECK(all.t.at("b").data[0] == 3.0);
    CHECK(all.t.at("b").data[1] == 4.0);
    CHECK(all.t.at("a").data[0] != 1.0);
    CHECK(opt.first_moments().count("b") == 0);

    CHECK_THROWS_AS(opt.step(all, {{"a", ga}, {"b", ga}}), std::invalid_argument);
    CHECK_THROWS_AS(opt.step(all, {}), std::invalid_argument);
    Tensor bad({3});
    CHECK_THROWS_AS(opt.step(all, {{"a", bad}}), std::invalid_argument);
}

TEST_CASE("restored state continues the run bitwise", "[optim]") {
    OptimConfig cfg;
    cfg.kind = OptimConfig::Kind::RAdam;
    cfg.lr = 1e-3;

    Parameters ref = probe_params();
    Optimizer full(cfg, ref);
    run_steps(full, ref, 5);

    Parameters p = probe_params();
    Optimizer first(cfg, p);
    run_steps(first, p, 3);
    auto m = first.first_moments();
    auto v = first.second_moments();
    int64_t t = first.steps();

    Optimizer second(cfg, p);
    second.restore(m, v, t);
    run_steps(second, p, 2);

    for (int i = 0; i < 3; ++i) CHECK(p.t.at("w").data[i] == ref.t.at("w").data[i]);
    CHECK(second.steps() == 5);
}

TEST_CASE("restore rejects mismatched state", "[optim]") {
    Parameters p = probe_params();
    Optimizer opt(OptimConfig{}, p);
    auto m = opt.first_moments();
    auto v = opt.second_moments();

    std::map<std::string, Tensor> renamed = {{"x", m.at("w")}};
    CHECK_THROWS_AS(opt.restore(renamed, v, 1), std::invalid_argument);
    std::map<std::string, Tensor> reshaped = {{"w", Tensor({4})}};
    CHECK_THROWS_AS(opt.restore(reshaped, v, 1), std::invalid_argument);
    CHECK_THROWS_AS(opt.restore(m, v, -1), std::invalid_argument);
    CHECK_NOTHROW(opt.restore(m, v, 0));
}

TEST_CASE("both optimizers descend a quadratic", "[optim]") {
    for (auto kind : {OptimConfig::Kind::Adam, OptimConfig::Kind::RAdam}) {
        OptimConfig cfg;
        cfg.kind = kind;
        cfg.lr = 1e-2;
        Parameters p = probe_params();
        Optimizer opt(cfg, p);
        auto loss = [&] {
            const auto& w = p.t.at("w").data;
            return 0.5 * (w[0] - 1.0) * (w[0] - 1.0) + (w[1] + 0.5) * (w[1] + 0.5) +
                   0.15 * w[2] * w[2];
        };
        double before = loss();
        double best = before;
        for (int i = 0; i < 400; ++i) {
            opt.step(p, probe_grads(p));
            best = std::min(best, loss());
        }
        CHECK(best < 0.01 * before);
        CHECK(loss() < before);
    }
}

TEST_CASE("optimizer config validation", "[optim]") {
    Parameters p = probe_params();
    OptimConfig cfg;
    cfg.lr = -1.0;
    CHECK_THROWS_AS(Optimizer(cfg, p), std::domain_error);
    cfg = OptimConfig{};
    cfg.beta1 = 1.0;
    CHECK_THROWS_AS(Optimizer(cfg, p), std::domain_error);
    cfg = OptimConfig{};
    cfg.beta2 = -0.1;
    CHECK_THROWS_AS(Optimizer(cfg, p), std::domain_error);
    cfg = OptimConfig{};
    cfg.eps = 0.0;
    CHECK_THROWS_AS(Optimizer(cfg, p), std::domain_error);
}
