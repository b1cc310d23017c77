#pragma once
// Run configuration: one flat INI-style file, one section per module.
// Parsing is strict. Unknown sections, unknown keys, duplicate keys and
// malformed values are all hard errors, so a typo never trains silently
// with a default. Keys the file omits keep their defaults; the [train]
// keys lr, epochs, batch and optimizer fall back to per-stage defaults.

#include <charconv>
#include <cstdint>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sepkit/data.hpp"
#include "sepkit/network.hpp"
#include "sepkit/optim.hpp"
#include "sepkit/pipeline.hpp"
#include "sepkit/precondition.hpp"
#include "sepkit/schedule.hpp"

namespace sepkit {

enum class SamplerKind { Det, Edm, CdOnestep, CdMultistep };

inline const char* sampler_kind_name(SamplerKind k) {
    switch (k) {
        case SamplerKind::Det: return "det";
        case SamplerKind::Edm: return "edm";
        case SamplerKind::CdOnestep: return "cd-onestep";
        case SamplerKind::CdMultistep: return "cd-multistep";
    }
    throw std::logic_error("bad sampler kind");
}

inline SamplerKind parse_sampler_kind(const std::string& s) {
    if (s == "det") return SamplerKind::Det;
    if (s == "edm") return SamplerKind::Edm;
    if (s == "cd-onestep") return SamplerKind::CdOnestep;
    if (s == "cd-multistep") return SamplerKind::CdMultistep;
    throw std::domain_error("unknown sampler '" + s +
                            "' (expected det, edm, cd-onestep or cd-multistep)");
}

struct SamplerConfig {
    SamplerKind kind = SamplerKind::Edm;
    int steps = 5;
    int correction = 2;
    double sigma_max = 0.01;
    double s_churn = 20.0;
    std::vector<int> sweep_steps = {1, 2, 4};
    std::vector<double> sweep_sigma_max = {0.001, 0.004, 0.01, 0.0374, 0.1, 0.2495,
                                           0.6,   1.0,   4.0,  10.0,   30.0, 80.0};

    void validate() const {
        if (steps < 1) throw std::domain_error("sampler steps must be >= 1");
        if (correction < 1) throw std::domain_error("correction passes must be >= 1");
        if (!(sigma_max > 0.0)) throw std::domain_error("sampler sigma_max must be positive");
        if (!(s_churn >= 0.0)) throw std::domain_error("s_churn must be non-negative");
        if (sweep_steps.empty() || sweep_sigma_max.empty())
            throw std::domain_error("sweep grids must be non-empty");
        for (int s : sweep_steps)
            if (s < 1) throw std::domain_error("sweep steps entries must be >= 1");
        for (double s : sweep_sigma_max)
            if (!(s > 0.0)) throw std::domain_error("sweep sigma_max entries must be positive");
    }
};

struct RunConfig {
    NoiseSchedule schedule;
    EdmPrecondConfig precond;
    UNetConfig net;
    DatasetConfig data;
    int64_t eval_window = 1024;
    int64_t eval_hop = 512;

    double lr = 1e-4;
    int epochs = 50;
    int batch = 8;
    OptimConfig::Kind optimizer = OptimConfig::Kind::Adam;
    uint64_t train_seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double ema_mu = 0.999;
    int h_max = 17;
    double lambda_dsm = 1.0;
    LogNormalSigma sigma_dist;

    SamplerConfig sampler;

    // fully qualified "section.key" names the file set explicitly
    std::set<std::string> given;

    bool has(const std::string& full_key) const { return given.count(full_key) != 0; }

    void validate() const {
        schedule.validate();
        precond.validate();
        net.validate();
        data.validate();
        sampler.validate();
        sigma_dist.validate();
        if (eval_window < 1 || eval_hop < 1)
            throw std::domain_error("evaluation window and hop must be positive");
        int64_t stride = net.total_stride();
        if (data.chunk_len % stride != 0)
            throw std::domain_error("chunk_len must be divisible by the network stride");
        if (eval_window % stride != 0)
            throw std::domain_error("eval_window must be divisible by the network stride");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline double parse_f64(const std::string& v, const std::string& key) {
    double x = 0.0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), x);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size() || !std::isfinite(x))
        throw std::domain_error("bad number for " + key + ": '" + v + "'");
    return x;
}

inline int64_t parse_i64(const std::string& v, const std::string& key) {
    int64_t x = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), x);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
        throw std::domain_error("bad integer for " + key + ": '" + v + "'");
    return x;
}

inline uint64_t parse_u64(const std::string& v, const std::string& key) {
    uint64_t x = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), x);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
        throw std::domain_error("bad unsigned integer for " + key + ": '" + v + "'");
    return x;
}

inline int parse_int(const std::string& v, const std::string& key) {
    int64_t x = parse_i64(v, key);
    if (x < INT32_MIN || x > INT32_MAX)
        throw std::domain_error("integer out of range for " + key + ": '" + v + "'");
    return static_cast<int>(x);
}

inline std::vector<std::string> split_list(const std::string& v, const std::string& key) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t comma = v.find(',', start);
        std::string item = trim(comma == std::string::npos ? v.substr(start)
                                                           : v.substr(start, comma - start));
        if (item.empty()) throw std::domain_error("empty list entry for " + key);
        out.push_back(item);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline OptimConfig::Kind parse_optimizer(const std::string& v, const std::string& key) {
    if (v == "adam") return OptimConfig::Kind::Adam;
    if (v == "radam") return OptimConfig::Kind::RAdam;
    throw std::domain_error("unknown optimizer for " + key + ": '" + v +
                            "' (expected adam or radam)");
}

inline void apply_key(RunConfig& rc, const std::string& sec, const std::string& key,
                      const std::string& val, const std::string& full) {
    auto unknown = [&]() -> void { throw std::domain_error("unknown key " + full); };
    if (sec == "schedule") {
        if (key == "sigma_min") rc.schedule.sigma_min = parse_f64(val, full);
        else if (key == "sigma_max") rc.schedule.sigma_max = parse_f64(val, full);
        else if (key == "rho") rc.schedule.rho = parse_f64(val, full);
        else if (key == "T") rc.schedule.T = parse_int(val, full);
        else unknown();
    } else if (sec == "precondition") {
        if (key == "sigma_data") rc.precond.sigma_data = parse_f64(val, full);
        else unknown();
    } else if (sec == "network") {
        if (key == "levels") rc.net.levels = parse_int(val, full);
        else if (key == "channels") {
            rc.net.channels.clear();
            for (const std::string& item : split_list(val, full))
                rc.net.channels.push_back(parse_int(item, full));
        } else if (key == "kernel") rc.net.kernel = parse_int(val, full);
        else if (key == "downsample") rc.net.downsample = parse_int(val, full);
        else if (key == "cond_dim") rc.net.cond_dim = parse_int(val, full);
        else if (key == "num_sources") rc.net.num_sources = parse_int(val, full);
        else unknown();
    } else if (sec == "data") {
        if (key == "sample_rate") rc.data.sample_rate = parse_int(val, full);
        else if (key == "chunk_len") rc.data.chunk_len = parse_i64(val, full);
        else if (key == "train") rc.data.train = parse_i64(val, full);
        else if (key == "val") rc.data.val = parse_i64(val, full);
        else if (key == "test") rc.data.test = parse_i64(val, full);
        else if (key == "seed") rc.data.seed = parse_u64(val, full);
        else if (key == "eval_window") rc.eval_window = parse_i64(val, full);
        else if (key == "eval_hop") rc.eval_hop = parse_i64(val, full);
        else unknown();
    } else if (sec == "train") {
        if (key == "lr") rc.lr = parse_f64(val, full);
        else if (key == "epochs") rc.epochs = parse_int(val, full);
        else if (key == "batch") rc.batch = parse_int(val, full);
        else if (key == "optimizer") rc.optimizer = parse_optimizer(val, full);
        else if (key == "seed") rc.train_seed = parse_u64(val, full);
        else if (key == "beta1") rc.beta1 = parse_f64(val, full);
        else if (key == "beta2") rc.beta2 = parse_f64(val, full);
        else if (key == "eps") rc.eps = parse_f64(val, full);
        else if (key == "ema_mu") rc.ema_mu = parse_f64(val, full);
        else if (key == "h_max") rc.h_max = parse_int(val, full);
        else if (key == "lambda_dsm") rc.lambda_dsm = parse_f64(val, full);
        else if (key == "p_mean") rc.sigma_dist.p_mean = parse_f64(val, full);
        else if (key == "p_std") rc.sigma_dist.p_std = parse_f64(val, full);
        else unknown();
    } else if (sec == "sampler") {
        if (key == "kind") rc.sampler.kind = parse_sampler_kind(val);
        else if (key == "steps") rc.sampler.steps = parse_int(val, full);
        else if (key == "correction") rc.sampler.correction = parse_int(val, full);
        else if (key == "sigma_max") rc.sampler.sigma_max = parse_f64(val, full);
        else if (key == "s_churn") rc.sampler.s_churn = parse_f64(val, full);
        else if (key == "sweep_steps") {
            rc.sampler.sweep_steps.clear();
            for (const std::string& item : split_list(val, full))
                rc.sampler.sweep_steps.push_back(parse_int(item, full));
        } else if (key == "sweep_sigma_max") {
            rc.sampler.sweep_sigma_max.clear();
            for (const std::string& item : split_list(val, full))
                rc.sampler.sweep_sigma_max.push_back(parse_f64(item, full));
        } else unknown();
    } else {
        throw std::domain_error("unknown section [" + sec + "]");
    }
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    RunConfig rc;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        std::string at = " at line " + std::to_string(lineno);
        if (t.front() == '[') {
            if (t.back() != ']' || t.size() < 3)
                throw std::domain_error("malformed section header" + at);
            section = detail::trim(t.substr(1, t.size() - 2));
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos) throw std::domain_error("expected key = value" + at);
        std::string key = detail::trim(t.substr(0, eq));
        std::string val = detail::trim(t.substr(eq + 1));
        if (section.empty())
            throw std::domain_error("key '" + key + "' appears before any section" + at);
        if (key.empty()) throw std::domain_error("missing key name" + at);
        if (val.empty()) throw std::domain_error("empty value for " + section + "." + key + at);
        std::string full = section + "." + key;
        if (!rc.given.insert(full).second) throw std::domain_error("duplicate key " + full + at);
        detail::apply_key(rc, section, key, val, full);
    }
    rc.validate();
    return rc;
}

// Builds the stage's training configuration: per-stage defaults for lr,
// epochs, batch and optimizer unless the file pinned them, everything else
// straight from the resolved run configuration.
inline TrainConfig train_config(const RunConfig& rc, TrainConfig::Stage stage) {
    TrainConfig c = stage_defaults(stage);
    c.net = rc.net;
    c.precond = rc.precond;
    c.sigma_min = rc.schedule.sigma_min;
    c.sigma_max = rc.schedule.sigma_max;
    c.rho = rc.schedule.rho;
    c.t_distill = rc.schedule.T;
    c.seed = rc.train_seed;
    c.beta1 = rc.beta1;
    c.beta2 = rc.beta2;
    c.eps = rc.eps;
    c.ema_mu = rc.ema_mu;
    c.h_max = rc.h_max;
    c.lambda_dsm = rc.lambda_dsm;
    c.sigma_dist = rc.sigma_dist;
    if (rc.has("train.lr")) c.lr = rc.lr;
    if (rc.has("train.epochs")) c.epochs = rc.epochs;
    if (rc.has("train.batch")) c.batch = rc.batch;
    if (rc.has("train.optimizer")) c.optimizer = rc.optimizer;
    c.validate();
    return c;
}

// Copy of the run configuration with the stage's effective training values
// written back, so the echoed file reparses to exactly what the run used.
inline RunConfig resolved_for(const RunConfig& rc, TrainConfig::Stage stage) {
    TrainConfig t = train_config(rc, stage);
    RunConfig out = rc;
    out.lr = t.lr;
    out.epochs = t.epochs;
    out.batch = t.batch;
    out.optimizer = t.optimizer;
    out.given.insert("train.lr");
    out.given.insert("train.epochs");
    out.given.insert("train.batch");
    out.given.insert("train.optimizer");
    return out;
}

inline std::string serialize_run_config(const RunConfig& rc) {
    std::ostringstream out;
    out << "[schedule]\n";
    out << "sigma_min = " << fmt_double(rc.schedule.sigma_min) << "\n";
    out << "sigma_max = " << fmt_double(rc.schedule.sigma_max) << "\n";
    out << "rho = " << fmt_double(rc.schedule.rho) << "\n";
    out << "T = " << rc.schedule.T << "\n\n";

    out << "[precondition]\n";
    out << "sigma_data = " << fmt_double(rc.precond.sigma_data) << "\n\n";

    out << "[network]\n";
    out << "levels = " << rc.net.levels << "\n";
    out << "channels = ";
    for (size_t i = 0; i < rc.net.channels.size(); ++i)
        out << (i ? "," : "") << rc.net.channels[i];
    out << "\n";
    out << "kernel = " << rc.net.kernel << "\n";
    out << "downsample = " << rc.net.downsample << "\n";
    out << "cond_dim = " << rc.net.cond_dim << "\n";
    out << "num_sources = " << rc.net.num_sources << "\n\n";

    out << "[data]\n";
    out << "sample_rate = " << rc.data.sample_rate << "\n";
    out << "chunk_len = " << rc.data.chunk_len << "\n";
    out << "train = " << rc.data.train << "\n";
    out << "val = " << rc.data.val << "\n";
    out << "test = " << rc.data.test << "\n";
    out << "seed = " << rc.data.seed << "\n";
    out << "eval_window = " << rc.eval_window << "\n";
    out << "eval_hop = " << rc.eval_hop << "\n\n";

    out << "[train]\n";
    out << "lr = " << fmt_double(rc.lr) << "\n";
    out << "epochs = " << rc.epochs << "\n";
    out << "batch = " << rc.batch << "\n";
    out << "optimizer = " << (rc.optimizer == OptimConfig::Kind::Adam ? "adam" : "radam") << "\n";
    out << "seed = " << rc.train_seed << "\n";
    out << "beta1 = " << fmt_double(rc.beta1) << "\n";
    out << "beta2 = " << fmt_double(rc.beta2) << "\n";
    out << "eps = " << fmt_double(rc.eps) << "\n";
    out << "ema_mu = " << fmt_double(rc.ema_mu) << "\n";
    out << "h_max = " << rc.h_max << "\n";
    out << "lambda_dsm = " << fmt_double(rc.lambda_dsm) << "\n";
    out << "p_mean = " << fmt_double(rc.sigma_dist.p_mean) << "\n";
    out << "p_std = " << fmt_double(rc.sigma_dist.p_std) << "\n\n";

    out << "[sampler]\n";
    out << "kind = " << sampler_kind_name(rc.sampler.kind) << "\n";
    out << "steps = " << rc.sampler.steps << "\n";
    out << "correction = " << rc.sampler.correction << "\n";
    out << "sigma_max = " << fmt_double(rc.sampler.sigma_max) << "\n";
    out << "s_churn = " << fmt_double(rc.sampler.s_churn) << "\n";
    out << "sweep_steps = ";
    for (size_t i = 0; i < rc.sampler.sweep_steps.size(); ++i)
        out << (i ? "," : "") << rc.sampler.sweep_steps[i];
    out << "\n";
    out << "sweep_sigma_max = ";
    for (size_t i = 0; i < rc.sampler.sweep_sigma_max.size(); ++i)
        out << (i ? "," : "") << fmt_double(rc.sampler.sweep_sigma_max[i]);
    out << "\n";
    return out.str();
}

}  // namespace sepkit
