#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sepkit/common.hpp"
#include "sepkit/precondition.hpp"
#include "sepkit/rng.hpp"
#include "sepkit/tape.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

struct UNetConfig {
    int levels = 3;
    std::vector<int> channels = {16, 32, 64};
    int kernel = 5;
    int downsample = 4;
    int cond_dim = 32;
    int num_sources = 4;

    void validate() const {
        if (levels < 1 || static_cast<int>(channels.size()) != levels)
            throw std::invalid_argument("channels list must have one entry per level");
        if (kernel % 2 != 1 || kernel < 1) throw std::invalid_argument("kernel must be odd");
        if (downsample < 1) throw std::invalid_argument("downsample must be >= 1");
        if (cond_dim < 1 || num_sources < 1) throw std::invalid_argument("bad conditioning dims");
    }

    int64_t total_stride() const {
        int64_t s = 1;
        for (int i = 0; i < levels; ++i) s *= downsample;
        return s;
    }
};

// Named parameter store with deterministic (lexicographic) iteration.
struct Parameters {
    std::map<std::string, Tensor> t;

    Tensor& at(const std::string& k) {
        auto it = t.find(k);
        if (it == t.end()) throw std::invalid_argument("missing parameter " + k);
        return it->second;
    }
    const Tensor& at(const std::string& k) const {
        auto it = t.find(k);
        if (it == t.end()) throw std::invalid_argument("missing parameter " + k);
        return it->second;
    }
    bool has(const std::string& k) const { return t.count(k) != 0; }

    int64_t count() const {
        int64_t n = 0;
        for (const auto& [k, v] : t) n += v.numel();
        return n;
    }

    void quantize_all() {
        for (auto& [k, v] : t)
            for (auto& x : v.data) x = quantize_f32(x);
    }

    bool same_keys_and_shapes(const Parameters& o) const {
        if (t.size() != o.t.size()) return false;
        auto a = t.begin();
        auto b = o.t.begin();
        for (; a != t.end(); ++a, ++b)
            if (a->first != b->first || a->second.shape != b->second.shape) return false;
        return true;
    }
};

// target <- mu * target + (1 - mu) * source, no gradient tracking.
inline void ema_update(Parameters& target, const Parameters& source, double mu) {
    if (mu < 0.0 || mu > 1.0) throw std::domain_error("ema mu must lie in [0,1]");
    if (!target.same_keys_and_shapes(source)) throw std::invalid_argument("ema parameter sets differ");
    auto a = target.t.begin();
    auto b = source.t.begin();
    for (; a != target.t.end(); ++a, ++b)
        for (int64_t i = 0; i < a->second.numel(); ++i) {
            size_t j = static_cast<size_t>(i);
            a->second.data[j] = quantize_f32(mu * a->second.data[j] + (1.0 - mu) * b->second.data[j]);
        }
}

// Per-level activations captured from the extractor's decoder, deepest level first.
struct FeatureMaps {
    std::vector<Tensor> lv;
};

namespace detail {

inline Tensor uniform_init(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Tensor w(std::move(shape));
    double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (auto& v : w.data) v = rng.uniform(-bound, bound);
    return w;
}

}  // namespace detail

// Weights for the shared encoder/decoder topology. The score variant adds the
// per-level feature-injection projections and one extra conditioning input for
// the noise embedding.
inline Parameters init_unet(const UNetConfig& cfg, bool score_variant, uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::derive(seed, {score_variant ? 2u : 1u}));
    Parameters p;
    int K = cfg.kernel;
    int cond_in = cfg.num_sources + (score_variant ? 1 : 0);

    auto conv = [&](const std::string& name, int co, int ci, int k) {
        p.t[name + ".w"] = detail::uniform_init({co, ci, k}, static_cast<int64_t>(ci) * k, rng);
        p.t[name + ".b"] = Tensor({co});
    };
    auto lin = [&](const std::string& name, int m, int n) {
        p.t[name + ".w"] = detail::uniform_init({m, n}, n, rng);
        p.t[name + ".b"] = Tensor({m});
    };

    for (int i = 0; i < cfg.levels; ++i) {
        int ci = i == 0 ? 1 : cfg.channels[static_cast<size_t>(i - 1)];
        conv("enc" + std::to_string(i), cfg.channels[static_cast<size_t>(i)], ci, K);
    }
    int top = cfg.channels[static_cast<size_t>(cfg.levels - 1)];
    conv("mid", top, top, K);
    for (int i = cfg.levels - 1; i >= 0; --i) {
        int ci = cfg.channels[static_cast<size_t>(i)];
        int co = i >= 1 ? cfg.channels[static_cast<size_t>(i - 1)] : cfg.channels[0];
        conv("dec" + std::to_string(i), co, ci, K);
        if (score_variant) conv("inj" + std::to_string(i), co, co, 1);
    }
    // zero-initialized output projection: the raw network starts as the zero map
    p.t["out.w"] = Tensor({1, cfg.channels[0], 1});
    p.t["out.b"] = Tensor({1});

    lin("emb0", cfg.cond_dim, cond_in);
    lin("emb1", cfg.cond_dim, cfg.cond_dim);
    for (int i = 0; i < cfg.levels; ++i) {
        lin("film.enc" + std::to_string(i), 2 * cfg.channels[static_cast<size_t>(i)], cfg.cond_dim);
        int co = i >= 1 ? cfg.channels[static_cast<size_t>(i - 1)] : cfg.channels[0];
        lin("film.dec" + std::to_string(i), 2 * co, cfg.cond_dim);
    }
    lin("film.mid", 2 * top, cfg.cond_dim);

    p.quantize_all();
    return p;
}

inline bool is_score_params(const Parameters& p) { return p.has("inj0.w"); }

struct ParamIds {
    std::map<std::string, int> id;
    int at(const std::string& k) const {
        auto it = id.find(k);
        if (it == id.end()) throw std::invalid_argument("missing parameter node " + k);
        return it->second;
    }
};

inline ParamIds push_params(Tape& tp, const Parameters& p, bool train) {
    ParamIds ids;
    for (const auto& [k, v] : p.t) ids.id[k] = tp.push(v, train);
    return ids;
}

inline std::vector<double> onehot_label(int label, int num_sources) {
    if (label < 0 || label >= num_sources) throw std::invalid_argument("label out of range");
    std::vector<double> v(static_cast<size_t>(num_sources), 0.0);
    v[static_cast<size_t>(label)] = 1.0;
    return v;
}

struct UNetGraph {
    int out = -1;                 // [1, N]
    std::vector<int> feat_ids;    // decoder activations, deepest first
};

// Builds the forward graph on the given tape. cond carries the one-hot label,
// plus the noise embedding value for the score variant. inject_ids, when
// present, are tape nodes holding extractor features to add per decoder level.
inline UNetGraph unet_forward(Tape& tp, const ParamIds& P, const UNetConfig& cfg, int input_id,
                              const std::vector<double>& cond,
                              const std::vector<int>* inject_ids) {
    cfg.validate();
    const Tensor& in = tp.val(input_id);
    if (in.shape.size() != 2 || in.shape[0] != 1)
        throw std::invalid_argument("network input must be [1, N]");
    if (in.shape[1] % cfg.total_stride() != 0)
        throw std::invalid_argument("input length must be divisible by the total stride");
    bool score_variant = P.id.count("inj0.w") != 0;
    size_t want_cond = static_cast<size_t>(cfg.num_sources + (score_variant ? 1 : 0));
    if (cond.size() != want_cond) throw std::invalid_argument("conditioning vector length mismatch");
    if (inject_ids && static_cast<int>(inject_ids->size()) != cfg.levels)
        throw std::invalid_argument("feature injection level count mismatch");

    int cvec = tp.push(Tensor({static_cast<int64_t>(cond.size())}, cond), false);
    int e = tp.linear(cvec, P.at("emb0.w"), P.at("emb0.b"));
    e = tp.silu(e);
    e = tp.linear(e, P.at("emb1.w"), P.at("emb1.b"));

    auto filmed = [&](int x, const std::string& site) {
        int gb = tp.linear(e, P.at("film." + site + ".w"), P.at("film." + site + ".b"));
        return tp.silu(tp.film(x, gb));
    };

    std::vector<int> skips;
    int h = input_id;
    for (int i = 0; i < cfg.levels; ++i) {
        std::string name = "enc" + std::to_string(i);
        h = tp.conv1d(h, P.at(name + ".w"), P.at(name + ".b"), cfg.downsample);
        h = filmed(h, name);
        skips.push_back(h);
    }
    h = tp.conv1d(h, P.at("mid.w"), P.at("mid.b"), 1);
    h = filmed(h, "mid");

    UNetGraph g;
    for (int i = cfg.levels - 1; i >= 0; --i) {
        std::string name = "dec" + std::to_string(i);
        h = tp.upsample_nearest(h, cfg.downsample);
        h = tp.conv1d(h, P.at(name + ".w"), P.at(name + ".b"), 1);
        if (i >= 1) h = tp.add(h, skips[static_cast<size_t>(i - 1)]);
        if (inject_ids) {
            std::string inj = "inj" + std::to_string(i);
            int f = (*inject_ids)[static_cast<size_t>(cfg.levels - 1 - i)];
            int proj = tp.conv1d(f, P.at(inj + ".w"), P.at(inj + ".b"), 1);
            h = tp.add(h, proj);
        }
        h = filmed(h, name);
        g.feat_ids.push_back(h);
    }
    g.out = tp.conv1d(h, P.at("out.w"), P.at("out.b"), 1);
    return g;
}

struct DetOutput {
    Tensor estimate;   // [N]
    FeatureMaps feats;
};

inline Tensor as_row(const Tensor& x) {
    if (x.shape.size() == 1) return x.reshaped({1, x.shape[0]});
    if (x.shape.size() == 2 && x.shape[0] == 1) return x;
    throw std::invalid_argument("expected a mono waveform");
}

// Deterministic extractor pass: estimate for one source plus the decoder
// features the refinement stages condition on.
inline DetOutput det_apply(const Parameters& p, const UNetConfig& cfg, const Tensor& mix, int label) {
    Tape tp;
    ParamIds ids = push_params(tp, p, false);
    int x = tp.push(as_row(mix), false);
    UNetGraph g = unet_forward(tp, ids, cfg, x, onehot_label(label, cfg.num_sources), nullptr);
    DetOutput out;
    out.estimate = tp.val(g.out).reshaped({tp.val(g.out).shape[1]});
    for (int f : g.feat_ids) out.feats.lv.push_back(tp.val(f));
    return out;
}

// Raw score core (no preconditioning): input is already c_in-scaled.
inline Tensor raw_core_apply(const Parameters& p, const UNetConfig& cfg, const Tensor& x_scaled,
                             double c_noise, int label, const FeatureMaps& feats) {
    if (static_cast<int>(feats.lv.size()) != cfg.levels)
        throw std::invalid_argument("feature maps missing for score network");
    Tape tp;
    ParamIds ids = push_params(tp, p, false);
    int x = tp.push(as_row(x_scaled), false);
    std::vector<int> finj;
    for (const Tensor& f : feats.lv) finj.push_back(tp.push(f, false));
    std::vector<double> cond = onehot_label(label, cfg.num_sources);
    cond.push_back(c_noise);
    UNetGraph g = unet_forward(tp, ids, cfg, x, cond, &finj);
    return tp.val(g.out).reshaped({tp.val(g.out).shape[1]});
}

// Denoiser callables used by the samplers; label and features are bound here.
struct EdmDenoiser {
    const Parameters* p;
    const UNetConfig* cfg;
    EdmPrecondConfig pc;
    int label;
    const FeatureMaps* feats;

    Tensor operator()(const Tensor& x, double sigma) const {
        auto raw = [&](const Tensor& xs, double cn) {
            return raw_core_apply(*p, *cfg, xs, cn, label, *feats);
        };
        return edm_wrap(raw, x, sigma, pc);
    }
};

struct CdDenoiser {
    const Parameters* p;
    const UNetConfig* cfg;
    CdPrecondConfig pc;
    int label;
    const FeatureMaps* feats;

    Tensor operator()(const Tensor& x, double sigma) const {
        auto raw = [&](const Tensor& xs, double cn) {
            return raw_core_apply(*p, *cfg, xs, cn, label, *feats);
        };
        return cd_wrap(raw, x, sigma, pc);
    }
};

}  // namespace sepkit
