#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sepkit/checkpoint.hpp"
#include "sepkit/data.hpp"
#include "sepkit/losses.hpp"
#include "sepkit/metrics.hpp"
#include "sepkit/network.hpp"
#include "sepkit/optim.hpp"
#include "sepkit/precondition.hpp"
#include "sepkit/rng.hpp"
#include "sepkit/samplers.hpp"
#include "sepkit/schedule.hpp"
#include "sepkit/tape.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

struct TrainConfig {
    enum class Stage { Det, Diff, Distill };
    Stage stage = Stage::Det;
    double lr = 1e-4;
    int epochs = 50;
    int batch = 8;
    uint64_t seed = 0;
    OptimConfig::Kind optimizer = OptimConfig::Kind::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double ema_mu = 0.999;
    int t_distill = 18;
    int h_max = 17;
    double lambda_dsm = 1.0;
    double sigma_min = 1e-4;
    double sigma_max = 10.0;
    double rho = 9.0;
    UNetConfig net;
    EdmPrecondConfig precond;
    LogNormalSigma sigma_dist;

    NoiseSchedule distill_sched() const {
        return NoiseSchedule{sigma_min, sigma_max, rho, t_distill};
    }

    void validate() const {
        if (!(lr > 0.0)) throw std::domain_error("learning rate must be positive");
        check_shared();
    }

    // The library accepts lr = 0 (a no-op optimizer is well defined); the
    // config entry point holds the stricter contract.
    void check_shared() const {
        if (lr < 0.0) throw std::domain_error("learning rate must be non-negative");
        if (epochs < 1) throw std::domain_error("epochs must be at least 1");
        if (batch < 1) throw std::domain_error("batch must be at least 1");
        if (stage == Stage::Distill && batch < 2)
            throw std::domain_error("distillation batch must be at least 2");
        if (ema_mu < 0.0 || ema_mu > 1.0) throw std::domain_error("ema_mu must lie in [0,1]");
        if (t_distill < 2) throw std::domain_error("t_distill must be at least 2");
        if (h_max < 1) throw std::domain_error("h_max must be at least 1");
        if (lambda_dsm < 0.0) throw std::domain_error("lambda_dsm must be non-negative");
        net.validate();
        precond.validate();
        distill_sched().validate();
    }
};

inline TrainConfig stage_defaults(TrainConfig::Stage st) {
    TrainConfig c;
    c.stage = st;
    switch (st) {
        case TrainConfig::Stage::Det:
            c.lr = 1e-4;
            c.epochs = 50;
            c.batch = 8;
            c.optimizer = OptimConfig::Kind::Adam;
            break;
        case TrainConfig::Stage::Diff:
            c.lr = 1e-4;
            c.epochs = 80;
            c.batch = 8;
            c.optimizer = OptimConfig::Kind::Adam;
            break;
        case TrainConfig::Stage::Distill:
            c.lr = 1e-5;
            c.epochs = 20;
            c.batch = 4;
            c.optimizer = OptimConfig::Kind::RAdam;
            break;
    }
    return c;
}

inline uint64_t stage_tag(TrainConfig::Stage st) {
    switch (st) {
        case TrainConfig::Stage::Det: return 1;
        case TrainConfig::Stage::Diff: return 2;
        case TrainConfig::Stage::Distill: return 3;
    }
    throw std::logic_error("unknown stage");
}

// The training stream is a pure function of (seed, stage), so a run can be
// replayed, and resumed runs splice into the same stream via the saved state.
inline Rng train_rng(const TrainConfig& cfg) {
    return Rng(Rng::derive(cfg.seed, {0x7261u, stage_tag(cfg.stage)}));
}

inline Rng validation_rng(const DatasetConfig& data, int64_t idx) {
    return Rng(Rng::derive(data.seed, {0x7641u, static_cast<uint64_t>(idx)}));
}

struct BatchItem {
    int64_t idx = 0;
    int s = 0;
    Example ex;
    double sigma = 0.0;   // diff noise level
    Tensor eps;           // diff / distill trajectory noise
    int t = 0;            // distill grid position
    int h = 0;            // distill teacher hop length
    double dsm_sigma = 0.0;
    Tensor dsm_eps;
};

inline Tensor normal_tensor(Rng& rng, int64_t n) {
    Tensor t({n});
    for (auto& v : t.data) v = rng.normal();
    return t;
}

// One minibatch worth of draws, in a committed order per stage, so a test can
// replay the stream and rebuild the identical batch.
inline std::vector<BatchItem> draw_batch(Rng& rng, const TrainConfig& cfg,
                                         const DatasetConfig& data) {
    if (data.train < 1) throw std::invalid_argument("training split is empty");
    std::vector<BatchItem> items(static_cast<size_t>(cfg.batch));
    for (auto& it : items) {
        it.idx = rng.uniform_int(data.train_begin(), data.train_end() - 1);
        it.s = static_cast<int>(rng.uniform_int(0, kNumSources - 1));
        switch (cfg.stage) {
            case TrainConfig::Stage::Det:
                break;
            case TrainConfig::Stage::Diff:
                it.sigma = sample_lognormal_sigma(rng, cfg.sigma_dist);
                it.eps = normal_tensor(rng, data.chunk_len);
                break;
            case TrainConfig::Stage::Distill:
                it.t = static_cast<int>(rng.uniform_int(2, cfg.t_distill));
                it.h = static_cast<int>(rng.uniform_int(1, std::min(cfg.h_max, it.t - 1)));
                it.eps = normal_tensor(rng, data.chunk_len);
                break;
        }
        it.ex = generate_example(data.seed, it.idx, data);
    }
    if (cfg.stage == TrainConfig::Stage::Distill) {
        std::vector<double> sig =
            sample_cd_batch_sigmas(rng, cfg.batch, cfg.sigma_dist, cfg.distill_sched());
        for (size_t i = 0; i < items.size(); ++i) {
            items[i].dsm_sigma = std::max(sig[i], cfg.sigma_min);
            items[i].dsm_eps = normal_tensor(rng, data.chunk_len);
        }
    }
    return items;
}

// Mean over distinct grid pairs of the squared distance between the model's
// outputs along one fixed noising trajectory. A perfectly self-consistent
// model maps every point of the trajectory to the same signal, giving zero.
template <typename G>
double self_consistency_gap(G&& g, const Tensor& x0, const Tensor& eps,
                            const NoiseSchedule& sched) {
    sched.validate();
    require_same_shape(x0, eps, "noise draw");
    if (sched.T < 2) throw std::invalid_argument("gap needs at least two grid points");
    std::vector<Tensor> outs;
    for (int t = 1; t <= sched.T; ++t) {
        double s = karras_sigma(t, sched);
        Tensor xt(x0.shape);
        for (int64_t i = 0; i < x0.numel(); ++i) {
            size_t k = static_cast<size_t>(i);
            xt.data[k] = x0.data[k] + s * eps.data[k];
        }
        outs.push_back(g(xt, s));
    }
    double acc = 0.0;
    int64_t pairs = 0;
    for (size_t a = 0; a < outs.size(); ++a)
        for (size_t b = a + 1; b < outs.size(); ++b) {
            require_same_shape(outs[a], outs[b], "model output");
            for (int64_t i = 0; i < outs[a].numel(); ++i) {
                size_t k = static_cast<size_t>(i);
                double d = outs[a].data[k] - outs[b].data[k];
                acc += d * d;
            }
            ++pairs;
        }
    return acc / static_cast<double>(pairs);
}

// Owns one training stage end to end: parameters, optimizer, rng stream, and
// snapshot/restore. A snapshot taken mid-run and restored continues the run
// bit for bit.
class Trainer {
  public:
    Trainer(const TrainConfig& cfg, const DatasetConfig& data)
        : cfg_(cfg), data_(data), rng_(train_rng(cfg)) {
        cfg_.check_shared();
        data_.validate();
        if (cfg_.stage != TrainConfig::Stage::Det)
            throw std::invalid_argument("this stage needs the previous stage's checkpoint");
        params_ = init_unet(cfg_.net, false, cfg_.seed);
        opt_.emplace(opt_config(), params_);
    }

    Trainer(const TrainConfig& cfg, const DatasetConfig& data, const Checkpoint& ck)
        : cfg_(cfg), data_(data), rng_(train_rng(cfg)) {
        cfg_.check_shared();
        data_.validate();
        CkptKind kind = checkpoint_kind(ck);
        switch (cfg_.stage) {
            case TrainConfig::Stage::Det:
                if (kind != CkptKind::Extractor)
                    throw std::invalid_argument("extractor training resumes only from an extractor snapshot");
                params_ = take_params(ck, "det");
                expect_topology(params_, false);
                resume_state(ck);
                break;
            case TrainConfig::Stage::Diff:
                if (kind == CkptKind::Extractor) {
                    det_ = take_params(ck, "det");
                    expect_topology(det_, false);
                    params_ = init_unet(cfg_.net, true, cfg_.seed);
                    opt_.emplace(opt_config(), params_);
                } else if (kind == CkptKind::Refiner) {
                    det_ = take_params(ck, "det");
                    expect_topology(det_, false);
                    params_ = take_params(ck, "score");
                    expect_topology(params_, true);
                    resume_state(ck);
                } else {
                    throw std::invalid_argument("refiner training needs an extractor or refiner checkpoint");
                }
                break;
            case TrainConfig::Stage::Distill:
                if (kind == CkptKind::Refiner) {
                    det_ = take_params(ck, "det");
                    teacher_ = take_params(ck, "score");
                    expect_topology(det_, false);
                    expect_topology(teacher_, true);
                    params_ = teacher_;
                    ema_ = teacher_;
                    opt_.emplace(opt_config(), params_);
                } else if (kind == CkptKind::Student) {
                    det_ = take_params(ck, "det");
                    teacher_ = take_params(ck, "teacher");
                    params_ = take_params(ck, "score");
                    ema_ = take_params(ck, "ema");
                    expect_topology(det_, false);
                    expect_topology(teacher_, true);
                    expect_topology(params_, true);
                    expect_topology(ema_, true);
                    resume_state(ck);
                } else {
                    throw std::invalid_argument("distillation needs a refiner or student checkpoint");
                }
                break;
        }
    }

    int64_t steps_per_epoch() const {
        return (data_.train + cfg_.batch - 1) / cfg_.batch;
    }
    int64_t total_steps() const { return steps_per_epoch() * cfg_.epochs; }
    int64_t steps_done() const { return opt_->steps(); }

    const Parameters& trained() const { return params_; }
    const Parameters& frozen_det() const {
        if (cfg_.stage == TrainConfig::Stage::Det) throw std::logic_error("no frozen extractor in this stage");
        return det_;
    }
    const Parameters& ema() const {
        if (cfg_.stage != TrainConfig::Stage::Distill) throw std::logic_error("ema exists only in distillation");
        return ema_;
    }

    double step() {
        std::vector<BatchItem> items = draw_batch(rng_, cfg_, data_);
        double loss = 0.0;
        switch (cfg_.stage) {
            case TrainConfig::Stage::Det: loss = det_step(items); break;
            case TrainConfig::Stage::Diff: loss = diff_step(items); break;
            case TrainConfig::Stage::Distill: loss = distill_step(items); break;
        }
        if (!std::isfinite(loss))
            throw std::runtime_error("training diverged at step " + std::to_string(steps_done()) +
                                     ": loss is not finite");
        return loss;
    }

    // Stage-appropriate validation probe over the val split with frozen,
    // per-example noise draws: plain reconstruction loss for the extractor,
    // weighted denoising loss for the refiner, self-consistency gap for the
    // student. Lower is better for all three.
    double validation_metric() {
        if (data_.val < 1) throw std::logic_error("validation split is empty");
        std::vector<double> per;
        for (int64_t idx = data_.val_begin(); idx < data_.val_end(); ++idx) {
            Example ex = generate_example(data_.seed, idx, data_);
            int s = static_cast<int>(idx % kNumSources);
            Rng vr = validation_rng(data_, idx);
            switch (cfg_.stage) {
                case TrainConfig::Stage::Det: {
                    DetOutput out = det_apply(params_, cfg_.net, ex.mix, s);
                    std::vector<Tensor> est{out.estimate}, tgt{ex.stems[static_cast<size_t>(s)]};
                    per.push_back(det_loss(est, tgt).scalar);
                    break;
                }
                case TrainConfig::Stage::Diff: {
                    double sigma = sample_lognormal_sigma(vr, cfg_.sigma_dist);
                    Tensor eps = normal_tensor(vr, data_.chunk_len);
                    DetOutput cond = det_apply(det_, cfg_.net, ex.mix, s);
                    EdmDenoiser den{&params_, &cfg_.net, cfg_.precond, s, &cond.feats};
                    per.push_back(dsm_weight(sigma, cfg_.precond) *
                                  denoise_sq_error(den, ex.stems[static_cast<size_t>(s)], eps, sigma) /
                                  static_cast<double>(data_.chunk_len));
                    break;
                }
                case TrainConfig::Stage::Distill: {
                    Tensor eps = normal_tensor(vr, data_.chunk_len);
                    DetOutput cond = det_apply(det_, cfg_.net, ex.mix, s);
                    CdDenoiser den{&params_, &cfg_.net, cd_precond(), s, &cond.feats};
                    per.push_back(self_consistency_gap(den, ex.stems[static_cast<size_t>(s)], eps,
                                                       cfg_.distill_sched()));
                    break;
                }
            }
        }
        double acc = 0.0;
        for (double v : per) acc += v;
        return acc / static_cast<double>(per.size());
    }

    Checkpoint snapshot() const {
        Checkpoint ck;
        CkptKind kind = CkptKind::Extractor;
        switch (cfg_.stage) {
            case TrainConfig::Stage::Det:
                put_params(ck, "det", params_);
                kind = CkptKind::Extractor;
                break;
            case TrainConfig::Stage::Diff:
                put_params(ck, "det", det_);
                put_params(ck, "score", params_);
                kind = CkptKind::Refiner;
                break;
            case TrainConfig::Stage::Distill:
                put_params(ck, "det", det_);
                put_params(ck, "teacher", teacher_);
                put_params(ck, "score", params_);
                put_params(ck, "ema", ema_);
                kind = CkptKind::Student;
                break;
        }
        put_params(ck, "opt.m", Parameters{opt_->first_moments()});
        put_params(ck, "opt.v", Parameters{opt_->second_moments()});
        ck.t["opt.t"] = encode_u64(static_cast<uint64_t>(opt_->steps()));
        stamp_meta(ck, kind, rng_.state());
        return ck;
    }

    CdPrecondConfig cd_precond() const {
        return CdPrecondConfig{cfg_.precond.sigma_data, cfg_.sigma_min};
    }

  private:
    OptimConfig opt_config() const {
        OptimConfig oc;
        oc.kind = cfg_.optimizer;
        oc.lr = cfg_.lr;
        oc.beta1 = cfg_.beta1;
        oc.beta2 = cfg_.beta2;
        oc.eps = cfg_.eps;
        return oc;
    }

    void expect_topology(const Parameters& p, bool score_variant) const {
        Parameters ref = init_unet(cfg_.net, score_variant, 0);
        if (!ref.same_keys_and_shapes(p))
            throw std::invalid_argument("checkpoint does not match the configured topology");
    }

    void resume_state(const Checkpoint& ck) {
        opt_.emplace(opt_config(), params_);
        Parameters m = take_params(ck, "opt.m");
        Parameters v = take_params(ck, "opt.v");
        auto it = ck.t.find("opt.t");
        if (it == ck.t.end()) throw std::runtime_error("checkpoint missing opt.t");
        opt_->restore(m.t, v.t, static_cast<int64_t>(decode_u64(it->second)));
        auto rit = ck.t.find("meta.rng");
        if (rit == ck.t.end()) throw std::runtime_error("checkpoint missing meta.rng");
        rng_.set_state(decode_rng_state(rit->second));
    }

    GradMap collect_grads(const Tape& tp, const ParamIds& ids) const {
        GradMap g;
        for (const auto& [k, id] : ids.id) g[k] = tp.grad(id);
        return g;
    }

    // The per-sample losses sum over elements; the trainer optimizes and
    // reports their per-element mean.
    double per_element(size_t batch) const {
        return 1.0 / (static_cast<double>(batch) * static_cast<double>(data_.chunk_len));
    }

    double det_step(const std::vector<BatchItem>& items) {
        Tape tp;
        ParamIds P = push_params(tp, params_, true);
        int total = -1;
        for (const BatchItem& it : items) {
            int x = tp.push(as_row(it.ex.mix), false);
            UNetGraph g = unet_forward(tp, P, cfg_.net, x,
                                       onehot_label(it.s, cfg_.net.num_sources), nullptr);
            int li = tp.mean_sq_diff(g.out, as_row(it.ex.stems[static_cast<size_t>(it.s)]));
            total = total < 0 ? li : tp.add(total, li);
        }
        int loss = tp.scale(1.0 / static_cast<double>(items.size()), total);
        tp.backward(loss);
        opt_->step(params_, collect_grads(tp, P));
        return tp.val(loss).data[0];
    }

    // Builds the preconditioned denoiser output as graph nodes: the network
    // sees the scaled input and noise embedding, the skip path closes over
    // the unscaled x_t.
    int taped_denoise(Tape& tp, const ParamIds& P, const BatchItem& it, const Tensor& x0,
                      const Tensor& eps, double sigma, double c_skip, double c_out,
                      const FeatureMaps& feats) {
        EdmCoeffs ec = edm_coeffs(sigma, cfg_.precond);
        Tensor xt(x0.shape);
        for (int64_t i = 0; i < x0.numel(); ++i) {
            size_t k = static_cast<size_t>(i);
            xt.data[k] = x0.data[k] + sigma * eps.data[k];
        }
        Tensor xs = xt;
        for (auto& v : xs.data) v *= ec.c_in;
        int xs_id = tp.push(as_row(xs), false);
        std::vector<int> finj;
        for (const Tensor& f : feats.lv) finj.push_back(tp.push(f, false));
        std::vector<double> cond = onehot_label(it.s, cfg_.net.num_sources);
        cond.push_back(ec.c_noise);
        UNetGraph g = unet_forward(tp, P, cfg_.net, xs_id, cond, &finj);
        int xt_id = tp.push(as_row(xt), false);
        return tp.axpby(c_skip, xt_id, c_out, g.out);
    }

    double diff_step(const std::vector<BatchItem>& items) {
        Tape tp;
        ParamIds P = push_params(tp, params_, true);
        int total = -1;
        for (const BatchItem& it : items) {
            const Tensor& x0 = it.ex.stems[static_cast<size_t>(it.s)];
            DetOutput cond = det_apply(det_, cfg_.net, it.ex.mix, it.s);
            EdmCoeffs ec = edm_coeffs(it.sigma, cfg_.precond);
            int den = taped_denoise(tp, P, it, x0, it.eps, it.sigma, ec.c_skip, ec.c_out,
                                    cond.feats);
            int li = tp.scale(dsm_weight(it.sigma, cfg_.precond),
                              tp.sum_sq_diff(den, as_row(x0)));
            total = total < 0 ? li : tp.add(total, li);
        }
        int loss = tp.scale(per_element(items.size()), total);
        tp.backward(loss);
        opt_->step(params_, collect_grads(tp, P));
        return tp.val(loss).data[0];
    }

    double distill_step(const std::vector<BatchItem>& items) {
        NoiseSchedule sched = cfg_.distill_sched();
        CdPrecondConfig cpc = cd_precond();
        Tape tp;
        ParamIds P = push_params(tp, params_, true);
        int total = -1;
        for (const BatchItem& it : items) {
            const Tensor& x0 = it.ex.stems[static_cast<size_t>(it.s)];
            DetOutput cond = det_apply(det_, cfg_.net, it.ex.mix, it.s);

            double st = karras_sigma(it.t, sched);
            double sth = karras_sigma(it.t - it.h, sched);
            Tensor xt(x0.shape);
            for (int64_t i = 0; i < x0.numel(); ++i) {
                size_t k = static_cast<size_t>(i);
                xt.data[k] = x0.data[k] + st * it.eps.data[k];
            }
            EdmDenoiser teacher{&teacher_, &cfg_.net, cfg_.precond, it.s, &cond.feats};
            Tensor hop = heun_solve(teacher, xt, sched, it.t, it.t - it.h);
            CdDenoiser sg{&ema_, &cfg_.net, cpc, it.s, &cond.feats};
            Tensor target = sg(hop, sth);

            CdCoeffs cc = cd_coeffs(st, cpc);
            int pred = taped_denoise(tp, P, it, x0, it.eps, st, cc.c_skip, cc.c_out, cond.feats);
            int cd_term = tp.sum_sq_diff(pred, as_row(target));

            CdCoeffs dc = cd_coeffs(it.dsm_sigma, cpc);
            int dsm_den = taped_denoise(tp, P, it, x0, it.dsm_eps, it.dsm_sigma, dc.c_skip,
                                        dc.c_out, cond.feats);
            int dsm_term = tp.scale(cfg_.lambda_dsm * dsm_weight(it.dsm_sigma, cfg_.precond),
                                    tp.sum_sq_diff(dsm_den, as_row(x0)));
            int li = tp.add(cd_term, dsm_term);
            total = total < 0 ? li : tp.add(total, li);
        }
        int loss = tp.scale(per_element(items.size()), total);
        tp.backward(loss);
        opt_->step(params_, collect_grads(tp, P));
        ema_update(ema_, params_, cfg_.ema_mu);
        return tp.val(loss).data[0];
    }

    TrainConfig cfg_;
    DatasetConfig data_;
    Parameters params_;
    Parameters det_;
    Parameters teacher_;
    Parameters ema_;
    std::optional<Optimizer> opt_;
    Rng rng_;
};

struct TrainLogRow {
    int64_t step;
    double loss;
    double lr;
};

struct TrainRun {
    Checkpoint final;
    std::vector<TrainLogRow> log;
    std::vector<std::pair<int64_t, double>> val;  // (step, validation metric)
};

inline TrainRun run_training(const TrainConfig& cfg, const DatasetConfig& data,
                             const Checkpoint* start = nullptr, std::ostream* sink = nullptr) {
    Trainer tr = start ? Trainer(cfg, data, *start) : Trainer(cfg, data);
    TrainRun run;
    int64_t total = tr.total_steps();
    int64_t per_epoch = tr.steps_per_epoch();
    while (tr.steps_done() < total) {
        double loss = tr.step();
        int64_t step = tr.steps_done();
        run.log.push_back({step, loss, cfg.lr});
        if (sink) *sink << step << " " << loss << " " << cfg.lr << "\n";
        if (data.val > 0 && step % per_epoch == 0)
            run.val.emplace_back(step, tr.validation_metric());
    }
    run.final = tr.snapshot();
    return run;
}

inline std::vector<Example> examples_in_range(const DatasetConfig& data, int64_t begin,
                                              int64_t end) {
    std::vector<Example> out;
    for (int64_t i = begin; i < end; ++i) out.push_back(generate_example(data.seed, i, data));
    return out;
}

// Inference-side views over a checkpoint. All three carry the extractor; the
// refiner and student add the score-topology weights they sample with.
struct ExtractorModel {
    UNetConfig net;
    Parameters det;
};

struct RefinerModel {
    UNetConfig net;
    Parameters det;
    Parameters score;
    EdmPrecondConfig pc;
};

struct StudentModel {
    UNetConfig net;
    Parameters det;
    Parameters score;  // the averaged student: what distillation ships
    CdPrecondConfig pc;
};

inline ExtractorModel load_extractor(const Checkpoint& ck, const UNetConfig& net) {
    ExtractorModel m{net, take_params(ck, "det")};
    return m;
}

inline RefinerModel load_refiner(const Checkpoint& ck, const UNetConfig& net,
                                 const EdmPrecondConfig& pc) {
    if (checkpoint_kind(ck) != CkptKind::Refiner)
        throw std::runtime_error("checkpoint does not hold a refiner");
    return RefinerModel{net, take_params(ck, "det"), take_params(ck, "score"), pc};
}

inline StudentModel load_student(const Checkpoint& ck, const UNetConfig& net,
                                 const CdPrecondConfig& pc) {
    if (checkpoint_kind(ck) != CkptKind::Student)
        throw std::runtime_error("checkpoint does not hold a student");
    return StudentModel{net, take_params(ck, "det"), take_params(ck, "ema"), pc};
}

inline Tensor extract_det(const ExtractorModel& m, const Tensor& mix, int s) {
    return det_apply(m.det, m.net, mix, s).estimate;
}

// Refinement starts from the deterministic estimate pushed up to the top of
// the noise schedule, then integrates back down with the stochastic solver.
inline Tensor extract_diff(const RefinerModel& m, const Tensor& mix, int s,
                           const NoiseSchedule& sched, int correction, double s_churn, Rng& rng) {
    DetOutput d = det_apply(m.det, m.net, mix, s);
    Tensor x = d.estimate;
    for (auto& v : x.data) v += sched.sigma_max * rng.normal();
    EdmDenoiser den{&m.score, &m.net, m.pc, s, &d.feats};
    return edm_solve(den, x, sched, correction, s_churn, rng);
}

inline Tensor extract_cd(const StudentModel& m, const Tensor& mix, int s,
                         const NoiseSchedule& sched, int steps, Rng& rng) {
    if (steps < 1) throw std::invalid_argument("steps must be at least 1");
    DetOutput d = det_apply(m.det, m.net, mix, s);
    CdDenoiser den{&m.score, &m.net, m.pc, s, &d.feats};
    if (steps == 1) return cd_onestep(den, d.estimate, sched.sigma_max, rng);
    return cd_multistep(den, d.estimate, sched, steps, rng);
}

struct SweepRow {
    double sigma_max;
    int steps;
    double si_sdri_avg;
};

enum class SweepSampler { Edm, CdMultistep };

struct EvalSettings {
    int64_t window = 1024;
    int64_t hop = 512;
    int sample_rate = 8000;
    double sigma_min = 1e-4;
    double rho = 9.0;
    int correction = 2;
    double s_churn = 20.0;
    uint64_t seed = 0;
};

inline Rng sweep_cell_rng(uint64_t seed, int steps, double sigma_max) {
    return Rng(Rng::derive(seed, {0x53edu, static_cast<uint64_t>(steps),
                                  std::bit_cast<uint64_t>(sigma_max)}));
}

// Cross-product sweep over (steps, sigma_max). The first row is the
// deterministic baseline, written as (0, 0, score) so downstream plots can
// draw it as a constant reference.
inline std::vector<SweepRow> sweep_rows(const Checkpoint& ck, SweepSampler sampler,
                                        const std::vector<int>& steps_grid,
                                        const std::vector<double>& sigma_grid,
                                        const std::vector<Example>& items, const UNetConfig& net,
                                        const EdmPrecondConfig& pc, const EvalSettings& es) {
    std::vector<SweepRow> rows;
    ExtractorModel base = load_extractor(ck, net);
    auto det_fn = [&](const Tensor& mix, int s) { return extract_det(base, mix, s); };
    EvalReport det_rep = evaluate_model(det_fn, items, es.window, es.hop, es.sample_rate);
    rows.push_back({0.0, 0, det_rep.avg_si_sdri});

    RefinerModel refiner;
    StudentModel student;
    if (sampler == SweepSampler::Edm)
        refiner = load_refiner(ck, net, pc);
    else
        student = load_student(ck, net, CdPrecondConfig{pc.sigma_data, es.sigma_min});

    for (int steps : steps_grid)
        for (double smax : sigma_grid) {
            NoiseSchedule sched{es.sigma_min, smax, es.rho, steps};
            sched.validate();
            Rng rng = sweep_cell_rng(es.seed, steps, smax);
            EvalReport rep;
            if (sampler == SweepSampler::Edm) {
                auto fn = [&](const Tensor& mix, int s) {
                    return extract_diff(refiner, mix, s, sched, es.correction, es.s_churn, rng);
                };
                rep = evaluate_model(fn, items, es.window, es.hop, es.sample_rate);
            } else {
                auto fn = [&](const Tensor& mix, int s) {
                    return extract_cd(student, mix, s, sched, steps, rng);
                };
                rep = evaluate_model(fn, items, es.window, es.hop, es.sample_rate);
            }
            rows.push_back({smax, steps, rep.avg_si_sdri});
        }
    return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "sigma_max,steps,si_sdri_avg\n";
    for (const SweepRow& r : rows)
        out += fmt_double(r.sigma_max) + "," + std::to_string(r.steps) + "," +
               fmt_double(r.si_sdri_avg) + "\n";
    return out;
}

}  // namespace sepkit
