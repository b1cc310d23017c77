#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "sepkit/losses.hpp"
#include "sepkit/pipeline.hpp"

using namespace sepkit;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

UNetConfig tiny_net() {
    UNetConfig n;
    n.levels = 2;
    n.channels = {3, 4};
    n.kernel = 3;
    n.downsample = 2;
    n.cond_dim = 5;
    n.num_sources = 4;
    return n;
}

DatasetConfig tiny_data() {
    DatasetConfig d;
    d.chunk_len = 64;
    d.train = 6;
    d.val = 2;
    d.test = 2;
    d.seed = 77;
    return d;
}

TrainConfig tiny_cfg(TrainConfig::Stage st) {
    TrainConfig c = stage_defaults(st);
    c.net = tiny_net();
    c.batch = 2;
    c.epochs = 1;
    c.seed = 5;
    c.t_distill = 6;
    c.h_max = 3;
    return c;
}

bool same_tensor(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

bool same_params(const Parameters& a, const Parameters& b) {
    if (!a.same_keys_and_shapes(b)) return false;
    auto x = a.t.begin();
    auto y = b.t.begin();
    for (; x != a.t.end(); ++x, ++y)
        if (!same_tensor(x->second, y->second)) return false;
    return true;
}

Checkpoint make_det_ck(int steps = 2) {
    Trainer tr(tiny_cfg(TrainConfig::Stage::Det), tiny_data());
    for (int i = 0; i < steps; ++i) tr.step();
    return tr.snapshot();
}

Checkpoint make_diff_ck(int steps = 2) {
    Checkpoint det = make_det_ck();
    Trainer tr(tiny_cfg(TrainConfig::Stage::Diff), tiny_data(), det);
    for (int i = 0; i < steps; ++i) tr.step();
    return tr.snapshot();
}

}  // namespace

TEST_CASE("training config validation", "[pipeline]") {
    TrainConfig c = tiny_cfg(TrainConfig::Stage::Det);
    CHECK_NOTHROW(c.validate());
    c.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), std::domain_error);
    CHECK_NOTHROW(c.check_shared());
    c.lr = -1.0;
    CHECK_THROWS_AS(c.check_shared(), std::domain_error);

    c = tiny_cfg(TrainConfig::Stage::Distill);
    c.batch = 1;
    CHECK_THROWS_AS(c.validate(), std::domain_error);
    c = tiny_cfg(TrainConfig::Stage::Distill);
    c.t_distill = 1;
    CHECK_THROWS_AS(c.validate(), std::domain_error);
    c = tiny_cfg(TrainConfig::Stage::Det);
    c.ema_mu = 1.5;
    CHECK_THROWS_AS(c.validate(), std::domain_error);
    c = tiny_cfg(TrainConfig::Stage::Det);
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), std::domain_error);
    c = tiny_cfg(TrainConfig::Stage::Det);
    c.lambda_dsm = -0.5;
    CHECK_THROWS_AS(c.validate(), std::domain_error);
}

TEST_CASE("stage defaults carry the published optimizer settings", "[pipeline]") {
    TrainConfig det = stage_defaults(TrainConfig::Stage::Det);
    CHECK(det.optimizer == OptimConfig::Kind::Adam);
    CHECK(det.lr == 1e-4);
    TrainConfig diff = stage_defaults(TrainConfig::Stage::Diff);
    CHECK(diff.optimizer == OptimConfig::Kind::Adam);
    CHECK(diff.lr == 1e-4);
    TrainConfig cd = stage_defaults(TrainConfig::Stage::Distill);
    CHECK(cd.optimizer == OptimConfig::Kind::RAdam);
    CHECK(cd.lr == 1e-5);
    CHECK(cd.ema_mu == 0.999);
    CHECK(cd.t_distill == 18);
    CHECK(cd.h_max == 17);
    CHECK(cd.lambda_dsm == 1.0);
}

TEST_CASE("extractor training step matches the plain reconstruction loss", "[pipeline]") {
    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Det);
    DatasetConfig data = tiny_data();
    Trainer tr(cfg, data);
    Parameters before = tr.trained();

    Rng replay = train_rng(cfg);
    std::vector<BatchItem> items = draw_batch(replay, cfg, data);
    std::vector<Tensor> est, tgt;
    for (const BatchItem& it : items) {
        est.push_back(det_apply(before, cfg.net, it.ex.mix, it.s).estimate);
        tgt.push_back(it.ex.stems[static_cast<size_t>(it.s)]);
    }
    double expected = det_loss(est, tgt).scalar;

    double loss = tr.step();
    CHECK_THAT(loss, WithinRel(expected, 1e-13));
    CHECK_FALSE(same_params(before, tr.trained()));
    CHECK(tr.steps_done() == 1);
}

TEST_CASE("refiner training step matches the weighted denoising loss", "[pipeline]") {
    Checkpoint det_ck = make_det_ck();
    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Diff);
    DatasetConfig data = tiny_data();
    Trainer tr(cfg, data, det_ck);
    Parameters before = tr.trained();
    const Parameters& det = tr.frozen_det();

    Rng replay = train_rng(cfg);
    std::vector<BatchItem> items = draw_batch(replay, cfg, data);
    std::vector<double> per, per_skip;
    for (const BatchItem& it : items) {
        const Tensor& x0 = it.ex.stems[static_cast<size_t>(it.s)];
        DetOutput cond = det_apply(det, cfg.net, it.ex.mix, it.s);
        EdmDenoiser den{&before, &cfg.net, cfg.precond, it.s, &cond.feats};
        per.push_back(dsm_weight(it.sigma, cfg.precond) *
                      denoise_sq_error(den, x0, it.eps, it.sigma));
        auto skip_only = [&](const Tensor& x, double sigma) {
            Tensor y = x;
            double cs = edm_coeffs(sigma, cfg.precond).c_skip;
            for (auto& v : y.data) v *= cs;
            return y;
        };
        per_skip.push_back(dsm_weight(it.sigma, cfg.precond) *
                           denoise_sq_error(skip_only, x0, it.eps, it.sigma));
    }
    double expected = 0.0, expected_skip = 0.0;
    for (double v : per) expected += v;
    for (double v : per_skip) expected_skip += v;
    expected /= static_cast<double>(per.size()) * static_cast<double>(data.chunk_len);
    expected_skip /= static_cast<double>(per_skip.size()) * static_cast<double>(data.chunk_len);

    double loss = tr.step();
    CHECK_THAT(loss, WithinRel(expected, 1e-13));

    // the output projection starts at zero, so the first batch's loss is the
    // pure skip-path predictor's loss: finite, nonzero, and reproducible
    CHECK(std::isfinite(loss));
    CHECK(loss > 0.0);
    CHECK_THAT(loss, WithinRel(expected_skip, 1e-12));
}

TEST_CASE("distillation step matches the combined consistency objective", "[pipeline]") {
    Checkpoint diff_ck = make_diff_ck();
    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Distill);
    DatasetConfig data = tiny_data();
    Trainer tr(cfg, data, diff_ck);

    Parameters teacher = take_params(diff_ck, "score");
    CHECK(same_params(tr.trained(), teacher));
    CHECK(same_params(tr.ema(), teacher));

    Parameters student0 = tr.trained();
    Parameters ema0 = tr.ema();
    const Parameters& det = tr.frozen_det();
    NoiseSchedule sched = cfg.distill_sched();
    CdPrecondConfig cpc = tr.cd_precond();

    Rng replay = train_rng(cfg);
    std::vector<BatchItem> items = draw_batch(replay, cfg, data);
    double expected = 0.0;
    for (const BatchItem& it : items) {
        const Tensor& x0 = it.ex.stems[static_cast<size_t>(it.s)];
        DetOutput cond = det_apply(det, cfg.net, it.ex.mix, it.s);
        CdDenoiser student{&student0, &cfg.net, cpc, it.s, &cond.feats};
        CdDenoiser sg{&ema0, &cfg.net, cpc, it.s, &cond.feats};
        EdmDenoiser tea{&teacher, &cfg.net, cfg.precond, it.s, &cond.feats};
        double cd = cd_sample_loss(student, sg, tea, x0, it.eps, sched, it.t, it.h);
        double dsm = dsm_weight(it.dsm_sigma, cfg.precond) *
                     denoise_sq_error(student, x0, it.dsm_eps, it.dsm_sigma);
        expected += cd + cfg.lambda_dsm * dsm;
    }
    expected /= static_cast<double>(items.size()) * static_cast<double>(data.chunk_len);

    double loss = tr.step();
    CHECK_THAT(loss, WithinRel(expected, 1e-12));

    // averaged copy trails the student by the configured rate
    CHECK_FALSE(same_params(tr.ema(), ema0));
    const Tensor& e1 = tr.ema().at("mid.w");
    const Tensor& e0 = ema0.at("mid.w");
    const Tensor& s1 = tr.trained().at("mid.w");
    for (size_t i = 0; i < e1.data.size(); ++i) {
        double want = quantize_f32(cfg.ema_mu * e0.data[i] + (1.0 - cfg.ema_mu) * s1.data[i]);
        REQUIRE(e1.data[i] == want);
    }
}

TEST_CASE("frozen extractor parameters never move during refinement", "[pipeline]") {
    Checkpoint det_ck = make_det_ck();
    Parameters det_before = take_params(det_ck, "det");
    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Diff);
    Trainer tr(cfg, tiny_data(), det_ck);
    for (int i = 0; i < 3; ++i) tr.step();
    CHECK(same_params(tr.frozen_det(), det_before));

    Checkpoint snap = tr.snapshot();
    Parameters moments = take_params(snap, "opt.m");
    CHECK(moments.t.size() == tr.trained().t.size());
    for (const auto& [k, v] : moments.t) CHECK(tr.trained().has(k));
}

TEST_CASE("a snapshot resumes each stage bit for bit", "[pipeline]") {
    DatasetConfig data = tiny_data();
    Checkpoint det_ck = make_det_ck();
    Checkpoint diff_ck = make_diff_ck();

    auto check_stage = [&](TrainConfig cfg, const Checkpoint* start) {
        Trainer whole = start ? Trainer(cfg, data, *start) : Trainer(cfg, data);
        for (int i = 0; i < 4; ++i) whole.step();

        Trainer head = start ? Trainer(cfg, data, *start) : Trainer(cfg, data);
        head.step();
        head.step();
        Checkpoint snap = head.snapshot();
        Trainer tail(cfg, data, snap);
        CHECK(tail.steps_done() == 2);
        tail.step();
        tail.step();

        CHECK(same_params(whole.trained(), tail.trained()));
        if (cfg.stage == TrainConfig::Stage::Distill) CHECK(same_params(whole.ema(), tail.ema()));
        CHECK(serialize_checkpoint(whole.snapshot()) == serialize_checkpoint(tail.snapshot()));
    };

    check_stage(tiny_cfg(TrainConfig::Stage::Det), nullptr);
    check_stage(tiny_cfg(TrainConfig::Stage::Diff), &det_ck);
    check_stage(tiny_cfg(TrainConfig::Stage::Distill), &diff_ck);
}

TEST_CASE("one seed produces one training outcome", "[pipeline]") {
    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Det);
    cfg.epochs = 2;
    DatasetConfig data = tiny_data();
    TrainRun a = run_training(cfg, data);
    TrainRun b = run_training(cfg, data);
    CHECK(serialize_checkpoint(a.final) == serialize_checkpoint(b.final));

    cfg.seed = 6;
    TrainRun c = run_training(cfg, data);
    CHECK(serialize_checkpoint(a.final) != serialize_checkpoint(c.final));
}

TEST_CASE("stages reject checkpoints they cannot start from", "[pipeline]") {
    DatasetConfig data = tiny_data();
    Checkpoint det_ck = make_det_ck();
    Checkpoint diff_ck = make_diff_ck();

    CHECK_THROWS_AS(Trainer(tiny_cfg(TrainConfig::Stage::Diff), data), std::invalid_argument);
    CHECK_THROWS_AS(Trainer(tiny_cfg(TrainConfig::Stage::Distill), data), std::invalid_argument);
    CHECK_THROWS_AS(Trainer(tiny_cfg(TrainConfig::Stage::Det), data, diff_ck),
                    std::invalid_argument);
    CHECK_THROWS_AS(Trainer(tiny_cfg(TrainConfig::Stage::Distill), data, det_ck),
                    std::invalid_argument);

    TrainConfig wide = tiny_cfg(TrainConfig::Stage::Diff);
    wide.net.channels = {4, 5};
    CHECK_THROWS_AS(Trainer(wide, data, det_ck), std::invalid_argument);
}

TEST_CASE("zero learning rate leaves parameters exactly in place", "[pipeline]") {
    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Det);
    cfg.lr = 0.0;
    Trainer tr(cfg, tiny_data());
    Parameters init = init_unet(cfg.net, false, cfg.seed);
    for (int i = 0; i < 3; ++i) tr.step();
    CHECK(same_params(tr.trained(), init));
}

TEST_CASE("training aborts when the loss stops being finite", "[pipeline]") {
    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Det);
    cfg.lr = 1e200;
    Trainer tr(cfg, tiny_data());
    REQUIRE_THROWS_AS(
        [&] {
            for (int i = 0; i < 5; ++i) tr.step();
        }(),
        std::runtime_error);
}

TEST_CASE("the run loop logs every step and validates at epoch ends", "[pipeline]") {
    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Det);
    cfg.epochs = 2;
    DatasetConfig data = tiny_data();
    std::ostringstream sink;
    TrainRun run = run_training(cfg, data, nullptr, &sink);

    REQUIRE(run.log.size() == 6);
    for (size_t i = 0; i < run.log.size(); ++i) {
        CHECK(run.log[i].step == static_cast<int64_t>(i + 1));
        CHECK(std::isfinite(run.log[i].loss));
        CHECK(run.log[i].lr == cfg.lr);
    }
    REQUIRE(run.val.size() == 2);
    CHECK(run.val[0].first == 3);
    CHECK(run.val[1].first == 6);
    CHECK(checkpoint_kind(run.final) == CkptKind::Extractor);

    std::istringstream lines(sink.str());
    std::string line;
    int count = 0;
    while (std::getline(lines, line)) {
        ++count;
        std::istringstream row(line);
        int64_t step;
        double loss, lr;
        REQUIRE((row >> step >> loss >> lr));
        CHECK(step == count);
        CHECK(lr == cfg.lr);
    }
    CHECK(count == 6);

    // resuming mid-run continues the step numbering to the configured total
    Trainer head(cfg, data);
    head.step();
    head.step();
    head.step();
    Checkpoint snap = head.snapshot();
    TrainRun rest = run_training(cfg, data, &snap);
    REQUIRE(rest.log.size() == 3);
    CHECK(rest.log.front().step == 4);
    CHECK(rest.log.back().step == 6);
}

TEST_CASE("extractor training reduces training and validation loss", "[pipeline][slow]") {
    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Det);
    cfg.lr = 2e-3;
    cfg.epochs = 20;
    TrainRun run = run_training(cfg, tiny_data());
    REQUIRE(run.log.size() == 60);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) {
        head += run.log[static_cast<size_t>(i)].loss;
        tail += run.log[run.log.size() - 10 + static_cast<size_t>(i)].loss;
    }
    CHECK(tail < head);
    REQUIRE(run.val.size() == 20);
    CHECK(run.val.back().second < run.val.front().second);
}

TEST_CASE("refiner training reduces the fixed-draw validation loss", "[pipeline][slow]") {
    Checkpoint det_ck = make_det_ck(20);
    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Diff);
    cfg.lr = 2e-3;
    cfg.epochs = 60;
    TrainRun run = run_training(cfg, tiny_data(), &det_ck);
    REQUIRE(run.val.size() == 60);
    CHECK(run.val.back().second < run.val.front().second);
}

TEST_CASE("distillation shrinks the self-consistency gap", "[pipeline][slow]") {
    Checkpoint det_ck = make_det_ck(20);
    TrainConfig diff_cfg = tiny_cfg(TrainConfig::Stage::Diff);
    diff_cfg.lr = 2e-3;
    diff_cfg.epochs = 50;
    TrainRun diff_run = run_training(diff_cfg, tiny_data(), &det_ck);

    TrainConfig cfg = tiny_cfg(TrainConfig::Stage::Distill);
    cfg.lr = 3e-4;
    cfg.epochs = 400;
    TrainRun run = run_training(cfg, tiny_data(), &diff_run.final);
    REQUIRE(run.val.size() == 400);
    CHECK(run.val.back().second < run.val.front().second);
}

TEST_CASE("self-consistency gap is zero exactly when outputs agree", "[pipeline]") {
    NoiseSchedule sched{1e-4, 2.0, 9.0, 5};
    Rng rng(21);
    Tensor x0({16}), eps({16});
    for (auto& v : x0.data) v = rng.uniform(-0.5, 0.5);
    for (auto& v : eps.data) v = rng.normal();

    auto constant = [&](const Tensor&, double) { return x0; };
    CHECK(self_consistency_gap(constant, x0, eps, sched) == 0.0);

    auto identity = [](const Tensor& x, double) { return x; };
    double gap = self_consistency_gap(identity, x0, eps, sched);
    double e2 = 0.0;
    for (double v : eps.data) e2 += v * v;
    double want = 0.0;
    int pairs = 0;
    for (int a = 1; a <= sched.T; ++a)
        for (int b = a + 1; b <= sched.T; ++b) {
            double d = karras_sigma(a, sched) - karras_sigma(b, sched);
            want += d * d * e2;
            ++pairs;
        }
    want /= pairs;
    CHECK_THAT(gap, WithinRel(want, 1e-12));

    NoiseSchedule degenerate{1e-4, 2.0, 9.0, 1};
    CHECK_THROWS_AS(self_consistency_gap(identity, x0, eps, degenerate), std::invalid_argument);
}

TEST_CASE("checkpoint views expose the models each sampler needs", "[pipeline]") {
    DatasetConfig data = tiny_data();
    UNetConfig net = tiny_net();
    Checkpoint det_ck = make_det_ck();
    Checkpoint diff_ck = make_diff_ck();
    TrainConfig cd_cfg = tiny_cfg(TrainConfig::Stage::Distill);
    Trainer cd_tr(cd_cfg, data, diff_ck);
    cd_tr.step();
    Checkpoint cd_ck = cd_tr.snapshot();

    Example ex = generate_example(data.seed, 0, data);

    ExtractorModel base = load_extractor(det_ck, net);
    Tensor est = extract_det(base, ex.mix, 2);
    CHECK(est.shape == std::vector<int64_t>{64});

    CHECK_THROWS_AS(load_refiner(det_ck, net, EdmPrecondConfig{}), std::runtime_error);
    CHECK_THROWS_AS(load_student(diff_ck, net, CdPrecondConfig{}), std::runtime_error);

    RefinerModel refiner = load_refiner(diff_ck, net, EdmPrecondConfig{});
    NoiseSchedule sched{1e-4, 0.5, 9.0, 3};
    Rng r1(9), r2(9);
    Tensor a = extract_diff(refiner, ex.mix, 1, sched, 2, 20.0, r1);
    Tensor b = extract_diff(refiner, ex.mix, 1, sched, 2, 20.0, r2);
    CHECK(same_tensor(a, b));
    CHECK(r1.state() != Rng(9).state());

    StudentModel student = load_student(cd_ck, net, cd_tr.cd_precond());
    CHECK(same_params(student.score, cd_tr.ema()));
    Rng r3(11), r4(11);
    Tensor one = extract_cd(student, ex.mix, 3, sched, 1, r3);
    DetOutput d = det_apply(student.det, net, ex.mix, 3);
    CdDenoiser den{&student.score, &net, student.pc, 3, &d.feats};
    Tensor manual = cd_onestep(den, d.estimate, sched.sigma_max, r4);
    CHECK(same_tensor(one, manual));

    Rng r5(12);
    Tensor multi = extract_cd(student, ex.mix, 3, sched, 4, r5);
    CHECK(multi.shape == est.shape);
    CHECK_THROWS_AS(extract_cd(student, ex.mix, 3, sched, 0, r5), std::invalid_argument);
}

TEST_CASE("sweep walks the grid behind a deterministic baseline row", "[pipeline][slow]") {
    DatasetConfig data = tiny_data();
    UNetConfig net = tiny_net();
    Checkpoint diff_ck = make_diff_ck();
    TrainConfig cd_cfg = tiny_cfg(TrainConfig::Stage::Distill);
    Trainer cd_tr(cd_cfg, data, diff_ck);
    cd_tr.step();
    Checkpoint cd_ck = cd_tr.snapshot();

    std::vector<Example> items = examples_in_range(data, data.test_begin(), data.test_end());
    REQUIRE(items.size() == 2);

    EvalSettings es;
    es.window = 32;
    es.hop = 16;
    es.seed = 3;

    std::vector<int> steps{1, 2};
    std::vector<double> sigmas{0.01, 0.1, 1.0};
    std::vector<SweepRow> rows = sweep_rows(cd_ck, SweepSampler::CdMultistep, steps, sigmas,
                                            items, net, EdmPrecondConfig{}, es);
    REQUIRE(rows.size() == 7);
    CHECK(rows[0].sigma_max == 0.0);
    CHECK(rows[0].steps == 0);
    size_t k = 1;
    for (int st : steps)
        for (double sm : sigmas) {
            CHECK(rows[k].steps == st);
            CHECK(rows[k].sigma_max == sm);
            CHECK(std::isfinite(rows[k].si_sdri_avg));
            ++k;
        }

    std::vector<SweepRow> again = sweep_rows(cd_ck, SweepSampler::CdMultistep, steps, sigmas,
                                             items, net, EdmPrecondConfig{}, es);
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].si_sdri_avg == again[i].si_sdri_avg);
        CHECK(rows[i].sigma_max == again[i].sigma_max);
        CHECK(rows[i].steps == again[i].steps);
    }

    std::vector<SweepRow> edm = sweep_rows(diff_ck, SweepSampler::Edm, {2}, {0.1}, items, net,
                                           EdmPrecondConfig{}, es);
    REQUIRE(edm.size() == 2);
    CHECK(std::isfinite(edm[1].si_sdri_avg));

    CHECK_THROWS_AS(
        sweep_rows(cd_ck, SweepSampler::Edm, {2}, {0.1}, items, net, EdmPrecondConfig{}, es),
        std::runtime_error);
}
