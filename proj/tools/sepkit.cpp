#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "sepkit/checkpoint.hpp"
#include "sepkit/config.hpp"
#include "sepkit/metrics.hpp"
#include "sepkit/pipeline.hpp"
#include "sepkit/wav.hpp"

namespace fs = std::filesystem;
using namespace sepkit;

namespace {

// user or configuration mistakes exit with code 2; anything else is 1
struct UserError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UserError("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spill(const fs::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw UserError("cannot open " + path.string() + " for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw UserError("short write to " + path.string());
}

RunConfig load_config(const std::string& path) {
    if (path.empty()) return parse_run_config("");
    return parse_run_config(slurp(path));
}

Checkpoint load_ckpt(const std::string& path) {
    std::string buf = slurp(path);
    try {
        return deserialize_checkpoint(buf);
    } catch (const std::exception& e) {
        throw UserError("bad checkpoint " + path + ": " + e.what());
    }
}

fs::path runs_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("SEPKIT_RUNS")) return env;
    return "runs";
}

std::string timestamp() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
    return buf;
}

// run directories are append-only: an existing directory is never reused
fs::path unique_run_dir(const fs::path& root, const std::string& stage, const std::string& name) {
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw UserError("cannot create " + root.string());
    if (!name.empty()) {
        fs::path d = root / name;
        if (fs::exists(d)) throw UserError("run directory already exists: " + d.string());
        fs::create_directories(d);
        return d;
    }
    std::string ts = timestamp();
    for (int k = 0;; ++k) {
        fs::path d = root / (stage + "-" + ts + (k ? "-" + std::to_string(k) : ""));
        if (!fs::exists(d)) {
            fs::create_directories(d);
            return d;
        }
    }
}

TrainConfig::Stage parse_stage(const std::string& s) {
    if (s == "det") return TrainConfig::Stage::Det;
    if (s == "diff") return TrainConfig::Stage::Diff;
    if (s == "distill") return TrainConfig::Stage::Distill;
    throw UserError("unknown stage '" + s + "' (expected det, diff or distill)");
}

const char* stage_name(TrainConfig::Stage st) {
    switch (st) {
        case TrainConfig::Stage::Det: return "det";
        case TrainConfig::Stage::Diff: return "diff";
        case TrainConfig::Stage::Distill: return "distill";
    }
    return "?";
}

Tensor pad_to_stride(const Tensor& x, int64_t stride) {
    int64_t n = x.numel();
    int64_t padded = std::max<int64_t>(stride, (n + stride - 1) / stride * stride);
    if (padded == n) return x;
    Tensor y({padded});
    std::copy(x.data.begin(), x.data.end(), y.data.begin());
    return y;
}

Tensor trim_to(const Tensor& x, int64_t n) {
    if (x.numel() == n) return x;
    Tensor y({n});
    std::copy(x.data.begin(), x.data.begin() + n, y.data.begin());
    return y;
}

// sampler settings after flag overrides; defaults come from the config file
struct SamplerArgs {
    SamplerKind kind;
    bool kind_given;  // false: neither flag nor config chose, follow the checkpoint
    int steps;
    int correction;
    double sigma_max;
    double s_churn;
    uint64_t seed;
};

int cmd_gen_data(const std::string& config_path, const RunConfig& rc0, uint64_t seed,
                 bool seed_given, int64_t train_n, int64_t val_n, int64_t test_n,
                 const std::string& out_dir, bool export_wav, bool pcm16, int workers) {
    (void)config_path;
    RunConfig rc = rc0;
    if (seed_given) rc.data.seed = seed;
    if (train_n >= 0) rc.data.train = train_n;
    if (val_n >= 0) rc.data.val = val_n;
    if (test_n >= 0) rc.data.test = test_n;
    rc.data.validate();

    fs::path out(out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw UserError("cannot create " + out.string());

    std::string manifest = manifest_text(rc.data);
    spill(out / "manifest.tsv", manifest);
    int64_t total = rc.data.train + rc.data.val + rc.data.test;
    std::cout << "manifest " << (out / "manifest.tsv").string() << " (" << total
              << " examples)\n";

    if (export_wav) {
        auto export_range = [&](int64_t begin, int64_t end) {
            for (int64_t idx = begin; idx < end; ++idx) {
                Example ex = generate_example(rc.data.seed, idx, rc.data);
                char base[32];
                std::snprintf(base, sizeof base, "ex%05lld", static_cast<long long>(idx));
                write_wav((out / (std::string(base) + ".mix.wav")).string(), ex.mix,
                          rc.data.sample_rate, pcm16);
                for (size_t s = 0; s < ex.stems.size(); ++s)
                    write_wav((out / (std::string(base) + ".s" + std::to_string(s) + ".wav"))
                                  .string(),
                              ex.stems[s], rc.data.sample_rate, pcm16);
            }
        };
        int n = std::min<int64_t>(workers, std::max<int64_t>(total, 1));
        std::vector<std::thread> pool;
        int64_t chunk = (total + n - 1) / n;
        for (int w = 0; w < n; ++w) {
            int64_t b = w * chunk, e = std::min(total, b + chunk);
            if (b >= e) break;
            pool.emplace_back(export_range, b, e);
        }
        for (auto& th : pool) th.join();
        std::cout << "exported " << total * (kNumSources + 1) << " wav files\n";
    }
    return 0;
}

int cmd_train(const RunConfig& rc0, const std::string& stage_s, uint64_t seed, bool seed_given,
              const std::string& start_path, const std::string& runs_flag,
              const std::string& name) {
    RunConfig rc = rc0;
    if (seed_given) rc.train_seed = seed;
    TrainConfig::Stage stage = parse_stage(stage_s);
    TrainConfig tc = train_config(rc, stage);

    Checkpoint start;
    bool have_start = !start_path.empty();
    if (have_start) {
        start = load_ckpt(start_path);
    } else if (stage == TrainConfig::Stage::Diff) {
        throw UserError("the diff stage needs a det checkpoint; pass --start <det.ckpt>");
    } else if (stage == TrainConfig::Stage::Distill) {
        throw UserError("the distill stage needs a diff checkpoint; pass --start <diff.ckpt>");
    }

    fs::path dir = unique_run_dir(runs_root(runs_flag), stage_s, name);
    spill(dir / "config.ini", serialize_run_config(resolved_for(rc, stage)));

    std::ofstream log(dir / "log.txt");
    if (!log) throw UserError("cannot open " + (dir / "log.txt").string());
    TrainRun run;
    try {
        run = run_training(tc, rc.data, have_start ? &start : nullptr, &log);
    } catch (const std::invalid_argument& e) {
        throw UserError(e.what());
    }
    log.close();

    if (!run.val.empty()) {
        std::ostringstream v;
        for (const auto& [step, value] : run.val) v << step << " " << value << "\n";
        spill(dir / "val.txt", v.str());
    }
    fs::path final_path = dir / "final.ckpt";
    save_checkpoint(final_path.string(), run.final);

    std::cout << "run " << dir.string() << "\n";
    std::cout << "steps " << (run.log.empty() ? 0 : run.log.back().step) << "\n";
    if (!run.log.empty()) std::cout << "final_loss " << run.log.back().loss << "\n";
    std::cout << "checkpoint " << final_path.string() << "\n";
    return 0;
}

// one extraction dispatcher shared by separate and evaluate
struct Separator {
    SamplerArgs sm;
    const RunConfig* rc;
    ExtractorModel det;
    RefinerModel refiner;
    StudentModel student;
    Rng rng{0};

    Separator(const Checkpoint& ck, const RunConfig& cfg, const SamplerArgs& args)
        : sm(args), rc(&cfg) {
        if (!sm.kind_given) {
            switch (checkpoint_kind(ck)) {
                case CkptKind::Extractor: sm.kind = SamplerKind::Det; break;
                case CkptKind::Refiner: sm.kind = SamplerKind::Edm; break;
                case CkptKind::Student: sm.kind = SamplerKind::CdMultistep; break;
            }
        }
        try {
            switch (sm.kind) {
                case SamplerKind::Det:
                    det = load_extractor(ck, cfg.net);
                    break;
                case SamplerKind::Edm:
                    refiner = load_refiner(ck, cfg.net, cfg.precond);
                    break;
                case SamplerKind::CdOnestep:
                case SamplerKind::CdMultistep:
                    student = load_student(
                        ck, cfg.net, CdPrecondConfig{cfg.precond.sigma_data,
                                                     cfg.schedule.sigma_min});
                    break;
            }
        } catch (const std::exception& e) {
            throw UserError(std::string("checkpoint does not support sampler '") +
                            sampler_kind_name(sm.kind) + "': " + e.what());
        }
        rng = Rng(Rng::derive(sm.seed, {0x5e8aull}));
    }

    NoiseSchedule sched(int steps) const {
        NoiseSchedule s{rc->schedule.sigma_min, sm.sigma_max, rc->schedule.rho, steps};
        s.validate();
        return s;
    }

    Tensor operator()(const Tensor& mix, int s) {
        switch (sm.kind) {
            case SamplerKind::Det:
                return extract_det(det, mix, s);
            case SamplerKind::Edm:
                return extract_diff(refiner, mix, s, sched(sm.steps), sm.correction, sm.s_churn,
                                    rng);
            case SamplerKind::CdOnestep:
                return extract_cd(student, mix, s, sched(1), 1, rng);
            case SamplerKind::CdMultistep:
                return extract_cd(student, mix, s, sched(sm.steps), sm.steps, rng);
        }
        throw std::logic_error("bad sampler kind");
    }
};

int cmd_separate(const RunConfig& rc, const std::string& ckpt_path, const SamplerArgs& sm,
                 const std::string& input, int64_t idx, const std::string& out_dir, bool pcm16) {
    Checkpoint ck = load_ckpt(ckpt_path);
    Separator sep(ck, rc, sm);

    Tensor mix;
    int sample_rate = rc.data.sample_rate;
    std::string base;
    if (idx >= 0) {
        if (!input.empty()) throw UserError("give either a WAV path or --idx, not both");
        Example ex = generate_example(rc.data.seed, idx, rc.data);
        mix = ex.mix;
        base = "ex" + std::to_string(idx);
    } else {
        if (input.empty()) throw UserError("give a WAV path or --idx");
        WavData wav;
        try {
            wav = read_wav(input);
        } catch (const std::exception& e) {
            throw UserError("cannot read " + input + ": " + e.what());
        }
        mix = wav.samples;
        sample_rate = wav.sample_rate;
        base = fs::path(input).stem().string();
    }

    fs::path out(out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw UserError("cannot create " + out.string());

    int64_t orig = mix.numel();
    Tensor padded = pad_to_stride(mix, rc.net.total_stride());

    auto t0 = std::chrono::steady_clock::now();
    std::vector<Tensor> estimates;
    for (int s = 0; s < rc.net.num_sources; ++s)
        estimates.push_back(trim_to(sep(padded, s), orig));
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    for (int s = 0; s < rc.net.num_sources; ++s) {
        fs::path p = out / (base + ".s" + std::to_string(s) + ".wav");
        write_wav(p.string(), estimates[static_cast<size_t>(s)], sample_rate, pcm16);
        std::cout << "wrote " << p.string() << "\n";
    }
    double audio_seconds = static_cast<double>(orig) / sample_rate;
    std::cout << "wall_seconds = " << wall << "\n";
    std::cout << "rtf = " << wall / audio_seconds << "\n";
    return 0;
}

int cmd_evaluate(const RunConfig& rc, const std::string& ckpt_path, const SamplerArgs& sm,
                 const std::string& csv_path) {
    Checkpoint ck = load_ckpt(ckpt_path);
    Separator sep(ck, rc, sm);
    std::vector<Example> items =
        examples_in_range(rc.data, rc.data.test_begin(), rc.data.test_end());
    if (items.empty()) throw UserError("test split is empty");

    EvalReport rep;
    try {
        auto fn = [&](const Tensor& mix, int s) { return sep(mix, s); };
        rep = evaluate_model(fn, items, rc.eval_window, rc.eval_hop, rc.data.sample_rate);
    } catch (const std::runtime_error& e) {
        throw UserError(e.what());
    }
    std::cout << report_text(rep);

    if (!csv_path.empty()) {
        int steps = sep.sm.kind == SamplerKind::Det ? 0
                    : sep.sm.kind == SamplerKind::CdOnestep ? 1
                                                            : sep.sm.steps;
        double smax = sep.sm.kind == SamplerKind::Det ? 0.0 : sep.sm.sigma_max;
        spill(csv_path, sweep_csv({{smax, steps, rep.avg_si_sdri}}));
        std::cout << "csv " << csv_path << "\n";
    }
    return 0;
}

int cmd_sweep(const RunConfig& rc, const std::string& ckpt_path, const std::string& sampler_s,
              std::vector<int> steps_grid, std::vector<double> sigma_grid, uint64_t seed,
              const std::string& out_dir) {
    Checkpoint ck = load_ckpt(ckpt_path);
    CkptKind kind;
    try {
        kind = checkpoint_kind(ck);
    } catch (const std::exception& e) {
        throw UserError("bad checkpoint " + ckpt_path + ": " + e.what());
    }

    SweepSampler sampler;
    if (sampler_s.empty()) {
        if (kind == CkptKind::Refiner) sampler = SweepSampler::Edm;
        else if (kind == CkptKind::Student) sampler = SweepSampler::CdMultistep;
        else throw UserError("sweep needs a refiner or student checkpoint");
    } else if (sampler_s == "edm") {
        sampler = SweepSampler::Edm;
    } else if (sampler_s == "cd-multistep") {
        sampler = SweepSampler::CdMultistep;
    } else {
        throw UserError("sweep supports samplers edm and cd-multistep");
    }

    if (steps_grid.empty()) steps_grid = rc.sampler.sweep_steps;
    if (sigma_grid.empty()) sigma_grid = rc.sampler.sweep_sigma_max;
    for (int s : steps_grid)
        if (s < 1) throw UserError("sweep steps entries must be >= 1");
    for (double s : sigma_grid)
        if (!(s > rc.schedule.sigma_min))
            throw UserError("sweep sigma_max entries must exceed sigma_min");

    std::vector<Example> items =
        examples_in_range(rc.data, rc.data.test_begin(), rc.data.test_end());
    if (items.empty()) throw UserError("test split is empty");

    EvalSettings es;
    es.window = rc.eval_window;
    es.hop = rc.eval_hop;
    es.sample_rate = rc.data.sample_rate;
    es.sigma_min = rc.schedule.sigma_min;
    es.rho = rc.schedule.rho;
    es.correction = rc.sampler.correction;
    es.s_churn = rc.sampler.s_churn;
    es.seed = seed;

    std::vector<SweepRow> rows;
    try {
        rows = sweep_rows(ck, sampler, steps_grid, sigma_grid, items, rc.net, rc.precond, es);
    } catch (const std::runtime_error& e) {
        throw UserError(e.what());
    }

    fs::path out(out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw UserError("cannot create " + out.string());

    // one file per steps value; each carries the deterministic baseline row
    for (size_t k = 0; k < steps_grid.size(); ++k) {
        std::vector<SweepRow> panel;
        panel.push_back(rows[0]);
        size_t begin = 1 + k * sigma_grid.size();
        for (size_t i = 0; i < sigma_grid.size(); ++i) panel.push_back(rows[begin + i]);
        fs::path p = out / ("sweep-steps-" + std::to_string(steps_grid[k]) + ".csv");
        spill(p, sweep_csv(panel));
        std::cout << "wrote " << p.string() << " (" << panel.size() << " rows)\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sepkit: three-stage musical source extraction"};
    app.require_subcommand(1);

    std::string config_path;
    uint64_t seed = 0;
    int workers = 1;
    app.add_option("--config", config_path, "run configuration file")->configurable(false);
    app.add_option("--seed", seed, "seed override");
    app.add_option("--workers", workers, "worker threads for data export")
        ->check(CLI::Range(1, 256));

    auto* gen = app.add_subcommand("gen-data", "write the dataset manifest and optional WAVs");
    gen->fallthrough();
    int64_t g_train = -1, g_val = -1, g_test = -1;
    std::string g_out = "data";
    bool g_export = false, g_pcm16 = false;
    gen->add_option("--train", g_train, "training example count");
    gen->add_option("--val", g_val, "validation example count");
    gen->add_option("--test", g_test, "test example count");
    gen->add_option("--out", g_out, "output directory");
    gen->add_flag("--export-wav", g_export, "write per-stem WAV files");
    gen->add_flag("--pcm16", g_pcm16, "write 16-bit PCM instead of float32");

    auto* train = app.add_subcommand("train", "train one pipeline stage");
    train->fallthrough();
    std::string t_stage, t_start, t_runs, t_name;
    train->add_option("stage", t_stage, "det, diff or distill")->required();
    train->add_option("--start", t_start, "checkpoint to start from (prerequisite or resume)");
    train->add_option("--runs", t_runs, "run directory root (default runs/ or SEPKIT_RUNS)");
    train->add_option("--name", t_name, "run directory name (default: stage-timestamp)");

    auto* sep = app.add_subcommand("separate", "extract all stems from one mixture");
    sep->fallthrough();
    std::string s_input, s_ckpt, s_sampler, s_out = ".";
    int64_t s_idx = -1;
    int s_steps = 0, s_corr = 0;
    double s_smax = 0.0, s_churn = 0.0;
    bool s_pcm16 = false;
    sep->add_option("input", s_input, "mixture WAV path");
    sep->add_option("--idx", s_idx, "dataset example index instead of a WAV file");
    sep->add_option("--ckpt", s_ckpt, "checkpoint to run")->required();
    sep->add_option("--sampler", s_sampler, "det, edm, cd-onestep or cd-multistep");
    sep->add_option("--steps", s_steps, "sampler grid size");
    sep->add_option("--correction", s_corr, "correction passes per step");
    sep->add_option("--sigma-max", s_smax, "sampler starting noise level");
    sep->add_option("--s-churn", s_churn, "stochastic churn");
    sep->add_option("--out", s_out, "output directory");
    sep->add_flag("--pcm16", s_pcm16, "write 16-bit PCM instead of float32");

    auto* eval = app.add_subcommand("evaluate", "windowed SI-SDR improvement on the test split");
    eval->fallthrough();
    std::string e_ckpt, e_sampler, e_csv;
    int e_steps = 0, e_corr = 0;
    double e_smax = 0.0, e_churn = 0.0;
    eval->add_option("--ckpt", e_ckpt, "checkpoint to run")->required();
    eval->add_option("--sampler", e_sampler, "det, edm, cd-onestep or cd-multistep");
    eval->add_option("--steps", e_steps, "sampler grid size");
    eval->add_option("--correction", e_corr, "correction passes per step");
    eval->add_option("--sigma-max", e_smax, "sampler starting noise level");
    eval->add_option("--s-churn", e_churn, "stochastic churn");
    eval->add_option("--csv", e_csv, "also write the report as a CSV row");

    auto* sweep = app.add_subcommand("sweep", "evaluate across the (steps, sigma_max) grid");
    sweep->fallthrough();
    std::string w_ckpt, w_sampler, w_out = ".";
    std::vector<int> w_steps;
    std::vector<double> w_sigma;
    sweep->add_option("--ckpt", w_ckpt, "refiner or student checkpoint")->required();
    sweep->add_option("--sampler", w_sampler, "edm or cd-multistep");
    sweep->add_option("--steps", w_steps, "steps grid")->delimiter(',');
    sweep->add_option("--sigma-max", w_sigma, "sigma_max grid")->delimiter(',');
    sweep->add_option("--out", w_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        RunConfig rc = load_config(config_path);
        auto sampler_args = [&](const std::string& kind_s, const CLI::App* cmd, int steps,
                                int corr, double smax, double churn) {
            SamplerArgs sm;
            sm.kind = kind_s.empty() ? rc.sampler.kind : parse_sampler_kind(kind_s);
            sm.kind_given = !kind_s.empty() || rc.has("sampler.kind");
            sm.steps = cmd->count("--steps") ? steps : rc.sampler.steps;
            sm.correction = cmd->count("--correction") ? corr : rc.sampler.correction;
            sm.sigma_max = cmd->count("--sigma-max") ? smax : rc.sampler.sigma_max;
            sm.s_churn = cmd->count("--s-churn") ? churn : rc.sampler.s_churn;
            sm.seed = seed;
            if (sm.steps < 1) throw UserError("--steps must be >= 1");
            if (sm.correction < 1) throw UserError("--correction must be >= 1");
            if (!(sm.sigma_max > rc.schedule.sigma_min))
                throw UserError("--sigma-max must exceed sigma_min");
            if (sm.s_churn < 0.0) throw UserError("--s-churn must be non-negative");
            return sm;
        };

        if (gen->parsed())
            return cmd_gen_data(config_path, rc, seed, app.count("--seed") > 0, g_train, g_val,
                                g_test, g_out, g_export, g_pcm16, workers);
        if (train->parsed())
            return cmd_train(rc, t_stage, seed, app.count("--seed") > 0, t_start, t_runs,
                             t_name);
        if (sep->parsed())
            return cmd_separate(rc, s_ckpt, sampler_args(s_sampler, sep, s_steps, s_corr, s_smax,
                                                         s_churn),
                                s_input, s_idx, s_out, s_pcm16);
        if (eval->parsed())
            return cmd_evaluate(rc, e_ckpt, sampler_args(e_sampler, eval, e_steps, e_corr,
                                                         e_smax, e_churn),
                                e_csv);
        if (sweep->parsed()) return cmd_sweep(rc, w_ckpt, w_sampler, w_steps, w_sigma, seed, w_out);
        return 2;
    } catch (const UserError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::domain_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
