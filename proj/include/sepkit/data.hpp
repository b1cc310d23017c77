#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sepkit/rng.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

// A source counts as audible when its RMS reaches -80 dBFS.
constexpr double kSilenceRms = 1e-4;
constexpr int kNumSources = 4;

// Stems by source id: 0 bass (sawtooth, 40-200 Hz fundamentals, harmonics
// capped at 400 Hz), 1 percussion (broadband noise bursts), 2 lead (square
// wave, 400-1000 Hz fundamentals, harmonics capped at 2 kHz), 3 chord (2-4
// sines in 200-1200 Hz).
inline const char* source_name(int s) {
    static const char* names[] = {"bass", "perc", "lead", "chord"};
    if (s < 0 || s >= kNumSources) throw std::invalid_argument("source id out of range");
    return names[s];
}

struct DatasetConfig {
    int sample_rate = 8000;
    int64_t chunk_len = 2048;
    int64_t train = 512;
    int64_t val = 0;
    int64_t test = 64;
    uint64_t seed = 0;

    void validate() const {
        if (sample_rate <= 0) throw std::domain_error("sample rate must be positive");
        if (chunk_len < 16) throw std::domain_error("chunk length too small");
        if (train < 0 || val < 0 || test < 0) throw std::domain_error("negative split count");
        if (train + val + test < 1) throw std::domain_error("dataset is empty");
    }

    int64_t size() const { return train + val + test; }
    // index ranges are disjoint by construction: [0,train), [train,train+val), rest
    int64_t train_begin() const { return 0; }
    int64_t train_end() const { return train; }
    int64_t val_begin() const { return train; }
    int64_t val_end() const { return train + val; }
    int64_t test_begin() const { return train + val; }
    int64_t test_end() const { return train + val + test; }
};

struct Example {
    std::vector<Tensor> stems;  // kNumSources entries of [N]
    Tensor mix;                 // [N], exact sum of stems in ascending source order
};

namespace detail {

struct Event {
    int64_t onset;
    int64_t dur;
    double amp;
};

inline Event draw_event(Rng& rng, int64_t n) {
    Event e;
    e.dur = rng.uniform_int(n / 8, n / 2);
    e.onset = rng.uniform_int(0, n - e.dur);
    e.amp = rng.uniform(0.05, 0.2);
    return e;
}

inline double half_sine_env(int64_t i, int64_t dur) {
    return std::sin(M_PI * (static_cast<double>(i) + 0.5) / static_cast<double>(dur));
}

inline void add_harmonic_event(Tensor& stem, const Event& e, double f0, double phase,
                               double max_hz, bool odd_only, int rate) {
    std::vector<int> ks;
    for (int k = 1; f0 * k <= max_hz; ++k)
        if (!odd_only || k % 2 == 1) ks.push_back(k);
    if (ks.empty()) ks.push_back(1);
    double norm = 0.0;
    for (int k : ks) norm += 1.0 / k;
    double w = 2.0 * M_PI * f0 / static_cast<double>(rate);
    for (int64_t i = 0; i < e.dur; ++i) {
        double th = w * static_cast<double>(e.onset + i) + phase;
        double v = 0.0;
        for (int k : ks) v += std::sin(k * th) / k;
        stem.data[static_cast<size_t>(e.onset + i)] += e.amp * half_sine_env(i, e.dur) * v / norm;
    }
}

inline void synth_stem(Tensor& stem, int s, Rng& rng, const DatasetConfig& cfg) {
    int64_t n = cfg.chunk_len;
    if (rng.uniform() < 0.05) return;  // this stem sits the example out

    int64_t events = rng.uniform_int(1, s == 1 ? 4 : 3);
    for (int64_t ev = 0; ev < events; ++ev) {
        Event e = draw_event(rng, n);
        switch (s) {
            case 0: {  // bass: additive sawtooth, band-limited
                double f0 = rng.uniform(40.0, 200.0);
                double phase = rng.uniform(0.0, 2.0 * M_PI);
                add_harmonic_event(stem, e, f0, phase, 400.0, false, cfg.sample_rate);
                break;
            }
            case 1: {  // percussion: decaying noise burst
                for (int64_t i = 0; i < e.dur; ++i) {
                    double env = std::exp(-5.0 * static_cast<double>(i) / static_cast<double>(e.dur));
                    stem.data[static_cast<size_t>(e.onset + i)] += e.amp * env * rng.normal();
                }
                break;
            }
            case 2: {  // lead: odd-harmonic square, band-limited
                double f0 = rng.uniform(400.0, 1000.0);
                double phase = rng.uniform(0.0, 2.0 * M_PI);
                add_harmonic_event(stem, e, f0, phase, 2000.0, true, cfg.sample_rate);
                break;
            }
            default: {  // chord: a few equal sines
                int64_t m = rng.uniform_int(2, 4);
                std::vector<double> fs, ph;
                for (int64_t j = 0; j < m; ++j) fs.push_back(rng.uniform(200.0, 1200.0));
                for (int64_t j = 0; j < m; ++j) ph.push_back(rng.uniform(0.0, 2.0 * M_PI));
                for (int64_t i = 0; i < e.dur; ++i) {
                    double v = 0.0;
                    for (int64_t j = 0; j < m; ++j) {
                        double w = 2.0 * M_PI * fs[static_cast<size_t>(j)] / cfg.sample_rate;
                        v += std::sin(w * static_cast<double>(e.onset + i) + ph[static_cast<size_t>(j)]);
                    }
                    stem.data[static_cast<size_t>(e.onset + i)] +=
                        e.amp * half_sine_env(i, e.dur) * v / static_cast<double>(m);
                }
                break;
            }
        }
    }
    // per-stem soft clip keeps each stem within 1/kNumSources, so the exact
    // mixture sum stays inside [-1, 1] with no post-sum processing
    const double cap = 1.0 / kNumSources;
    for (auto& v : stem.data) v = cap * std::tanh(v / cap);
}

}  // namespace detail

// Pure per-(seed, idx) synthesis: the same pair always yields the same bits.
inline Example generate_example(uint64_t seed, int64_t idx, const DatasetConfig& cfg) {
    cfg.validate();
    if (idx < 0) throw std::invalid_argument("example index must be non-negative");
    Rng rng(Rng::derive(seed, {0xda7aull, static_cast<uint64_t>(idx)}));
    Example ex;
    ex.mix = Tensor({cfg.chunk_len});
    for (int s = 0; s < kNumSources; ++s) {
        Tensor stem({cfg.chunk_len});
        detail::synth_stem(stem, s, rng, cfg);
        ex.stems.push_back(std::move(stem));
    }
    for (int s = 0; s < kNumSources; ++s)
        for (int64_t i = 0; i < cfg.chunk_len; ++i)
            ex.mix.data[static_cast<size_t>(i)] += ex.stems[static_cast<size_t>(s)].data[static_cast<size_t>(i)];
    return ex;
}

// One line per example: idx, seed, then one activity flag per stem.
inline std::string manifest_text(const DatasetConfig& cfg) {
    cfg.validate();
    std::ostringstream out;
    for (int64_t idx = 0; idx < cfg.size(); ++idx) {
        Example ex = generate_example(cfg.seed, idx, cfg);
        out << idx << '\t' << cfg.seed;
        for (int s = 0; s < kNumSources; ++s)
            out << '\t' << (ex.stems[static_cast<size_t>(s)].rms() >= kSilenceRms ? 1 : 0);
        out << '\n';
    }
    return out.str();
}

// Full windows only, starting at 0, hop, 2*hop, ... A window longer than the
// track yields an empty list; the caller decides whether that is a problem.
inline std::vector<Tensor> chunk_stream(const Tensor& track, int64_t window, int64_t hop) {
    if (track.shape.size() != 1) throw std::invalid_argument("chunking expects a mono track");
    if (window < 1 || hop < 1) throw std::invalid_argument("window and hop must be positive");
    std::vector<Tensor> chunks;
    for (int64_t start = 0; start + window <= track.numel(); start += hop) {
        Tensor c({window});
        for (int64_t i = 0; i < window; ++i)
            c.data[static_cast<size_t>(i)] = track.data[static_cast<size_t>(start + i)];
        chunks.push_back(std::move(c));
    }
    return chunks;
}

// Keeps a chunk index when at least two sources are audible there.
inline std::vector<size_t> filter_eval_chunks(const std::vector<std::vector<Tensor>>& stem_chunks) {
    if (stem_chunks.empty()) throw std::invalid_argument("no sources given");
    size_t n = stem_chunks.front().size();
    for (const auto& list : stem_chunks)
        if (list.size() != n) throw std::invalid_argument("per-source chunk lists are misaligned");
    std::vector<size_t> kept;
    for (size_t c = 0; c < n; ++c) {
        int active = 0;
        for (const auto& list : stem_chunks)
            if (list[c].rms() >= kSilenceRms) ++active;
        if (active >= 2) kept.push_back(c);
    }
    return kept;
}

}  // namespace sepkit
