#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sepkit/data.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

// Scale-invariant SDR in dB, capped at +100 when the error energy vanishes.
// An estimate orthogonal to the reference genuinely carries no target energy,
// so the value is -inf in that case; no lower cap is applied.
inline double si_sdr(const Tensor& estimate, const Tensor& reference) {
    require_same_shape(estimate, reference, "metric operands");
    double rr = 0.0, er = 0.0;
    for (size_t i = 0; i < reference.data.size(); ++i) {
        rr += reference.data[i] * reference.data[i];
        er += estimate.data[i] * reference.data[i];
    }
    if (rr == 0.0) throw std::domain_error("reference signal is identically zero");
    double alpha = er / rr;
    double target = 0.0, error = 0.0;
    for (size_t i = 0; i < reference.data.size(); ++i) {
        double t = alpha * reference.data[i];
        double e = estimate.data[i] - t;
        target += t * t;
        error += e * e;
    }
    if (error == 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(target / error));
}

inline double si_sdr_i(const Tensor& estimate, const Tensor& reference, const Tensor& mixture) {
    return si_sdr(estimate, reference) - si_sdr(mixture, reference);
}

struct EvalReport {
    std::map<int, double> per_stem_si_sdri;
    double avg_si_sdri = 0.0;
    int64_t chunks_evaluated = 0;
    double inference_seconds = 0.0;
    double rtf = 0.0;
};

// Windowed evaluation: chunk every track, keep windows where at least two
// sources are audible, and score each audible source against its reference.
// extract is called once per (mixture chunk, source id) and is the only part
// that counts toward inference time.
template <typename F>
EvalReport evaluate_model(F&& extract, const std::vector<Example>& items, int64_t window,
                          int64_t hop, int sample_rate) {
    if (sample_rate <= 0) throw std::invalid_argument("sample rate must be positive");
    std::map<int, double> sum;
    std::map<int, int64_t> count;
    EvalReport rep;

    for (const Example& ex : items) {
        if (ex.stems.size() != static_cast<size_t>(kNumSources))
            throw std::invalid_argument("example has the wrong number of stems");
        std::vector<Tensor> mix_chunks = chunk_stream(ex.mix, window, hop);
        std::vector<std::vector<Tensor>> stem_chunks;
        for (const Tensor& stem : ex.stems) stem_chunks.push_back(chunk_stream(stem, window, hop));
        std::vector<size_t> kept = filter_eval_chunks(stem_chunks);
        rep.chunks_evaluated += static_cast<int64_t>(kept.size());

        for (size_t c : kept)
            for (int s = 0; s < kNumSources; ++s) {
                const Tensor& ref = stem_chunks[static_cast<size_t>(s)][c];
                if (ref.rms() < kSilenceRms) continue;
                auto t0 = std::chrono::steady_clock::now();
                Tensor est = extract(mix_chunks[c], s);
                auto t1 = std::chrono::steady_clock::now();
                rep.inference_seconds += std::chrono::duration<double>(t1 - t0).count();
                sum[s] += si_sdr_i(est, ref, mix_chunks[c]);
                count[s] += 1;
            }
    }

    if (rep.chunks_evaluated == 0)
        throw std::runtime_error("no evaluation chunks survive the activity filter");

    double total = 0.0;
    int stems_present = 0;
    for (const auto& [s, n] : count) {
        double mean = sum[s] / static_cast<double>(n);
        rep.per_stem_si_sdri[s] = mean;
        total += mean;
        ++stems_present;
    }
    rep.avg_si_sdri = total / static_cast<double>(stems_present);
    double audio_seconds = static_cast<double>(rep.chunks_evaluated) *
                           static_cast<double>(window) / static_cast<double>(sample_rate);
    rep.rtf = rep.inference_seconds / audio_seconds;
    return rep;
}

inline std::string report_text(const EvalReport& rep) {
    std::string out;
    for (const auto& [s, v] : rep.per_stem_si_sdri)
        out += "si_sdri." + std::to_string(s) + " = " + fmt_double(v) + "\n";
    out += "avg_si_sdri = " + fmt_double(rep.avg_si_sdri) + "\n";
    out += "chunks_evaluated = " + std::to_string(rep.chunks_evaluated) + "\n";
    out += "inference_seconds = " + fmt_double(rep.inference_seconds) + "\n";
    out += "rtf = " + fmt_double(rep.rtf) + "\n";
    return out;
}

}  // namespace sepkit
