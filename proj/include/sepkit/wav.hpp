#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "sepkit/tensor.hpp"

namespace sepkit {

struct WavData {
    int sample_rate = 0;
    Tensor samples;  // [N], mono
};

namespace detail {

inline void wav_u16(std::string& b, uint16_t v) {
    b.push_back(static_cast<char>(v & 0xff));
    b.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void wav_u32(std::string& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct WavReader {
    const std::string& buf;
    size_t pos = 0;

    explicit WavReader(const std::string& b) : buf(b) {}
    void need(size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("wav file truncated");
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(
            static_cast<unsigned char>(buf[pos]) |
            (static_cast<unsigned char>(buf[pos + 1]) << 8));
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)]))
                 << (8 * i);
        pos += 4;
        return v;
    }
    std::string tag() {
        need(4);
        std::string s = buf.substr(pos, 4);
        pos += 4;
        return s;
    }
};

}  // namespace detail

// Mono WAV writer. pcm16 selects 16-bit integer samples (values clamped to
// [-1, 1]); otherwise 32-bit float samples are stored verbatim.
inline void write_wav(const std::string& path, const Tensor& x, int sample_rate,
                      bool pcm16 = false) {
    if (x.shape.size() != 1) throw std::invalid_argument("wav writer expects a mono waveform");
    if (sample_rate <= 0) throw std::invalid_argument("sample rate must be positive");
    uint32_t n = static_cast<uint32_t>(x.numel());
    uint16_t bits = pcm16 ? 16 : 32;
    uint16_t fmt = pcm16 ? 1 : 3;
    uint32_t data_bytes = n * (bits / 8u);

    std::string b;
    b.append("RIFF");
    uint32_t riff_size = 4 + (8 + 16) + (pcm16 ? 0 : 8 + 4) + (8 + data_bytes);
    detail::wav_u32(b, riff_size);
    b.append("WAVE");
    b.append("fmt ");
    detail::wav_u32(b, 16);
    detail::wav_u16(b, fmt);
    detail::wav_u16(b, 1);  // mono
    detail::wav_u32(b, static_cast<uint32_t>(sample_rate));
    detail::wav_u32(b, static_cast<uint32_t>(sample_rate) * (bits / 8u));
    detail::wav_u16(b, static_cast<uint16_t>(bits / 8u));
    detail::wav_u16(b, bits);
    if (!pcm16) {  // non-PCM formats carry a fact chunk with the frame count
        b.append("fact");
        detail::wav_u32(b, 4);
        detail::wav_u32(b, n);
    }
    b.append("data");
    detail::wav_u32(b, data_bytes);
    if (pcm16) {
        for (double v : x.data) {
            double c = std::clamp(v, -1.0, 1.0);
            auto q = static_cast<int16_t>(std::lrint(c * 32767.0));
            detail::wav_u16(b, static_cast<uint16_t>(q));
        }
    } else {
        for (double v : x.data) {
            float f = static_cast<float>(v);
            uint32_t u;
            std::memcpy(&u, &f, 4);
            detail::wav_u32(b, u);
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!f) throw std::runtime_error("short write to " + path);
}

inline WavData read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::WavReader r(buf);

    if (r.tag() != "RIFF") throw std::runtime_error("not a wav file");
    r.u32();
    if (r.tag() != "WAVE") throw std::runtime_error("not a wav file");

    uint16_t fmt = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    bool have_fmt = false;
    WavData out;

    while (r.pos + 8 <= buf.size()) {
        std::string id = r.tag();
        uint32_t size = r.u32();
        if (id == "fmt ") {
            if (size < 16) throw std::runtime_error("bad fmt chunk");
            size_t end = r.pos + size;
            fmt = r.u16();
            channels = r.u16();
            rate = r.u32();
            r.u32();
            r.u16();
            bits = r.u16();
            r.pos = end;
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw std::runtime_error("data chunk before fmt");
            if (channels != 1) throw std::runtime_error("only mono wav files are supported");
            r.need(size);
            if (fmt == 3 && bits == 32) {
                if (size % 4 != 0) throw std::runtime_error("bad data chunk size");
                uint32_t n = size / 4;
                out.samples = Tensor({static_cast<int64_t>(n)});
                for (uint32_t i = 0; i < n; ++i) {
                    uint32_t u = r.u32();
                    float v;
                    std::memcpy(&v, &u, 4);
                    out.samples.data[i] = static_cast<double>(v);
                }
            } else if (fmt == 1 && bits == 16) {
                if (size % 2 != 0) throw std::runtime_error("bad data chunk size");
                uint32_t n = size / 2;
                out.samples = Tensor({static_cast<int64_t>(n)});
                for (uint32_t i = 0; i < n; ++i) {
                    auto v = static_cast<int16_t>(r.u16());
                    out.samples.data[i] = static_cast<double>(v) / 32767.0;
                }
            } else {
                throw std::runtime_error("unsupported wav encoding");
            }
            out.sample_rate = static_cast<int>(rate);
            return out;
        } else {
            r.need(size);
            r.pos += size;
        }
        if (size % 2 == 1 && r.pos < buf.size()) ++r.pos;  // chunks are word-aligned
    }
    throw std::runtime_error("wav file has no data chunk");
}

}  // namespace sepkit
