#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sepkit/common.hpp"
#include "sepkit/network.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

// On-disk model container. Every tensor is stored as float32; names are
// namespaced (det.*, score.*, opt.*, ema.*, meta.*) so one file can hold a
// whole training stage. Serialization is little-endian and byte-stable: the
// same content always produces the same file.
struct Checkpoint {
    std::map<std::string, Tensor> t;
};

enum class CkptKind : uint64_t { Extractor = 0, Refiner = 1, Student = 2 };

namespace detail {

inline void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& buf, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(buf, u);
}

struct ByteReader {
    const std::string& buf;
    size_t pos = 0;

    explicit ByteReader(const std::string& b) : buf(b) {}

    void need(size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint file truncated");
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
    float f32() {
        uint32_t u = u32();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    std::string buf;
    buf.append("SEPK1", 5);
    buf.push_back('\0');
    detail::put_u32(buf, static_cast<uint32_t>(ck.t.size()));
    for (const auto& [name, tensor] : ck.t) {
        detail::put_u32(buf, static_cast<uint32_t>(name.size()));
        buf.append(name);
        detail::put_u32(buf, static_cast<uint32_t>(tensor.shape.size()));
        for (int64_t d : tensor.shape) detail::put_u32(buf, static_cast<uint32_t>(d));
        for (double v : tensor.data) detail::put_f32(buf, static_cast<float>(v));
    }
    return buf;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf) {
    detail::ByteReader r(buf);
    if (r.bytes(6) != std::string("SEPK1\0", 6)) throw std::runtime_error("not a checkpoint file");
    uint32_t count = r.u32();
    Checkpoint ck;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = r.u32();
        if (name_len == 0 || name_len > (1u << 16)) throw std::runtime_error("bad tensor name length");
        std::string name = r.bytes(name_len);
        uint32_t rank = r.u32();
        if (rank > 8) throw std::runtime_error("bad tensor rank");
        std::vector<int64_t> shape;
        int64_t n = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            uint32_t dim = r.u32();
            if (dim == 0 || dim > (1u << 28)) throw std::runtime_error("bad tensor dimension");
            shape.push_back(static_cast<int64_t>(dim));
            n *= static_cast<int64_t>(dim);
        }
        Tensor t(shape);
        for (int64_t k = 0; k < n; ++k) t.data[static_cast<size_t>(k)] = r.f32();
        if (ck.t.count(name)) throw std::runtime_error("duplicate tensor name " + name);
        ck.t[name] = std::move(t);
    }
    if (r.pos != buf.size()) throw std::runtime_error("trailing bytes after checkpoint payload");
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::string buf = serialize_checkpoint(ck);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(buf);
}

// 64-bit values ride along as four float32 words, 16 bits each, low word
// first. Word values stay far below 2^24 so the float encoding is exact.
inline Tensor encode_u64(uint64_t v) {
    Tensor t({4});
    for (int i = 0; i < 4; ++i)
        t.data[static_cast<size_t>(i)] = static_cast<double>((v >> (16 * i)) & 0xffffull);
    return t;
}

inline uint64_t decode_u64(const Tensor& t) {
    if (t.numel() != 4) throw std::runtime_error("encoded word must have 4 entries");
    uint64_t v = 0;
    for (int i = 0; i < 4; ++i) {
        double w = t.data[static_cast<size_t>(i)];
        if (w < 0.0 || w > 65535.0 || w != static_cast<double>(static_cast<uint64_t>(w)))
            throw std::runtime_error("encoded word out of range");
        v |= static_cast<uint64_t>(w) << (16 * i);
    }
    return v;
}

inline Tensor encode_rng_state(const std::array<uint64_t, 4>& s) {
    Tensor t({16});
    for (int i = 0; i < 4; ++i) {
        Tensor w = encode_u64(s[static_cast<size_t>(i)]);
        for (int j = 0; j < 4; ++j) t.data[static_cast<size_t>(4 * i + j)] = w.data[static_cast<size_t>(j)];
    }
    return t;
}

inline std::array<uint64_t, 4> decode_rng_state(const Tensor& t) {
    if (t.numel() != 16) throw std::runtime_error("encoded rng state must have 16 entries");
    std::array<uint64_t, 4> s{};
    for (int i = 0; i < 4; ++i) {
        Tensor w({4});
        for (int j = 0; j < 4; ++j) w.data[static_cast<size_t>(j)] = t.data[static_cast<size_t>(4 * i + j)];
        s[static_cast<size_t>(i)] = decode_u64(w);
    }
    return s;
}

// Copies a parameter set into the checkpoint under a dotted prefix.
inline void put_params(Checkpoint& ck, const std::string& prefix, const Parameters& p) {
    for (const auto& [k, v] : p.t) ck.t[prefix + "." + k] = v;
}

// Extracts the parameter set stored under a prefix; throws if none is present.
inline Parameters take_params(const Checkpoint& ck, const std::string& prefix) {
    Parameters p;
    std::string pre = prefix + ".";
    for (const auto& [k, v] : ck.t)
        if (k.size() > pre.size() && k.compare(0, pre.size(), pre) == 0)
            p.t[k.substr(pre.size())] = v;
    if (p.t.empty()) throw std::runtime_error("checkpoint holds no tensors under " + prefix);
    return p;
}

// Hash of the float32 payload bytes of every det.* tensor, in name order.
// Ties a refiner or student checkpoint to the exact extractor it was trained
// against.
inline uint64_t det_payload_hash(const Checkpoint& ck) {
    uint64_t h = 14695981039346656037ull;
    for (const auto& [k, v] : ck.t) {
        if (k.compare(0, 4, "det.") != 0) continue;
        for (double x : v.data) {
            float f = static_cast<float>(x);
            unsigned char b[4];
            std::memcpy(b, &f, 4);
            h = fnv1a64(b, 4, h);
        }
    }
    return h;
}

inline void stamp_meta(Checkpoint& ck, CkptKind kind, const std::array<uint64_t, 4>& rng) {
    ck.t["meta.kind"] = encode_u64(static_cast<uint64_t>(kind));
    ck.t["meta.rng"] = encode_rng_state(rng);
    ck.t["meta.det_hash"] = encode_u64(det_payload_hash(ck));
}

inline CkptKind checkpoint_kind(const Checkpoint& ck) {
    auto it = ck.t.find("meta.kind");
    if (it == ck.t.end()) throw std::runtime_error("checkpoint missing meta.kind");
    uint64_t k = decode_u64(it->second);
    if (k > 2) throw std::runtime_error("unknown checkpoint kind");
    return static_cast<CkptKind>(k);
}

}  // namespace sepkit
