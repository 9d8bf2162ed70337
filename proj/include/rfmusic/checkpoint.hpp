#pragma once

#include <zlib.h>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "errors.hpp"
#include "run_config.hpp"
#include "trainer.hpp"

// File layout:
//   "RFMK1\n" | u64 LE header length | JSON header | f32 LE payloads | u32 LE CRC32
// The CRC covers every byte before it. The header indexes each tensor by
// name, dtype, shape and byte offset into the payload region.
namespace rfm {

inline constexpr char kCheckpointMagic[] = "RFMK1\n";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    RunConfig run;
    TrainState state;
    bool deterministic = false;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

inline std::uint32_t crc32_of(const char* p, std::size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        c = crc32(c, reinterpret_cast<const Bytef*>(p), chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

}  // namespace detail

/// Serializes the whole checkpoint to bytes.
inline std::string checkpoint_bytes(const Checkpoint& ck) {
    const TrainState& s = ck.state;
    nlohmann::json index = nlohmann::json::array();
    std::string payload;
    auto add = [&](const std::string& name, const Shape& shape, std::span<const float> v) {
        index.push_back({{"name", name}, {"dtype", "f32"}, {"shape", shape}, {"offset", payload.size()}});
        payload.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
    };
    const auto w = s.weights.named_parameters();
    const auto e = s.ema.named_parameters();
    for (const auto& [n, t] : w) add("weights/" + n, t.shape(), t.data());
    for (const auto& [n, t] : e) add("ema/" + n, t.shape(), t.data());
    for (std::size_t i = 0; i < w.size(); ++i) add("adam_m/" + w[i].first, w[i].second.shape(), s.adam.m[i]);
    for (std::size_t i = 0; i < w.size(); ++i) add("adam_v/" + w[i].first, w[i].second.shape(), s.adam.v[i]);

    const nlohmann::json header{{"version", kCheckpointVersion},
                                {"run", to_json(ck.run)},
                                {"model", to_json(s.model)},
                                {"train", to_json(s.train)},
                                {"step", s.step},
                                {"adam_step", s.adam.step},
                                {"rng", s.rng.state()},
                                {"latent_stats", s.stats.to_json()},
                                {"deterministic", ck.deterministic},
                                {"tensors", index}};
    const std::string h = header.dump();
    std::string out(kCheckpointMagic);
    detail::put_u64(out, h.size());
    out += h;
    out += payload;
    const std::uint32_t crc = detail::crc32_of(out.data(), out.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((crc >> (8 * i)) & 0xFF));
    return out;
}

/// Writes to `<path>.tmp` then renames, so a crash never leaves a partial file
/// under the final name.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    const auto bytes = checkpoint_bytes(ck);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw InputError("cannot write checkpoint " + tmp.string());
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw InputError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
    const std::size_t mlen = sizeof(kCheckpointMagic) - 1;
    if (bytes.size() >= 5 && bytes.compare(0, 4, "RFMK") == 0 && bytes.compare(0, mlen, kCheckpointMagic) != 0) {
        const auto nl = bytes.find('\n');
        throw VersionError(what + " has format " + bytes.substr(0, std::min<std::size_t>(nl, 16)) +
                           "; this build reads RFMK1 only. Re-export it with the matching rfmusic version.");
    }
    if (bytes.size() < mlen + 8 + 4 || bytes.compare(0, mlen, kCheckpointMagic) != 0)
        throw CorruptionError(what + " is not an RFMK1 checkpoint or is truncated");
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= std::uint32_t(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
    if (detail::crc32_of(bytes.data(), body) != stored) throw CorruptionError(what + " failed its CRC32 check (truncated or corrupt)");

    const std::uint64_t hlen = detail::get_u64(bytes, mlen);
    const std::size_t hstart = mlen + 8;
    if (hlen > body - hstart) throw CorruptionError(what + " header length exceeds file size");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(bytes.begin() + std::ptrdiff_t(hstart), bytes.begin() + std::ptrdiff_t(hstart + hlen));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(what + " header: " + e.what());
    }
    if (h.value("version", 0) != kCheckpointVersion)
        throw VersionError(what + " header version " + std::to_string(h.value("version", 0)) + " is not supported");

    Checkpoint ck;
    ck.run = run_config_from_json(h.at("run"));
    ck.deterministic = h.value("deterministic", false);
    TrainState& s = ck.state;
    s.model = ck.run.model;
    merge_json(s.model, h.at("model"));
    merge_json(s.train, h.at("train"));
    s.step = h.at("step").get<std::uint64_t>();
    s.rng.set_state(h.at("rng").get<std::string>());
    s.stats = LatentStats::from_json(h.at("latent_stats"));

    Rng scratch(0);
    s.weights = ModelWeights<float>::init(s.model, scratch);
    s.ema = s.weights.clone(false);
    auto wp = s.weights.parameters();
    s.adam.init(wp);
    s.adam.step = h.at("adam_step").get<std::uint64_t>();

    const char* payload = bytes.data() + hstart + hlen;
    const std::size_t payload_len = body - hstart - hlen;
    std::map<std::string, std::pair<Shape, std::size_t>> index;
    for (const auto& t : h.at("tensors")) {
        if (t.at("dtype") != "f32") throw CorruptionError(what + ": unsupported dtype " + t.at("dtype").dump());
        index[t.at("name").get<std::string>()] = {t.at("shape").get<Shape>(), t.at("offset").get<std::size_t>()};
    }
    auto fill = [&](const std::string& name, const Shape& shape, std::span<float> dst) {
        auto it = index.find(name);
        if (it == index.end()) throw CorruptionError(what + " is missing tensor " + name);
        if (it->second.first != shape)
            throw ShapeError(what + ": tensor " + name + " has shape " + to_string(it->second.first) + ", model expects " +
                             to_string(shape));
        const std::size_t off = it->second.second, n = dst.size() * sizeof(float);
        if (off > payload_len || n > payload_len - off) throw CorruptionError(what + ": tensor " + name + " overruns the payload");
        std::memcpy(dst.data(), payload + off, n);
        for (float v : dst)
            if (!std::isfinite(v)) throw CorruptionError(what + ": tensor " + name + " holds non-finite values");
    };
    const auto wn = s.weights.named_parameters();
    const auto en = s.ema.named_parameters();
    for (auto [n, t] : wn) fill("weights/" + n, t.shape(), t.mutable_data());
    for (auto [n, t] : en) fill("ema/" + n, t.shape(), t.mutable_data());
    for (std::size_t i = 0; i < wn.size(); ++i) fill("adam_m/" + wn[i].first, wn[i].second.shape(), s.adam.m[i]);
    for (std::size_t i = 0; i < wn.size(); ++i) fill("adam_v/" + wn[i].first, wn[i].second.shape(), s.adam.v[i]);
    return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes, path.string());
}

}  // namespace rfm
