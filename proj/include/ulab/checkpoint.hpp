#pragma once

// Checkpoint container: magic "ULCK", little-endian u32 version, u64 header
// length, UTF-8 JSON header (config, vocab, parameter manifest with shapes
// and byte offsets), raw little-endian float32 payload, trailing CRC32 of the
// payload. Round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include <json.hpp>

#include "ulab/common.hpp"
#include "ulab/model.hpp"
#include "ulab/vocab.hpp"

namespace ulab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[5] = "ULCK";

struct Checkpoint {
    std::uint32_t version{kCheckpointVersion};
    Model<float> model;
    Vocab vocab;
};

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    return {
        {"vocab_size", cfg.vocab_size},   {"embed_dim", cfg.embed_dim},
        {"n_layers", cfg.n_layers},       {"n_heads", cfg.n_heads},
        {"ff_mult", cfg.ff_mult},         {"context_len", cfg.context_len},
        {"init_seed", cfg.init_seed},
    };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
    cfg.n_layers = j.at("n_layers").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.ff_mult = j.at("ff_mult").get<std::size_t>();
    cfg.context_len = j.at("context_len").get<std::size_t>();
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    return cfg;
}

template <typename T>
void put_le(std::string& buf, T v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));
}

}  // namespace detail

inline void save_checkpoint(const Model<float>& model, const Vocab& vocab,
                            const std::filesystem::path& path) {
    nlohmann::json params = nlohmann::json::array();
    std::string payload;
    for (std::size_t i = 0; i < model.n_params(); ++i) {
        const Tensor<float>& p = model.params()[i];
        nlohmann::json entry;
        entry["name"] = model.names()[i];
        entry["shape"] = p.shape;
        entry["offset"] = payload.size();
        entry["nbytes"] = p.values.size() * sizeof(float);
        params.push_back(std::move(entry));
        std::size_t pos = payload.size();
        payload.resize(pos + p.values.size() * sizeof(float));
        std::memcpy(payload.data() + pos, p.values.data(), p.values.size() * sizeof(float));
    }
    nlohmann::json header = {
        {"config", detail::config_to_json(model.config())},
        {"vocab", vocab.tokens()},
        {"params", std::move(params)},
    };
    std::string header_bytes = header.dump();

    std::string buf;
    buf.append(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(buf, kCheckpointVersion);
    detail::put_le<std::uint64_t>(buf, header_bytes.size());
    buf += header_bytes;
    buf += payload;
    std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
    detail::put_le<std::uint32_t>(buf, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open checkpoint file for writing: " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw io_error("failed to write checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open checkpoint file: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    auto need = [&](std::size_t n, const char* what) {
        if (buf.size() < n) {
            throw corruption_error(std::string("truncated checkpoint (") + what + "): " +
                                   path.string());
        }
    };
    need(16, "preamble");
    if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) {
        throw corruption_error("bad checkpoint magic: " + path.string());
    }
    std::uint32_t version;
    std::memcpy(&version, buf.data() + 4, 4);
    if (version != kCheckpointVersion) {
        throw corruption_error("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint64_t header_len;
    std::memcpy(&header_len, buf.data() + 8, 8);
    need(16 + header_len + 4, "header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw corruption_error("unreadable checkpoint header: " + std::string(e.what()));
    }

    ModelConfig cfg = detail::config_from_json(header.at("config"));
    std::vector<std::string> vocab_tokens = header.at("vocab").get<std::vector<std::string>>();

    std::size_t payload_begin = 16 + header_len;
    std::size_t payload_size = 0;
    std::vector<std::string> names;
    std::vector<Tensor<float>> params;
    for (const auto& entry : header.at("params")) {
        std::size_t offset = entry.at("offset").get<std::size_t>();
        std::size_t nbytes = entry.at("nbytes").get<std::size_t>();
        std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
        need(payload_begin + offset + nbytes + 4, "payload");
        std::size_t count = nbytes / sizeof(float);
        std::vector<float> values(count);
        std::memcpy(values.data(), buf.data() + payload_begin + offset, nbytes);
        names.push_back(entry.at("name").get<std::string>());
        params.emplace_back(std::move(shape), std::move(values));
        payload_size = std::max(payload_size, offset + nbytes);
    }

    need(payload_begin + payload_size + 4, "checksum");
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + payload_begin + payload_size, 4);
    std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(buf.data() + payload_begin),
              static_cast<uInt>(payload_size)));
    if (crc != stored_crc) {
        throw corruption_error("checkpoint payload failed its CRC32 check: " + path.string());
    }

    Checkpoint ck;
    ck.version = version;
    ck.model = make_model_from_params<float>(cfg, std::move(names), std::move(params));
    ck.vocab = Vocab::from_tokens(std::move(vocab_tokens));
    return ck;
}

}  // namespace ulab
