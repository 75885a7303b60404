#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "viti/linalg.hpp"

namespace viti {

struct ModelConfig {
    std::uint32_t layers = 4;
    std::uint32_t heads = 4;
    std::uint32_t head_dim = 16;
    std::uint32_t ffn_mult = 4;
    std::uint32_t vocab_size = 64;
    std::uint32_t max_seq = 320;
    /// Multiplier on the token-embedding rows of the visual span (before
    /// positions are added). Sets how much signal survives heavy noise.
    float visual_scale = 1.0f;
    float ln_eps = 1e-5f;

    std::size_t hidden() const { return std::size_t{heads} * head_dim; }
    std::size_t ffn_width() const { return std::size_t{ffn_mult} * hidden(); }

    /// Throws ConfigError naming the offending field.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    std::vector<float> ln1_gain, ln1_bias;
    std::vector<Matrix> w_q, w_k, w_v; // one HD x D matrix per head
    Matrix w_o;                          // HD x HD
    std::vector<float> ln2_gain, ln2_bias;
    Matrix w_1; // HD x mHD
    Matrix w_2; // HD x mHD, applied transposed

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

class Model {
public:
    Model() = default;
    /// Zero-initialised weights with unit layernorm gains.
    explicit Model(const ModelConfig& config);

    static Model random(const ModelConfig& config, std::uint64_t seed);
    /// Same shapes, every parameter zero (gains included); used as a gradient buffer.
    static Model zeros_like(const Model& other);

    const ModelConfig& config() const { return config_; }

    Matrix& embedding() { return embedding_; }
    const Matrix& embedding() const { return embedding_; }
    LayerWeights& layer(std::size_t l) { return layers_.at(l); }
    const LayerWeights& layer(std::size_t l) const { return layers_.at(l); }
    std::vector<float>& final_gain() { return final_gain_; }
    const std::vector<float>& final_gain() const { return final_gain_; }
    std::vector<float>& final_bias() { return final_bias_; }
    const std::vector<float>& final_bias() const { return final_bias_; }
    Matrix& unembedding() { return unembedding_; }
    const Matrix& unembedding() const { return unembedding_; }

    /// Fixed sinusoidal position table, max_seq x HD.
    const Matrix& positions() const { return positions_; }

    /// Token embedding row (no position term, no visual scaling).
    void token_embedding(int token, std::span<float> out) const;

    /// Visits every learned parameter block in checkpoint order.
    void for_each_param(const std::function<void(std::string_view, std::span<float>)>& fn);
    void for_each_param(const std::function<void(std::string_view, std::span<const float>)>& fn) const;
    std::size_t param_count() const;

    /// FNV-1a over the serialized checkpoint payload; probe banks and
    /// datasets carry it to detect mismatched models.
    std::uint64_t fingerprint() const;

    std::vector<std::uint8_t> serialize() const;
    static Model deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static Model load(const std::filesystem::path& path);

    friend bool operator==(const Model& a, const Model& b) {
        return a.config_ == b.config_ && a.embedding_ == b.embedding_ && a.layers_ == b.layers_ &&
               a.final_gain_ == b.final_gain_ && a.final_bias_ == b.final_bias_ &&
               a.unembedding_ == b.unembedding_;
    }

private:
    void build_positions();

    ModelConfig config_;
    Matrix embedding_; // vocab x HD
    std::vector<LayerWeights> layers_;
    std::vector<float> final_gain_, final_bias_;
    Matrix unembedding_; // HD x vocab
    Matrix positions_;
};

inline constexpr char kCheckpointMagic[4] = {'V', 'I', 'T', 'I'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

} // namespace viti
