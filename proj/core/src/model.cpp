#include "viti/model.hpp"

#include <cmath>
#include <string>

#include "viti/error.hpp"
#include "viti/io.hpp"

namespace viti {

void ModelConfig::validate() const {
    auto positive = [](std::uint32_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
    };
    positive(layers, "layers");
    positive(heads, "heads");
    positive(head_dim, "head_dim");
    positive(ffn_mult, "ffn_mult");
    positive(vocab_size, "vocab_size");
    positive(max_seq, "max_seq");
    if (!(visual_scale > 0.0f) || !std::isfinite(visual_scale)) {
        throw ConfigError("model config: visual_scale must be positive");
    }
    if (!(ln_eps > 0.0f)) throw ConfigError("model config: ln_eps must be positive");
}

Model::Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    const std::size_t c = config_.hidden();
    const std::size_t d = config_.head_dim;
    const std::size_t f = config_.ffn_width();
    embedding_ = Matrix(config_.vocab_size, c);
    layers_.resize(config_.layers);
    for (auto& lw : layers_) {
        lw.ln1_gain.assign(c, 1.0f);
        lw.ln1_bias.assign(c, 0.0f);
        lw.w_q.assign(config_.heads, Matrix(c, d));
        lw.w_k.assign(config_.heads, Matrix(c, d));
        lw.w_v.assign(config_.heads, Matrix(c, d));
        lw.w_o = Matrix(c, c);
        lw.ln2_gain.assign(c, 1.0f);
        lw.ln2_bias.assign(c, 0.0f);
        lw.w_1 = Matrix(c, f);
        lw.w_2 = Matrix(c, f);
    }
    final_gain_.assign(c, 1.0f);
    final_bias_.assign(c, 0.0f);
    unembedding_ = Matrix(c, config_.vocab_size);
    build_positions();
}

void Model::build_positions() {
    const std::size_t c = config_.hidden();
    positions_ = Matrix(config_.max_seq, c);
    for (std::size_t p = 0; p < config_.max_seq; ++p) {
        for (std::size_t i = 0; i < c; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(c));
            positions_(p, i) = static_cast<float>(std::sin(p * freq));
            if (i + 1 < c) positions_(p, i + 1) = static_cast<float>(std::cos(p * freq));
        }
    }
}

Model Model::random(const ModelConfig& config, std::uint64_t seed) {
    Model m(config);
    Rng rng(seed);
    auto init = [&rng](std::span<float> v, double stddev) {
        for (float& x : v) x = static_cast<float>(rng.normal() * stddev);
    };
    const double c = static_cast<double>(m.config_.hidden());
    const double f = static_cast<double>(m.config_.ffn_width());
    const double depth = std::sqrt(2.0 * m.config_.layers);
    init(m.embedding_.data(), 1.0);
    for (auto& lw : m.layers_) {
        for (auto& w : lw.w_q) init(w.data(), 1.0 / std::sqrt(c));
        for (auto& w : lw.w_k) init(w.data(), 1.0 / std::sqrt(c));
        for (auto& w : lw.w_v) init(w.data(), 1.0 / std::sqrt(c));
        init(lw.w_o.data(), 1.0 / std::sqrt(c) / depth);
        init(lw.w_1.data(), 1.0 / std::sqrt(c));
        init(lw.w_2.data(), 1.0 / std::sqrt(f) / depth);
    }
    init(m.unembedding_.data(), 1.0 / std::sqrt(c));
    return m;
}

Model Model::zeros_like(const Model& other) {
    Model m(other.config_);
    m.for_each_param([](std::string_view, std::span<float> v) {
        std::fill(v.begin(), v.end(), 0.0f);
    });
    return m;
}

void Model::token_embedding(int token, std::span<float> out) const {
    if (token < 0 || static_cast<std::uint32_t>(token) >= config_.vocab_size) {
        throw InputError("token id " + std::to_string(token) + " outside vocabulary");
    }
    const auto row = embedding_.row(static_cast<std::size_t>(token));
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i];
}

void Model::for_each_param(const std::function<void(std::string_view, std::span<float>)>& fn) {
    fn("embedding", embedding_.data());
    for (auto& lw : layers_) {
        fn("ln1_gain", lw.ln1_gain);
        fn("ln1_bias", lw.ln1_bias);
        for (auto& w : lw.w_q) fn("w_q", w.data());
        for (auto& w : lw.w_k) fn("w_k", w.data());
        for (auto& w : lw.w_v) fn("w_v", w.data());
        fn("w_o", lw.w_o.data());
        fn("ln2_gain", lw.ln2_gain);
        fn("ln2_bias", lw.ln2_bias);
        fn("w_1", lw.w_1.data());
        fn("w_2", lw.w_2.data());
    }
    fn("final_gain", final_gain_);
    fn("final_bias", final_bias_);
    fn("unembedding", unembedding_.data());
}

void Model::for_each_param(
    const std::function<void(std::string_view, std::span<const float>)>& fn) const {
    const_cast<Model*>(this)->for_each_param(
        [&fn](std::string_view name, std::span<float> v) { fn(name, v); });
}

std::size_t Model::param_count() const {
    std::size_t n = 0;
    for_each_param([&n](std::string_view, std::span<const float> v) { n += v.size(); });
    return n;
}

// Layout: "VITI" | u16 version | u32 layers, heads, head_dim, ffn_mult,
// vocab_size, max_seq | f32 visual_scale, ln_eps | f32 weights in
// for_each_param order.
std::vector<std::uint8_t> Model::serialize() const {
    io::ByteWriter w;
    w.bytes(std::string_view(kCheckpointMagic, 4));
    w.u16(kCheckpointVersion);
    w.u32(config_.layers);
    w.u32(config_.heads);
    w.u32(config_.head_dim);
    w.u32(config_.ffn_mult);
    w.u32(config_.vocab_size);
    w.u32(config_.max_seq);
    w.f32(config_.visual_scale);
    w.f32(config_.ln_eps);
    for_each_param([&w](std::string_view, std::span<const float> v) { w.f32s(v); });
    return w.buffer();
}

Model Model::deserialize(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes, "checkpoint");
    if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) {
        throw FormatError("checkpoint: bad magic (expected VITI)");
    }
    const auto version = r.u16();
    if (version != kCheckpointVersion) {
        throw CompatibilityError("checkpoint: unsupported version " + std::to_string(version));
    }
    ModelConfig cfg;
    cfg.layers = r.u32();
    cfg.heads = r.u32();
    cfg.head_dim = r.u32();
    cfg.ffn_mult = r.u32();
    cfg.vocab_size = r.u32();
    cfg.max_seq = r.u32();
    cfg.visual_scale = r.f32();
    cfg.ln_eps = r.f32();
    Model m(cfg);
    m.for_each_param([&r](std::string_view, std::span<float> v) { r.f32s(v); });
    if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");
    return m;
}

void Model::save(const std::filesystem::path& path) const { io::write_atomic(path, serialize()); }

Model Model::load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

std::uint64_t Model::fingerprint() const { return io::fnv1a(serialize()); }

} // namespace viti
