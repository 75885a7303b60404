#include "viti/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "viti/error.hpp"
#include "viti/io.hpp"

namespace viti {

void NoiseSchedule::validate() const {
    if (total_steps == 0) throw ConfigError("noise schedule: total_steps must be positive");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw ConfigError("noise schedule: need 0 < beta_start <= beta_end < 1");
    }
}

double NoiseSchedule::alpha_bar(std::uint32_t t) const {
    if (t > total_steps) {
        throw RangeError("noise step " + std::to_string(t) + " exceeds total_steps " +
                         std::to_string(total_steps));
    }
    double log_abar = 0.0;
    for (std::uint32_t s = 0; s < t; ++s) {
        const double frac = total_steps == 1 ? 0.0 : static_cast<double>(s) / (total_steps - 1);
        const double beta = beta_start + (beta_end - beta_start) * frac;
        log_abar += std::log1p(-beta);
    }
    return std::exp(log_abar);
}

Matrix gaussian_perturb(const Matrix& visual_embeddings, std::uint32_t t,
                        const NoiseSchedule& schedule, Rng& rng) {
    schedule.validate();
    const double abar = schedule.alpha_bar(t);
    if (t == 0) return visual_embeddings;
    const double signal = std::sqrt(abar);
    const double noise = std::sqrt(1.0 - abar);
    Matrix out = visual_embeddings;
    for (float& v : out.data()) v = static_cast<float>(signal * v + noise * rng.normal());
    return out;
}

Matrix attention_replacement_perturb(const Matrix& visual_embeddings,
                                     std::span<const float> attention_profile,
                                     double keep_fraction) {
    const std::size_t n = visual_embeddings.rows();
    if (n < 2) throw InputError("attention replacement needs at least 2 visual tokens");
    if (attention_profile.size() != n) {
        throw ShapeError("attention profile length " + std::to_string(attention_profile.size()) +
                         " vs " + std::to_string(n) + " visual tokens");
    }
    if (!(keep_fraction > 0.0 && keep_fraction < 1.0)) {
        throw ConfigError("keep_fraction must lie in (0, 1)");
    }
    auto n_replace =
        static_cast<std::size_t>(std::floor((1.0 - keep_fraction) * static_cast<double>(n) + 1e-9));
    n_replace = std::min(n_replace, n - 1);
    if (n_replace == 0) return visual_embeddings;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Highest attention first; equal weights go to the lower index.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return attention_profile[a] > attention_profile[b];
    });

    const std::size_t cols = visual_embeddings.cols();
    std::vector<double> mean(cols, 0.0);
    for (std::size_t k = n_replace; k < n; ++k) {
        const auto row = visual_embeddings.row(order[k]);
        for (std::size_t c = 0; c < cols; ++c) mean[c] += row[c];
    }
    const double inv = 1.0 / static_cast<double>(n - n_replace);
    Matrix out = visual_embeddings;
    for (std::size_t k = 0; k < n_replace; ++k) {
        auto row = out.row(order[k]);
        for (std::size_t c = 0; c < cols; ++c) row[c] = static_cast<float>(mean[c] * inv);
    }
    return out;
}

namespace {

// Passive hook that copies every head's output at each visited position.
struct OutputRecorder final : Intervenor {
    Matrix* out = nullptr;
    std::uint32_t heads = 0;
    void on_layer(const LayerContext& ctx, std::span<HeadTap> taps) override {
        for (const HeadTap& t : taps) {
            auto dst = out->row(std::size_t{ctx.layer} * heads + t.head);
            std::copy(t.o.begin(), t.o.end(), dst.begin());
        }
    }
};

struct AttentionAccumulator final : Intervenor {
    VisualSpan span;
    std::vector<double> sum;
    std::size_t queries = 0;
    void on_layer(const LayerContext&, std::span<HeadTap> taps) override {
        for (const HeadTap& t : taps) {
            for (std::size_t j = 0; j < span.size(); ++j) sum[j] += t.attn_row[span.start + j];
        }
        ++queries;
    }
};

} // namespace

std::vector<float> attention_profile(const Model& model, const Prompt& prompt) {
    const ModelConfig& cfg = model.config();
    prompt.span.validate(prompt.tokens.size());
    const std::size_t mid = cfg.layers / 2;
    Matrix x = initial_states(model, prompt);
    for (std::size_t l = 0; l < mid; ++l) x = layer_forward(model, l, x, prompt.span);

    AttentionAccumulator acc;
    acc.span = prompt.span;
    acc.sum.assign(prompt.span.size(), 0.0);
    // Text queries after the image; fall back to the last row when the image
    // closes the prompt.
    const std::size_t from = std::min(prompt.span.end, prompt.tokens.size() - 1);
    layer_forward(model, mid, x, prompt.span, &acc, from);

    std::vector<float> profile(prompt.span.size());
    const double denom = static_cast<double>(acc.queries) * cfg.heads;
    for (std::size_t j = 0; j < profile.size(); ++j) {
        profile[j] = static_cast<float>(acc.sum[j] / denom);
    }
    return profile;
}

void PerturbOptions::validate() const {
    schedule.validate();
    if (noise_step > schedule.total_steps) throw ConfigError("noise_step exceeds total_steps");
    if (!(gaussian_mix >= 0.0 && gaussian_mix <= 1.0)) {
        throw ConfigError("gaussian_mix must lie in [0, 1]");
    }
    if (!(keep_fraction > 0.0 && keep_fraction < 1.0)) {
        throw ConfigError("keep_fraction must lie in (0, 1)");
    }
}

Prompt perturb_prompt(const Model& model, const Prompt& prompt, PerturbKind kind,
                      const PerturbOptions& options, Rng& rng) {
    if (kind == PerturbKind::none) return prompt;
    prompt.span.validate(prompt.tokens.size());
    const Matrix emb = prompt_embeddings(model, prompt);
    Matrix visual(prompt.span.size(), emb.cols());
    for (std::size_t i = 0; i < visual.rows(); ++i) {
        const auto src = emb.row(prompt.span.start + i);
        std::copy(src.begin(), src.end(), visual.row(i).begin());
    }
    Prompt out = prompt;
    if (kind == PerturbKind::gaussian) {
        out.visual_embeddings = gaussian_perturb(visual, options.noise_step, options.schedule, rng);
    } else {
        const auto profile = attention_profile(model, prompt);
        out.visual_embeddings = attention_replacement_perturb(visual, profile, options.keep_fraction);
    }
    return out;
}

Matrix last_position_activations(const Model& model, const Prompt& prompt) {
    const ModelConfig& cfg = model.config();
    if (prompt.tokens.empty()) throw InputError("empty prompt");
    const Matrix emb = prompt_embeddings(model, prompt);
    DecodeSession session(model, prompt.span);
    for (std::size_t i = 0; i + 1 < emb.rows(); ++i) session.feed(emb.row(i), nullptr, nullptr, {});
    Matrix out(std::size_t{cfg.layers} * cfg.heads, cfg.head_dim);
    OutputRecorder rec;
    rec.out = &out;
    rec.heads = cfg.heads;
    session.feed(emb.row(emb.rows() - 1), &rec, nullptr, {});
    return out;
}

ProbeDataset::ProbeDataset(ProbeDatasetHeader header) : header_(header) {
    per_head_.resize(std::size_t{header_.layers} * header_.heads);
}

Matrix ProbeDataset::head_rows(std::uint32_t layer, std::uint32_t head) const {
    if (layer >= header_.layers || head >= header_.heads) {
        throw DatasetError("probe dataset has no rows for layer " + std::to_string(layer) +
                           ", head " + std::to_string(head));
    }
    const auto& flat = per_head_[std::size_t{layer} * header_.heads + head];
    if (flat.size() != rows() * header_.head_dim) {
        throw DatasetError("probe dataset: incomplete rows for layer " + std::to_string(layer) +
                           ", head " + std::to_string(head));
    }
    return Matrix(rows(), header_.head_dim, flat);
}

void ProbeDataset::append(const Matrix& activations, std::uint8_t label, PerturbKind kind) {
    const std::size_t n = std::size_t{header_.layers} * header_.heads;
    if (activations.rows() != n || activations.cols() != header_.head_dim) {
        throw ShapeError("probe dataset append: activations must be (L*H) x D");
    }
    if (label > 1) throw InputError("probe label must be 0 or 1");
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = activations.row(i);
        per_head_[i].insert(per_head_[i].end(), row.begin(), row.end());
    }
    labels_.push_back(label);
    kinds_.push_back(static_cast<std::uint8_t>(kind));
}

// Layout: "VPDS" | u16 version | u64 model hash | u32 total_steps | f64
// beta_start, beta_end | u32 noise_step | f64 gaussian_mix, keep_fraction |
// u64 seed | u32 L, H, D | u64 passes | passes x u8 kind | then per pass,
// per (l, h): u16 layer, u16 head, u8 label, D x f32.
std::vector<std::uint8_t> ProbeDataset::serialize() const {
    io::ByteWriter w;
    w.bytes(std::string_view(kProbeDatasetMagic, 4));
    w.u16(kProbeDatasetVersion);
    w.u64(header_.model_hash);
    w.u32(header_.options.schedule.total_steps);
    w.f64(header_.options.schedule.beta_start);
    w.f64(header_.options.schedule.beta_end);
    w.u32(header_.options.noise_step);
    w.f64(header_.options.gaussian_mix);
    w.f64(header_.options.keep_fraction);
    w.u64(header_.seed);
    w.u32(header_.layers);
    w.u32(header_.heads);
    w.u32(header_.head_dim);
    w.u64(rows());
    for (auto k : kinds_) w.u8(k);
    const std::size_t d = header_.head_dim;
    for (std::size_t r = 0; r < rows(); ++r) {
        for (std::uint32_t l = 0; l < header_.layers; ++l) {
            for (std::uint32_t h = 0; h < header_.heads; ++h) {
                w.u16(static_cast<std::uint16_t>(l));
                w.u16(static_cast<std::uint16_t>(h));
                w.u8(labels_[r]);
                const auto& flat = per_head_[std::size_t{l} * header_.heads + h];
                w.f32s(std::span(flat.data() + r * d, d));
            }
        }
    }
    return w.buffer();
}

ProbeDataset ProbeDataset::deserialize(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes, "probe dataset");
    if (r.bytes(4) != std::string_view(kProbeDatasetMagic, 4)) {
        throw FormatError("probe dataset: bad magic (expected VPDS)");
    }
    const auto version = r.u16();
    if (version != kProbeDatasetVersion) {
        throw CompatibilityError("probe dataset: unsupported version " + std::to_string(version));
    }
    ProbeDatasetHeader h;
    h.model_hash = r.u64();
    h.options.schedule.total_steps = r.u32();
    h.options.schedule.beta_start = r.f64();
    h.options.schedule.beta_end = r.f64();
    h.options.noise_step = r.u32();
    h.options.gaussian_mix = r.f64();
    h.options.keep_fraction = r.f64();
    h.seed = r.u64();
    h.layers = r.u32();
    h.heads = r.u32();
    h.head_dim = r.u32();
    const auto passes = r.u64();
    ProbeDataset ds(h);
    std::vector<std::uint8_t> kinds(passes);
    for (auto& k : kinds) k = r.u8();
    Matrix acts(std::size_t{h.layers} * h.heads, h.head_dim);
    for (std::uint64_t p = 0; p < passes; ++p) {
        std::uint8_t label = 0;
        for (std::uint32_t l = 0; l < h.layers; ++l) {
            for (std::uint32_t hd = 0; hd < h.heads; ++hd) {
                if (r.u16() != l || r.u16() != hd) {
                    throw DatasetError("probe dataset: records out of (layer, head) order");
                }
                const auto lab = r.u8();
                if (l == 0 && hd == 0) {
                    label = lab;
                } else if (lab != label) {
                    throw DatasetError("probe dataset: inconsistent label within a pass");
                }
                r.f32s(acts.row(std::size_t{l} * h.heads + hd));
            }
        }
        ds.append(acts, label, static_cast<PerturbKind>(kinds[p]));
    }
    if (!r.at_end()) throw FormatError("probe dataset: trailing bytes");
    return ds;
}

void ProbeDataset::save(const std::filesystem::path& path) const {
    io::write_atomic(path, serialize());
}

ProbeDataset ProbeDataset::load(const std::filesystem::path& path) {
    return deserialize(io::read_file(path));
}

ProbeDataset build_probe_dataset(const Model& model, std::span<const Prompt> clean,
                                 const PerturbOptions& options, std::uint64_t seed) {
    if (clean.empty()) throw InputError("build_probe_dataset: no samples");
    options.validate();
    const ModelConfig& cfg = model.config();
    ProbeDatasetHeader header;
    header.model_hash = model.fingerprint();
    header.options = options;
    header.seed = seed;
    header.layers = cfg.layers;
    header.heads = cfg.heads;
    header.head_dim = cfg.head_dim;
    ProbeDataset ds(header);
    for (std::size_t i = 0; i < clean.size(); ++i) {
        Rng rng = Rng::derive(seed, i);
        const PerturbKind kind = rng.uniform() < options.gaussian_mix
                                     ? PerturbKind::gaussian
                                     : PerturbKind::attention_replacement;
        ds.append(last_position_activations(model, clean[i]), 0, PerturbKind::none);
        const Prompt perturbed = perturb_prompt(model, clean[i], kind, options, rng);
        ds.append(last_position_activations(model, perturbed), 1, kind);
    }
    return ds;
}

} // namespace viti
