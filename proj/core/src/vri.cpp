#include "viti/vri.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "viti/error.hpp"

namespace viti {

void InterventionConfig::validate() const {
    if (!(alpha0 >= 0.0 && alpha0 <= 1.0)) throw ConfigError("alpha0 must lie in [0, 1]");
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in (0, 1]");
    if (!(gate_threshold >= 0.0 && gate_threshold < 1.0)) {
        throw ConfigError("gate_threshold must lie in [0, 1)");
    }
    if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be non-negative");
}

std::vector<float> visual_activation(std::span<const float> attn_row, RowView values,
                                     VisualSpan span, double epsilon) {
    if (span.end <= span.start) throw ConfigError("visual_activation: empty visual span");
    if (span.end > values.count || attn_row.size() != values.count) {
        throw ConfigError("visual_activation: span [" + std::to_string(span.start) + ", " +
                          std::to_string(span.end) + ") outside context of " +
                          std::to_string(values.count));
    }
    double mass = 0.0;
    for (std::size_t j = span.start; j < span.end; ++j) mass += attn_row[j];
    const double norm = mass + epsilon;
    std::vector<double> acc(values.width(), 0.0);
    if (norm > 0.0) {
        for (std::size_t j = span.start; j < span.end; ++j) {
            const double w = attn_row[j] / norm;
            const auto v = values.row(j);
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += w * v[k];
        }
    }
    return {acc.begin(), acc.end()};
}

float gated_intervention(std::span<const float> o, std::span<const float> mu, float p,
                         const InterventionConfig& cfg, std::span<float> out) {
    if (o.size() != mu.size() || o.size() != out.size()) {
        throw ShapeError("gated_intervention: o, mu and output lengths differ");
    }
    const double alpha = cfg.alpha0 * p;
    if (!(p > cfg.gate_threshold) || alpha == 0.0) {
        if (out.data() != o.data()) std::copy(o.begin(), o.end(), out.begin());
        return 0.0f;
    }
    for (std::size_t i = 0; i < o.size(); ++i) {
        out[i] = static_cast<float>((1.0 - alpha) * o[i] + alpha * mu[i]);
    }
    return static_cast<float>(alpha);
}

std::vector<float> gated_intervention(std::span<const float> o, std::span<const float> mu,
                                      float p, const InterventionConfig& cfg) {
    std::vector<float> out(o.size());
    gated_intervention(o, mu, p, cfg, out);
    return out;
}

HeadSelection::HeadSelection(std::uint32_t layers, std::uint32_t heads,
                             std::span<const HeadId> selected)
    : layers_(layers), heads_(heads), mask_(std::size_t{layers} * heads, 0), layer_any_(layers, 0) {
    for (const HeadId& id : selected) {
        if (id.layer >= layers || id.head >= heads) throw ConfigError("selected head out of range");
        auto& m = mask_[std::size_t{id.layer} * heads + id.head];
        if (!m) ++count_;
        m = 1;
        layer_any_[id.layer] = 1;
    }
}

bool HeadSelection::contains(std::uint32_t layer, std::uint32_t head) const {
    if (layer >= layers_ || head >= heads_) return false;
    return mask_[std::size_t{layer} * heads_ + head] != 0;
}

bool HeadSelection::layer_has_any(std::uint32_t layer) const {
    return layer < layers_ && layer_any_[layer] != 0;
}

namespace {

void probe_direction_target(const Probe& probe, std::span<const float> o, std::span<float> out) {
    double theta_norm = 0.0, o_norm = 0.0;
    for (float t : probe.theta) theta_norm += double{t} * t;
    for (float v : o) o_norm += double{v} * v;
    theta_norm = std::sqrt(theta_norm);
    o_norm = std::sqrt(o_norm);
    const double scale = theta_norm > 0.0 ? o_norm / theta_norm : 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(probe.theta[i] * scale);
}

// One head: probe, target, gate. `o` is rewritten in place. `visual_mu`
// produces mu only once the gate is known to open.
template <class VisualMu>
GateDecision intervene_head(std::uint32_t layer, std::uint32_t head, std::span<float> o,
                            VisualMu&& visual_mu, const Probe& probe,
                            const InterventionConfig& cfg, RecallTarget target,
                            std::vector<float>& target_buf) {
    GateDecision d;
    d.layer = static_cast<std::uint16_t>(layer);
    d.head = static_cast<std::uint16_t>(head);
    d.score = probe_score(probe, o);
    if (d.score > cfg.gate_threshold && cfg.alpha0 > 0.0) {
        if (target == RecallTarget::visual) {
            visual_mu(target_buf);
        } else {
            target_buf.resize(o.size());
            probe_direction_target(probe, o, target_buf);
        }
        d.alpha = gated_intervention(o, target_buf, d.score, cfg, o);
        d.fired = d.alpha > 0.0f;
    }
    return d;
}

} // namespace

std::vector<std::vector<float>> viti_layer_hook(std::span<const ActivationRecord> records,
                                                const ProbeBank& bank,
                                                const HeadSelection& selected,
                                                const InterventionConfig& cfg,
                                                std::vector<GateDecision>* decisions,
                                                RecallTarget target) {
    cfg.validate();
    std::vector<std::vector<float>> out;
    out.reserve(records.size());
    std::vector<float> buf;
    for (const ActivationRecord& rec : records) {
        std::vector<float> o = rec.o;
        if (selected.contains(rec.layer, rec.head)) {
            if (rec.mu.size() != o.size()) throw ShapeError("viti_layer_hook: mu length");
            const auto d = intervene_head(
                rec.layer, rec.head, o, [&rec](std::vector<float>& mu) { mu = rec.mu; },
                bank.at(rec.layer, rec.head), cfg, target, buf);
            if (decisions) decisions->push_back(d);
        }
        out.push_back(std::move(o));
    }
    return out;
}

VitiIntervenor::VitiIntervenor(const ProbeBank& bank, HeadSelection selected,
                               InterventionConfig cfg, RecallTarget target)
    : bank_(&bank), selected_(std::move(selected)), cfg_(cfg), target_(target) {
    cfg_.validate();
}

void VitiIntervenor::on_layer(const LayerContext& ctx, std::span<HeadTap> heads) {
    if (!selected_.layer_has_any(ctx.layer)) return;
    for (HeadTap& tap : heads) {
        if (!selected_.contains(ctx.layer, tap.head)) continue;
        const auto d = intervene_head(
            ctx.layer, tap.head, tap.o,
            [&](std::vector<float>& mu) {
                mu = visual_activation(tap.attn_row, tap.values, ctx.span, cfg_.epsilon);
            },
            bank_->at(ctx.layer, tap.head), cfg_, target_, mu_);
        if (ctx.decisions) ctx.decisions->push_back(d);
    }
}

void check_compatible(const Model& model, const ProbeBank& bank) {
    const ModelConfig& cfg = model.config();
    if (bank.layers() != cfg.layers || bank.heads() != cfg.heads || bank.head_dim() != cfg.head_dim) {
        throw CompatibilityError("probe bank dimensions do not match the model");
    }
    if (bank.model_hash() != model.fingerprint()) {
        throw CompatibilityError("probe bank was trained on a different model checkpoint");
    }
}

GenerationTrace viti_generate(const Model& model, const Prompt& prompt, const ProbeBank& bank,
                              const InterventionConfig& cfg, std::size_t max_new,
                              std::optional<int> stop_token, RecallTarget target) {
    check_compatible(model, bank);
    const auto ids = select_top_beta(bank, cfg.beta);
    VitiIntervenor hook(bank, HeadSelection(bank.layers(), bank.heads(), ids), cfg, target);
    DecodeOptions opts;
    opts.intervenor = &hook;
    opts.stop_token = stop_token;
    return decode_greedy(model, prompt, max_new, opts);
}

} // namespace viti
