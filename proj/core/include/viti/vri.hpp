#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "viti/runtime.hpp"
#include "viti/vnd.hpp"

namespace viti {

struct InterventionConfig {
    /// Intervention strength; 0 disables mixing entirely.
    double alpha0 = 0.20;
    /// Fraction of heads (by probe accuracy) allowed to intervene.
    double beta = 0.10;
    /// The gate opens when p > gate_threshold. Only test/ablation runs move
    /// it off 0.5.
    double gate_threshold = 0.5;
    double epsilon = 1e-8;

    void validate() const;
    friend bool operator==(const InterventionConfig&, const InterventionConfig&) = default;
};

/// What the gated mix moves toward.
enum class RecallTarget : std::uint8_t {
    /// Renormalised visual-span activation mu.
    visual = 0,
    /// Probe direction theta rescaled to |o| (the "w/o VRI" ablation).
    probe_direction = 1,
};

/// mu = sum_{j in span} A[j] / (sum_span A + eps) * V[j]. Throws
/// ConfigError on an empty span or one reaching past the visible rows.
std::vector<float> visual_activation(std::span<const float> attn_row, RowView values,
                                     VisualSpan span, double epsilon);

/// p > threshold: (1 - alpha) o + alpha mu with alpha = alpha0 * p;
/// otherwise o unchanged. Returns the alpha used (0 when closed).
float gated_intervention(std::span<const float> o, std::span<const float> mu, float p,
                         const InterventionConfig& cfg, std::span<float> out);
std::vector<float> gated_intervention(std::span<const float> o, std::span<const float> mu,
                                      float p, const InterventionConfig& cfg);

/// Per-(layer, head) membership of the top-beta selection.
class HeadSelection {
public:
    HeadSelection() = default;
    HeadSelection(std::uint32_t layers, std::uint32_t heads, std::span<const HeadId> selected);

    bool contains(std::uint32_t layer, std::uint32_t head) const;
    std::size_t size() const { return count_; }
    bool layer_has_any(std::uint32_t layer) const;

private:
    std::uint32_t layers_ = 0, heads_ = 0;
    std::size_t count_ = 0;
    std::vector<std::uint8_t> mask_;
    std::vector<std::uint8_t> layer_any_;
};

/// Applies probe gating + mixing to one layer's head records (current query
/// row, mu already filled). Unselected heads pass through. Decisions for selected heads are
/// appended to `decisions` when non-null. Returns the new activations.
std::vector<std::vector<float>> viti_layer_hook(std::span<const ActivationRecord> records,
                                                const ProbeBank& bank,
                                                const HeadSelection& selected,
                                                const InterventionConfig& cfg,
                                                std::vector<GateDecision>* decisions = nullptr,
                                                RecallTarget target = RecallTarget::visual);

/// The Intervenor that runs inside decoding.
class VitiIntervenor final : public Intervenor {
public:
    VitiIntervenor(const ProbeBank& bank, HeadSelection selected, InterventionConfig cfg,
                   RecallTarget target = RecallTarget::visual);

    void on_layer(const LayerContext& ctx, std::span<HeadTap> heads) override;

    const HeadSelection& selection() const { return selected_; }
    const InterventionConfig& config() const { return cfg_; }

private:
    const ProbeBank* bank_;
    HeadSelection selected_;
    InterventionConfig cfg_;
    RecallTarget target_;
    std::vector<float> mu_;
};

/// Throws CompatibilityError when the bank was trained on another model.
void check_compatible(const Model& model, const ProbeBank& bank);

/// Greedy decoding with the gated intervention. The bank must match the model.
GenerationTrace viti_generate(const Model& model, const Prompt& prompt, const ProbeBank& bank,
                              const InterventionConfig& cfg, std::size_t max_new,
                              std::optional<int> stop_token = std::nullopt,
                              RecallTarget target = RecallTarget::visual);

} // namespace viti
