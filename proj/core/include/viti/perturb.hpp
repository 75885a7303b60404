#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "viti/linalg.hpp"
#include "viti/model.hpp"
#include "viti/runtime.hpp"

namespace viti {

/// Linear-beta forward-diffusion schedule.
struct NoiseSchedule {
    std::uint32_t total_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;

    void validate() const;
    /// Cumulative product of (1 - beta) over the first t steps; alpha_bar(0) == 1.
    double alpha_bar(std::uint32_t t) const;

    friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;
};

enum class PerturbKind : std::uint8_t { none = 0, gaussian = 1, attention_replacement = 2 };

/// x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps, eps ~ N(0, I). t = 0 is the identity.
Matrix gaussian_perturb(const Matrix& visual_embeddings, std::uint32_t t,
                        const NoiseSchedule& schedule, Rng& rng);

/// Rows holding the top (1 - keep_fraction) of the attention profile are
/// replaced by the mean of the remaining rows.
Matrix attention_replacement_perturb(const Matrix& visual_embeddings,
                                     std::span<const float> attention_profile,
                                     double keep_fraction = 0.25);

/// Mean attention each visual token receives from the text queries after
/// the span, averaged over every head of layer floor(L/2), on a clean pass.
std::vector<float> attention_profile(const Model& model, const Prompt& prompt);

struct PerturbOptions {
    NoiseSchedule schedule;
    /// Gaussian step applied for Gaussian-type positives.
    std::uint32_t noise_step = 1000;
    /// Fraction of positives using the Gaussian perturbation; the rest use
    /// attention replacement.
    double gaussian_mix = 0.5;
    double keep_fraction = 0.25;

    void validate() const;
    friend bool operator==(const PerturbOptions&, const PerturbOptions&) = default;
};

/// Applies one perturbation to the prompt's visual span. The RNG drives the
/// Gaussian noise only.
Prompt perturb_prompt(const Model& model, const Prompt& prompt, PerturbKind kind,
                      const PerturbOptions& options, Rng& rng);

struct ProbeDatasetHeader {
    std::uint64_t model_hash = 0;
    PerturbOptions options;
    std::uint64_t seed = 0;
    std::uint32_t layers = 0, heads = 0, head_dim = 0;

    friend bool operator==(const ProbeDatasetHeader&, const ProbeDatasetHeader&) = default;
};

/// Labelled last-prompt-position activations for every (layer, head).
/// Each forward pass contributes one row to every head, so labels and
/// perturbation kinds are shared across heads.
class ProbeDataset {
public:
    ProbeDataset() = default;
    explicit ProbeDataset(ProbeDatasetHeader header);

    const ProbeDatasetHeader& header() const { return header_; }
    std::size_t rows() const { return labels_.size(); }
    const std::vector<std::uint8_t>& labels() const { return labels_; }
    const std::vector<std::uint8_t>& kinds() const { return kinds_; }
    Matrix head_rows(std::uint32_t layer, std::uint32_t head) const;

    /// Appends one forward pass: `activations` is (L*H) x D, row l*H + h.
    void append(const Matrix& activations, std::uint8_t label, PerturbKind kind);

    std::vector<std::uint8_t> serialize() const;
    static ProbeDataset deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static ProbeDataset load(const std::filesystem::path& path);

    friend bool operator==(const ProbeDataset&, const ProbeDataset&) = default;

private:
    ProbeDatasetHeader header_;
    std::vector<std::uint8_t> labels_;
    std::vector<std::uint8_t> kinds_;
    std::vector<std::vector<float>> per_head_; // flattened rows x D per head
};

inline constexpr char kProbeDatasetMagic[4] = {'V', 'P', 'D', 'S'};
inline constexpr std::uint16_t kProbeDatasetVersion = 1;

/// Head activations of every (layer, head) at the prompt's last position.
Matrix last_position_activations(const Model& model, const Prompt& prompt);

/// One clean (label 0) and one perturbed (label 1) pass per prompt; the
/// perturbation type per prompt is drawn from `gaussian_mix`.
ProbeDataset build_probe_dataset(const Model& model, std::span<const Prompt> clean,
                                 const PerturbOptions& options, std::uint64_t seed);

} // namespace viti
