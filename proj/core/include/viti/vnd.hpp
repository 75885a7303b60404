#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "viti/linalg.hpp"

namespace viti {

class ProbeDataset;

struct HeadId {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;

    friend auto operator<=>(const HeadId&, const HeadId&) = default;
};

/// Linear visual-neglect probe on one head's activation.
struct Probe {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;
    std::vector<float> theta;
    float bias = 0.0f;
    float val_accuracy = 0.0f;

    friend bool operator==(const Probe&, const Probe&) = default;
};

struct ProbeHyper {
    double lr = 0.05;
    std::uint32_t epochs = 500;
    double l2 = 1e-4;
    double split_ratio = 0.8;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const ProbeHyper&, const ProbeHyper&) = default;
};

class ProbeBank {
public:
    ProbeBank() = default;
    ProbeBank(std::uint32_t layers, std::uint32_t heads, std::uint32_t head_dim,
              std::uint64_t model_hash, ProbeHyper training, std::vector<Probe> probes);

    std::uint32_t layers() const { return layers_; }
    std::uint32_t heads() const { return heads_; }
    std::uint32_t head_dim() const { return head_dim_; }
    std::uint64_t model_hash() const { return model_hash_; }
    const ProbeHyper& training() const { return training_; }

    const Probe& at(std::uint32_t layer, std::uint32_t head) const;
    Probe& at(std::uint32_t layer, std::uint32_t head);
    const std::vector<Probe>& probes() const { return probes_; }

    /// Validation accuracies, descending (the sorted-accuracy curve).
    std::vector<float> sorted_accuracies() const;

    std::vector<std::uint8_t> serialize() const;
    static ProbeBank deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static ProbeBank load(const std::filesystem::path& path);

    friend bool operator==(const ProbeBank&, const ProbeBank&) = default;

private:
    std::uint32_t layers_ = 0, heads_ = 0, head_dim_ = 0;
    std::uint64_t model_hash_ = 0;
    ProbeHyper training_;
    std::vector<Probe> probes_; // index layer * heads + head
};

inline constexpr char kProbeBankMagic[4] = {'V', 'P', 'R', 'B'};
inline constexpr std::uint16_t kProbeBankVersion = 1;

/// sigmoid(<theta, o> + bias)
float probe_score(const Probe& probe, std::span<const float> o);

/// Binary cross-entropy with p clipped to [1e-7, 1 - 1e-7].
double bce_loss(double p, int label);

struct BceGradient {
    double loss = 0.0;
    std::vector<double> grad_theta;
    double grad_bias = 0.0;
};

/// Mean BCE over the rows plus (l2/2)*|theta|^2, and its analytic gradient.
BceGradient mean_bce_gradient(std::span<const double> theta, double bias, const Matrix& x,
                              std::span<const std::uint8_t> labels, double l2);

struct ProbeTrainLog {
    std::vector<double> loss_per_epoch;
};

/// Full-batch gradient descent on one head's rows. Rows come in
/// (clean, perturbed) pairs when `pair_groups` is true, and the train/val
/// split then keeps each pair on one side.
Probe train_probe(const Matrix& x, std::span<const std::uint8_t> labels, const ProbeHyper& hyper,
                  std::uint32_t layer = 0, std::uint32_t head = 0, ProbeTrainLog* log = nullptr,
                  bool pair_groups = false);

ProbeBank train_probe_bank(const ProbeDataset& dataset, const ProbeHyper& hyper);

/// k = max(1, floor(beta * L * H)) heads with the best validation accuracy,
/// ties to the lower (layer, head). Returned in rank order.
std::vector<HeadId> select_top_beta(const ProbeBank& bank, double beta);

} // namespace viti
