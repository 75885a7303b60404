#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "viti/model.hpp"
#include "viti/runtime.hpp"
#include "viti/synthtask.hpp"

namespace viti::synth {

/// One teacher-forced sequence. `targets` holds (position, next token)
/// pairs; only those positions contribute to the loss.
struct TrainExample {
    std::vector<int> tokens;
    VisualSpan span;
    std::vector<std::pair<std::size_t, int>> targets;
};

/// prompt + answer as input; targets are every answer token and the
/// closing <eos>.
TrainExample make_example(const QASample& sample);

/// Mean cross-entropy over every target of the batch. When `grad` is
/// non-null (shaped like `model`) the gradient is accumulated into it.
double batch_loss(const Model& model, std::span<const TrainExample> batch, Model* grad = nullptr);

struct TrainHyper {
    /// Peak learning rate; cosine-decayed to lr_floor * lr by max_epochs.
    double lr = 1e-3;
    double lr_floor = 0.1;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 40;
    /// Stop once holdout exact-match accuracy reaches this.
    double target_accuracy = 0.98;
    /// Fraction of the dataset held out for the stopping check.
    double holdout = 0.1;
    double grad_clip = 1.0;
    double weight_decay = 0.0;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const TrainHyper&, const TrainHyper&) = default;
};

struct EpochLog {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double holdout_accuracy = 0.0;
    double holdout_existence_accuracy = 0.0;
};

struct TrainResult {
    Model model;
    std::vector<EpochLog> history;
    bool reached_target = false;
};

/// Adam on mini-batches. Throws TrainingError if the loss stops being
/// finite. The checkpoint, when given, is written after the last epoch.
TrainResult train_toy_model(std::span<const QASample> samples, const ModelConfig& config,
                            const TrainHyper& hyper,
                            const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                            const std::function<void(const EpochLog&)>& on_epoch = {});

} // namespace viti::synth
