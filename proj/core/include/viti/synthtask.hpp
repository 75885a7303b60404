#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "viti/model.hpp"
#include "viti/perturb.hpp"
#include "viti/runtime.hpp"
#include "viti/vnd.hpp"
#include "viti/vri.hpp"

namespace viti::synth {

enum class Shape : std::uint8_t { circle = 0, square = 1, triangle = 2 };
enum class Color : std::uint8_t { red = 0, blue = 1, yellow = 2, white = 3 };
inline constexpr std::size_t kShapes = 3;
inline constexpr std::size_t kColors = 4;
inline constexpr int kMaxCount = 4;

// Closed vocabulary. Visual tokens are <empty> followed by the 12
// shape x color objects, shape-major.
namespace tok {
inline constexpr int pad = 0, bos = 1, eos = 2, img = 3, img_end = 4, qmark = 5;
inline constexpr int is = 6, there = 7, a = 8, what = 9, color = 10, the = 11, how = 12,
                     many = 13;
inline constexpr int yes = 14, no = 15;
inline constexpr int shape0 = 16;  // circle, square, triangle
inline constexpr int color0 = 19;  // red, blue, yellow, white
inline constexpr int digit0 = 23;  // 0..4
inline constexpr int empty = 28;
inline constexpr int object0 = 29; // 12 objects
inline constexpr int count = 41;
} // namespace tok

int shape_token(Shape s);
int color_token(Color c);
int digit_token(int n);
int object_token(Shape s, Color c);
bool is_visual_token(int token);
std::string_view token_name(int token);
/// Inverse of token_name; nullopt for unknown words.
std::optional<int> token_from_name(std::string_view name);
std::string detokenize(std::span<const int> tokens);

struct Object {
    Shape shape = Shape::circle;
    Color color = Color::red;
    friend bool operator==(const Object&, const Object&) = default;
};

struct GridConfig {
    std::uint32_t rows = 3;
    std::uint32_t cols = 3;
    std::uint32_t min_objects = 1;
    std::uint32_t max_objects = 4;

    std::size_t cells() const { return std::size_t{rows} * cols; }
    void validate() const;
    friend bool operator==(const GridConfig&, const GridConfig&) = default;
};

struct Scene {
    std::uint32_t rows = 0, cols = 0;
    std::vector<std::optional<Object>> cells; // row-major

    std::size_t object_count() const;
    int count_shape(Shape s) const;
    bool contains(Shape s, Color c) const;
    /// One visual token per cell, row-major.
    std::vector<int> visual_tokens() const;
    static Scene from_visual_tokens(std::span<const int> tokens, std::uint32_t rows,
                                    std::uint32_t cols);
    friend bool operator==(const Scene&, const Scene&) = default;
};

Scene random_scene(const GridConfig& grid, Rng& rng);

enum class QuestionKind : std::uint8_t { existence = 0, color = 1, count = 2 };
inline constexpr std::size_t kQuestionKinds = 3;
std::string_view kind_name(QuestionKind k);
QuestionKind kind_from_name(std::string_view name);

struct QASample {
    std::vector<int> tokens; // full prompt, ending with "?"
    VisualSpan span;
    std::vector<int> answer; // gold answer token(s), without <eos>
    QuestionKind kind = QuestionKind::existence;

    std::span<const int> visual_tokens() const;
    std::span<const int> question_tokens() const;
    Prompt prompt() const;
    friend bool operator==(const QASample&, const QASample&) = default;
};

struct QuestionMix {
    double existence = 0.6;
    double color = 0.2;
    double count = 0.2;

    void validate() const;
    friend bool operator==(const QuestionMix&, const QuestionMix&) = default;
};

struct DatasetHeader {
    std::uint64_t seed = 0;
    std::size_t size = 0;
    GridConfig grid;
    QuestionMix mix;
    friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct Dataset {
    DatasetHeader header;
    std::vector<QASample> samples;

    /// Line-delimited JSON: one header record, then one record per sample.
    std::string to_jsonl() const;
    static Dataset from_jsonl(std::string_view text);
    void save(const std::filesystem::path& path) const;
    static Dataset load(const std::filesystem::path& path);
    friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline constexpr int kDatasetVersion = 1;

/// Existence questions alternate yes/no by their running index, so the
/// split is exact up to one sample. Deterministic in `seed`.
Dataset gen_dataset(std::uint64_t seed, std::size_t size, const GridConfig& grid = {},
                    const QuestionMix& mix = {});

/// Rule-based answer for a prompt, parsed back from its tokens alone.
std::vector<int> interpret(std::span<const int> prompt_tokens, VisualSpan span,
                           std::uint32_t rows, std::uint32_t cols);

/// Same questions, each paired with the scene of a different sample.
/// Gold answers are left untouched.
Dataset shuffle_scenes(const Dataset& dataset, std::uint64_t seed);

struct BinaryCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const { return tp + fp + tn + fn; }
};

struct BinaryMetrics {
    double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
};

/// Precision/recall/F1 are 0 when their denominators are.
BinaryMetrics binary_metrics(const BinaryCounts& c);

struct Metrics {
    /// Existence questions, "yes" as the positive class. Any other token
    /// counts as a "no" prediction.
    BinaryMetrics existence;
    BinaryCounts existence_counts;
    std::array<double, kQuestionKinds> kind_accuracy{};
    std::array<std::size_t, kQuestionKinds> kind_total{};
    double accuracy = 0.0; // exact first-answer match over every sample
    /// Attention mass on the visual span, averaged over layers, heads and
    /// decode steps.
    double visual_mass = 0.0;
    /// Fraction of (selected head, step) decisions whose gate fired.
    double gate_rate = 0.0;
    std::size_t samples = 0;
};

struct EvalIntervention {
    const ProbeBank* bank = nullptr;
    InterventionConfig config;
    RecallTarget target = RecallTarget::visual;
};

struct EvalPerturbation {
    PerturbKind kind = PerturbKind::gaussian;
    PerturbOptions options;
    std::uint64_t seed = 0;
};

struct EvalOptions {
    std::optional<EvalIntervention> intervention;
    std::optional<EvalPerturbation> perturbation;
    /// Generated tokens per sample; only the first is scored.
    std::size_t max_new = 1;
    std::size_t workers = 1;
};

/// Per-sample outcome, kept so callers can build custom breakdowns.
struct SampleResult {
    int predicted = -1;
    bool correct = false;
    double visual_mass = 0.0;
    std::size_t decisions = 0;
    std::size_t fired = 0;
};

Metrics eval_task(const Model& model, std::span<const QASample> samples,
                  const EvalOptions& options = {}, std::vector<SampleResult>* per_sample = nullptr);

/// Folds per-sample outcomes into metrics.
Metrics summarize(std::span<const QASample> samples, std::span<const SampleResult> results);

} // namespace viti::synth
