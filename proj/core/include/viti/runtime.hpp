#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "viti/linalg.hpp"
#include "viti/model.hpp"

namespace viti {

/// Half-open range [start, end) of vision-token positions in the prompt.
struct VisualSpan {
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - start; }
    bool contains(std::size_t j) const { return j >= start && j < end; }
    /// Throws ConfigError unless 0 <= start < end <= context_len.
    void validate(std::size_t context_len) const;

    friend bool operator==(const VisualSpan&, const VisualSpan&) = default;
};

/// Leading rows of a matrix: the cached value rows visible to a query.
struct RowView {
    const Matrix* matrix = nullptr;
    std::size_t count = 0;

    std::span<const float> row(std::size_t i) const { return matrix->row(i); }
    std::size_t width() const { return matrix->cols(); }
};

/// Per-head view of one query position, handed to an Intervenor before the
/// head outputs are concatenated. `o` may be rewritten in place.
struct HeadTap {
    std::uint32_t head = 0;
    std::span<const float> attn_row; // length == context length
    RowView values;
    std::span<float> o;
};

struct GateDecision {
    std::uint16_t layer = 0;
    std::uint16_t head = 0;
    float score = 0.0f; // probe probability p
    float alpha = 0.0f; // mixing weight applied (0 when the gate stayed closed)
    bool fired = false;

    friend bool operator==(const GateDecision&, const GateDecision&) = default;
};

struct LayerContext {
    std::uint32_t layer = 0;
    std::size_t position = 0;
    VisualSpan span;
    /// Decisions for the current decode step; null outside traced decoding.
    std::vector<GateDecision>* decisions = nullptr;
};

/// Hook invoked once per layer for every intervened query position.
class Intervenor {
public:
    virtual ~Intervenor() = default;
    virtual void on_layer(const LayerContext& ctx, std::span<HeadTap> heads) = 0;
};

struct ActivationRecord {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;
    std::vector<float> attn_row;
    std::vector<float> o;
    std::vector<float> mu;
};

struct StepRecord {
    int token = -1;
    std::vector<GateDecision> decisions;
    /// Attention mass on the visual span, averaged over layers and heads.
    double visual_mass = 0.0;
    double seconds = 0.0;

    friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct GenerationTrace {
    std::vector<int> tokens;
    std::vector<StepRecord> steps;

    std::size_t gates_fired() const;
};

struct Prompt {
    std::vector<int> tokens;
    VisualSpan span;
    /// Replacement token-embedding rows for the visual span (perturbed inputs).
    std::optional<Matrix> visual_embeddings;
};

/// Token-embedding rows (no positions) for the prompt. Visual-span rows are
/// scaled by visual_scale, or taken verbatim from the override.
Matrix prompt_embeddings(const Model& model, const Prompt& prompt);

namespace detail {

// Per-position working buffers, sized once from the model config.
struct RowScratch {
    explicit RowScratch(const ModelConfig& cfg);

    std::vector<float> normed, q, concat, proj, ffn_in, ffn_hidden, ffn_out;
    std::vector<double> acc;
    Matrix attn; // heads x max_seq, one live row per head
    std::vector<HeadTap> taps;
};

} // namespace detail

/// Incremental decoder state: one KV cache per (layer, head).
class DecodeSession {
public:
    DecodeSession(const Model& model, VisualSpan span);

    /// Runs one position through every layer. When `hook` is set it is
    /// called per layer with this position's head taps. Returns the mean
    /// visual attention mass for the position. `logits` may be empty.
    double feed(std::span<const float> token_embedding, Intervenor* hook,
                std::vector<GateDecision>* decisions, std::span<float> logits);

    std::size_t length() const { return length_; }
    const Model& model() const { return *model_; }

private:
    const Model* model_;
    VisualSpan span_;
    std::size_t length_ = 0;
    std::vector<Matrix> keys_;   // [layer * H + head] -> max_seq x D
    std::vector<Matrix> values_; // same layout
    std::vector<float> x_, normed_;
    detail::RowScratch scratch_;
};

struct DecodeOptions {
    Intervenor* intervenor = nullptr;
    std::optional<int> stop_token;
    bool record_timing = true;
};

/// Greedy (argmax) decoding. The prompt's last token is processed as the
/// first decode step so the intervenor sees the position that produces the
/// first answer token; earlier prompt positions are prefilled untouched.
GenerationTrace decode_greedy(const Model& model, const Prompt& prompt, std::size_t max_new,
                              const DecodeOptions& options = {});

/// Full-sequence forward of one head (layer input X, n x HD, pre-norm).
/// Returns a record per query position, visual activation mu included.
std::vector<ActivationRecord> head_forward(const Model& model, std::size_t layer, const Matrix& x,
                                           std::size_t head, VisualSpan span,
                                           float epsilon = 1e-8f);

/// Full-sequence forward of one layer. The intervenor (if any) is applied to
/// query rows >= intervene_from.
Matrix layer_forward(const Model& model, std::size_t layer, const Matrix& x, VisualSpan span,
                     Intervenor* intervenor = nullptr, std::size_t intervene_from = 0);

/// Layer-0 input: scaled token embeddings plus positions.
Matrix initial_states(const Model& model, const Prompt& prompt);

/// o = sum_j attn[j] * V[j] for a single query row.
std::vector<float> head_activation(std::span<const float> attn_row, RowView values);

std::size_t argmax(std::span<const float> v);

} // namespace viti
