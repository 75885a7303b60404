#include "viti/runtime.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <string>

#include "viti/error.hpp"
#include "viti/vri.hpp"

namespace viti {

void VisualSpan::validate(std::size_t context_len) const {
    if (!(start < end && end <= context_len)) {
        throw ConfigError("visual span [" + std::to_string(start) + ", " + std::to_string(end) +
                          ") invalid for context length " + std::to_string(context_len));
    }
}

std::size_t GenerationTrace::gates_fired() const {
    std::size_t n = 0;
    for (const auto& s : steps) {
        for (const auto& d : s.decisions) n += d.fired ? 1 : 0;
    }
    return n;
}

std::size_t argmax(std::span<const float> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

std::vector<float> head_activation(std::span<const float> attn_row, RowView values) {
    if (attn_row.size() != values.count) {
        throw ShapeError("head_activation: attention row length " +
                         std::to_string(attn_row.size()) + " vs " + std::to_string(values.count) +
                         " value rows");
    }
    std::vector<double> acc(values.width(), 0.0);
    for (std::size_t j = 0; j < values.count; ++j) {
        const double a = attn_row[j];
        const auto v = values.row(j);
        for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += a * v[d];
    }
    return {acc.begin(), acc.end()};
}

Matrix prompt_embeddings(const Model& model, const Prompt& prompt) {
    const std::size_t c = model.config().hidden();
    Matrix out(prompt.tokens.size(), c);
    for (std::size_t i = 0; i < prompt.tokens.size(); ++i) {
        model.token_embedding(prompt.tokens[i], out.row(i));
    }
    if (prompt.visual_embeddings) {
        const Matrix& vis = *prompt.visual_embeddings;
        prompt.span.validate(prompt.tokens.size());
        if (vis.rows() != prompt.span.size() || vis.cols() != c) {
            throw ShapeError("visual embedding override must be span x hidden");
        }
        for (std::size_t i = 0; i < vis.rows(); ++i) {
            const auto src = vis.row(i);
            std::copy(src.begin(), src.end(), out.row(prompt.span.start + i).begin());
        }
    } else if (prompt.span.size() > 0) {
        prompt.span.validate(prompt.tokens.size());
        const float scale = model.config().visual_scale;
        for (std::size_t i = prompt.span.start; i < prompt.span.end; ++i) {
            for (float& v : out.row(i)) v *= scale;
        }
    }
    return out;
}

Matrix initial_states(const Model& model, const Prompt& prompt) {
    Matrix x = prompt_embeddings(model, prompt);
    if (x.rows() > model.config().max_seq) throw InputError("prompt longer than max_seq");
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto row = x.row(i);
        const auto pos = model.positions().row(i);
        for (std::size_t d = 0; d < row.size(); ++d) row[d] += pos[d];
    }
    return x;
}

namespace detail {

RowScratch::RowScratch(const ModelConfig& cfg)
    : normed(cfg.hidden()), q(cfg.head_dim), concat(cfg.hidden()), proj(cfg.hidden()),
      ffn_in(cfg.hidden()), ffn_hidden(cfg.ffn_width()), ffn_out(cfg.hidden()),
      acc(cfg.head_dim), attn(cfg.heads, cfg.max_seq), taps(cfg.heads) {}

} // namespace detail

namespace {

using detail::RowScratch;

// Runs layer `l` for the query at `pos`, whose row `x` is updated in place.
// keys/values hold this layer's per-head caches; row `pos` is written here.
// Returns the summed visual attention mass over heads.
double layer_row(const Model& model, std::size_t l, std::span<float> x, std::size_t pos,
                 std::span<Matrix> keys, std::span<Matrix> values, RowScratch& s,
                 const VisualSpan& span, Intervenor* hook, std::vector<GateDecision>* decisions) {
    const ModelConfig& cfg = model.config();
    const LayerWeights& lw = model.layer(l);
    const std::size_t heads = cfg.heads;
    const std::size_t d = cfg.head_dim;
    const std::size_t ctx = pos + 1;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));

    layer_norm_into(x, lw.ln1_gain, lw.ln1_bias, cfg.ln_eps, s.normed);

    double mass = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
        vecmat(s.normed, lw.w_q[h], s.q);
        vecmat(s.normed, lw.w_k[h], keys[h].row(pos));
        vecmat(s.normed, lw.w_v[h], values[h].row(pos));

        std::span<float> attn(s.attn.row(h).data(), ctx);
        for (std::size_t j = 0; j < ctx; ++j) {
            attn[j] = static_cast<float>(dot(s.q, keys[h].row(j))) * scale;
        }
        softmax_inplace(attn);

        if (span.end > span.start) {
            double m = 0.0;
            for (std::size_t j = span.start; j < std::min(span.end, ctx); ++j) m += attn[j];
            mass += m;
        }

        std::span<float> o(s.concat.data() + h * d, d);
        std::fill(o.begin(), o.end(), 0.0f);
        // o = A V over the visible rows.
        std::vector<double>& acc = s.acc;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < ctx; ++j) {
            const double a = attn[j];
            const auto v = values[h].row(j);
            for (std::size_t k = 0; k < d; ++k) acc[k] += a * v[k];
        }
        for (std::size_t k = 0; k < d; ++k) o[k] = static_cast<float>(acc[k]);

        if (hook) s.taps[h] = HeadTap{static_cast<std::uint32_t>(h), attn, RowView{&values[h], ctx}, o};
    }

    if (hook) {
        LayerContext lctx{static_cast<std::uint32_t>(l), pos, span, decisions};
        try {
            hook->on_layer(lctx, s.taps);
        } catch (const std::exception& e) {
            throw GenerationError("intervenor failed at layer " + std::to_string(l) +
                                  ", position " + std::to_string(pos) + ": " + e.what());
        }
    }

    vecmat(s.concat, lw.w_o, s.proj);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += s.proj[i];

    layer_norm_into(x, lw.ln2_gain, lw.ln2_bias, cfg.ln_eps, s.ffn_in);
    vecmat(s.ffn_in, lw.w_1, s.ffn_hidden);
    for (float& v : s.ffn_hidden) v = silu(v);
    vecmat_t(s.ffn_hidden, lw.w_2, s.ffn_out);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += s.ffn_out[i];
    return mass;
}

} // namespace

DecodeSession::DecodeSession(const Model& model, VisualSpan span)
    : model_(&model), span_(span), scratch_(model.config()) {
    const ModelConfig& cfg = model.config();
    const std::size_t n = std::size_t{cfg.layers} * cfg.heads;
    keys_.assign(n, Matrix(cfg.max_seq, cfg.head_dim));
    values_.assign(n, Matrix(cfg.max_seq, cfg.head_dim));
    x_.resize(cfg.hidden());
    normed_.resize(cfg.hidden());
}

double DecodeSession::feed(std::span<const float> token_embedding, Intervenor* hook,
                           std::vector<GateDecision>* decisions, std::span<float> logits) {
    const ModelConfig& cfg = model_->config();
    if (length_ >= cfg.max_seq) throw InputError("sequence exceeds max_seq");
    if (token_embedding.size() != cfg.hidden()) throw ShapeError("feed: embedding width");

    const auto pos = model_->positions().row(length_);
    for (std::size_t i = 0; i < x_.size(); ++i) x_[i] = token_embedding[i] + pos[i];

    double mass = 0.0;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        std::span<Matrix> k(keys_.data() + l * cfg.heads, cfg.heads);
        std::span<Matrix> v(values_.data() + l * cfg.heads, cfg.heads);
        mass += layer_row(*model_, l, x_, length_, k, v, scratch_, span_, hook, decisions);
    }
    ++length_;

    if (!logits.empty()) {
        layer_norm_into(x_, model_->final_gain(), model_->final_bias(), cfg.ln_eps, normed_);
        vecmat(normed_, model_->unembedding(), logits);
    }
    return mass / static_cast<double>(std::size_t{cfg.layers} * cfg.heads);
}

GenerationTrace decode_greedy(const Model& model, const Prompt& prompt, std::size_t max_new,
                              const DecodeOptions& options) {
    if (prompt.tokens.empty()) throw InputError("decode: empty prompt");
    const ModelConfig& cfg = model.config();
    if (prompt.tokens.size() + max_new > cfg.max_seq) {
        throw InputError("decode: prompt length + max_new exceeds max_seq");
    }
    prompt.span.validate(prompt.tokens.size());

    GenerationTrace trace;
    if (max_new == 0) return trace;

    const Matrix emb = prompt_embeddings(model, prompt);
    DecodeSession session(model, prompt.span);
    for (std::size_t i = 0; i + 1 < emb.rows(); ++i) session.feed(emb.row(i), nullptr, nullptr, {});

    std::vector<float> logits(cfg.vocab_size);
    std::vector<float> next_emb(cfg.hidden());
    std::span<const float> input = emb.row(emb.rows() - 1);
    using clock = std::chrono::steady_clock;
    for (std::size_t t = 0; t < max_new; ++t) {
        StepRecord step;
        const auto t0 = options.record_timing ? clock::now() : clock::time_point{};
        step.visual_mass = session.feed(input, options.intervenor,
                                        options.intervenor ? &step.decisions : nullptr, logits);
        step.token = static_cast<int>(argmax(logits));
        if (options.record_timing) {
            step.seconds = std::chrono::duration<double>(clock::now() - t0).count();
        }
        trace.tokens.push_back(step.token);
        trace.steps.push_back(std::move(step));
        if (options.stop_token && trace.tokens.back() == *options.stop_token) break;
        if (t + 1 == max_new) break;
        model.token_embedding(trace.tokens.back(), next_emb);
        input = next_emb;
    }
    return trace;
}

Matrix layer_forward(const Model& model, std::size_t layer, const Matrix& x, VisualSpan span,
                     Intervenor* intervenor, std::size_t intervene_from) {
    const ModelConfig& cfg = model.config();
    if (layer >= cfg.layers) throw ConfigError("layer index " + std::to_string(layer) + " out of range");
    if (x.cols() != cfg.hidden()) throw ShapeError("layer_forward: input width");
    if (x.rows() > cfg.max_seq) throw InputError("layer_forward: sequence exceeds max_seq");
    std::vector<Matrix> keys(cfg.heads, Matrix(x.rows(), cfg.head_dim));
    std::vector<Matrix> values(cfg.heads, Matrix(x.rows(), cfg.head_dim));
    RowScratch scratch(cfg);
    Matrix out = x;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        Intervenor* hook = i >= intervene_from ? intervenor : nullptr;
        layer_row(model, layer, out.row(i), i, keys, values, scratch, span, hook, nullptr);
    }
    return out;
}

std::vector<ActivationRecord> head_forward(const Model& model, std::size_t layer, const Matrix& x,
                                           std::size_t head, VisualSpan span, float epsilon) {
    const ModelConfig& cfg = model.config();
    if (layer >= cfg.layers || head >= cfg.heads) throw ConfigError("head index out of range");
    if (x.cols() != cfg.hidden()) throw ShapeError("head_forward: input width");
    span.validate(x.rows());

    // Collects the taps of one head while the layer runs unmodified.
    struct Recorder final : Intervenor {
        std::size_t head;
        float epsilon;
        std::vector<ActivationRecord> out;
        void on_layer(const LayerContext& ctx, std::span<HeadTap> taps) override {
            const HeadTap& t = taps[head];
            ActivationRecord rec;
            rec.layer = ctx.layer;
            rec.head = t.head;
            rec.attn_row.assign(t.attn_row.begin(), t.attn_row.end());
            rec.o.assign(t.o.begin(), t.o.end());
            VisualSpan clipped = ctx.span;
            clipped.end = std::min(clipped.end, t.values.count);
            if (clipped.start < clipped.end) {
                rec.mu = visual_activation(t.attn_row, t.values, clipped, epsilon);
            } else {
                rec.mu.assign(t.o.size(), 0.0f);
            }
            out.push_back(std::move(rec));
        }
    } recorder;
    recorder.head = head;
    recorder.epsilon = epsilon;
    layer_forward(model, layer, x, span, &recorder, 0);
    return recorder.out;
}

} // namespace viti
