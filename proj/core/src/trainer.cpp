#include "viti/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include <Eigen/Dense>

#include "viti/error.hpp"

namespace viti::synth {

namespace {

using RMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RMat>;
using CMapM = Eigen::Map<const RMat>;
using Vec = Eigen::VectorXf;

CMapM cmap(const Matrix& m) { return CMapM(m.data().data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())); }
MapM map(Matrix& m) { return MapM(m.data().data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())); }

struct Packed {
    RMat x; // all sequences stacked, N x C
    std::vector<std::size_t> off, len;
    std::vector<int> tokens;
    std::vector<float> row_scale;
    std::vector<std::size_t> target_rows;
    std::vector<int> target_tokens;
};

struct LayerCache {
    RMat x_in, xhat1, n1, q, k, v, concat, x_mid, xhat2, n2, h, g;
    Vec rstd1, rstd2;
    std::vector<RMat> attn; // [seq * heads + head]
};

void ln_forward(const RMat& x, const std::vector<float>& gain, const std::vector<float>& bias,
                float eps, RMat& xhat, Vec& rstd, RMat& y) {
    const auto n = x.rows(), c = x.cols();
    xhat.resize(n, c);
    y.resize(n, c);
    rstd.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        double mean = 0.0;
        for (Eigen::Index i = 0; i < c; ++i) mean += x(r, i);
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (Eigen::Index i = 0; i < c; ++i) var += (x(r, i) - mean) * (x(r, i) - mean);
        var /= static_cast<double>(c);
        const double rs = 1.0 / std::sqrt(var + eps);
        rstd(r) = static_cast<float>(rs);
        for (Eigen::Index i = 0; i < c; ++i) {
            const float xh = static_cast<float>((x(r, i) - mean) * rs);
            xhat(r, i) = xh;
            y(r, i) = xh * gain[std::size_t(i)] + bias[std::size_t(i)];
        }
    }
}

// Accumulates into dx, dgain, dbias.
void ln_backward(const RMat& dy, const RMat& xhat, const Vec& rstd, const std::vector<float>& gain,
                 std::vector<float>& dgain, std::vector<float>& dbias, RMat& dx) {
    const auto n = dy.rows(), c = dy.cols();
    std::vector<float> dxh(static_cast<std::size_t>(c));
    for (Eigen::Index r = 0; r < n; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (Eigen::Index i = 0; i < c; ++i) {
            const float g = dy(r, i) * gain[std::size_t(i)];
            dxh[std::size_t(i)] = g;
            m1 += g;
            m2 += double{g} * xhat(r, i);
            dgain[std::size_t(i)] += dy(r, i) * xhat(r, i);
            dbias[std::size_t(i)] += dy(r, i);
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        for (Eigen::Index i = 0; i < c; ++i) {
            dx(r, i) += static_cast<float>(rstd(r) * (dxh[std::size_t(i)] - m1 - xhat(r, i) * m2));
        }
    }
}

RMat pack_heads(const std::vector<Matrix>& w) {
    const auto c = Eigen::Index(w.front().rows()), d = Eigen::Index(w.front().cols());
    RMat out(c, d * Eigen::Index(w.size()));
    for (std::size_t h = 0; h < w.size(); ++h) out.middleCols(Eigen::Index(h) * d, d) = cmap(w[h]);
    return out;
}

void unpack_heads_acc(const RMat& packed, std::vector<Matrix>& w) {
    const auto d = Eigen::Index(w.front().cols());
    for (std::size_t h = 0; h < w.size(); ++h) map(w[h]) += packed.middleCols(Eigen::Index(h) * d, d);
}

float silu_grad(float h) {
    const float s = sigmoid(h);
    return s * (1.0f + h * (1.0f - s));
}

Packed pack_batch(const Model& model, std::span<const TrainExample> batch) {
    const ModelConfig& cfg = model.config();
    const auto c = Eigen::Index(cfg.hidden());
    Packed p;
    std::size_t n = 0;
    for (const auto& ex : batch) {
        if (ex.tokens.empty()) throw InputError("training example has no tokens");
        if (ex.tokens.size() > cfg.max_seq) throw InputError("training example longer than max_seq");
        if (ex.span.size() > 0) ex.span.validate(ex.tokens.size());
        p.off.push_back(n);
        p.len.push_back(ex.tokens.size());
        n += ex.tokens.size();
    }
    p.x.resize(Eigen::Index(n), c);
    p.tokens.reserve(n);
    p.row_scale.reserve(n);
    std::vector<float> emb(static_cast<std::size_t>(c));
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto& ex = batch[s];
        for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
            const std::size_t r = p.off[s] + i;
            model.token_embedding(ex.tokens[i], emb);
            const float scale = ex.span.contains(i) ? cfg.visual_scale : 1.0f;
            const auto pos = model.positions().row(i);
            for (Eigen::Index k = 0; k < c; ++k) {
                p.x(Eigen::Index(r), k) = emb[std::size_t(k)] * scale + pos[std::size_t(k)];
            }
            p.tokens.push_back(ex.tokens[i]);
            p.row_scale.push_back(scale);
        }
        for (const auto& [pos, target] : ex.targets) {
            if (pos >= ex.tokens.size()) throw InputError("training target beyond the sequence");
            if (target < 0 || std::uint32_t(target) >= cfg.vocab_size) {
                throw InputError("training target outside vocabulary");
            }
            p.target_rows.push_back(p.off[s] + pos);
            p.target_tokens.push_back(target);
        }
    }
    if (p.target_rows.empty()) throw InputError("training batch has no targets");
    return p;
}

} // namespace

TrainExample make_example(const QASample& sample) {
    TrainExample ex;
    ex.tokens = sample.tokens;
    ex.span = sample.span;
    std::size_t pos = sample.tokens.size() - 1;
    for (int a : sample.answer) {
        ex.targets.emplace_back(pos++, a);
        ex.tokens.push_back(a);
    }
    ex.targets.emplace_back(pos, tok::eos);
    return ex;
}

double batch_loss(const Model& model, std::span<const TrainExample> batch, Model* grad) {
    const ModelConfig& cfg = model.config();
    const std::size_t L = cfg.layers, H = cfg.heads;
    const auto D = Eigen::Index(cfg.head_dim);
    const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));
    Packed p = pack_batch(model, batch);
    const std::size_t seqs = p.off.size();

    std::vector<LayerCache> caches(L);
    RMat x = std::move(p.x);
    for (std::size_t l = 0; l < L; ++l) {
        const LayerWeights& lw = model.layer(l);
        LayerCache& lc = caches[l];
        lc.x_in = x;
        ln_forward(x, lw.ln1_gain, lw.ln1_bias, cfg.ln_eps, lc.xhat1, lc.rstd1, lc.n1);
        lc.q = lc.n1 * pack_heads(lw.w_q);
        lc.k = lc.n1 * pack_heads(lw.w_k);
        lc.v = lc.n1 * pack_heads(lw.w_v);
        lc.concat.resize(x.rows(), x.cols());
        lc.attn.resize(seqs * H);
        for (std::size_t s = 0; s < seqs; ++s) {
            const auto off = Eigen::Index(p.off[s]), n = Eigen::Index(p.len[s]);
            for (std::size_t h = 0; h < H; ++h) {
                const auto col = Eigen::Index(h) * D;
                RMat& a = lc.attn[s * H + h];
                a = (lc.q.block(off, col, n, D) * lc.k.block(off, col, n, D).transpose()) * scale;
                for (Eigen::Index i = 0; i < n; ++i) {
                    float mx = -std::numeric_limits<float>::infinity();
                    for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, a(i, j));
                    float sum = 0.0f;
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        a(i, j) = std::exp(a(i, j) - mx);
                        sum += a(i, j);
                    }
                    for (Eigen::Index j = 0; j <= i; ++j) a(i, j) /= sum;
                    for (Eigen::Index j = i + 1; j < n; ++j) a(i, j) = 0.0f;
                }
                lc.concat.block(off, col, n, D) = a * lc.v.block(off, col, n, D);
            }
        }
        lc.x_mid = x + lc.concat * cmap(lw.w_o);
        ln_forward(lc.x_mid, lw.ln2_gain, lw.ln2_bias, cfg.ln_eps, lc.xhat2, lc.rstd2, lc.n2);
        lc.h = lc.n2 * cmap(lw.w_1);
        lc.g = lc.h.unaryExpr([](float v) { return silu(v); });
        x = lc.x_mid + lc.g * cmap(lw.w_2).transpose();
    }

    const auto T = Eigen::Index(p.target_rows.size());
    RMat xt(T, x.cols());
    for (Eigen::Index t = 0; t < T; ++t) xt.row(t) = x.row(Eigen::Index(p.target_rows[std::size_t(t)]));
    RMat xhat_f, nf;
    Vec rstd_f;
    ln_forward(xt, model.final_gain(), model.final_bias(), cfg.ln_eps, xhat_f, rstd_f, nf);
    RMat z = nf * cmap(model.unembedding());

    double loss = 0.0;
    RMat dz(z.rows(), z.cols());
    for (Eigen::Index t = 0; t < T; ++t) {
        const float mx = z.row(t).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j < z.cols(); ++j) sum += std::exp(double{z(t, j)} - mx);
        const double lse = mx + std::log(sum);
        const int target = p.target_tokens[std::size_t(t)];
        loss += lse - z(t, target);
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
            dz(t, j) = static_cast<float>(std::exp(double{z(t, j)} - lse) / double(T));
        }
        dz(t, target) -= 1.0f / static_cast<float>(T);
    }
    loss /= static_cast<double>(T);
    if (!grad) return loss;

    map(grad->unembedding()) += nf.transpose() * dz;
    RMat dnf = dz * cmap(model.unembedding()).transpose();
    RMat dxt = RMat::Zero(T, x.cols());
    ln_backward(dnf, xhat_f, rstd_f, model.final_gain(), grad->final_gain(), grad->final_bias(), dxt);
    RMat dx = RMat::Zero(x.rows(), x.cols());
    for (Eigen::Index t = 0; t < T; ++t) dx.row(Eigen::Index(p.target_rows[std::size_t(t)])) += dxt.row(t);

    for (std::size_t l = L; l-- > 0;) {
        const LayerWeights& lw = model.layer(l);
        LayerWeights& gw = grad->layer(l);
        LayerCache& lc = caches[l];

        // FFN: x = x_mid + g W2^T
        map(gw.w_2) += dx.transpose() * lc.g;
        RMat dh = dx * cmap(lw.w_2);
        for (Eigen::Index i = 0; i < dh.size(); ++i) dh.data()[i] *= silu_grad(lc.h.data()[i]);
        map(gw.w_1) += lc.n2.transpose() * dh;
        RMat dn2 = dh * cmap(lw.w_1).transpose();
        RMat dmid = dx;
        ln_backward(dn2, lc.xhat2, lc.rstd2, lw.ln2_gain, gw.ln2_gain, gw.ln2_bias, dmid);

        // Attention: x_mid = x_in + concat W_O
        map(gw.w_o) += lc.concat.transpose() * dmid;
        RMat dconcat = dmid * cmap(lw.w_o).transpose();
        RMat dq = RMat::Zero(dx.rows(), dx.cols()), dk = dq, dv = dq;
        for (std::size_t s = 0; s < seqs; ++s) {
            const auto off = Eigen::Index(p.off[s]), n = Eigen::Index(p.len[s]);
            for (std::size_t h = 0; h < H; ++h) {
                const auto col = Eigen::Index(h) * D;
                const RMat& a = lc.attn[s * H + h];
                const auto d_o = dconcat.block(off, col, n, D);
                RMat da = d_o * lc.v.block(off, col, n, D).transpose();
                dv.block(off, col, n, D) = a.transpose() * d_o;
                RMat ds = a.cwiseProduct(da);
                const Vec row_dot = ds.rowwise().sum();
                ds -= a.cwiseProduct(row_dot.replicate(1, n));
                ds *= scale;
                dq.block(off, col, n, D) = ds * lc.k.block(off, col, n, D);
                dk.block(off, col, n, D) = ds.transpose() * lc.q.block(off, col, n, D);
            }
        }
        unpack_heads_acc(lc.n1.transpose() * dq, gw.w_q);
        unpack_heads_acc(lc.n1.transpose() * dk, gw.w_k);
        unpack_heads_acc(lc.n1.transpose() * dv, gw.w_v);
        RMat dn1 = dq * pack_heads(lw.w_q).transpose() + dk * pack_heads(lw.w_k).transpose() +
                   dv * pack_heads(lw.w_v).transpose();
        dx = dmid;
        ln_backward(dn1, lc.xhat1, lc.rstd1, lw.ln1_gain, gw.ln1_gain, gw.ln1_bias, dx);
    }

    MapM demb = map(grad->embedding());
    for (Eigen::Index r = 0; r < dx.rows(); ++r) {
        demb.row(p.tokens[std::size_t(r)]) += dx.row(r) * p.row_scale[std::size_t(r)];
    }
    return loss;
}

void TrainHyper::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train lr must be positive");
    if (batch_size == 0) throw ConfigError("train batch_size must be positive");
    if (max_epochs == 0) throw ConfigError("train max_epochs must be positive");
    if (!(target_accuracy > 0.0 && target_accuracy <= 1.0)) {
        throw ConfigError("train target_accuracy must lie in (0, 1]");
    }
    if (!(lr_floor >= 0.0 && lr_floor <= 1.0)) throw ConfigError("train lr_floor must lie in [0, 1]");
    if (!(holdout >= 0.0 && holdout < 1.0)) throw ConfigError("train holdout must lie in [0, 1)");
    if (!(grad_clip >= 0.0)) throw ConfigError("train grad_clip must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("train weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("train Adam betas must lie in [0, 1)");
    }
}

namespace {

std::vector<std::span<float>> param_spans(Model& m) {
    std::vector<std::span<float>> out;
    m.for_each_param([&](std::string_view, std::span<float> s) { out.push_back(s); });
    return out;
}

} // namespace

TrainResult train_toy_model(std::span<const QASample> samples, const ModelConfig& config,
                            const TrainHyper& hyper,
                            const std::optional<std::filesystem::path>& checkpoint,
                            const std::function<void(const EpochLog&)>& on_epoch) {
    if (samples.empty()) throw InputError("train_toy_model: empty dataset");
    config.validate();
    hyper.validate();
    if (config.vocab_size < static_cast<std::uint32_t>(tok::count)) {
        throw ConfigError("vocab_size must be at least " + std::to_string(tok::count));
    }

    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(hyper.seed);
    rng.shuffle(order);
    const auto n_hold = static_cast<std::size_t>(std::floor(hyper.holdout * double(samples.size())));
    std::vector<QASample> holdout;
    std::vector<TrainExample> train;
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i < n_hold) {
            holdout.push_back(samples[order[i]]);
        } else {
            train.push_back(make_example(samples[order[i]]));
        }
    }
    if (train.empty()) throw InputError("train_toy_model: holdout leaves no training samples");
    if (holdout.empty()) {
        const std::size_t k = std::min<std::size_t>(samples.size(), 500);
        holdout.assign(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(k));
    }

    TrainResult result;
    result.model = Model::random(config, splitmix64(hyper.seed));
    Model grad = Model::zeros_like(result.model);
    Model m1 = Model::zeros_like(result.model);
    Model m2 = Model::zeros_like(result.model);
    auto p_w = param_spans(result.model);
    auto p_g = param_spans(grad);
    auto p_m = param_spans(m1);
    auto p_v = param_spans(m2);

    std::uint64_t step = 0;
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<TrainExample> batch;
    for (std::size_t epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
        rng.shuffle(idx);
        const double progress = static_cast<double>(epoch - 1) / static_cast<double>(hyper.max_epochs);
        const double lr = hyper.lr * (hyper.lr_floor + (1.0 - hyper.lr_floor) * 0.5 *
                                                           (1.0 + std::cos(3.14159265358979323846 * progress)));
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < idx.size(); b += hyper.batch_size) {
            batch.clear();
            for (std::size_t i = b; i < std::min(idx.size(), b + hyper.batch_size); ++i) {
                batch.push_back(train[idx[i]]);
            }
            for (auto s : p_g) std::fill(s.begin(), s.end(), 0.0f);
            const double loss = batch_loss(result.model, batch, &grad);
            if (!std::isfinite(loss)) {
                throw TrainingError("training loss diverged at epoch " + std::to_string(epoch) +
                                    ", step " + std::to_string(step));
            }
            loss_sum += loss;
            ++batches;

            double norm2 = 0.0;
            for (auto s : p_g) {
                for (float g : s) norm2 += double{g} * g;
            }
            const double norm = std::sqrt(norm2);
            if (!std::isfinite(norm)) throw TrainingError("training gradient is not finite");
            const double clip = hyper.grad_clip > 0.0 && norm > hyper.grad_clip ? hyper.grad_clip / norm : 1.0;

            ++step;
            const double bc1 = 1.0 - std::pow(hyper.beta1, double(step));
            const double bc2 = 1.0 - std::pow(hyper.beta2, double(step));
            for (std::size_t k = 0; k < p_w.size(); ++k) {
                auto w = p_w[k];
                auto g = p_g[k];
                auto m = p_m[k];
                auto v = p_v[k];
                for (std::size_t i = 0; i < w.size(); ++i) {
                    const double gi = g[i] * clip;
                    m[i] = static_cast<float>(hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi);
                    v[i] = static_cast<float>(hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi);
                    const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + hyper.adam_eps);
                    w[i] = static_cast<float>(w[i] - lr * (update + hyper.weight_decay * w[i]));
                }
            }
        }

        EpochLog log;
        log.epoch = epoch;
        log.mean_loss = loss_sum / static_cast<double>(batches);
        const Metrics m = eval_task(result.model, holdout);
        log.holdout_accuracy = m.accuracy;
        log.holdout_existence_accuracy = m.existence.accuracy;
        result.history.push_back(log);
        if (on_epoch) on_epoch(log);
        if (m.accuracy >= hyper.target_accuracy) {
            result.reached_target = true;
            break;
        }
    }
    if (checkpoint) result.model.save(*checkpoint);
    return result;
}

} // namespace viti::synth
