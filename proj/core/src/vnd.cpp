#include "viti/vnd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>

#include "viti/error.hpp"
#include "viti/io.hpp"
#include "viti/perturb.hpp"

namespace viti {

namespace {

double sigmoid_d(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double logit(std::span<const double> theta, double bias, std::span<const float> x) {
    double z = bias;
    for (std::size_t i = 0; i < theta.size(); ++i) z += theta[i] * x[i];
    return z;
}

} // namespace

void ProbeHyper::validate() const {
    if (!(lr > 0.0)) throw ConfigError("probe lr must be positive");
    if (epochs == 0) throw ConfigError("probe epochs must be positive");
    if (!(l2 >= 0.0)) throw ConfigError("probe l2 must be non-negative");
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) {
        throw ConfigError("probe split_ratio must lie in (0, 1)");
    }
}

ProbeBank::ProbeBank(std::uint32_t layers, std::uint32_t heads, std::uint32_t head_dim,
                     std::uint64_t model_hash, ProbeHyper training, std::vector<Probe> probes)
    : layers_(layers), heads_(heads), head_dim_(head_dim), model_hash_(model_hash),
      training_(training), probes_(std::move(probes)) {
    if (probes_.size() != std::size_t{layers_} * heads_) {
        throw DatasetError("probe bank needs exactly L*H probes");
    }
    for (std::size_t i = 0; i < probes_.size(); ++i) {
        const Probe& p = probes_[i];
        if (std::size_t{p.layer} * heads_ + p.head != i) {
            throw DatasetError("probe bank: probes out of (layer, head) order");
        }
        if (p.theta.size() != head_dim_) throw ShapeError("probe theta length != head_dim");
        if (!(p.val_accuracy >= 0.0f && p.val_accuracy <= 1.0f)) {
            throw DatasetError("probe accuracy outside [0, 1]");
        }
    }
}

const Probe& ProbeBank::at(std::uint32_t layer, std::uint32_t head) const {
    if (layer >= layers_ || head >= heads_) throw ConfigError("probe index out of range");
    return probes_[std::size_t{layer} * heads_ + head];
}

Probe& ProbeBank::at(std::uint32_t layer, std::uint32_t head) {
    return const_cast<Probe&>(std::as_const(*this).at(layer, head));
}

std::vector<float> ProbeBank::sorted_accuracies() const {
    std::vector<float> acc;
    acc.reserve(probes_.size());
    for (const auto& p : probes_) acc.push_back(p.val_accuracy);
    std::sort(acc.begin(), acc.end(), std::greater<>());
    return acc;
}

// Layout: "VPRB" | u16 version | u64 model hash | u32 L, H, D | f64 lr |
// u32 epochs | f64 l2, split_ratio | u64 seed | per probe: u16 layer,
// u16 head, f32 val_accuracy, f32 bias, D x f32 theta.
std::vector<std::uint8_t> ProbeBank::serialize() const {
    io::ByteWriter w;
    w.bytes(std::string_view(kProbeBankMagic, 4));
    w.u16(kProbeBankVersion);
    w.u64(model_hash_);
    w.u32(layers_);
    w.u32(heads_);
    w.u32(head_dim_);
    w.f64(training_.lr);
    w.u32(training_.epochs);
    w.f64(training_.l2);
    w.f64(training_.split_ratio);
    w.u64(training_.seed);
    for (const auto& p : probes_) {
        w.u16(static_cast<std::uint16_t>(p.layer));
        w.u16(static_cast<std::uint16_t>(p.head));
        w.f32(p.val_accuracy);
        w.f32(p.bias);
        w.f32s(p.theta);
    }
    return w.buffer();
}

ProbeBank ProbeBank::deserialize(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes, "probe bank");
    if (r.bytes(4) != std::string_view(kProbeBankMagic, 4)) {
        throw FormatError("probe bank: bad magic (expected VPRB)");
    }
    const auto version = r.u16();
    if (version != kProbeBankVersion) {
        throw CompatibilityError("probe bank: unsupported version " + std::to_string(version));
    }
    const auto hash = r.u64();
    const auto layers = r.u32();
    const auto heads = r.u32();
    const auto dim = r.u32();
    ProbeHyper hyper;
    hyper.lr = r.f64();
    hyper.epochs = r.u32();
    hyper.l2 = r.f64();
    hyper.split_ratio = r.f64();
    hyper.seed = r.u64();
    std::vector<Probe> probes(std::size_t{layers} * heads);
    for (auto& p : probes) {
        p.layer = r.u16();
        p.head = r.u16();
        p.val_accuracy = r.f32();
        p.bias = r.f32();
        p.theta.resize(dim);
        r.f32s(p.theta);
    }
    if (!r.at_end()) throw FormatError("probe bank: trailing bytes");
    return ProbeBank(layers, heads, dim, hash, hyper, std::move(probes));
}

void ProbeBank::save(const std::filesystem::path& path) const { io::write_atomic(path, serialize()); }

ProbeBank ProbeBank::load(const std::filesystem::path& path) {
    return deserialize(io::read_file(path));
}

float probe_score(const Probe& probe, std::span<const float> o) {
    if (o.size() != probe.theta.size()) {
        throw ShapeError("probe_score: activation length " + std::to_string(o.size()) +
                         " vs theta " + std::to_string(probe.theta.size()));
    }
    const double z = dot(probe.theta, o) + probe.bias;
    return static_cast<float>(sigmoid_d(z));
}

double bce_loss(double p, int label) {
    constexpr double lo = 1e-7;
    const double q = std::clamp(p, lo, 1.0 - lo);
    return label ? -std::log(q) : -std::log(1.0 - q);
}

BceGradient mean_bce_gradient(std::span<const double> theta, double bias, const Matrix& x,
                              std::span<const std::uint8_t> labels, double l2) {
    if (x.cols() != theta.size()) throw ShapeError("mean_bce_gradient: theta length");
    if (x.rows() != labels.size()) throw ShapeError("mean_bce_gradient: label count");
    if (x.rows() == 0) throw InputError("mean_bce_gradient: no rows");
    BceGradient g;
    g.grad_theta.assign(theta.size(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto row = x.row(i);
        const double p = sigmoid_d(logit(theta, bias, row));
        g.loss += bce_loss(p, labels[i]);
        const double r = p - labels[i];
        for (std::size_t k = 0; k < theta.size(); ++k) g.grad_theta[k] += r * row[k];
        g.grad_bias += r;
    }
    const double inv = 1.0 / static_cast<double>(x.rows());
    g.loss *= inv;
    g.grad_bias *= inv;
    double sq = 0.0;
    for (std::size_t k = 0; k < theta.size(); ++k) {
        g.grad_theta[k] = g.grad_theta[k] * inv + l2 * theta[k];
        sq += theta[k] * theta[k];
    }
    g.loss += 0.5 * l2 * sq;
    return g;
}

Probe train_probe(const Matrix& x, std::span<const std::uint8_t> labels, const ProbeHyper& hyper,
                  std::uint32_t layer, std::uint32_t head, ProbeTrainLog* log, bool pair_groups) {
    hyper.validate();
    if (x.rows() != labels.size()) throw ShapeError("train_probe: label count");
    const std::size_t group = pair_groups ? 2 : 1;
    if (x.rows() % group != 0) throw DatasetError("train_probe: rows are not in pairs");

    std::vector<std::size_t> groups(x.rows() / group);
    std::iota(groups.begin(), groups.end(), 0);
    Rng rng(hyper.seed);
    rng.shuffle(groups);
    const auto n_train = static_cast<std::size_t>(
        std::floor(hyper.split_ratio * static_cast<double>(groups.size())));

    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        auto& dst = g < n_train ? train_idx : val_idx;
        for (std::size_t k = 0; k < group; ++k) dst.push_back(groups[g] * group + k);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());

    auto gather = [&](const std::vector<std::size_t>& idx, Matrix& out,
                      std::vector<std::uint8_t>& out_labels) {
        out = Matrix(idx.size(), x.cols());
        out_labels.resize(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto src = x.row(idx[i]);
            std::copy(src.begin(), src.end(), out.row(i).begin());
            out_labels[i] = labels[idx[i]];
        }
    };
    Matrix xt, xv;
    std::vector<std::uint8_t> yt, yv;
    gather(train_idx, xt, yt);
    gather(val_idx, xv, yv);

    const auto positives = static_cast<std::size_t>(std::count(yt.begin(), yt.end(), 1));
    if (positives < 2 || yt.size() - positives < 2) {
        throw TrainingError("train_probe: need at least 2 rows of each class in the training split");
    }
    if (xv.rows() == 0) throw TrainingError("train_probe: validation split is empty");

    std::vector<double> theta(x.cols(), 0.0);
    double bias = 0.0;
    for (std::uint32_t e = 0; e < hyper.epochs; ++e) {
        const BceGradient g = mean_bce_gradient(theta, bias, xt, yt, hyper.l2);
        if (log) log->loss_per_epoch.push_back(g.loss);
        if (!std::isfinite(g.loss)) throw TrainingError("train_probe: loss diverged");
        for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= hyper.lr * g.grad_theta[k];
        bias -= hyper.lr * g.grad_bias;
    }

    Probe probe;
    probe.layer = layer;
    probe.head = head;
    probe.theta.assign(theta.begin(), theta.end());
    probe.bias = static_cast<float>(bias);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        const bool predicted = probe_score(probe, xv.row(i)) > 0.5f;
        correct += predicted == (yv[i] == 1) ? 1 : 0;
    }
    probe.val_accuracy = static_cast<float>(static_cast<double>(correct) / xv.rows());
    return probe;
}

ProbeBank train_probe_bank(const ProbeDataset& dataset, const ProbeHyper& hyper) {
    const auto& h = dataset.header();
    if (dataset.rows() == 0) throw DatasetError("probe dataset is empty");
    std::vector<Probe> probes;
    probes.reserve(std::size_t{h.layers} * h.heads);
    for (std::uint32_t l = 0; l < h.layers; ++l) {
        for (std::uint32_t hd = 0; hd < h.heads; ++hd) {
            probes.push_back(
                train_probe(dataset.head_rows(l, hd), dataset.labels(), hyper, l, hd, nullptr, true));
        }
    }
    return ProbeBank(h.layers, h.heads, h.head_dim, h.model_hash, hyper, std::move(probes));
}

std::vector<HeadId> select_top_beta(const ProbeBank& bank, double beta) {
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in (0, 1]");
    const std::size_t total = bank.probes().size();
    if (total == 0) throw ConfigError("select_top_beta: empty probe bank");
    auto k = static_cast<std::size_t>(std::floor(beta * static_cast<double>(total) + 1e-9));
    k = std::clamp<std::size_t>(k, 1, total);

    std::vector<HeadId> ids;
    ids.reserve(total);
    for (const auto& p : bank.probes()) ids.push_back({p.layer, p.head});
    std::stable_sort(ids.begin(), ids.end(), [&](const HeadId& a, const HeadId& b) {
        return bank.at(a.layer, a.head).val_accuracy > bank.at(b.layer, b.head).val_accuracy;
    });
    ids.resize(k);
    return ids;
}

} // namespace viti
