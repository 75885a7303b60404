#include "viti/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "viti/error.hpp"

namespace viti::analysis {

namespace {

double mi_from_bins(std::span<const std::uint32_t> bx, std::span<const std::uint32_t> by,
                    std::span<const std::size_t> index, std::size_t bins) {
    const std::size_t n = index.size();
    std::vector<std::size_t> joint(bins * bins, 0), mx(bins, 0), my(bins, 0);
    for (std::size_t i : index) {
        ++joint[bx[i] * bins + by[i]];
        ++mx[bx[i]];
        ++my[by[i]];
    }
    const double nn = static_cast<double>(n);
    // Terms are summed in sorted order so swapping x and y gives the same bits.
    std::vector<double> terms;
    for (std::size_t a = 0; a < bins; ++a) {
        for (std::size_t b = 0; b < bins; ++b) {
            const std::size_t c = joint[a * bins + b];
            if (c == 0) continue;
            terms.push_back((double(c) / nn) * std::log(double(c) * nn / (double(mx[a]) * double(my[b]))));
        }
    }
    std::sort(terms.begin(), terms.end());
    const double mi = std::accumulate(terms.begin(), terms.end(), 0.0);
    const std::size_t kxy = terms.size();
    const auto nonzero = [](const std::vector<std::size_t>& v) {
        return static_cast<double>(std::count_if(v.begin(), v.end(), [](std::size_t c) { return c > 0; }));
    };
    // Miller-Madow correction of the plug-in bias.
    return mi - (double(kxy) - nonzero(mx) - nonzero(my) + 1.0) / (2.0 * nn);
}

bool constant(std::span<const double> x) {
    return std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); });
}

double quantile_sorted(const std::vector<double>& s, double q) {
    const double pos = q * static_cast<double>(s.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (pos - double(lo)) * (s[hi] - s[lo]);
}

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double avg = 0.5 * double(i + j);
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

std::vector<double> unit_direction(std::size_t dim, Rng& rng) {
    std::vector<double> u(dim);
    double n2 = 0.0;
    for (double& v : u) {
        v = rng.normal();
        n2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (double& v : u) v *= inv;
    return u;
}

double project(std::span<const double> u, std::span<const float> x) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * x[i];
    return s;
}

void finish_report(Theorem1Report& r) {
    std::size_t ok = 0, strict = 0;
    for (const auto& c : r.checks) {
        ok += c.satisfied;
        strict += c.strict;
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, r.checks.size()));
    r.satisfied_fraction = double(ok) / n;
    r.strict_fraction = double(strict) / n;
}

ProjectionCheck compare(std::span<const double> before, std::span<const double> after,
                        std::span<const double> visual, const MIOptions& mi, std::uint64_t seed) {
    ProjectionCheck c;
    MIOptions o = mi;
    o.seed = seed;
    c.before = mi_binned(before, visual, o);
    c.after = mi_binned(after, visual, o);
    c.tolerance = std::max(c.before.ci_width(), c.after.ci_width());
    c.satisfied = c.after.value >= c.before.value - c.tolerance;
    c.strict = c.after.ci_lo > c.before.ci_hi;
    return c;
}

// Wraps the decoding hook and keeps (o, o_hat) of each selected head.
class RecordingIntervenor final : public Intervenor {
public:
    RecordingIntervenor(VitiIntervenor& inner, std::span<const HeadId> selected)
        : inner_(inner), selected_(selected.begin(), selected.end()) {}

    void on_layer(const LayerContext& ctx, std::span<HeadTap> heads) override {
        std::vector<std::vector<float>> before;
        for (const auto& id : selected_) {
            if (id.layer != ctx.layer) continue;
            before.emplace_back(heads[id.head].o.begin(), heads[id.head].o.end());
        }
        const std::size_t fired_before = fired_count(ctx);
        inner_.on_layer(ctx, heads);
        if (fired_count(ctx) > fired_before) gated = true;
        std::size_t k = 0;
        for (std::size_t s = 0; s < selected_.size(); ++s) {
            if (selected_[s].layer != ctx.layer) continue;
            const auto& o_hat = heads[selected_[s].head].o;
            o[s] = std::move(before[k++]);
            out[s].assign(o_hat.begin(), o_hat.end());
        }
    }

    void reset() {
        o.assign(selected_.size(), {});
        out.assign(selected_.size(), {});
        gated = false;
    }

    std::vector<std::vector<float>> o, out;
    bool gated = false;

private:
    static std::size_t fired_count(const LayerContext& ctx) {
        if (!ctx.decisions) return 0;
        return static_cast<std::size_t>(std::count_if(ctx.decisions->begin(), ctx.decisions->end(),
                                                      [](const GateDecision& d) { return d.fired; }));
    }

    VitiIntervenor& inner_;
    std::vector<HeadId> selected_;
};

std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double parse_double(std::string_view s, std::size_t line) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw FormatError("sweep csv line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
    }
    return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == sep) {
            out.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

} // namespace

std::vector<std::uint32_t> quantile_bins(std::span<const double> x, std::size_t bins) {
    if (bins == 0) throw ConfigError("mi bins must be positive");
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<std::uint32_t> out(n);
    std::size_t first = 0;
    for (std::size_t r = 0; r < n; ++r) {
        if (r > 0 && x[idx[r]] != x[idx[r - 1]]) first = r;
        out[idx[r]] = static_cast<std::uint32_t>(first * bins / n);
    }
    return out;
}

MIEstimate mi_binned(std::span<const double> x, std::span<const double> y, const MIOptions& options) {
    if (x.size() != y.size()) throw ShapeError("mi_binned: x and y lengths differ");
    if (options.bins < 2) throw ConfigError("mi bins must be at least 2");
    if (x.size() < 30 * options.bins) {
        throw ConfigError("mi_binned needs at least 30 samples per bin (" + std::to_string(30 * options.bins) +
                          "), got " + std::to_string(x.size()));
    }
    if (!(options.confidence > 0.0 && options.confidence < 1.0)) {
        throw ConfigError("mi confidence must lie in (0, 1)");
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw NumericError("mi_binned: non-finite sample");
    }
    MIEstimate est;
    est.bins = options.bins;
    est.n_samples = x.size();
    if (constant(x) || constant(y)) {
        est.degenerate = true;
        est.warning = "degenerate distribution: constant input column, mutual information set to 0";
        return est;
    }
    const auto bx = quantile_bins(x, options.bins);
    const auto by = quantile_bins(y, options.bins);
    std::vector<std::size_t> all(x.size());
    std::iota(all.begin(), all.end(), 0);
    est.value = mi_from_bins(bx, by, all, options.bins);

    if (options.resamples == 0) {
        est.ci_lo = est.ci_hi = est.value;
        return est;
    }
    Rng rng(options.seed);
    std::vector<double> boot(options.resamples);
    std::vector<std::size_t> pick(x.size());
    const auto hi_index = static_cast<std::int64_t>(x.size() - 1);
    for (double& b : boot) {
        for (auto& p : pick) p = static_cast<std::size_t>(rng.uniform_int(0, hi_index));
        b = mi_from_bins(bx, by, pick, options.bins);
    }
    // Percentile interval of the bootstrap deviations, centred on the point
    // estimate so the resampling bias does not shift it.
    const double mean = std::accumulate(boot.begin(), boot.end(), 0.0) / double(boot.size());
    for (double& b : boot) b -= mean;
    std::sort(boot.begin(), boot.end());
    const double tail = 0.5 * (1.0 - options.confidence);
    est.ci_lo = std::min(est.value, est.value + quantile_sorted(boot, tail));
    est.ci_hi = std::max(est.value, est.value + quantile_sorted(boot, 1.0 - tail));
    return est;
}

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ShapeError("spearman: x and y lengths differ");
    if (x.size() < 2) throw ConfigError("spearman needs at least two points");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sxy / std::sqrt(sxx * syy);
}

std::string_view status_name(CheckStatus s) {
    switch (s) {
    case CheckStatus::pass: return "pass";
    case CheckStatus::fail: return "fail";
    case CheckStatus::inconclusive: return "inconclusive";
    }
    return "?";
}

Theorem1Report theorem1_check(const Model& model, const ProbeBank& bank, const InterventionConfig& cfg,
                              std::span<const synth::QASample> samples, const Theorem1Options& options) {
    cfg.validate();
    check_compatible(model, bank);
    if (options.projections == 0) throw ConfigError("theorem1 projections must be positive");
    if (options.perturbation) options.perturbation->options.validate();
    const ModelConfig& mc = model.config();
    const auto selected = select_top_beta(bank, cfg.beta);
    VitiIntervenor inner(bank, HeadSelection(bank.layers(), bank.heads(), selected), cfg);
    RecordingIntervenor rec(inner, selected);

    const std::size_t n = samples.size();
    const std::size_t hd = mc.hidden();
    std::vector<std::vector<float>> visual(n, std::vector<float>(hd, 0.0f));
    // [selected][sample] -> D floats
    std::vector<std::vector<std::vector<float>>> o(selected.size()), o_hat(selected.size());
    Theorem1Report report;
    report.samples = n;
    report.required_fraction = options.required_fraction;

    DecodeOptions dopts;
    dopts.intervenor = &rec;
    dopts.record_timing = false;
    for (std::size_t i = 0; i < n; ++i) {
        Prompt prompt = samples[i].prompt();
        if (options.perturbation) {
            Rng rng = Rng::derive(options.perturbation->seed, i);
            prompt = perturb_prompt(model, prompt, options.perturbation->kind, options.perturbation->options, rng);
        }
        const Matrix emb = prompt_embeddings(model, prompt);
        for (std::size_t j = prompt.span.start; j < prompt.span.end; ++j) {
            for (std::size_t k = 0; k < hd; ++k) visual[i][k] += emb(j, k);
        }
        for (float& v : visual[i]) v /= static_cast<float>(prompt.span.size());
        rec.reset();
        decode_greedy(model, prompt, 1, dopts);
        report.gated_samples += rec.gated;
        for (std::size_t s = 0; s < selected.size(); ++s) {
            o[s].push_back(std::move(rec.o[s]));
            o_hat[s].push_back(std::move(rec.out[s]));
        }
    }

    Rng rng(options.seed);
    std::vector<std::vector<double>> u(options.projections), w(options.projections);
    for (std::size_t d = 0; d < options.projections; ++d) {
        u[d] = unit_direction(mc.head_dim, rng);
        w[d] = unit_direction(hd, rng);
    }
    std::vector<double> xs(n), before(n), after(n);
    for (std::size_t s = 0; s < selected.size(); ++s) {
        for (std::size_t d = 0; d < options.projections; ++d) {
            for (std::size_t i = 0; i < n; ++i) {
                xs[i] = project(w[d], visual[i]);
                before[i] = project(u[d], o[s][i]);
                after[i] = project(u[d], o_hat[s][i]);
            }
            ProjectionCheck c = compare(before, after, xs, options.mi,
                                        splitmix64(options.mi.seed ^ (s * 1000003 + d)));
            c.layer = selected[s].layer;
            c.head = selected[s].head;
            c.direction = d;
            report.checks.push_back(std::move(c));
        }
    }
    finish_report(report);
    if (report.gated_samples == 0) {
        report.status = CheckStatus::inconclusive;
    } else {
        report.status = report.satisfied_fraction >= options.required_fraction ? CheckStatus::pass : CheckStatus::fail;
    }
    return report;
}

Theorem1Report theorem1_planted(const PlantedOptions& options) {
    if (options.head_dim == 0 || options.projections == 0) throw ConfigError("planted check needs positive sizes");
    if (!(options.alpha > 0.0 && options.alpha <= 1.0)) throw ConfigError("planted alpha must lie in (0, 1]");
    Rng rng(options.seed);
    const std::size_t n = options.samples, d = options.head_dim;
    std::vector<double> gain(d), shift(d);
    for (std::size_t k = 0; k < d; ++k) {
        gain[k] = 1.5 * rng.normal();
        shift[k] = 0.5 * rng.normal();
    }
    std::vector<double> signal(n);
    std::vector<std::vector<float>> o(n, std::vector<float>(d)), o_hat(n, std::vector<float>(d));
    for (std::size_t i = 0; i < n; ++i) {
        signal[i] = rng.normal();
        for (std::size_t k = 0; k < d; ++k) {
            const double mu = std::tanh(gain[k] * signal[i] + shift[k]);
            o[i][k] = static_cast<float>(rng.normal());
            o_hat[i][k] = static_cast<float>((1.0 - options.alpha) * o[i][k] + options.alpha * mu);
        }
    }
    Theorem1Report report;
    report.samples = n;
    report.gated_samples = n;
    report.required_fraction = 1.0;
    std::vector<double> before(n), after(n);
    for (std::size_t p = 0; p < options.projections; ++p) {
        const auto u = unit_direction(d, rng);
        for (std::size_t i = 0; i < n; ++i) {
            before[i] = project(u, o[i]);
            after[i] = project(u, o_hat[i]);
        }
        ProjectionCheck c = compare(before, after, signal, options.mi, splitmix64(options.mi.seed + p));
        c.direction = p;
        report.checks.push_back(std::move(c));
    }
    finish_report(report);
    report.status = report.strict_fraction >= 1.0 ? CheckStatus::pass : CheckStatus::fail;
    return report;
}

DegradationCurve degradation_curve(const Model& model, std::span<const synth::QASample> samples,
                                   std::span<const std::uint32_t> steps, const synth::EvalPerturbation& base,
                                   std::size_t workers) {
    if (steps.empty() || steps.front() != 0) throw ConfigError("degradation steps must start at 0");
    if (!std::is_sorted(steps.begin(), steps.end()) ||
        std::adjacent_find(steps.begin(), steps.end()) != steps.end()) {
        throw ConfigError("degradation steps must be strictly ascending");
    }
    DegradationCurve curve;
    for (std::uint32_t step : steps) {
        synth::EvalOptions opts;
        opts.workers = workers;
        if (step > 0) {
            synth::EvalPerturbation p = base;
            p.kind = PerturbKind::gaussian;
            p.options.noise_step = step;
            opts.perturbation = p;
        }
        const synth::Metrics m = synth::eval_task(model, samples, opts);
        curve.rows.push_back({step, m.accuracy, m.existence.accuracy, m.existence.f1, m.visual_mass});
    }
    std::vector<double> xs, ys;
    for (const auto& r : curve.rows) {
        xs.push_back(r.step);
        ys.push_back(r.accuracy);
    }
    curve.rank_correlation = curve.rows.size() >= 2 ? spearman(xs, ys) : 0.0;
    return curve;
}

std::vector<AblationRow> ablation_suite(const Model& model, const ProbeBank& bank, const InterventionConfig& cfg,
                                        std::span<const synth::QASample> samples,
                                        const synth::EvalPerturbation& perturbation, std::size_t workers) {
    cfg.validate();
    struct Variant {
        const char* name;
        std::optional<synth::EvalIntervention> iv;
    };
    InterventionConfig open = cfg;
    open.gate_threshold = 0.0;
    const std::vector<Variant> variants{
        {"baseline", std::nullopt},
        {"full", synth::EvalIntervention{&bank, cfg, RecallTarget::visual}},
        {"w/o VND", synth::EvalIntervention{&bank, open, RecallTarget::visual}},
        {"w/o VRI", synth::EvalIntervention{&bank, cfg, RecallTarget::probe_direction}},
    };
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        synth::EvalOptions opts;
        opts.workers = workers;
        opts.intervention = v.iv;
        AblationRow row;
        row.name = v.name;
        row.clean = synth::eval_task(model, samples, opts);
        opts.perturbation = perturbation;
        row.perturbed = synth::eval_task(model, samples, opts);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string_view metric_name(SweepMetric m) {
    switch (m) {
    case SweepMetric::accuracy: return "accuracy";
    case SweepMetric::existence_accuracy: return "existence_accuracy";
    case SweepMetric::existence_f1: return "existence_f1";
    }
    return "?";
}

SweepMetric metric_from_name(std::string_view name) {
    for (auto m : {SweepMetric::accuracy, SweepMetric::existence_accuracy, SweepMetric::existence_f1}) {
        if (metric_name(m) == name) return m;
    }
    throw ConfigError("unknown sweep metric '" + std::string(name) + "'");
}

double metric_value(const synth::Metrics& m, SweepMetric metric) {
    switch (metric) {
    case SweepMetric::accuracy: return m.accuracy;
    case SweepMetric::existence_accuracy: return m.existence.accuracy;
    case SweepMetric::existence_f1: return m.existence.f1;
    }
    return 0.0;
}

std::string SweepResult::to_csv() const {
    std::string out = "alpha0,beta,score\n";
    for (std::size_t a = 0; a < alphas.size(); ++a) {
        for (std::size_t b = 0; b < betas.size(); ++b) {
            out += fmt(alphas[a]) + "," + fmt(betas[b]) + "," + fmt(at(a, b)) + "\n";
        }
    }
    return out;
}

SweepResult sweep(const Model& model, const ProbeBank& bank, std::span<const synth::QASample> samples,
                  std::span<const double> alphas, std::span<const double> betas, const synth::EvalOptions& base,
                  SweepMetric metric) {
    if (alphas.empty() || betas.empty()) throw ConfigError("sweep grids must be non-empty");
    SweepResult r;
    r.alphas.assign(alphas.begin(), alphas.end());
    r.betas.assign(betas.begin(), betas.end());
    r.metric = metric;
    synth::EvalOptions plain = base;
    plain.intervention.reset();
    r.baseline = metric_value(synth::eval_task(model, samples, plain), metric);
    for (double a : alphas) {
        for (double b : betas) {
            synth::EvalOptions opts = base;
            synth::EvalIntervention iv;
            iv.bank = &bank;
            if (base.intervention) iv = *base.intervention, iv.bank = &bank;
            iv.config.alpha0 = a;
            iv.config.beta = b;
            opts.intervention = iv;
            r.scores.push_back(metric_value(synth::eval_task(model, samples, opts), metric));
        }
    }
    for (std::size_t a = 0; a < alphas.size(); ++a) {
        for (std::size_t b = 0; b < betas.size(); ++b) {
            if (r.at(a, b) > r.best_score()) {
                r.best_alpha = a;
                r.best_beta = b;
            }
        }
    }
    return r;
}

std::string PivotTable::to_csv() const {
    std::string out = "alpha0";
    for (double b : betas) out += ",beta=" + fmt(b);
    out += "\n";
    for (std::size_t a = 0; a < alphas.size(); ++a) {
        out += fmt(alphas[a]);
        for (std::size_t b = 0; b < betas.size(); ++b) {
            out += ",";
            if (const auto& c = cells[a * betas.size() + b]) out += fmt(*c);
        }
        out += "\n";
    }
    return out;
}

PivotTable pivot_sweep_csv(std::string_view csv) {
    std::vector<std::string_view> lines;
    for (auto line : split(csv, '\n')) {
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!line.empty()) lines.push_back(line);
    }
    if (lines.empty()) throw FormatError("sweep csv is empty");
    const auto header = split(lines[0], ',');
    auto column = [&](std::string_view name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw FormatError("sweep csv has no '" + std::string(name) + "' column");
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t ca = column("alpha0"), cb = column("beta"), cs = column("score");
    std::map<std::pair<double, double>, double> cells;
    std::vector<double> alphas, betas;
    for (std::size_t l = 1; l < lines.size(); ++l) {
        const auto f = split(lines[l], ',');
        if (f.size() != header.size()) throw FormatError("sweep csv line " + std::to_string(l + 1) + ": wrong field count");
        const double a = parse_double(f[ca], l + 1), b = parse_double(f[cb], l + 1), s = parse_double(f[cs], l + 1);
        if (!cells.emplace(std::make_pair(a, b), s).second) {
            throw FormatError("sweep csv line " + std::to_string(l + 1) + ": duplicate cell");
        }
        alphas.push_back(a);
        betas.push_back(b);
    }
    auto uniq = [](std::vector<double>& v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    uniq(alphas);
    uniq(betas);
    PivotTable t;
    t.alphas = alphas;
    t.betas = betas;
    for (double a : alphas) {
        for (double b : betas) {
            const auto it = cells.find({a, b});
            t.cells.push_back(it == cells.end() ? std::nullopt : std::optional<double>(it->second));
        }
    }
    return t;
}

OverheadReport overhead_benchmark(const Model& model, const ProbeBank& bank, const InterventionConfig& cfg,
                                  const OverheadOptions& options) {
    cfg.validate();
    check_compatible(model, bank);
    const ModelConfig& mc = model.config();
    if (options.repeats < 5) throw ConfigError("overhead benchmark needs at least 5 repeats");
    if (options.new_tokens == 0 || options.new_tokens >= options.context) {
        throw ConfigError("overhead new_tokens must lie in (0, context)");
    }
    if (options.context > mc.max_seq) throw ConfigError("overhead context exceeds the model's max_seq");
    Rng rng(options.seed);
    Prompt prompt;
    const std::size_t len = options.context - options.new_tokens;
    for (std::size_t i = 0; i < len; ++i) {
        prompt.tokens.push_back(static_cast<int>(rng.uniform_int(0, mc.vocab_size - 1)));
    }
    prompt.span = {1, std::max<std::size_t>(2, 1 + len / 2)};

    const auto ids = select_top_beta(bank, cfg.beta);
    VitiIntervenor hook(bank, HeadSelection(bank.layers(), bank.heads(), ids), cfg);
    auto per_token = [&](Intervenor* iv) {
        DecodeOptions d;
        d.intervenor = iv;
        const auto t0 = std::chrono::steady_clock::now();
        const auto trace = decode_greedy(model, prompt, options.new_tokens, d);
        const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        double decode = 0.0;
        for (const auto& s : trace.steps) decode += s.seconds;
        if (decode <= 0.0) decode = total;
        return decode / static_cast<double>(trace.steps.size());
    };
    for (std::size_t w = 0; w < options.warmup; ++w) {
        per_token(nullptr);
        per_token(&hook);
    }
    std::vector<double> greedy, viti;
    for (std::size_t r = 0; r < options.repeats; ++r) {
        greedy.push_back(per_token(nullptr));
        viti.push_back(per_token(&hook));
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t m = v.size() / 2;
        return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    };
    OverheadReport r;
    r.greedy_seconds_per_token = median(greedy);
    r.viti_seconds_per_token = median(viti);
    r.ratio = r.viti_seconds_per_token / r.greedy_seconds_per_token;
    r.viti_state_bytes = sizeof(float) * mc.head_dim + std::size_t{mc.layers} * mc.heads + mc.layers +
                         sizeof(GateDecision) * ids.size();
    r.repeats = options.repeats;
    r.context = options.context;
    return r;
}

} // namespace viti::analysis
