// Acceptance gate: trains the toy model once, then checks every criterion
// and prints one PASS/FAIL line each. Exit status is 0 only if all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "run_config.hpp"
#include "viti/analysis.hpp"
#include "viti/error.hpp"
#include "viti/trainer.hpp"

using namespace viti;
using namespace viti::synth;
namespace an = viti::analysis;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Toy {
    Model model;
    ProbeBank bank;
    Dataset test;
    double train_seconds = 0.0;
    double probe_seconds = 0.0;
};

bool rel_close(double got, double want, double rel = 1e-5) {
    return std::abs(got - want) <= rel * std::max(1.0, std::abs(want));
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

EvalPerturbation heavy_noise(std::uint64_t seed) {
    EvalPerturbation p;
    p.kind = PerturbKind::gaussian;
    p.options.noise_step = 1000;
    p.seed = seed;
    return p;
}

// ---- criteria that need no trained model ---------------------------------------

Outcome equation_suite() {
    std::vector<std::string> failed;
    auto expect = [&](bool ok, const char* what) {
        if (!ok) failed.emplace_back(what);
    };
    {
        std::vector<float> v{0, 0};
        softmax_inplace(v);
        expect(rel_close(v[0], 0.5) && rel_close(v[1], 0.5), "softmax [0,0]");
        v = {1, 2, 3};
        softmax_inplace(v);
        const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
        expect(rel_close(v[0], std::exp(1.0) / z) && rel_close(v[1], std::exp(2.0) / z) &&
                   rel_close(v[2], std::exp(3.0) / z),
               "softmax [1,2,3]");
        v = {1000, 0};
        softmax_inplace(v);
        expect(std::abs(v[0] - 1.0) <= 1e-12 && std::abs(v[1]) <= 1e-12, "softmax [1000,0]");
    }
    {
        const Matrix two = Matrix::from_rows({{1, 3}, {5, -1}});
        const auto o = head_activation(std::vector<float>{0.5f, 0.5f}, RowView{&two, 2});
        expect(rel_close(o[0], 3.0) && rel_close(o[1], 1.0), "head activation uniform");
        const auto single = head_activation(std::vector<float>{1.0f}, RowView{&two, 1});
        expect(single[0] == 1.0f && single[1] == 3.0f, "head activation single token");
        const Matrix v = Matrix::from_rows({{1, 0}, {0, 1}, {10, 10}});
        const auto o3 = head_activation(std::vector<float>{0.2f, 0.3f, 0.5f}, RowView{&v, 3});
        expect(rel_close(o3[0], 5.2) && rel_close(o3[1], 5.3), "head activation 3-token");
    }
    {
        Probe zero;
        zero.theta = {0, 0, 0};
        expect(probe_score(zero, std::vector<float>{4, -2, 7}) == 0.5f, "probe score zero");
        Probe unit;
        unit.theta = {0.5f, 0.25f};
        unit.bias = 0.5f;
        const double want = 1.0 / (1.0 + std::exp(-1.0));
        expect(rel_close(probe_score(unit, std::vector<float>{1, 0}), want), "probe score logit 1");
        Probe neg = unit;
        for (auto& t : neg.theta) t = -t;
        neg.bias = -neg.bias;
        expect(rel_close(probe_score(neg, std::vector<float>{1, 0}), 1.0 - want), "probe score negation");
    }
    {
        expect(rel_close(bce_loss(0.5, 0), std::log(2.0)) && rel_close(bce_loss(0.5, 1), std::log(2.0)), "bce p=0.5");
        expect(std::abs(bce_loss(1.0, 1)) <= 1e-6, "bce p=1");
        expect(rel_close(bce_loss(0.9, 0), -std::log(0.1)), "bce p=0.9 c=0");
    }
    {
        const Matrix v = Matrix::from_rows({{1, 0}, {0, 1}, {10, 10}});
        const auto mu = visual_activation(std::vector<float>{0.2f, 0.3f, 0.5f}, RowView{&v, 3}, VisualSpan{0, 2}, 0.0);
        expect(rel_close(mu[0], 0.4) && rel_close(mu[1], 0.6), "visual activation hand case");
        const auto all = visual_activation(std::vector<float>{0.25f, 0.75f}, RowView{&v, 2}, VisualSpan{0, 2}, 0.0);
        const auto o = head_activation(std::vector<float>{0.25f, 0.75f}, RowView{&v, 2});
        expect(all == o, "visual activation equals o when all attention is visual");
        const auto none = visual_activation(std::vector<float>{0, 0, 1}, RowView{&v, 3}, VisualSpan{0, 2}, 1e-8);
        expect(none[0] == 0.0f && none[1] == 0.0f, "visual activation zero span attention");
    }
    {
        const std::vector<float> o{5.2f, 5.3f}, mu{0.4f, 0.6f};
        InterventionConfig cfg;
        expect(gated_intervention(o, mu, 0.5f, cfg) == o, "gating boundary p=0.5");
        cfg.alpha0 = 0.25;
        std::vector<float> out(2);
        const float alpha = gated_intervention(o, mu, 0.8f, cfg, out);
        expect(rel_close(alpha, 0.2) && rel_close(out[0], 4.24) && rel_close(out[1], 4.36), "gating hand case");
        cfg.alpha0 = 1.0;
        const auto lim = gated_intervention(o, mu, 0.9999999f, cfg);
        expect(std::abs(lim[0] - 0.4f) < 1e-5 && std::abs(lim[1] - 0.6f) < 1e-5, "gating full-recall limit");
    }
    if (failed.empty()) return {true, "all softmax, activation, probe, BCE, mu and gating examples"};
    std::string d = "failed:";
    for (const auto& f : failed) d += " [" + f + "]";
    return {false, d};
}

Outcome gradient_check() {
    Rng rng(2024);
    double worst = 0.0;
    for (int inst = 0; inst < 50; ++inst) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(8, 40));
        const auto d = static_cast<std::size_t>(rng.uniform_int(2, 16));
        Matrix x(n, d);
        for (float& v : x.data()) v = static_cast<float>(rng.normal());
        std::vector<std::uint8_t> y(n);
        for (auto& v : y) v = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
        std::vector<double> theta(d);
        for (auto& v : theta) v = 0.5 * rng.normal();
        const double bias = 0.3 * rng.normal();
        const double l2 = 1e-4;
        const auto g = mean_bce_gradient(theta, bias, x, y, l2);
        const double h = 1e-4;
        for (std::size_t k = 0; k <= d; ++k) {
            auto tp = theta, tm = theta;
            double bp = bias, bm = bias;
            (k < d ? tp[k] : bp) += h;
            (k < d ? tm[k] : bm) -= h;
            const double fd =
                (mean_bce_gradient(tp, bp, x, y, l2).loss - mean_bce_gradient(tm, bm, x, y, l2).loss) / (2 * h);
            const double an_grad = k < d ? g.grad_theta[k] : g.grad_bias;
            worst = std::max(worst, std::abs(fd - an_grad) / std::max(1.0, std::abs(an_grad)));
        }
    }
    return {worst <= 1e-5, fmt("worst relative error %.2e over 50 instances", worst)};
}

// ---- shared trained toy --------------------------------------------------------

Toy build_toy(const cli::RunConfig& cfg) {
    Toy t;
    const auto train = gen_dataset(11, 8000);
    auto t0 = Clock::now();
    auto res = train_toy_model(train.samples, cfg.model_config(), cfg.train_hyper());
    t.model = std::move(res.model);
    t.train_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("  trained toy model: %zu epochs, holdout accuracy %.3f (%.0f s)\n", res.history.size(),
                res.history.back().holdout_accuracy, t.train_seconds);

    t0 = Clock::now();
    const auto probe_src = gen_dataset(123, 500);
    std::vector<Prompt> prompts;
    for (const auto& s : probe_src.samples) prompts.push_back(s.prompt());
    const auto pds = build_probe_dataset(t.model, prompts, cfg.perturb_options(), cfg.seed());
    t.bank = train_probe_bank(pds, cfg.probe_hyper());
    t.probe_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    t.test = gen_dataset(99, 600);
    return t;
}

Outcome identity_theorem(const Toy& t) {
    Rng rng(77);
    InterventionConfig cfg;
    cfg.alpha0 = 0.0;
    cfg.beta = 1.0;
    const auto& mc = t.model.config();
    std::size_t same = 0;
    for (int i = 0; i < 100; ++i) {
        Prompt p;
        const auto n = static_cast<std::size_t>(rng.uniform_int(4, 24));
        for (std::size_t k = 0; k < n; ++k) p.tokens.push_back(static_cast<int>(rng.uniform_int(0, mc.vocab_size - 1)));
        const auto s = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 2));
        p.span = {s, static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(s) + 1, static_cast<std::int64_t>(n) - 1))};
        if (i % 3 == 0) p = perturb_prompt(t.model, p, PerturbKind::gaussian, PerturbOptions{}, rng);
        same += viti_generate(t.model, p, t.bank, cfg, 16).tokens == decode_greedy(t.model, p, 16).tokens;
    }
    return {same == 100, std::to_string(same) + "/100 prompts bit-identical"};
}

Outcome probe_separability(const Toy& t) {
    const auto acc = t.bank.sorted_accuracies();
    const std::size_t k = select_top_beta(t.bank, 0.10).size();
    double top = 0.0;
    for (std::size_t i = 0; i < k; ++i) top += acc[i];
    top /= static_cast<double>(k);
    const bool ok = acc.front() >= 0.80 && top > 0.70 && t.train_seconds + t.probe_seconds < 600.0;
    char buf[160];
    std::snprintf(buf, sizeof buf, "best head %.3f, top-10%% mean %.3f over %zu head(s), median %.3f", acc.front(), top, k,
                  acc[acc.size() / 2]);
    return {ok, buf};
}

Outcome degradation(const Toy& t) {
    const std::vector<std::uint32_t> steps{0, 250, 500, 750, 1000};
    const auto curve = an::degradation_curve(t.model, t.test.samples, steps, heavy_noise(5));
    std::string d = "acc/mass by step:";
    for (const auto& r : curve.rows) {
        char buf[64];
        std::snprintf(buf, sizeof buf, " %u:%.3f/%.3f", r.step, r.accuracy, r.visual_mass);
        d += buf;
    }
    const bool trend = curve.rank_correlation <= -0.8;
    const bool mass = curve.rows.back().visual_mass < curve.rows.front().visual_mass;
    d += fmt("; spearman %.3f", curve.rank_correlation) + (trend ? " ok" : " FAIL");
    d += std::string("; mass decline ") + (mass ? "ok" : "FAIL");
    return {trend && mass, d};
}

Outcome recovery(const Toy& t) {
    double gain = 0.0;
    std::string d;
    for (std::uint64_t seed : {1, 2, 3}) {
        EvalOptions base;
        base.perturbation = heavy_noise(seed);
        EvalOptions iv = base;
        iv.intervention = EvalIntervention{&t.bank, InterventionConfig{}, RecallTarget::visual};
        const auto b = eval_task(t.model, t.test.samples, base);
        const auto v = eval_task(t.model, t.test.samples, iv);
        gain += (v.existence.accuracy - b.existence.accuracy) / 3.0;
        char buf[96];
        std::snprintf(buf, sizeof buf, "seed %llu: %.3f -> %.3f (gate %.2f); ", static_cast<unsigned long long>(seed),
                      b.existence.accuracy, v.existence.accuracy, v.gate_rate);
        d += buf;
    }
    d += fmt("mean gain %+.2f points (need >= +5)", 100.0 * gain);
    return {gain >= 0.05, d};
}

Outcome ablation_order(const Toy& t) {
    double vnd = 0.0, vri = 0.0;
    bool clean_ok = true;
    std::string d;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto rows = an::ablation_suite(t.model, t.bank, InterventionConfig{}, t.test.samples, heavy_noise(seed));
        const auto& full = rows[1];
        vnd += (full.perturbed.accuracy - rows[2].perturbed.accuracy) / 3.0;
        vri += (full.perturbed.accuracy - rows[3].perturbed.accuracy) / 3.0;
        if (rows[2].clean.accuracy > full.clean.accuracy) clean_ok = false;
        char buf[128];
        std::snprintf(buf, sizeof buf, "seed %llu full %.3f w/oVND %.3f w/oVRI %.3f; ",
                      static_cast<unsigned long long>(seed), full.perturbed.accuracy, rows[2].perturbed.accuracy,
                      rows[3].perturbed.accuracy);
        d += buf;
    }
    char buf[128];
    std::snprintf(buf, sizeof buf, "margins %+.2f / %+.2f points (need >= +1); clean over-intervention %s", 100 * vnd,
                  100 * vri, clean_ok ? "ok" : "FAIL");
    d += buf;
    return {vnd >= 0.01 && vri >= 0.01 && clean_ok, d};
}

Outcome theorem1(const Toy& t) {
    const auto planted = an::theorem1_planted();
    an::Theorem1Options o;
    o.perturbation = heavy_noise(9);
    const auto pipeline = an::theorem1_check(t.model, t.bank, InterventionConfig{}, t.test.samples, o);

    Rng rng(31);
    std::vector<double> x(20000), y(20000);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = rng.normal();
        y[i] = 0.9 * x[i] + std::sqrt(1 - 0.81) * rng.normal();
    }
    const double oracle = -0.5 * std::log(1 - 0.81);
    const double est = an::mi_binned(x, y).value;
    const bool calib = std::abs(est - oracle) <= 0.15 * oracle;

    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "planted %s (strict %.2f); pipeline %s, %.3f of %zu pairs (%zu gated samples); "
                  "gaussian rho=0.9 %.4f vs %.4f",
                  std::string(an::status_name(planted.status)).c_str(), planted.strict_fraction,
                  std::string(an::status_name(pipeline.status)).c_str(), pipeline.satisfied_fraction,
                  pipeline.checks.size(), pipeline.gated_samples, est, oracle);
    const bool ok = planted.status == an::CheckStatus::pass && pipeline.status == an::CheckStatus::pass && calib;
    return {ok, buf};
}

Outcome overhead(const Toy& t) {
    an::OverheadOptions o;
    o.context = 256;
    o.repeats = 10;
    const auto r = an::overhead_benchmark(t.model, t.bank, InterventionConfig{}, o);
    char buf[160];
    std::snprintf(buf, sizeof buf, "greedy %.3f ms/token, viti %.3f ms/token, ratio %.3f (need <= 1.15)",
                  1e3 * r.greedy_seconds_per_token, 1e3 * r.viti_seconds_per_token, r.ratio);
    return {r.ratio <= 1.15, buf};
}

Outcome sweep_sanity(const Toy& t) {
    const std::vector<double> alphas{0.0, 0.2, 0.5}, betas{0.1, 0.25, 1.0};
    const std::span<const QASample> subset(t.test.samples.data(), 300);
    EvalOptions base;
    base.perturbation = heavy_noise(4);
    const auto a = an::sweep(t.model, t.bank, subset, alphas, betas, base);
    const auto b = an::sweep(t.model, t.bank, subset, alphas, betas, base);
    bool zero_row = true;
    for (std::size_t j = 0; j < betas.size(); ++j) zero_row = zero_row && a.at(0, j) == a.baseline;
    const bool repro = a.best_alpha == b.best_alpha && a.best_beta == b.best_beta && a.best_score() == b.best_score() &&
                       a.scores == b.scores;
    char buf[160];
    std::snprintf(buf, sizeof buf, "alpha0=0 row %s baseline %.3f; best %.3f at (%.2f, %.2f) %s", zero_row ? "==" : "!=",
                  a.baseline, a.best_score(), alphas[a.best_alpha], betas[a.best_beta],
                  repro ? "reproduced" : "NOT reproduced");
    return {zero_row && repro, buf};
}

Outcome round_trips(const Toy& t, const cli::RunConfig& cfg) {
    const auto dir = std::filesystem::temp_directory_path() / "viti_acceptance";
    std::filesystem::create_directories(dir);
    std::vector<std::string> failed;

    const auto mbytes = t.model.serialize();
    t.model.save(dir / "model.bin");
    const Model m2 = Model::load(dir / "model.bin");
    if (!(m2 == t.model) || m2.serialize() != mbytes) failed.emplace_back("checkpoint");

    const auto bbytes = t.bank.serialize();
    t.bank.save(dir / "probes.bin");
    const auto b2 = ProbeBank::load(dir / "probes.bin");
    if (!(b2 == t.bank) || b2.serialize() != bbytes) failed.emplace_back("probe bank");

    const auto text = t.test.to_jsonl();
    t.test.save(dir / "test.jsonl");
    const auto d2 = Dataset::load(dir / "test.jsonl");
    if (!(d2 == t.test) || d2.to_jsonl() != text) failed.emplace_back("dataset");

    std::vector<Prompt> prompts;
    for (std::size_t i = 0; i < 20; ++i) prompts.push_back(t.test.samples[i].prompt());
    const auto pds = build_probe_dataset(t.model, prompts, PerturbOptions{}, 3);
    pds.save(dir / "pds.bin");
    if (!(ProbeDataset::load(dir / "pds.bin") == pds) || ProbeDataset::load(dir / "pds.bin").serialize() != pds.serialize())
        failed.emplace_back("probe dataset");

    auto c2 = cli::RunConfig::defaults();
    c2.merge_text(cfg.to_text());
    if (!(c2 == cfg) || c2.to_text() != cfg.to_text()) failed.emplace_back("run config");

    std::filesystem::remove_all(dir);
    if (failed.empty()) return {true, "checkpoint, probe bank, dataset, probe dataset and run config byte-exact"};
    std::string d = "mismatch:";
    for (const auto& f : failed) d += " " + f;
    return {false, d};
}

} // namespace

int main() {
    int failures = 0;
    auto report = [&](int id, const char* name, double budget, const std::function<Outcome()>& fn) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        if (budget > 0 && secs > budget) {
            o.pass = false;
            o.detail += fmt("; over the %.0f s budget", budget);
        }
        failures += !o.pass;
        std::printf("[%s] C%-2d %-28s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
        std::fflush(stdout);
    };

    cli::RunConfig cfg = cli::RunConfig::defaults();
    cfg.set("seed", "0");
    report(1, "equation unit suite", 10, equation_suite);
    report(3, "probe gradient check", 0, gradient_check);

    std::printf("  training toy model (visual_scale %s, %s layers x %s heads x %s dims)\n", cfg.text("visual_scale").c_str(),
                cfg.text("layers").c_str(), cfg.text("heads").c_str(), cfg.text("head_dim").c_str());
    std::fflush(stdout);
    const Toy toy = build_toy(cfg);

    report(2, "identity theorem", 60, [&] { return identity_theorem(toy); });
    report(4, "probe separability", 0, [&] { return probe_separability(toy); });
    report(5, "degradation trend", 300, [&] { return degradation(toy); });
    report(6, "intervention recovery", 600, [&] { return recovery(toy); });
    report(7, "ablation ordering", 0, [&] { return ablation_order(toy); });
    report(8, "MI inequality check", 600, [&] { return theorem1(toy); });
    report(9, "decoding overhead", 0, [&] { return overhead(toy); });
    report(10, "sweep sanity", 0, [&] { return sweep_sanity(toy); });
    report(11, "round trips", 0, [&] { return round_trips(toy, cfg); });

    std::printf("%d of 11 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
