#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "viti/synthtask.hpp"
#include "viti/vri.hpp"

namespace viti::analysis {

struct MIEstimate {
    /// Nats. Miller-Madow corrected plug-in estimate from quantile bins, so
    /// it can dip slightly below zero for independent inputs.
    double value = 0.0;
    std::size_t bins = 0;
    std::size_t n_samples = 0;
    double ci_lo = 0.0, ci_hi = 0.0;
    /// Set when either column is constant; value and interval are then 0.
    bool degenerate = false;
    std::string warning;

    double ci_width() const { return ci_hi - ci_lo; }
};

struct MIOptions {
    std::size_t bins = 16;
    std::size_t resamples = 200;
    double confidence = 0.95;
    std::uint64_t seed = 0;
};

/// Equal-mass bin index per sample; tied values share a bin.
std::vector<std::uint32_t> quantile_bins(std::span<const double> x, std::size_t bins);

/// Requires equal lengths (ShapeError) and n >= 30 * bins (ConfigError).
MIEstimate mi_binned(std::span<const double> x, std::span<const double> y,
                     const MIOptions& options = {});

/// Rank correlation with average ranks for ties. NaN when either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

// ---- Theorem-1 check -------------------------------------------------------

struct ProjectionCheck {
    std::uint32_t layer = 0, head = 0;
    std::size_t direction = 0;
    MIEstimate before; // I(u.o ; w.x_vis)
    MIEstimate after;  // I(u.o_hat ; w.x_vis)
    double tolerance = 0.0;
    bool satisfied = false;
    /// after.ci_lo > before.ci_hi
    bool strict = false;
};

enum class CheckStatus : std::uint8_t { pass, fail, inconclusive };
std::string_view status_name(CheckStatus s);

struct Theorem1Report {
    std::vector<ProjectionCheck> checks;
    std::size_t samples = 0;
    std::size_t gated_samples = 0;
    double satisfied_fraction = 0.0;
    double strict_fraction = 0.0;
    double required_fraction = 0.95;
    CheckStatus status = CheckStatus::inconclusive;
};

struct Theorem1Options {
    std::size_t projections = 8;
    MIOptions mi;
    /// Inputs are perturbed with this option set before the check; nullopt
    /// keeps them clean.
    std::optional<synth::EvalPerturbation> perturbation;
    double required_fraction = 0.95;
    std::uint64_t seed = 0;
};

/// Records o and the intervened o_hat of every selected head at the first
/// decode position, plus the mean visual embedding, and compares projected
/// MI before and after the intervention.
Theorem1Report theorem1_check(const Model& model, const ProbeBank& bank,
                              const InterventionConfig& cfg,
                              std::span<const synth::QASample> samples,
                              const Theorem1Options& options = {});

struct PlantedOptions {
    std::size_t samples = 2000;
    std::size_t head_dim = 16;
    std::size_t projections = 8;
    /// Mixing weight toward mu; 1 gives o_hat = mu.
    double alpha = 1.0;
    MIOptions mi;
    std::uint64_t seed = 0;
};

/// Constructed oracle: mu is a fixed nonlinear function of a scalar visual
/// signal, o is independent noise, o_hat = (1 - alpha) o + alpha mu. Passes
/// when every projection shows a strict, CI-separated increase.
Theorem1Report theorem1_planted(const PlantedOptions& options = {});

// ---- Evaluation suites -------------------------------------------------------

struct DegradationRow {
    std::uint32_t step = 0;
    double accuracy = 0.0;
    double existence_accuracy = 0.0;
    double f1 = 0.0;
    double visual_mass = 0.0;
};

struct DegradationCurve {
    std::vector<DegradationRow> rows;
    /// Spearman(step, accuracy).
    double rank_correlation = 0.0;
};

/// Steps must be ascending and start at 0. The step-0 row is a plain
/// clean evaluation.
DegradationCurve degradation_curve(const Model& model, std::span<const synth::QASample> samples,
                                   std::span<const std::uint32_t> steps,
                                   const synth::EvalPerturbation& base, std::size_t workers = 1);

struct AblationRow {
    std::string name;
    synth::Metrics perturbed;
    synth::Metrics clean;
};

/// Rows: baseline, full, w/o VND (gate forced open on selected heads),
/// w/o VRI (probe direction as the recall target).
std::vector<AblationRow> ablation_suite(const Model& model, const ProbeBank& bank,
                                        const InterventionConfig& cfg,
                                        std::span<const synth::QASample> samples,
                                        const synth::EvalPerturbation& perturbation,
                                        std::size_t workers = 1);

/// Which number a sweep cell reports.
enum class SweepMetric : std::uint8_t { accuracy, existence_accuracy, existence_f1 };
std::string_view metric_name(SweepMetric m);
SweepMetric metric_from_name(std::string_view name);
double metric_value(const synth::Metrics& m, SweepMetric metric);

struct SweepResult {
    std::vector<double> alphas, betas;
    /// score[a * betas.size() + b]
    std::vector<double> scores;
    double baseline = 0.0;
    std::size_t best_alpha = 0, best_beta = 0;
    SweepMetric metric = SweepMetric::accuracy;

    double at(std::size_t a, std::size_t b) const { return scores[a * betas.size() + b]; }
    double best_score() const { return at(best_alpha, best_beta); }
    /// Long format: alpha0,beta,score.
    std::string to_csv() const;
};

/// Full cartesian grid. Ties for the best cell go to the earliest cell in
/// row-major order.
SweepResult sweep(const Model& model, const ProbeBank& bank, std::span<const synth::QASample> samples,
                  std::span<const double> alphas, std::span<const double> betas,
                  const synth::EvalOptions& base, SweepMetric metric = SweepMetric::accuracy);

struct PivotTable {
    std::vector<double> alphas, betas;
    std::vector<std::optional<double>> cells; // alphas x betas, row-major
    std::string to_csv() const;
};

/// Parses long-format sweep CSV (header alpha0,beta,score) into alpha rows x
/// beta columns, both in ascending order. Throws FormatError on bad input.
PivotTable pivot_sweep_csv(std::string_view csv);

struct OverheadOptions {
    std::size_t context = 256;
    std::size_t new_tokens = 16;
    std::size_t repeats = 10;
    std::size_t warmup = 1;
    std::uint64_t seed = 0;
};

struct OverheadReport {
    double greedy_seconds_per_token = 0.0;
    double viti_seconds_per_token = 0.0;
    double ratio = 0.0;
    /// Intervenor working state (probe bank excluded).
    std::size_t viti_state_bytes = 0;
    std::size_t repeats = 0;
    std::size_t context = 0;
};

/// Median per-token wall clock of greedy vs gated decoding on a random
/// prompt of `context - new_tokens` tokens whose first half is visual.
/// Runs alternate between the two paths; warmup runs are discarded.
OverheadReport overhead_benchmark(const Model& model, const ProbeBank& bank,
                                  const InterventionConfig& cfg, const OverheadOptions& options = {});

} // namespace viti::analysis
