#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "viti/analysis.hpp"
#include "viti/trainer.hpp"

namespace viti::cli {

enum class KeyType { text, path, integer, real, boolean, real_list };

struct KeySpec {
    std::string_view name;
    KeyType type;
    std::string_view fallback;
    std::string_view help;
};

/// Every recognised key, in the order reports list them.
const std::vector<KeySpec>& config_keys();
const KeySpec* find_key(std::string_view name);

inline constexpr std::string_view kOutDirEnv = "VITI_OUT_DIR";
inline constexpr int kConfigFormatVersion = 1;

/// Flat key = value run configuration. Values are kept as text and parsed on
/// access; every parse or validation failure is a ConfigError whose message
/// starts with the key.
class RunConfig {
public:
    /// Built-in defaults; out_dir falls back to $VITI_OUT_DIR when set.
    static RunConfig defaults();

    /// `key = value` lines, '#' comments, blank lines. Later lines win.
    void merge_text(std::string_view text, std::string_view origin = "config");
    void merge_file(const std::filesystem::path& path);
    void set(std::string_view key, std::string value);

    bool has(std::string_view key) const;
    const std::string& text(std::string_view key) const;
    std::int64_t integer(std::string_view key) const;
    std::uint64_t count(std::string_view key) const;
    double real(std::string_view key) const;
    bool boolean(std::string_view key) const;
    std::vector<double> reals(std::string_view key) const;
    /// Non-empty and pointing at an existing file.
    std::filesystem::path existing_path(std::string_view key) const;
    /// Explicit `out` when given, else out_dir / fallback_name.
    std::filesystem::path output_path(std::string_view fallback_name) const;
    std::uint64_t seed() const;

    ModelConfig model_config() const;
    synth::TrainHyper train_hyper() const;
    ProbeHyper probe_hyper() const;
    PerturbOptions perturb_options() const;
    InterventionConfig intervention() const;
    RecallTarget target() const;
    std::optional<synth::EvalPerturbation> eval_perturbation() const;
    synth::QuestionMix mix() const;
    analysis::MIOptions mi_options() const;

    /// Canonical `key = value` text, one line per key in table order.
    std::string to_text() const;
    nlohmann::ordered_json to_json() const;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;

private:
    std::map<std::string, std::string, std::less<>> values_;
};

} // namespace viti::cli
