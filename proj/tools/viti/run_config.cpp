#include "run_config.hpp"

#include <charconv>
#include <cstdlib>

#include "viti/error.hpp"
#include "viti/io.hpp"

namespace viti::cli {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

[[noreturn]] void bad(std::string_view key, const std::string& what) {
    throw ConfigError(std::string(key) + ": " + what);
}

template <class T>
T parse_number(std::string_view key, std::string_view s) {
    T v{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        bad(key, "expected a number, got '" + std::string(s) + "'");
    }
    return v;
}

void check_value(const KeySpec& key_spec, std::string_view value) {
    if (value.empty()) return;
    switch (key_spec.type) {
    case KeyType::integer: parse_number<std::int64_t>(key_spec.name, value); break;
    case KeyType::real: parse_number<double>(key_spec.name, value); break;
    case KeyType::boolean:
        if (value != "true" && value != "false") bad(key_spec.name, "expected true or false");
        break;
    case KeyType::real_list: {
        std::size_t start = 0;
        while (start <= value.size()) {
            const auto end = std::min(value.find(',', start), value.size());
            parse_number<double>(key_spec.name, trim(value.substr(start, end - start)));
            start = end + 1;
        }
        break;
    }
    case KeyType::text:
    case KeyType::path: break;
    }
}

// Wraps struct validation so the message names the run-config key group.
template <class F>
void validated(std::string_view group, F&& f) {
    try {
        f();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(group) + ": " + e.what());
    }
}

} // namespace

const std::vector<KeySpec>& config_keys() {
    static const std::vector<KeySpec> keys{
        {"seed", KeyType::integer, "", "master seed (required by every randomised command)"},
        {"workers", KeyType::integer, "1", "worker threads for sample-parallel evaluation"},
        {"out_dir", KeyType::path, "", "directory for artifacts (default $VITI_OUT_DIR, else .)"},
        {"out", KeyType::path, "", "explicit output path for the command's main artifact"},
        {"model", KeyType::path, "", "model checkpoint"},
        {"probes", KeyType::path, "", "probe bank"},
        {"dataset", KeyType::path, "", "QA dataset (JSONL)"},
        {"in", KeyType::path, "", "input file for report"},
        {"size", KeyType::integer, "2000", "samples generated by gen-data"},
        {"mix_existence", KeyType::real, "0.6", "relative weight of existence questions"},
        {"mix_color", KeyType::real, "0.2", "relative weight of color questions"},
        {"mix_count", KeyType::real, "0.2", "relative weight of count questions"},
        {"layers", KeyType::integer, "4", "decoder layers"},
        {"heads", KeyType::integer, "4", "attention heads per layer"},
        {"head_dim", KeyType::integer, "16", "per-head width"},
        {"max_seq", KeyType::integer, "272", "maximum context length"},
        {"visual_scale", KeyType::real, "100", "multiplier on visual-span embedding rows"},
        {"epochs", KeyType::integer, "30", "maximum training epochs"},
        {"lr", KeyType::real, "0.001", "peak Adam learning rate"},
        {"batch_size", KeyType::integer, "32", "training batch size"},
        {"target_accuracy", KeyType::real, "0.98", "holdout accuracy that stops training"},
        {"probe_prompts", KeyType::integer, "500", "prompts used to build the probe dataset"},
        {"probe_lr", KeyType::real, "0.05", "probe gradient-descent step"},
        {"probe_epochs", KeyType::integer, "500", "probe training epochs"},
        {"probe_l2", KeyType::real, "0.0001", "probe L2 penalty"},
        {"gaussian_mix", KeyType::real, "0.5", "share of Gaussian-noise positives in the probe dataset"},
        {"keep_fraction", KeyType::real, "0.25", "low-attention share kept by attention replacement"},
        {"noise_total_steps", KeyType::integer, "1000", "diffusion schedule length"},
        {"noise_beta_start", KeyType::real, "0.0001", "first schedule beta"},
        {"noise_beta_end", KeyType::real, "0.02", "last schedule beta"},
        {"probe_noise_step", KeyType::integer, "1000", "noise step of Gaussian probe positives"},
        {"perturb_steps", KeyType::integer, "0", "noise step applied to evaluation inputs (0 = clean)"},
        {"perturb_kind", KeyType::text, "gaussian", "gaussian or replacement"},
        {"intervene", KeyType::boolean, "false", "apply the gated intervention"},
        {"alpha0", KeyType::real, "0.2", "intervention strength"},
        {"beta", KeyType::real, "0.1", "fraction of heads allowed to intervene"},
        {"gate_threshold", KeyType::real, "0.5", "probe score above which the gate opens"},
        {"target", KeyType::text, "visual", "visual or probe_direction"},
        {"curve", KeyType::boolean, "false", "eval: run the noise-step degradation curve"},
        {"steps", KeyType::real_list, "0,250,500,750,1000", "noise steps of the degradation curve"},
        {"alphas", KeyType::real_list, "0,0.1,0.2,0.25,0.3,0.5", "sweep alpha0 grid"},
        {"betas", KeyType::real_list, "0.05,0.1,0.25,0.5", "sweep beta grid"},
        {"metric", KeyType::text, "accuracy", "sweep score: accuracy, existence_accuracy or existence_f1"},
        {"projections", KeyType::integer, "8", "random projections per head in theorem1"},
        {"bins", KeyType::integer, "16", "quantile bins of the MI estimator"},
        {"resamples", KeyType::integer, "200", "bootstrap resamples of the MI estimator"},
        {"context", KeyType::integer, "256", "bench context length"},
        {"new_tokens", KeyType::integer, "16", "bench tokens generated per run"},
        {"repeats", KeyType::integer, "10", "bench timed repeats"},
        {"prompt", KeyType::text, "", "generate: space-separated token names"},
        {"max_new", KeyType::integer, "8", "generate: tokens to produce"},
    };
    return keys;
}

const KeySpec* find_key(std::string_view name) {
    for (const auto& k : config_keys()) {
        if (k.name == name) return &k;
    }
    return nullptr;
}

RunConfig RunConfig::defaults() {
    RunConfig c;
    for (const auto& k : config_keys()) c.values_.emplace(std::string(k.name), std::string(k.fallback));
    if (const char* env = std::getenv(std::string(kOutDirEnv).c_str()); env && *env) {
        c.values_["out_dir"] = env;
    } else {
        c.values_["out_dir"] = ".";
    }
    return c;
}

void RunConfig::set(std::string_view key, std::string value) {
    const KeySpec* key_spec = find_key(key);
    if (!key_spec) bad(key, "unknown configuration key");
    check_value(*key_spec, value);
    values_[std::string(key)] = std::move(value);
}

void RunConfig::merge_text(std::string_view text, std::string_view origin) {
    std::size_t line_no = 0, start = 0;
    while (start < text.size()) {
        const auto end = std::min(text.find('\n', start), text.size());
        std::string_view line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected key = value");
        }
        const auto key = trim(line.substr(0, eq));
        try {
            set(key, std::string(trim(line.substr(eq + 1))));
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(e.what()) + " (" + std::string(origin) + ":" + std::to_string(line_no) + ")");
        }
    }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) bad("config", "file not found: " + path.string());
    merge_text(io::read_text(path), path.string());
}

bool RunConfig::has(std::string_view key) const {
    const auto it = values_.find(key);
    return it != values_.end() && !it->second.empty();
}

const std::string& RunConfig::text(std::string_view key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) bad(key, "unknown configuration key");
    return it->second;
}

std::int64_t RunConfig::integer(std::string_view key) const {
    const auto& v = text(key);
    if (v.empty()) bad(key, "required but not set");
    return parse_number<std::int64_t>(key, v);
}

std::uint64_t RunConfig::count(std::string_view key) const {
    const auto v = integer(key);
    if (v < 0) bad(key, "must be non-negative");
    return static_cast<std::uint64_t>(v);
}

double RunConfig::real(std::string_view key) const {
    const auto& v = text(key);
    if (v.empty()) bad(key, "required but not set");
    return parse_number<double>(key, v);
}

bool RunConfig::boolean(std::string_view key) const { return text(key) == "true"; }

std::vector<double> RunConfig::reals(std::string_view key) const {
    const std::string_view v = text(key);
    if (v.empty()) bad(key, "required but not set");
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= v.size()) {
        const auto end = std::min(v.find(',', start), v.size());
        out.push_back(parse_number<double>(key, trim(v.substr(start, end - start))));
        start = end + 1;
    }
    return out;
}

std::filesystem::path RunConfig::existing_path(std::string_view key) const {
    const auto& v = text(key);
    if (v.empty()) bad(key, "required but not set");
    if (!std::filesystem::is_regular_file(v)) bad(key, "file not found: " + v);
    return v;
}

std::filesystem::path RunConfig::output_path(std::string_view fallback_name) const {
    if (has("out")) return text("out");
    return std::filesystem::path(text("out_dir")) / fallback_name;
}

std::uint64_t RunConfig::seed() const {
    if (!has("seed")) bad("seed", "required but not set");
    return count("seed");
}

ModelConfig RunConfig::model_config() const {
    ModelConfig c;
    c.layers = static_cast<std::uint32_t>(count("layers"));
    c.heads = static_cast<std::uint32_t>(count("heads"));
    c.head_dim = static_cast<std::uint32_t>(count("head_dim"));
    c.vocab_size = static_cast<std::uint32_t>(synth::tok::count);
    c.max_seq = static_cast<std::uint32_t>(count("max_seq"));
    c.visual_scale = static_cast<float>(real("visual_scale"));
    validated("model", [&] { c.validate(); });
    return c;
}

synth::TrainHyper RunConfig::train_hyper() const {
    synth::TrainHyper h;
    h.lr = real("lr");
    h.batch_size = count("batch_size");
    h.max_epochs = count("epochs");
    h.target_accuracy = real("target_accuracy");
    h.seed = seed();
    validated("train", [&] { h.validate(); });
    return h;
}

ProbeHyper RunConfig::probe_hyper() const {
    ProbeHyper h;
    h.lr = real("probe_lr");
    h.epochs = static_cast<std::uint32_t>(count("probe_epochs"));
    h.l2 = real("probe_l2");
    h.seed = seed();
    validated("probe", [&] { h.validate(); });
    return h;
}

PerturbOptions RunConfig::perturb_options() const {
    PerturbOptions p;
    p.schedule.total_steps = static_cast<std::uint32_t>(count("noise_total_steps"));
    p.schedule.beta_start = real("noise_beta_start");
    p.schedule.beta_end = real("noise_beta_end");
    p.noise_step = static_cast<std::uint32_t>(count("probe_noise_step"));
    p.gaussian_mix = real("gaussian_mix");
    p.keep_fraction = real("keep_fraction");
    validated("perturb", [&] { p.validate(); });
    return p;
}

InterventionConfig RunConfig::intervention() const {
    InterventionConfig c;
    c.alpha0 = real("alpha0");
    c.beta = real("beta");
    c.gate_threshold = real("gate_threshold");
    validated("intervention", [&] { c.validate(); });
    return c;
}

RecallTarget RunConfig::target() const {
    const auto& t = text("target");
    if (t == "visual") return RecallTarget::visual;
    if (t == "probe_direction") return RecallTarget::probe_direction;
    bad("target", "expected visual or probe_direction, got '" + t + "'");
}

std::optional<synth::EvalPerturbation> RunConfig::eval_perturbation() const {
    const auto step = count("perturb_steps");
    const auto& kind = text("perturb_kind");
    synth::EvalPerturbation p;
    if (kind == "gaussian") {
        p.kind = PerturbKind::gaussian;
        if (step == 0) return std::nullopt;
    } else if (kind == "replacement") {
        p.kind = PerturbKind::attention_replacement;
    } else {
        bad("perturb_kind", "expected gaussian or replacement, got '" + kind + "'");
    }
    p.options = perturb_options();
    p.options.noise_step = static_cast<std::uint32_t>(step);
    p.seed = seed();
    validated("perturb_steps", [&] { p.options.validate(); });
    return p;
}

synth::QuestionMix RunConfig::mix() const {
    synth::QuestionMix m{real("mix_existence"), real("mix_color"), real("mix_count")};
    validated("mix", [&] { m.validate(); });
    return m;
}

analysis::MIOptions RunConfig::mi_options() const {
    analysis::MIOptions o;
    o.bins = count("bins");
    o.resamples = count("resamples");
    o.seed = seed();
    if (o.bins < 2) bad("bins", "must be at least 2");
    return o;
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& k : config_keys()) {
        out += std::string(k.name) + " = " + text(k.name) + "\n";
    }
    return out;
}

nlohmann::ordered_json RunConfig::to_json() const {
    nlohmann::ordered_json j;
    j["format_version"] = kConfigFormatVersion;
    for (const auto& k : config_keys()) j[std::string(k.name)] = text(k.name);
    return j;
}

} // namespace viti::cli
