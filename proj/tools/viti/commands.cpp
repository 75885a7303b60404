#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <functional>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "run_config.hpp"
#include "viti/error.hpp"
#include "viti/io.hpp"

namespace viti::cli {

namespace {

using json = nlohmann::ordered_json;

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json report(std::string_view command, const RunConfig& cfg, json result) {
    json j;
    j["format"] = "viti-report";
    j["format_version"] = kReportFormatVersion;
    j["command"] = command;
    j["created_at"] = utc_now();
    j["config"] = cfg.to_json();
    j["result"] = std::move(result);
    return j;
}

void write_json(const std::filesystem::path& path, const json& j) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    io::write_atomic(path, j.dump(2) + "\n");
}

std::filesystem::path sidecar(const std::filesystem::path& artifact) {
    return artifact.string() + ".run.json";
}

void ensure_parent(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

json binary_json(const synth::BinaryMetrics& m, const synth::BinaryCounts& c) {
    return json{{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
                {"tp", c.tp},             {"fp", c.fp},               {"tn", c.tn},         {"fn", c.fn}};
}

json metrics_json(const synth::Metrics& m) {
    json kinds;
    for (std::size_t k = 0; k < synth::kQuestionKinds; ++k) {
        kinds[std::string(synth::kind_name(static_cast<synth::QuestionKind>(k)))] =
            json{{"accuracy", m.kind_accuracy[k]}, {"total", m.kind_total[k]}};
    }
    return json{{"samples", m.samples},
                {"accuracy", m.accuracy},
                {"existence", binary_json(m.existence, m.existence_counts)},
                {"by_kind", kinds},
                {"visual_mass", m.visual_mass},
                {"gate_rate", m.gate_rate}};
}

json mi_json(const analysis::MIEstimate& e) {
    json j{{"value", e.value}, {"ci", {e.ci_lo, e.ci_hi}}, {"bins", e.bins}, {"n", e.n_samples}};
    if (e.degenerate) j["warning"] = e.warning;
    return j;
}

json theorem1_json(const analysis::Theorem1Report& r) {
    json checks = json::array();
    for (const auto& c : r.checks) {
        checks.push_back(json{{"layer", c.layer},
                              {"head", c.head},
                              {"direction", c.direction},
                              {"before", mi_json(c.before)},
                              {"after", mi_json(c.after)},
                              {"tolerance", c.tolerance},
                              {"satisfied", c.satisfied},
                              {"strict", c.strict}});
    }
    return json{{"status", analysis::status_name(r.status)},
                {"samples", r.samples},
                {"gated_samples", r.gated_samples},
                {"satisfied_fraction", r.satisfied_fraction},
                {"strict_fraction", r.strict_fraction},
                {"required_fraction", r.required_fraction},
                {"checks", checks}};
}

std::vector<std::uint32_t> integer_steps(const RunConfig& cfg) {
    std::vector<std::uint32_t> out;
    for (double s : cfg.reals("steps")) {
        if (s < 0 || s != static_cast<double>(static_cast<std::uint32_t>(s))) {
            throw ConfigError("steps: noise steps must be non-negative integers");
        }
        out.push_back(static_cast<std::uint32_t>(s));
    }
    return out;
}

Prompt parse_prompt(const std::string& text) {
    Prompt p;
    std::size_t i = 0;
    while (i < text.size()) {
        if (text[i] == ' ') {
            ++i;
            continue;
        }
        std::size_t end;
        if (text[i] == '[') {
            end = text.find(']', i);
            if (end == std::string::npos) throw ConfigError("prompt: unclosed '['");
            ++end;
        } else {
            end = std::min(text.find(' ', i), text.size());
        }
        const std::string word = text.substr(i, end - i);
        const auto t = synth::token_from_name(word);
        if (!t) throw ConfigError("prompt: unknown token '" + word + "'");
        p.tokens.push_back(*t);
        i = end;
    }
    const auto open = std::find(p.tokens.begin(), p.tokens.end(), synth::tok::img);
    const auto close = std::find(p.tokens.begin(), p.tokens.end(), synth::tok::img_end);
    if (open == p.tokens.end() || close == p.tokens.end() || close <= open + 1) {
        throw ConfigError("prompt: needs a non-empty <img> ... </img> block");
    }
    p.span = {static_cast<std::size_t>(open - p.tokens.begin()) + 1,
              static_cast<std::size_t>(close - p.tokens.begin())};
    return p;
}

struct Context {
    const RunConfig& cfg;
    std::ostream& out;
    std::ostream& err;
};

int cmd_gen_data(const Context& c) {
    const auto size = c.cfg.count("size");
    if (size == 0) throw ConfigError("size: must be positive");
    const auto ds = synth::gen_dataset(c.cfg.seed(), size, {}, c.cfg.mix());
    const auto path = c.cfg.output_path("dataset.jsonl");
    ensure_parent(path);
    ds.save(path);
    std::array<std::size_t, synth::kQuestionKinds> kinds{};
    for (const auto& s : ds.samples) ++kinds[static_cast<std::size_t>(s.kind)];
    json by_kind;
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        by_kind[std::string(synth::kind_name(static_cast<synth::QuestionKind>(k)))] = kinds[k];
    }
    write_json(sidecar(path), report("gen-data", c.cfg,
                                     json{{"path", path.string()}, {"samples", size}, {"by_kind", by_kind}}));
    c.out << "wrote " << size << " samples to " << path.string() << "\n";
    return kExitOk;
}

int cmd_train_model(const Context& c) {
    const auto ds_path = c.cfg.existing_path("dataset");
    const auto mc = c.cfg.model_config();
    const auto hyper = c.cfg.train_hyper();
    const auto ds = synth::Dataset::load(ds_path);
    const auto res = synth::train_toy_model(ds.samples, mc, hyper, std::nullopt, [&](const synth::EpochLog& e) {
        c.err << "epoch " << e.epoch << " loss " << e.mean_loss << " holdout " << e.holdout_accuracy << "\n";
    });
    const auto path = c.cfg.output_path("model.bin");
    ensure_parent(path);
    res.model.save(path);
    json history = json::array();
    for (const auto& e : res.history) {
        history.push_back(json{{"epoch", e.epoch},
                               {"mean_loss", e.mean_loss},
                               {"holdout_accuracy", e.holdout_accuracy},
                               {"holdout_existence_accuracy", e.holdout_existence_accuracy}});
    }
    write_json(sidecar(path), report("train-model", c.cfg,
                                     json{{"path", path.string()},
                                          {"fingerprint", io::hex64(res.model.fingerprint())},
                                          {"reached_target", res.reached_target},
                                          {"history", history}}));
    c.out << "wrote model to " << path.string() << " (holdout accuracy "
          << (res.history.empty() ? 0.0 : res.history.back().holdout_accuracy) << ")\n";
    return kExitOk;
}

int cmd_train_probes(const Context& c) {
    const auto model_path = c.cfg.existing_path("model");
    const auto ds_path = c.cfg.existing_path("dataset");
    const auto popts = c.cfg.perturb_options();
    const auto hyper = c.cfg.probe_hyper();
    const auto n = c.cfg.count("probe_prompts");
    if (n == 0) throw ConfigError("probe_prompts: must be positive");
    const Model model = Model::load(model_path);
    const auto ds = synth::Dataset::load(ds_path);
    std::vector<Prompt> prompts;
    for (std::size_t i = 0; i < std::min<std::size_t>(n, ds.samples.size()); ++i) {
        prompts.push_back(ds.samples[i].prompt());
    }
    const auto pds = build_probe_dataset(model, prompts, popts, c.cfg.seed());
    const ProbeBank bank = train_probe_bank(pds, hyper);
    const auto path = c.cfg.output_path("probes.bin");
    ensure_parent(path);
    bank.save(path);

    std::vector<Probe> ranked = bank.probes();
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Probe& a, const Probe& b) { return a.val_accuracy > b.val_accuracy; });
    json heads = json::array();
    for (const auto& p : ranked) {
        heads.push_back(json{{"layer", p.layer}, {"head", p.head}, {"val_accuracy", p.val_accuracy}});
    }
    write_json(sidecar(path), report("train-probes", c.cfg,
                                     json{{"path", path.string()},
                                          {"prompts", prompts.size()},
                                          {"rows", pds.rows()},
                                          {"heads_by_accuracy", heads}}));
    c.out << "wrote " << bank.probes().size() << " probes to " << path.string() << " (best "
          << ranked.front().val_accuracy << ")\n";
    return kExitOk;
}

int cmd_generate(const Context& c) {
    const auto model_path = c.cfg.existing_path("model");
    if (!c.cfg.has("prompt")) throw ConfigError("prompt: required but not set");
    const Prompt prompt = parse_prompt(c.cfg.text("prompt"));
    const auto max_new = c.cfg.count("max_new");
    const Model model = Model::load(model_path);
    GenerationTrace trace;
    if (c.cfg.boolean("intervene")) {
        const auto bank = ProbeBank::load(c.cfg.existing_path("probes"));
        trace = viti_generate(model, prompt, bank, c.cfg.intervention(), max_new, synth::tok::eos, c.cfg.target());
    } else {
        DecodeOptions d;
        d.stop_token = synth::tok::eos;
        d.record_timing = false;
        trace = decode_greedy(model, prompt, max_new, d);
    }
    json steps = json::array();
    for (const auto& s : trace.steps) {
        std::size_t fired = 0;
        for (const auto& d : s.decisions) fired += d.fired;
        steps.push_back(json{{"token", std::string(synth::token_name(s.token))},
                             {"visual_mass", s.visual_mass},
                             {"gates_fired", fired}});
    }
    const std::string text = synth::detokenize(trace.tokens);
    write_json(c.cfg.output_path("generate.json"),
               report("generate", c.cfg, json{{"output", text}, {"steps", steps}}));
    c.out << text << "\n";
    return kExitOk;
}

synth::EvalOptions eval_options(const RunConfig& cfg, const ProbeBank* bank) {
    synth::EvalOptions o;
    o.workers = cfg.count("workers");
    o.perturbation = cfg.eval_perturbation();
    if (bank) o.intervention = synth::EvalIntervention{bank, cfg.intervention(), cfg.target()};
    return o;
}

int cmd_eval(const Context& c) {
    const auto model_path = c.cfg.existing_path("model");
    const auto ds_path = c.cfg.existing_path("dataset");
    std::optional<ProbeBank> bank;
    if (c.cfg.boolean("intervene")) bank = ProbeBank::load(c.cfg.existing_path("probes"));
    const Model model = Model::load(model_path);
    const auto ds = synth::Dataset::load(ds_path);
    const auto opts = eval_options(c.cfg, bank ? &*bank : nullptr);
    json result{{"metrics", metrics_json(synth::eval_task(model, ds.samples, opts))}};
    if (c.cfg.boolean("curve")) {
        const auto steps = integer_steps(c.cfg);
        synth::EvalPerturbation base;
        base.options = c.cfg.perturb_options();
        base.seed = c.cfg.seed();
        const auto curve = analysis::degradation_curve(model, ds.samples, steps, base, opts.workers);
        json rows = json::array();
        for (const auto& r : curve.rows) {
            rows.push_back(json{{"step", r.step},
                                {"accuracy", r.accuracy},
                                {"existence_accuracy", r.existence_accuracy},
                                {"f1", r.f1},
                                {"visual_mass", r.visual_mass}});
            c.out << "step " << r.step << " accuracy " << r.accuracy << " f1 " << r.f1 << " visual mass "
                  << r.visual_mass << "\n";
        }
        result["curve"] = json{{"rows", rows}, {"spearman_step_accuracy", curve.rank_correlation}};
    }
    const auto& m = result["metrics"];
    c.out << "accuracy " << m["accuracy"].get<double>() << " existence accuracy "
          << m["existence"]["accuracy"].get<double>() << " f1 " << m["existence"]["f1"].get<double>() << "\n";
    write_json(c.cfg.output_path("eval.json"), report("eval", c.cfg, result));
    return kExitOk;
}

int cmd_theorem1(const Context& c) {
    const auto model_path = c.cfg.existing_path("model");
    const auto bank_path = c.cfg.existing_path("probes");
    const auto ds_path = c.cfg.existing_path("dataset");
    const auto icfg = c.cfg.intervention();
    analysis::Theorem1Options o;
    o.projections = c.cfg.count("projections");
    o.mi = c.cfg.mi_options();
    o.perturbation = c.cfg.eval_perturbation();
    o.seed = c.cfg.seed();
    const Model model = Model::load(model_path);
    const auto bank = ProbeBank::load(bank_path);
    const auto ds = synth::Dataset::load(ds_path);
    const auto r = analysis::theorem1_check(model, bank, icfg, ds.samples, o);
    analysis::PlantedOptions po;
    po.projections = o.projections;
    po.mi = o.mi;
    po.seed = o.seed;
    const auto planted = analysis::theorem1_planted(po);
    write_json(c.cfg.output_path("theorem1.json"),
               report("theorem1", c.cfg, json{{"pipeline", theorem1_json(r)}, {"planted", theorem1_json(planted)}}));
    c.out << "planted: " << analysis::status_name(planted.status) << " (strict " << planted.strict_fraction << ")\n"
          << "pipeline: " << analysis::status_name(r.status) << " (" << r.satisfied_fraction << " of "
          << r.checks.size() << " pairs, " << r.gated_samples << " gated samples)\n";
    return kExitOk;
}

int cmd_sweep(const Context& c) {
    const auto model_path = c.cfg.existing_path("model");
    const auto bank_path = c.cfg.existing_path("probes");
    const auto ds_path = c.cfg.existing_path("dataset");
    const auto alphas = c.cfg.reals("alphas");
    const auto betas = c.cfg.reals("betas");
    const auto metric = [&] {
        try {
            return analysis::metric_from_name(c.cfg.text("metric"));
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("metric: ") + e.what());
        }
    }();
    const Model model = Model::load(model_path);
    const auto bank = ProbeBank::load(bank_path);
    const auto ds = synth::Dataset::load(ds_path);
    auto base = eval_options(c.cfg, nullptr);
    base.intervention = synth::EvalIntervention{&bank, c.cfg.intervention(), c.cfg.target()};
    const auto r = analysis::sweep(model, bank, ds.samples, alphas, betas, base, metric);
    const auto csv_path = c.cfg.output_path("sweep.csv");
    ensure_parent(csv_path);
    io::write_atomic(csv_path, r.to_csv());
    json grid = json::array();
    for (std::size_t a = 0; a < alphas.size(); ++a) grid.push_back(std::vector<double>(
        r.scores.begin() + static_cast<std::ptrdiff_t>(a * betas.size()),
        r.scores.begin() + static_cast<std::ptrdiff_t>((a + 1) * betas.size())));
    write_json(sidecar(csv_path), report("sweep", c.cfg,
                                         json{{"metric", analysis::metric_name(metric)},
                                              {"alphas", alphas},
                                              {"betas", betas},
                                              {"scores", grid},
                                              {"baseline", r.baseline},
                                              {"best", {{"alpha0", alphas[r.best_alpha]},
                                                        {"beta", betas[r.best_beta]},
                                                        {"score", r.best_score()}}}}));
    c.out << "baseline " << r.baseline << ", best " << r.best_score() << " at alpha0=" << alphas[r.best_alpha]
          << " beta=" << betas[r.best_beta] << "\n";
    return kExitOk;
}

int cmd_ablate(const Context& c) {
    const auto model_path = c.cfg.existing_path("model");
    const auto bank_path = c.cfg.existing_path("probes");
    const auto ds_path = c.cfg.existing_path("dataset");
    const auto icfg = c.cfg.intervention();
    const auto pert = c.cfg.eval_perturbation();
    if (!pert) throw ConfigError("perturb_steps: ablate needs perturbed inputs (perturb_steps > 0)");
    const Model model = Model::load(model_path);
    const auto bank = ProbeBank::load(bank_path);
    const auto ds = synth::Dataset::load(ds_path);
    const auto rows = analysis::ablation_suite(model, bank, icfg, ds.samples, *pert, c.cfg.count("workers"));
    json table = json::array();
    for (const auto& r : rows) {
        table.push_back(json{{"name", r.name}, {"perturbed", metrics_json(r.perturbed)}, {"clean", metrics_json(r.clean)}});
        c.out << r.name << ": perturbed existence " << r.perturbed.existence.accuracy << ", clean existence "
              << r.clean.existence.accuracy << "\n";
    }
    write_json(c.cfg.output_path("ablation.json"), report("ablate", c.cfg, json{{"rows", table}}));
    return kExitOk;
}

int cmd_bench(const Context& c) {
    const auto model_path = c.cfg.existing_path("model");
    const auto bank_path = c.cfg.existing_path("probes");
    analysis::OverheadOptions o;
    o.context = c.cfg.count("context");
    o.new_tokens = c.cfg.count("new_tokens");
    o.repeats = c.cfg.count("repeats");
    o.seed = c.cfg.seed();
    if (o.repeats < 5) throw ConfigError("repeats: at least 5 timed repeats are required");
    const auto icfg = c.cfg.intervention();
    const Model model = Model::load(model_path);
    const auto bank = ProbeBank::load(bank_path);
    const auto r = analysis::overhead_benchmark(model, bank, icfg, o);
    write_json(c.cfg.output_path("bench.json"),
               report("bench", c.cfg,
                      json{{"context", r.context},
                           {"repeats", r.repeats},
                           {"greedy_seconds_per_token", r.greedy_seconds_per_token},
                           {"viti_seconds_per_token", r.viti_seconds_per_token},
                           {"ratio", r.ratio},
                           {"viti_state_bytes", r.viti_state_bytes}}));
    c.out << "greedy " << r.greedy_seconds_per_token * 1e3 << " ms/token, viti " << r.viti_seconds_per_token * 1e3
          << " ms/token, ratio " << r.ratio << "\n";
    return kExitOk;
}

int cmd_report(const Context& c) {
    const auto in = c.cfg.existing_path("in");
    const auto table = analysis::pivot_sweep_csv(io::read_text(in));
    const std::filesystem::path path =
        c.cfg.has("out") ? std::filesystem::path(c.cfg.text("out")) : in.parent_path() / (in.stem().string() + "_pivot.csv");
    ensure_parent(path);
    const std::string csv = table.to_csv();
    io::write_atomic(path, csv);
    c.out << csv;
    return kExitOk;
}

std::string flag_name(std::string_view key) {
    std::string dashed(key);
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    std::string names = "--" + dashed;
    if (dashed != key) names += ",--" + std::string(key);
    return names;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Visual neglect detection and recall intervention on a toy decoder"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    std::string config_file;
    app.add_option("--config", config_file, "flat key = value configuration file");
    std::map<std::string, std::string> text_values;
    std::map<std::string, bool> bool_values;
    std::map<std::string, CLI::Option*> options;
    for (const auto& k : config_keys()) {
        const std::string key(k.name);
        if (k.type == KeyType::boolean) {
            const std::string dashed = flag_name(k.name).substr(2);
            options[key] = app.add_flag("--" + dashed + ",!--no-" + dashed, bool_values[key], std::string(k.help));
        } else {
            options[key] = app.add_option(flag_name(k.name), text_values[key], std::string(k.help));
        }
    }

    using Handler = std::function<int(const Context&)>;
    const std::vector<std::tuple<std::string, std::string, Handler>> commands{
        {"gen-data", "generate a synthetic QA dataset", cmd_gen_data},
        {"train-model", "train the toy decoder on a dataset", cmd_train_model},
        {"train-probes", "build the probe dataset and train one probe per head", cmd_train_probes},
        {"generate", "decode one prompt, optionally with the intervention", cmd_generate},
        {"eval", "evaluate a model on a dataset", cmd_eval},
        {"theorem1", "check the mutual-information inequality empirically", cmd_theorem1},
        {"sweep", "evaluate an alpha0 x beta grid", cmd_sweep},
        {"ablate", "compare the full method with its ablations", cmd_ablate},
        {"bench", "measure per-token decoding overhead", cmd_bench},
        {"report", "pivot a sweep CSV into alpha0 rows x beta columns", cmd_report},
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& [name, help, handler] : commands) {
        subs[name] = app.add_subcommand(name, help)->fallthrough();
    }

    std::ostringstream cli_out, cli_err;
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, cli_out, cli_err);
        out << cli_out.str();
        err << cli_err.str();
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        RunConfig cfg = RunConfig::defaults();
        if (!config_file.empty()) cfg.merge_file(config_file);
        for (const auto& k : config_keys()) {
            const std::string key(k.name);
            if (options[key]->count() == 0) continue;
            cfg.set(key, k.type == KeyType::boolean ? (bool_values[key] ? "true" : "false") : text_values[key]);
        }
        const Context ctx{cfg, out, err};
        for (const auto& [name, help, handler] : commands) {
            if (subs[name]->parsed()) return handler(ctx);
        }
        return kExitConfig;
    } catch (const ConfigError& e) {
        err << "error: config: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CompatibilityError& e) {
        err << "error: incompatible file: " << e.what() << "\n";
        return kExitIncompatible;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

} // namespace viti::cli
