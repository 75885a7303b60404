#include "viti/synthtask.hpp"

#include <algorithm>
#include <exception>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "viti/error.hpp"
#include "viti/io.hpp"

namespace viti::synth {

namespace {

constexpr std::array<std::string_view, tok::count> kNames = {
    "<pad>", "<bos>", "<eos>", "<img>", "</img>", "?", "is", "there", "a", "what", "color",
    "the", "how", "many", "yes", "no", "circle", "square", "triangle", "red", "blue", "yellow",
    "white", "0", "1", "2", "3", "4", "<empty>",
    "[red circle]", "[blue circle]", "[yellow circle]", "[white circle]",
    "[red square]", "[blue square]", "[yellow square]", "[white square]",
    "[red triangle]", "[blue triangle]", "[yellow triangle]", "[white triangle]",
};

Shape shape_from_token(int t) { return static_cast<Shape>(t - tok::shape0); }
Color color_from_token(int t) { return static_cast<Color>(t - tok::color0); }

bool is_shape_token(int t) { return t >= tok::shape0 && t < tok::shape0 + int(kShapes); }
bool is_color_token(int t) { return t >= tok::color0 && t < tok::color0 + int(kColors); }

std::vector<int> frame(const Scene& scene) {
    std::vector<int> t{tok::bos, tok::img};
    const auto vis = scene.visual_tokens();
    t.insert(t.end(), vis.begin(), vis.end());
    t.push_back(tok::img_end);
    return t;
}

QASample make_sample(const Scene& scene, QuestionKind kind, std::vector<int> question,
                     int answer) {
    QASample s;
    s.tokens = frame(scene);
    s.span = {2, 2 + scene.cells.size()};
    s.tokens.insert(s.tokens.end(), question.begin(), question.end());
    s.answer = {answer};
    s.kind = kind;
    return s;
}

QuestionKind draw_kind(const QuestionMix& mix, Rng& rng) {
    const double total = mix.existence + mix.color + mix.count;
    const double u = rng.uniform() * total;
    if (u < mix.existence) return QuestionKind::existence;
    if (u < mix.existence + mix.color) return QuestionKind::color;
    return QuestionKind::count;
}

QASample existence_sample(const GridConfig& grid, bool want_yes, Rng& rng) {
    const Scene scene = random_scene(grid, rng);
    Object target;
    if (want_yes) {
        std::vector<Object> present;
        for (const auto& c : scene.cells) {
            if (c) present.push_back(*c);
        }
        target = present[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(present.size()) - 1))];
    } else {
        std::vector<Object> absent;
        for (std::size_t s = 0; s < kShapes; ++s) {
            for (std::size_t c = 0; c < kColors; ++c) {
                const Object o{static_cast<Shape>(s), static_cast<Color>(c)};
                if (!scene.contains(o.shape, o.color)) absent.push_back(o);
            }
        }
        target = absent[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(absent.size()) - 1))];
    }
    return make_sample(scene, QuestionKind::existence,
                       {tok::is, tok::there, tok::a, color_token(target.color),
                        shape_token(target.shape), tok::qmark},
                       want_yes ? tok::yes : tok::no);
}

QASample color_sample(const GridConfig& grid, Rng& rng) {
    for (;;) {
        const Scene scene = random_scene(grid, rng);
        std::vector<Shape> unique;
        for (std::size_t s = 0; s < kShapes; ++s) {
            if (scene.count_shape(static_cast<Shape>(s)) == 1) unique.push_back(static_cast<Shape>(s));
        }
        if (unique.empty()) continue;
        const Shape shape = unique[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(unique.size()) - 1))];
        Color color = Color::red;
        for (const auto& c : scene.cells) {
            if (c && c->shape == shape) color = c->color;
        }
        return make_sample(scene, QuestionKind::color,
                           {tok::what, tok::color, tok::is, tok::the, shape_token(shape), tok::qmark},
                           color_token(color));
    }
}

QASample count_sample(const GridConfig& grid, Rng& rng) {
    const Scene scene = random_scene(grid, rng);
    const auto shape = static_cast<Shape>(rng.uniform_int(0, kShapes - 1));
    return make_sample(scene, QuestionKind::count,
                       {tok::how, tok::many, shape_token(shape), tok::qmark},
                       digit_token(scene.count_shape(shape)));
}

} // namespace

int shape_token(Shape s) { return tok::shape0 + static_cast<int>(s); }
int color_token(Color c) { return tok::color0 + static_cast<int>(c); }

int digit_token(int n) {
    if (n < 0 || n > kMaxCount) throw RangeError("count " + std::to_string(n) + " outside 0..4");
    return tok::digit0 + n;
}

int object_token(Shape s, Color c) {
    return tok::object0 + static_cast<int>(s) * static_cast<int>(kColors) + static_cast<int>(c);
}

bool is_visual_token(int token) { return token >= tok::empty && token < tok::count; }

std::string_view token_name(int token) {
    if (token < 0 || token >= tok::count) return "<unk>";
    return kNames[static_cast<std::size_t>(token)];
}

std::optional<int> token_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kNames.size(); ++i) {
        if (kNames[i] == name) return static_cast<int>(i);
    }
    return std::nullopt;
}

std::string detokenize(std::span<const int> tokens) {
    std::string out;
    for (int t : tokens) {
        if (!out.empty()) out += ' ';
        out += token_name(t);
    }
    return out;
}

void GridConfig::validate() const {
    if (rows == 0 || cols == 0) throw ConfigError("grid rows and cols must be positive");
    if (min_objects == 0) throw ConfigError("grid min_objects must be at least 1");
    if (max_objects < min_objects) throw ConfigError("grid max_objects must be >= min_objects");
    if (max_objects > cells()) throw ConfigError("grid max_objects exceeds the number of cells");
    if (max_objects > static_cast<std::uint32_t>(kMaxCount)) {
        throw ConfigError("grid max_objects must be <= 4 so counts stay in the answer vocabulary");
    }
}

std::size_t Scene::object_count() const {
    return static_cast<std::size_t>(
        std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c.has_value(); }));
}

int Scene::count_shape(Shape s) const {
    return static_cast<int>(std::count_if(cells.begin(), cells.end(),
                                          [s](const auto& c) { return c && c->shape == s; }));
}

bool Scene::contains(Shape s, Color c) const {
    return std::any_of(cells.begin(), cells.end(),
                       [&](const auto& cell) { return cell && cell->shape == s && cell->color == c; });
}

std::vector<int> Scene::visual_tokens() const {
    std::vector<int> out;
    out.reserve(cells.size());
    for (const auto& c : cells) out.push_back(c ? object_token(c->shape, c->color) : tok::empty);
    return out;
}

Scene Scene::from_visual_tokens(std::span<const int> tokens, std::uint32_t rows,
                                std::uint32_t cols) {
    if (tokens.size() != std::size_t{rows} * cols) {
        throw InputError("scene needs rows*cols visual tokens");
    }
    Scene s;
    s.rows = rows;
    s.cols = cols;
    for (int t : tokens) {
        if (!is_visual_token(t)) throw InputError("non-visual token inside the visual span");
        if (t == tok::empty) {
            s.cells.emplace_back();
        } else {
            const int k = t - tok::object0;
            s.cells.emplace_back(Object{static_cast<Shape>(k / int(kColors)),
                                        static_cast<Color>(k % int(kColors))});
        }
    }
    return s;
}

Scene random_scene(const GridConfig& grid, Rng& rng) {
    grid.validate();
    Scene s;
    s.rows = grid.rows;
    s.cols = grid.cols;
    s.cells.assign(grid.cells(), std::nullopt);
    const auto n = static_cast<std::size_t>(rng.uniform_int(grid.min_objects, grid.max_objects));
    std::vector<std::size_t> idx(grid.cells());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    for (std::size_t i = 0; i < n; ++i) {
        const auto shape = static_cast<Shape>(rng.uniform_int(0, kShapes - 1));
        const auto color = static_cast<Color>(rng.uniform_int(0, kColors - 1));
        s.cells[idx[i]] = Object{shape, color};
    }
    return s;
}

std::string_view kind_name(QuestionKind k) {
    switch (k) {
    case QuestionKind::existence: return "existence";
    case QuestionKind::color: return "color";
    case QuestionKind::count: return "count";
    }
    return "unknown";
}

QuestionKind kind_from_name(std::string_view name) {
    if (name == "existence") return QuestionKind::existence;
    if (name == "color") return QuestionKind::color;
    if (name == "count") return QuestionKind::count;
    throw FormatError("unknown question kind '" + std::string(name) + "'");
}

std::span<const int> QASample::visual_tokens() const {
    return std::span<const int>(tokens).subspan(span.start, span.size());
}

std::span<const int> QASample::question_tokens() const {
    return std::span<const int>(tokens).subspan(span.end + 1);
}

Prompt QASample::prompt() const { return Prompt{tokens, span, std::nullopt}; }

void QuestionMix::validate() const {
    if (!(existence >= 0.0 && color >= 0.0 && count >= 0.0)) {
        throw ConfigError("question mix weights must be non-negative");
    }
    if (!(existence + color + count > 0.0)) throw ConfigError("question mix is all zero");
}

Dataset gen_dataset(std::uint64_t seed, std::size_t size, const GridConfig& grid,
                    const QuestionMix& mix) {
    if (size == 0) throw ConfigError("dataset size must be positive");
    grid.validate();
    mix.validate();
    Dataset ds;
    ds.header = {seed, size, grid, mix};
    ds.samples.reserve(size);
    Rng rng(seed);
    std::size_t existence_index = 0;
    for (std::size_t i = 0; i < size; ++i) {
        switch (draw_kind(mix, rng)) {
        case QuestionKind::existence:
            ds.samples.push_back(existence_sample(grid, existence_index++ % 2 == 0, rng));
            break;
        case QuestionKind::color: ds.samples.push_back(color_sample(grid, rng)); break;
        case QuestionKind::count: ds.samples.push_back(count_sample(grid, rng)); break;
        }
    }
    return ds;
}

std::vector<int> interpret(std::span<const int> t, VisualSpan span, std::uint32_t rows,
                           std::uint32_t cols) {
    span.validate(t.size());
    if (span.start != 2 || t[0] != tok::bos || t[1] != tok::img || span.end >= t.size() ||
        t[span.end] != tok::img_end) {
        throw InputError("prompt is not framed as <bos> <img> ... </img>");
    }
    const Scene scene = Scene::from_visual_tokens(t.subspan(span.start, span.size()), rows, cols);
    const auto q = t.subspan(span.end + 1);
    if (q.size() == 6 && q[0] == tok::is && q[1] == tok::there && q[2] == tok::a &&
        is_color_token(q[3]) && is_shape_token(q[4]) && q[5] == tok::qmark) {
        return {scene.contains(shape_from_token(q[4]), color_from_token(q[3])) ? tok::yes : tok::no};
    }
    if (q.size() == 6 && q[0] == tok::what && q[1] == tok::color && q[2] == tok::is &&
        q[3] == tok::the && is_shape_token(q[4]) && q[5] == tok::qmark) {
        const Shape shape = shape_from_token(q[4]);
        if (scene.count_shape(shape) != 1) {
            throw InputError("color question about a shape that is not unique in the scene");
        }
        for (const auto& c : scene.cells) {
            if (c && c->shape == shape) return {color_token(c->color)};
        }
    }
    if (q.size() == 4 && q[0] == tok::how && q[1] == tok::many && is_shape_token(q[2]) &&
        q[3] == tok::qmark) {
        return {digit_token(scene.count_shape(shape_from_token(q[2])))};
    }
    throw InputError("unrecognised question: " + detokenize(q));
}

Dataset shuffle_scenes(const Dataset& dataset, std::uint64_t seed) {
    const std::size_t n = dataset.samples.size();
    if (n < 2) throw InputError("shuffle_scenes needs at least two samples");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    rng.shuffle(perm);
    Dataset out = dataset;
    for (std::size_t k = 0; k < n; ++k) {
        const QASample& donor = dataset.samples[perm[(k + 1) % n]];
        QASample& dst = out.samples[perm[k]];
        if (donor.span.size() != dst.span.size()) throw InputError("shuffle_scenes: grid sizes differ");
        std::copy(donor.tokens.begin() + static_cast<std::ptrdiff_t>(donor.span.start),
                  donor.tokens.begin() + static_cast<std::ptrdiff_t>(donor.span.end),
                  dst.tokens.begin() + static_cast<std::ptrdiff_t>(dst.span.start));
    }
    return out;
}

// ---- JSONL ----------------------------------------------------------------

std::string Dataset::to_jsonl() const {
    using json = nlohmann::ordered_json;
    std::string out;
    json head = {
        {"format", "viti-qa"},
        {"version", kDatasetVersion},
        {"seed", header.seed},
        {"size", header.size},
        {"grid",
         {{"rows", header.grid.rows},
          {"cols", header.grid.cols},
          {"min_objects", header.grid.min_objects},
          {"max_objects", header.grid.max_objects}}},
        {"mix", {{"existence", header.mix.existence}, {"color", header.mix.color}, {"count", header.mix.count}}},
    };
    out += head.dump();
    out += '\n';
    for (const auto& s : samples) {
        json rec = {
            {"kind", kind_name(s.kind)},
            {"tokens", s.tokens},
            {"span", {s.span.start, s.span.end}},
            {"answer", s.answer},
            {"text", detokenize(s.tokens)},
        };
        out += rec.dump();
        out += '\n';
    }
    return out;
}

Dataset Dataset::from_jsonl(std::string_view text) {
    using json = nlohmann::json;
    Dataset ds;
    std::size_t line_no = 0;
    bool have_header = false;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        const auto line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.empty()) continue;
        const std::string where = "dataset line " + std::to_string(line_no);
        try {
            const json j = json::parse(line);
            if (!have_header) {
                if (j.value("format", "") != "viti-qa") throw FormatError(where + ": not a viti-qa dataset");
                const int version = j.at("version").get<int>();
                if (version != kDatasetVersion) {
                    throw CompatibilityError(where + ": unsupported dataset version " +
                                             std::to_string(version));
                }
                ds.header.seed = j.at("seed").get<std::uint64_t>();
                ds.header.size = j.at("size").get<std::size_t>();
                const auto& g = j.at("grid");
                ds.header.grid = {g.at("rows").get<std::uint32_t>(), g.at("cols").get<std::uint32_t>(),
                                  g.at("min_objects").get<std::uint32_t>(),
                                  g.at("max_objects").get<std::uint32_t>()};
                const auto& m = j.at("mix");
                ds.header.mix = {m.at("existence").get<double>(), m.at("color").get<double>(),
                                 m.at("count").get<double>()};
                have_header = true;
                continue;
            }
            QASample s;
            s.kind = kind_from_name(j.at("kind").get<std::string>());
            s.tokens = j.at("tokens").get<std::vector<int>>();
            const auto span = j.at("span").get<std::vector<std::size_t>>();
            if (span.size() != 2) throw FormatError(where + ": span must have two entries");
            s.span = {span[0], span[1]};
            s.span.validate(s.tokens.size());
            s.answer = j.at("answer").get<std::vector<int>>();
            ds.samples.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw FormatError(where + ": " + e.what());
        } catch (const ConfigError& e) {
            throw FormatError(where + ": " + e.what());
        }
    }
    if (!have_header) throw FormatError("dataset: missing header record");
    if (ds.samples.size() != ds.header.size) {
        throw FormatError("dataset: header says " + std::to_string(ds.header.size) + " samples, found " +
                          std::to_string(ds.samples.size()));
    }
    return ds;
}

void Dataset::save(const std::filesystem::path& path) const { io::write_atomic(path, to_jsonl()); }

Dataset Dataset::load(const std::filesystem::path& path) { return from_jsonl(io::read_text(path)); }

// ---- metrics ----------------------------------------------------------------

BinaryMetrics binary_metrics(const BinaryCounts& c) {
    BinaryMetrics m;
    const double n = static_cast<double>(c.total());
    if (n > 0) m.accuracy = static_cast<double>(c.tp + c.tn) / n;
    if (c.tp + c.fp > 0) m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn > 0) m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    if (m.precision + m.recall > 0) m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
    return m;
}

Metrics summarize(std::span<const QASample> samples, std::span<const SampleResult> results) {
    if (samples.size() != results.size()) throw ShapeError("summarize: result count");
    Metrics m;
    m.samples = samples.size();
    std::array<std::size_t, kQuestionKinds> correct{};
    std::size_t all_correct = 0, decisions = 0, fired = 0;
    double mass = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        const auto& r = results[i];
        const auto k = static_cast<std::size_t>(s.kind);
        ++m.kind_total[k];
        if (r.correct) {
            ++correct[k];
            ++all_correct;
        }
        if (s.kind == QuestionKind::existence) {
            const bool gold = s.answer.at(0) == tok::yes;
            const bool pred = r.predicted == tok::yes;
            if (gold && pred) ++m.existence_counts.tp;
            if (!gold && pred) ++m.existence_counts.fp;
            if (!gold && !pred) ++m.existence_counts.tn;
            if (gold && !pred) ++m.existence_counts.fn;
        }
        mass += r.visual_mass;
        decisions += r.decisions;
        fired += r.fired;
    }
    for (std::size_t k = 0; k < kQuestionKinds; ++k) {
        if (m.kind_total[k]) m.kind_accuracy[k] = static_cast<double>(correct[k]) / m.kind_total[k];
    }
    m.existence = binary_metrics(m.existence_counts);
    if (m.samples) {
        m.accuracy = static_cast<double>(all_correct) / static_cast<double>(m.samples);
        m.visual_mass = mass / static_cast<double>(m.samples);
    }
    if (decisions) m.gate_rate = static_cast<double>(fired) / static_cast<double>(decisions);
    return m;
}

Metrics eval_task(const Model& model, std::span<const QASample> samples, const EvalOptions& options,
                  std::vector<SampleResult>* per_sample) {
    if (options.max_new == 0) throw ConfigError("eval max_new must be positive");
    std::optional<std::vector<HeadId>> selected;
    if (options.intervention) {
        const auto& iv = *options.intervention;
        if (!iv.bank) throw ConfigError("eval intervention needs a probe bank");
        iv.config.validate();
        check_compatible(model, *iv.bank);
        selected = select_top_beta(*iv.bank, iv.config.beta);
    }
    if (options.perturbation) options.perturbation->options.validate();

    std::vector<SampleResult> results(samples.size());
    auto run_range = [&](std::size_t worker, std::size_t workers) {
        std::optional<VitiIntervenor> hook;
        if (options.intervention) {
            const auto& iv = *options.intervention;
            hook.emplace(*iv.bank, HeadSelection(iv.bank->layers(), iv.bank->heads(), *selected),
                         iv.config, iv.target);
        }
        DecodeOptions dopts;
        dopts.intervenor = hook ? &*hook : nullptr;
        dopts.record_timing = false;
        for (std::size_t i = worker; i < samples.size(); i += workers) {
            Prompt prompt = samples[i].prompt();
            if (options.perturbation) {
                const auto& p = *options.perturbation;
                Rng rng = Rng::derive(p.seed, i);
                prompt = perturb_prompt(model, prompt, p.kind, p.options, rng);
            }
            const GenerationTrace trace = decode_greedy(model, prompt, options.max_new, dopts);
            SampleResult& r = results[i];
            r.predicted = trace.tokens.empty() ? -1 : trace.tokens.front();
            r.correct = r.predicted == samples[i].answer.at(0);
            double mass = 0.0;
            for (const auto& step : trace.steps) {
                mass += step.visual_mass;
                r.decisions += step.decisions.size();
                for (const auto& d : step.decisions) r.fired += d.fired ? 1 : 0;
            }
            if (!trace.steps.empty()) mass /= static_cast<double>(trace.steps.size());
            r.visual_mass = mass;
        }
    };

    const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, samples.size()));
    if (workers == 1) {
        run_range(0, 1);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    run_range(w, workers);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    Metrics m = summarize(samples, results);
    if (per_sample) *per_sample = std::move(results);
    return m;
}

} // namespace viti::synth
