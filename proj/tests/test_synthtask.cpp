#include <gtest/gtest.h>

#include <filesystem>

#include "viti/error.hpp"
#include "viti/synthtask.hpp"

using namespace viti;
using namespace viti::synth;

TEST(Tokens, NamesRoundTrip) {
    for (int t = 0; t < tok::count; ++t) {
        const auto name = token_name(t);
        EXPECT_FALSE(name.empty());
        EXPECT_EQ(token_from_name(name), t) << name;
    }
    EXPECT_FALSE(token_from_name("zebra").has_value());
    EXPECT_EQ(object_token(Shape::square, Color::blue), tok::object0 + 5);
    EXPECT_THROW(digit_token(5), RangeError);
    EXPECT_TRUE(is_visual_token(tok::empty));
    EXPECT_FALSE(is_visual_token(tok::yes));
}

TEST(Scene, VisualTokensRoundTrip) {
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        const Scene s = random_scene(GridConfig{}, rng);
        EXPECT_GE(s.object_count(), 1u);
        EXPECT_LE(s.object_count(), 4u);
        EXPECT_EQ(Scene::from_visual_tokens(s.visual_tokens(), 3, 3), s);
    }
}

TEST(GridConfig, Validation) {
    GridConfig g;
    g.max_objects = 5;
    EXPECT_THROW(g.validate(), ConfigError);
    g = {};
    g.min_objects = 0;
    EXPECT_THROW(g.validate(), ConfigError);
    g = {};
    g.rows = 1;
    g.cols = 2;
    g.max_objects = 4;
    EXPECT_THROW(g.validate(), ConfigError);
}

TEST(GenDataset, DeterministicAndFramed) {
    const Dataset a = gen_dataset(3, 300);
    EXPECT_EQ(a, gen_dataset(3, 300));
    EXPECT_NE(a, gen_dataset(4, 300));
    for (const auto& s : a.samples) {
        EXPECT_EQ(s.tokens[0], tok::bos);
        EXPECT_EQ(s.tokens[1], tok::img);
        EXPECT_EQ(s.span.start, 2u);
        EXPECT_EQ(s.span.size(), 9u);
        EXPECT_EQ(s.tokens[s.span.end], tok::img_end);
        EXPECT_EQ(s.tokens.back(), tok::qmark);
        ASSERT_EQ(s.answer.size(), 1u);
    }
}

TEST(GenDataset, ExistenceAnswersBalanced) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const Dataset d = gen_dataset(seed, 501);
        long yes = 0, no = 0;
        for (const auto& s : d.samples) {
            if (s.kind != QuestionKind::existence) continue;
            (s.answer[0] == tok::yes ? yes : no) += 1;
        }
        EXPECT_LE(std::abs(yes - no), 1);
        EXPECT_GT(yes + no, 200);
    }
}

TEST(GenDataset, OracleAgreesOnEverySample) {
    const Dataset d = gen_dataset(5, 2000);
    for (const auto& s : d.samples) {
        EXPECT_EQ(interpret(s.tokens, s.span, 3, 3), s.answer) << detokenize(s.tokens);
    }
}

TEST(GenDataset, MixControlsKinds) {
    QuestionMix only_count{0.0, 0.0, 1.0};
    for (const auto& s : gen_dataset(6, 100, {}, only_count).samples) {
        EXPECT_EQ(s.kind, QuestionKind::count);
    }
    EXPECT_THROW(gen_dataset(6, 100, {}, QuestionMix{-0.5, 0.5, 0.5}), ConfigError);
    EXPECT_THROW(gen_dataset(6, 100, {}, QuestionMix{0.0, 0.0, 0.0}), ConfigError);
    EXPECT_THROW(gen_dataset(6, 0), ConfigError);
}

TEST(Interpret, RejectsMalformedPrompts) {
    const QASample s = gen_dataset(7, 1).samples[0];
    auto bad = s.tokens;
    bad[0] = tok::pad;
    EXPECT_THROW(interpret(bad, s.span, 3, 3), InputError);
    bad = s.tokens;
    bad.back() = tok::yes;
    EXPECT_THROW(interpret(bad, s.span, 3, 3), InputError);
}

TEST(Interpret, HandBuiltScene) {
    // Red circle in the first cell, blue square in the last.
    std::vector<int> t{tok::bos, tok::img};
    for (int i = 0; i < 9; ++i) t.push_back(tok::empty);
    t[2] = object_token(Shape::circle, Color::red);
    t[10] = object_token(Shape::square, Color::blue);
    t.push_back(tok::img_end);
    const VisualSpan span{2, 11};
    auto ask = [&](std::vector<int> q) {
        auto p = t;
        p.insert(p.end(), q.begin(), q.end());
        return interpret(p, span, 3, 3);
    };
    const int circle = shape_token(Shape::circle), square = shape_token(Shape::square);
    EXPECT_EQ(ask({tok::is, tok::there, tok::a, color_token(Color::red), circle, tok::qmark}),
              std::vector<int>{tok::yes});
    EXPECT_EQ(ask({tok::is, tok::there, tok::a, color_token(Color::blue), circle, tok::qmark}),
              std::vector<int>{tok::no});
    EXPECT_EQ(ask({tok::what, tok::color, tok::is, tok::the, square, tok::qmark}),
              std::vector<int>{color_token(Color::blue)});
    EXPECT_EQ(ask({tok::how, tok::many, shape_token(Shape::triangle), tok::qmark}),
              std::vector<int>{digit_token(0)});
}

TEST(ShuffleScenes, KeepsQuestionsAndAnswers) {
    const Dataset d = gen_dataset(8, 200);
    const Dataset s = shuffle_scenes(d, 1);
    ASSERT_EQ(s.samples.size(), d.samples.size());
    std::size_t changed = 0, wrong = 0;
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        const auto& a = d.samples[i];
        const auto& b = s.samples[i];
        EXPECT_EQ(a.answer, b.answer);
        EXPECT_TRUE(std::equal(a.question_tokens().begin(), a.question_tokens().end(),
                               b.question_tokens().begin(), b.question_tokens().end()));
        changed += !std::equal(a.visual_tokens().begin(), a.visual_tokens().end(), b.visual_tokens().begin());
        try {
            wrong += interpret(b.tokens, b.span, 3, 3) != b.answer;
        } catch (const InputError&) {
            ++wrong;
        }
    }
    EXPECT_GT(changed, 190u);
    EXPECT_GT(wrong, 50u);
}

TEST(BinaryMetrics, AllYesPredictor) {
    const auto m = binary_metrics(BinaryCounts{50, 50, 0, 0});
    EXPECT_DOUBLE_EQ(m.accuracy, 0.5);
    EXPECT_DOUBLE_EQ(m.recall, 1.0);
    EXPECT_DOUBLE_EQ(m.precision, 0.5);
    EXPECT_NEAR(m.f1, 2.0 / 3.0, 1e-12);
}

TEST(BinaryMetrics, ZeroDenominators) {
    const auto m = binary_metrics(BinaryCounts{0, 0, 10, 0});
    EXPECT_EQ(m.precision, 0.0);
    EXPECT_EQ(m.recall, 0.0);
    EXPECT_EQ(m.f1, 0.0);
    EXPECT_EQ(m.accuracy, 1.0);
    EXPECT_EQ(binary_metrics(BinaryCounts{}).accuracy, 0.0);
}

TEST(BinaryMetrics, F1IdentityOnRandomCounts) {
    Rng rng(9);
    for (int i = 0; i < 200; ++i) {
        BinaryCounts c;
        c.tp = static_cast<std::size_t>(rng.uniform_int(1, 100));
        c.fp = static_cast<std::size_t>(rng.uniform_int(0, 100));
        c.tn = static_cast<std::size_t>(rng.uniform_int(0, 100));
        c.fn = static_cast<std::size_t>(rng.uniform_int(0, 100));
        const auto m = binary_metrics(c);
        EXPECT_NEAR(m.f1, 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn), 1e-12);
        EXPECT_NEAR(m.accuracy, double(c.tp + c.tn) / double(c.total()), 1e-12);
    }
}

TEST(Summarize, CountsByKindAndClass) {
    const Dataset d = gen_dataset(10, 300);
    Rng rng(11);
    std::vector<SampleResult> res(d.samples.size());
    BinaryCounts expect;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < res.size(); ++i) {
        const auto& s = d.samples[i];
        res[i].predicted = rng.uniform() < 0.7 ? s.answer[0] : tok::yes;
        res[i].correct = res[i].predicted == s.answer[0];
        correct += res[i].correct;
        if (s.kind == QuestionKind::existence) {
            const bool gold = s.answer[0] == tok::yes, pred = res[i].predicted == tok::yes;
            (gold ? (pred ? expect.tp : expect.fn) : (pred ? expect.fp : expect.tn)) += 1;
        }
    }
    const Metrics m = summarize(d.samples, res);
    EXPECT_EQ(m.samples, 300u);
    EXPECT_EQ(m.existence_counts.tp, expect.tp);
    EXPECT_EQ(m.existence_counts.fp, expect.fp);
    EXPECT_EQ(m.existence_counts.tn, expect.tn);
    EXPECT_EQ(m.existence_counts.fn, expect.fn);
    EXPECT_NEAR(m.accuracy, double(correct) / 300.0, 1e-12);
    std::size_t total = 0;
    for (auto t : m.kind_total) total += t;
    EXPECT_EQ(total, 300u);
}

TEST(DatasetFile, JsonlRoundTripIsByteExact) {
    const Dataset d = gen_dataset(12, 50);
    const std::string text = d.to_jsonl();
    const Dataset back = Dataset::from_jsonl(text);
    EXPECT_EQ(back, d);
    EXPECT_EQ(back.to_jsonl(), text);
    const auto path = std::filesystem::temp_directory_path() / "viti_ds_test.jsonl";
    d.save(path);
    EXPECT_EQ(Dataset::load(path), d);
    std::filesystem::remove(path);
}

TEST(DatasetFile, Errors) {
    const std::string text = gen_dataset(13, 3).to_jsonl();
    std::string bad = text;
    bad.replace(bad.find("\"version\":1"), 11, "\"version\":7");
    EXPECT_THROW(Dataset::from_jsonl(bad), CompatibilityError);
    EXPECT_THROW(Dataset::from_jsonl("{not json"), FormatError);
    EXPECT_THROW(Dataset::from_jsonl(text.substr(0, text.size() / 2)), FormatError);
}
