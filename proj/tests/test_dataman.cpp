#include "vptk/dataman.hpp"

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

namespace vptk {
namespace {

namespace fs = std::filesystem;

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

class DatamanFiles : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("vptk_dataman_" + std::string(::testing::UnitTest::GetInstance()
                                                  ->current_test_info()
                                                  ->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path file(const std::string& name) const { return dir_ / name; }

    fs::path dir_;
};

TEST(Utf8Length, CountsScalarValuesNotBytes) {
    EXPECT_EQ(utf8_length(""), 0u);
    EXPECT_EQ(utf8_length("abc"), 3u);
    EXPECT_EQ(utf8_length("∠A"), 2u);
    EXPECT_EQ(utf8_length("πθ√"), 3u);
    EXPECT_EQ(utf8_length("a\xF0\x9F\x98\x80z"), 3u);
}

TEST_F(DatamanFiles, ParsesMinimalManifest) {
    write_text(file("m.jsonl"),
               R"({"id":"g1","image":"g1.ppm","question":"∠A?","answer":"30"})"
               "\n");
    const auto samples = read_manifest(file("m.jsonl"));
    ASSERT_EQ(samples.size(), 1u);
    EXPECT_EQ(samples[0].id, "g1");
    EXPECT_EQ(samples[0].image_path, "g1.ppm");
    EXPECT_EQ(samples[0].question, "∠A?");
    EXPECT_EQ(samples[0].answer, "30");
    EXPECT_FALSE(samples[0].category.has_value());
}

TEST_F(DatamanFiles, PreservesOrderAndCategory) {
    write_text(
        file("m.jsonl"),
        R"({"id":"b","image":"b.ppm","question":"q","answer":"1","category":"counting"})"
        "\n"
        R"({"id":"a","image":"a.ppm","question":"q","answer":"2"})"
        "\n");
    const auto samples = read_manifest(file("m.jsonl"));
    ASSERT_EQ(samples.size(), 2u);
    EXPECT_EQ(samples[0].id, "b");
    EXPECT_EQ(samples[0].category, "counting");
    EXPECT_EQ(samples[1].id, "a");
}

TEST_F(DatamanFiles, EmptyManifestGivesEmptyList) {
    write_text(file("m.jsonl"), "");
    EXPECT_TRUE(read_manifest(file("m.jsonl")).empty());
}

TEST_F(DatamanFiles, RejectsDuplicateIdWithLineNumber) {
    write_text(file("m.jsonl"),
               R"({"id":"g1","image":"a.ppm","question":"q","answer":"1"})"
               "\n"
               R"({"id":"g1","image":"b.ppm","question":"q","answer":"2"})"
               "\n");
    try {
        read_manifest(file("m.jsonl"));
        FAIL() << "expected an exception";
    } catch (const std::runtime_error& e) {
        EXPECT_STREQ(e.what(), "duplicate id at line 2");
    }
}

TEST_F(DatamanFiles, RejectsMalformedJsonWithLineNumber) {
    write_text(file("m.jsonl"),
               R"({"id":"g1","image":"a.ppm","question":"q","answer":"1"})"
               "\n{not json\n");
    try {
        read_manifest(file("m.jsonl"));
        FAIL() << "expected an exception";
    } catch (const std::runtime_error& e) {
        EXPECT_STREQ(e.what(), "malformed JSON at line 2");
    }
}

TEST_F(DatamanFiles, RejectsMissingKeyWithLineNumber) {
    write_text(file("m.jsonl"), R"({"id":"g1","image":"a.ppm","question":"q"})"
                                "\n");
    try {
        read_manifest(file("m.jsonl"));
        FAIL() << "expected an exception";
    } catch (const std::runtime_error& e) {
        EXPECT_STREQ(e.what(), "missing required key 'answer' at line 1");
    }
}

TEST_F(DatamanFiles, RejectsMissingFile) {
    EXPECT_THROW(read_manifest(file("nope.jsonl")), std::runtime_error);
}

class AugmentFixture : public DatamanFiles {
protected:
    void SetUp() override {
        DatamanFiles::SetUp();
        fs::create_directories(file("images"));
        for (int i = 0; i < 6; ++i) {
            Image img(10 + i, 8);
            SampleRng rng(static_cast<std::uint64_t>(i) + 500);
            for (Rgb& p : img.pixels)
                p = Rgb{static_cast<std::uint8_t>(rng.next_below(256)),
                        static_cast<std::uint8_t>(rng.next_below(256)),
                        static_cast<std::uint8_t>(rng.next_below(256))};
            const std::string name = "img" + std::to_string(i) + ".ppm";
            save_image(img, file("images") / name);
            Sample s;
            s.id = "s" + std::to_string(i);
            s.image_path = name;
            s.question = "q" + std::to_string(i);
            s.answer = std::to_string(i);
            if (i % 2 == 0) s.category = "counting";
            samples_.push_back(s);
        }
    }

    std::vector<Sample> samples_;
};

TEST_F(AugmentFixture, DeterministicAcrossRuns) {
    const std::vector<PerturbKind> ops(kPreservingKinds.begin(), kPreservingKinds.end());
    const auto r1 = augment_dataset(samples_, file("images"), file("out1"), 99, ops);
    const auto r2 = augment_dataset(samples_, file("images"), file("out2"), 99, ops);
    EXPECT_EQ(r1.manifest_bytes, r2.manifest_bytes);
    EXPECT_EQ(read_bytes(r1.manifest_path), r1.manifest_bytes);
    for (const auto& rec : r1.records)
        EXPECT_EQ(read_bytes(file("out1") / rec.sample.image_path),
                  read_bytes(file("out2") / rec.sample.image_path));
}

TEST_F(AugmentFixture, WorkerCountDoesNotChangeBytes) {
    const std::vector<PerturbKind> ops(kPreservingKinds.begin(), kPreservingKinds.end());
    const auto r1 = augment_dataset(samples_, file("images"), file("j1"), 7, ops, 1);
    const auto r4 = augment_dataset(samples_, file("images"), file("j4"), 7, ops, 4);
    EXPECT_EQ(r1.manifest_bytes, r4.manifest_bytes);
    for (const auto& rec : r1.records)
        EXPECT_EQ(read_bytes(file("j1") / rec.sample.image_path),
                  read_bytes(file("j4") / rec.sample.image_path));
}

TEST_F(AugmentFixture, RecordsCarryOriginalFieldsAndNewPath) {
    const auto r = augment_dataset(samples_, file("images"), file("out"), 3,
                                   {PerturbKind::RandomRotation});
    ASSERT_EQ(r.records.size(), samples_.size());
    for (std::size_t i = 0; i < samples_.size(); ++i) {
        EXPECT_EQ(r.records[i].sample.id, samples_[i].id);
        EXPECT_EQ(r.records[i].sample.image_path, samples_[i].id + ".vp.ppm");
        EXPECT_EQ(r.records[i].sample.question, samples_[i].question);
        EXPECT_EQ(r.records[i].sample.answer, samples_[i].answer);
        EXPECT_EQ(r.records[i].sample.category, samples_[i].category);
        EXPECT_TRUE(fs::exists(file("out") / r.records[i].sample.image_path));
    }
    EXPECT_EQ(r.counts_per_kind.at("RandomRotation"), samples_.size());
}

TEST_F(AugmentFixture, SingletonMixupUsesPoolWithoutSelf) {
    const auto r = augment_dataset(samples_, file("images"), file("out"), 11,
                                   {PerturbKind::MixupDominant});
    for (const auto& rec : r.records) {
        EXPECT_EQ(rec.perturb.kind, PerturbKind::MixupDominant);
        ASSERT_TRUE(rec.perturb.lambda.has_value());
        EXPECT_GE(*rec.perturb.lambda, 0.8);
        EXPECT_LE(*rec.perturb.lambda, 0.95);
        ASSERT_TRUE(rec.perturb.distractor_id.has_value());
        EXPECT_NE(*rec.perturb.distractor_id, rec.sample.id);
    }
}

TEST_F(AugmentFixture, AugmentedManifestRoundTrips) {
    const std::vector<PerturbKind> ops(kPreservingKinds.begin(), kPreservingKinds.end());
    const auto r = augment_dataset(samples_, file("images"), file("out"), 21, ops);
    const auto back = read_augmented_manifest(r.manifest_path);
    ASSERT_EQ(back.size(), r.records.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].sample.id, r.records[i].sample.id);
        EXPECT_EQ(augmented_record_line(back[i]), augmented_record_line(r.records[i]));
    }
}

TEST_F(AugmentFixture, ReportsFailingSampleById) {
    samples_[2].image_path = "missing.ppm";
    try {
        augment_dataset(samples_, file("images"), file("out"), 1,
                        {PerturbKind::RandomRotation});
        FAIL() << "expected an exception";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("sample 's2'"), std::string::npos);
    }
}

PerturbRecord dummy_record() {
    PerturbRecord rec;
    rec.kind = PerturbKind::RandomRotation;
    rec.angle_deg = 5.0;
    rec.seed = 1;
    return rec;
}

std::vector<AugmentedRecord> one_record(const std::string& id) {
    AugmentedRecord r;
    r.sample.id = id;
    r.sample.image_path = id + ".vp.ppm";
    r.sample.question = "q";
    r.sample.answer = "a";
    r.perturb = dummy_record();
    return {r};
}

class FixedOracle final : public ResponseOracle {
public:
    explicit FixedOracle(std::vector<ResponseCandidate> cs) : cs_(std::move(cs)) {}
    std::optional<std::vector<ResponseCandidate>> responses_for(
        const std::string& id) const override {
        if (id == "absent") return std::nullopt;
        return cs_;
    }

private:
    std::vector<ResponseCandidate> cs_;
};

TEST(BuildSft, PicksLongestCorrect) {
    FixedOracle oracle({{std::string(80, 'a'), true},
                        {std::string(120, 'b'), true},
                        {std::string(200, 'c'), false}});
    const auto [examples, summary] = build_sft(one_record("s"), oracle);
    ASSERT_EQ(examples.size(), 1u);
    EXPECT_EQ(examples[0].positive, std::string(120, 'b'));
    EXPECT_EQ(summary.emitted, 1u);
    EXPECT_EQ(summary.skipped_no_correct, 0u);
}

TEST(BuildSft, TieGoesToSmallestIndex) {
    FixedOracle oracle({{std::string(50, 'x'), true}, {std::string(50, 'y'), true}});
    const auto [examples, summary] = build_sft(one_record("s"), oracle);
    ASSERT_EQ(examples.size(), 1u);
    EXPECT_EQ(examples[0].positive, std::string(50, 'x'));
}

TEST(BuildSft, LengthIsMeasuredInScalarValues) {
    // Three scalar values beat four one-byte letters only if length were
    // bytes; the scalar measure picks the four-letter text.
    FixedOracle oracle({{"∠∠∠", true}, {"abcd", true}});
    const auto [examples, summary] = build_sft(one_record("s"), oracle);
    ASSERT_EQ(examples.size(), 1u);
    EXPECT_EQ(examples[0].positive, "abcd");
}

TEST(BuildSft, SkipsSamplesWithoutCorrectResponse) {
    FixedOracle oracle({{"wrong", false}, {"also wrong", false}});
    const auto [examples, summary] = build_sft(one_record("s"), oracle);
    EXPECT_TRUE(examples.empty());
    EXPECT_EQ(summary.skipped_no_correct, 1u);
    EXPECT_EQ(summary.emitted, 0u);
}

TEST(BuildSft, CountsOracleFailures) {
    FixedOracle oracle({{"ok", true}});
    const auto [examples, summary] = build_sft(one_record("absent"), oracle);
    EXPECT_TRUE(examples.empty());
    EXPECT_EQ(summary.oracle_failures, 1u);
}

TEST(BuildDpo, PicksLongestCorrectAndShortestIncorrect) {
    FixedOracle oracle({{std::string(120, 'a'), true},
                        {std::string(80, 'b'), true},
                        {std::string(60, 'c'), false},
                        {std::string(200, 'd'), false}});
    const auto [examples, summary] = build_dpo(one_record("s"), oracle);
    ASSERT_EQ(examples.size(), 1u);
    EXPECT_EQ(examples[0].chosen, std::string(120, 'a'));
    EXPECT_EQ(examples[0].rejected, std::string(60, 'c'));
}

TEST(BuildDpo, SkipsWithoutIncorrectSide) {
    FixedOracle oracle({{"right", true}});
    const auto [examples, summary] = build_dpo(one_record("s"), oracle);
    EXPECT_TRUE(examples.empty());
    EXPECT_EQ(summary.skipped_no_incorrect, 1u);
}

TEST(BuildDpo, MinimalPairEmitted) {
    FixedOracle oracle({{"yes", true}, {"no", false}});
    const auto [examples, summary] = build_dpo(one_record("s"), oracle);
    ASSERT_EQ(examples.size(), 1u);
    EXPECT_EQ(examples[0].chosen, "yes");
    EXPECT_EQ(examples[0].rejected, "no");
    EXPECT_EQ(summary.emitted, 1u);
}

TEST(BuildDpo, NeverEmitsMoreThanSft) {
    std::vector<AugmentedRecord> records;
    for (int i = 0; i < 4; ++i) {
        auto r = one_record("s" + std::to_string(i));
        records.push_back(r[0]);
    }
    FixedOracle oracle({{"right", true}});
    const auto sft = build_sft(records, oracle);
    const auto dpo = build_dpo(records, oracle);
    EXPECT_LE(dpo.first.size(), sft.first.size());
    EXPECT_LE(sft.first.size(), records.size());
}

TEST_F(DatamanFiles, ScriptedOracleReadsResponsesFile) {
    write_text(file("o.jsonl"),
               R"({"sample_id":"s1","responses":[{"text":"a","correct":true},{"text":"bb","correct":false}]})"
               "\n");
    ScriptedOracle oracle(file("o.jsonl"));
    const auto rs = oracle.responses_for("s1");
    ASSERT_TRUE(rs.has_value());
    ASSERT_EQ(rs->size(), 2u);
    EXPECT_EQ((*rs)[0].text, "a");
    EXPECT_TRUE((*rs)[0].correct);
    EXPECT_EQ((*rs)[1].length, 2u);
    EXPECT_FALSE(oracle.responses_for("s2").has_value());
}

TEST_F(DatamanFiles, ScriptedOracleRejectsMalformedResponses) {
    write_text(file("o.jsonl"), R"({"sample_id":"s1","responses":[{"text":"a"}]})"
                                "\n");
    EXPECT_THROW(ScriptedOracle{file("o.jsonl")}, std::runtime_error);
}

TEST(ExampleLines, FixedKeyOrder) {
    SftExample e{"s1", dummy_record(), "pos"};
    EXPECT_EQ(sft_example_line(e).find(R"({"sample_id":"s1","perturbation":)"), 0u);
    PreferenceExample p{"s1", dummy_record(), "good", "bad"};
    const std::string line = preference_example_line(p);
    EXPECT_EQ(line.find(R"({"sample_id":"s1","perturbation":)"), 0u);
    EXPECT_NE(line.find(R"("chosen":"good","rejected":"bad")"), std::string::npos);
}

} // namespace
} // namespace vptk
