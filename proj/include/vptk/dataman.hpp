#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "vptk/perturb.hpp"
#include "vptk/raster.hpp"

namespace vptk {

/// One dataset record: an image-question pair with its gold answer.
struct Sample {
    std::string id;
    std::string image_path; // relative to an images root
    std::string question;
    std::string answer;
    std::optional<std::string> category;
};

/// A Sample together with the perturbation applied to it.
struct AugmentedRecord {
    Sample sample; // image_path points at the perturbed image
    PerturbRecord perturb;
};

/// Count of Unicode scalar values in a UTF-8 string. This is the length
/// measure used for response selection.
inline std::size_t utf8_length(const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++n;
    return n;
}

struct ResponseCandidate {
    std::string text;
    bool correct = false;
    std::size_t length = 0;

    ResponseCandidate() = default;
    ResponseCandidate(std::string t, bool ok)
        : text(std::move(t)), correct(ok), length(utf8_length(text)) {}
};

struct SftExample {
    std::string sample_id;
    PerturbRecord perturb;
    std::string positive;
};

struct PreferenceExample {
    std::string sample_id;
    PerturbRecord perturb;
    std::string chosen;
    std::string rejected;
};

// ---------------------------------------------------------------------
// Manifests (JSON lines, UTF-8, LF)
// ---------------------------------------------------------------------

namespace detail {

inline nlohmann::json parse_manifest_line(const std::string& line, std::size_t lineno) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw std::runtime_error("malformed JSON at line " + std::to_string(lineno));
    return j;
}

inline std::string require_string(const nlohmann::json& j, const char* key,
                                  std::size_t lineno) {
    if (!j.contains(key))
        throw std::runtime_error(std::string("missing required key '") + key +
                                 "' at line " + std::to_string(lineno));
    if (!j.at(key).is_string())
        throw std::runtime_error(std::string("key '") + key +
                                 "' must be a string at line " + std::to_string(lineno));
    return j.at(key).get<std::string>();
}

inline Sample sample_from_json(const nlohmann::json& j, std::size_t lineno) {
    Sample s;
    s.id = require_string(j, "id", lineno);
    s.image_path = require_string(j, "image", lineno);
    s.question = require_string(j, "question", lineno);
    s.answer = require_string(j, "answer", lineno);
    if (j.contains("category")) s.category = j.at("category").get<std::string>();
    return s;
}

template <typename PerLine>
void for_each_jsonl(const std::filesystem::path& path, PerLine&& fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        fn(parse_manifest_line(line, lineno), lineno);
    }
}

} // namespace detail

/// Order-preserving JSON-lines parse; duplicate ids are rejected with the
/// offending line number.
inline std::vector<Sample> read_manifest(const std::filesystem::path& path) {
    std::vector<Sample> samples;
    std::set<std::string> seen;
    detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t lineno) {
        Sample s = detail::sample_from_json(j, lineno);
        if (!seen.insert(s.id).second)
            throw std::runtime_error("duplicate id at line " + std::to_string(lineno));
        samples.push_back(std::move(s));
    });
    return samples;
}

inline std::vector<AugmentedRecord> read_augmented_manifest(
    const std::filesystem::path& path) {
    std::vector<AugmentedRecord> records;
    std::set<std::string> seen;
    detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t lineno) {
        AugmentedRecord r;
        r.sample = detail::sample_from_json(j, lineno);
        if (!j.contains("perturbation"))
            throw std::runtime_error("missing required key 'perturbation' at line " +
                                     std::to_string(lineno));
        r.perturb = PerturbRecord::from_json(j.at("perturbation"));
        if (!seen.insert(r.sample.id).second)
            throw std::runtime_error("duplicate id at line " + std::to_string(lineno));
        records.push_back(std::move(r));
    });
    return records;
}

/// Augmented-manifest line with the fixed key order
/// id, image, question, answer, category?, perturbation.
inline std::string augmented_record_line(const AugmentedRecord& r) {
    nlohmann::ordered_json j;
    j["id"] = r.sample.id;
    j["image"] = r.sample.image_path;
    j["question"] = r.sample.question;
    j["answer"] = r.sample.answer;
    if (r.sample.category) j["category"] = *r.sample.category;
    j["perturbation"] = r.perturb.to_json();
    return j.dump();
}

// ---------------------------------------------------------------------
// Augmentation pipeline
// ---------------------------------------------------------------------

struct AugmentResult {
    std::vector<AugmentedRecord> records; // input order
    std::string manifest_bytes;           // exact bytes written to the manifest
    std::filesystem::path manifest_path;
    std::map<std::string, std::size_t> counts_per_kind;
};

/// Perturbs every sample with apply_random and writes "<id>.vp.ppm" files
/// plus an augmented manifest under out_root. Output bytes depend only on
/// (samples, images, global_seed, op_set); `jobs` threads may split the
/// work but never change the result.
inline AugmentResult augment_dataset(const std::vector<Sample>& samples,
                                     const std::filesystem::path& images_root,
                                     const std::filesystem::path& out_root,
                                     std::uint64_t global_seed,
                                     const std::vector<PerturbKind>& op_set,
                                     unsigned jobs = 1) {
    namespace fs = std::filesystem;
    fs::create_directories(out_root);

    std::vector<Image> originals(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        try {
            originals[i] = load_image(images_root / samples[i].image_path);
        } catch (const std::exception& e) {
            throw std::runtime_error("sample '" + samples[i].id + "': " + e.what());
        }
    }

    std::vector<AugmentedRecord> records(samples.size());
    std::vector<std::string> errors(samples.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= samples.size()) return;
            try {
                DistractorPool pool;
                pool.reserve(samples.size() > 0 ? samples.size() - 1 : 0);
                for (std::size_t k = 0; k < samples.size(); ++k)
                    if (k != i) pool.push_back({samples[k].id, &originals[k]});

                auto [img, rec] =
                    apply_random(originals[i], samples[i].id, pool, global_seed, op_set);
                const std::string rel = samples[i].id + ".vp.ppm";
                save_image(img, out_root / rel);

                AugmentedRecord out;
                out.sample = samples[i];
                out.sample.image_path = rel;
                out.perturb = rec;
                records[i] = std::move(out);
            } catch (const std::exception& e) {
                errors[i] = std::string("sample '") + samples[i].id + "': " + e.what();
            }
        }
    };

    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (unsigned t = 0; t < jobs; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }

    std::string failures;
    for (const std::string& e : errors)
        if (!e.empty()) failures += e + "\n";
    if (!failures.empty()) throw std::runtime_error(failures);

    AugmentResult result;
    result.records = std::move(records);
    for (const auto& r : result.records) {
        result.manifest_bytes += augmented_record_line(r);
        result.manifest_bytes += '\n';
        ++result.counts_per_kind[perturb_kind_name(r.perturb.kind)];
    }
    result.manifest_path = out_root / "augmented.jsonl";
    std::ofstream out(result.manifest_path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest: " +
                                       result.manifest_path.string());
    out.write(result.manifest_bytes.data(),
              static_cast<std::streamsize>(result.manifest_bytes.size()));
    return result;
}

// ---------------------------------------------------------------------
// Rejection-sampling dataset construction
// ---------------------------------------------------------------------

/// Supplies sampled responses per sample id. The shipped implementation
/// reads them from a file; a live generation client can stand behind the
/// same interface.
class ResponseOracle {
public:
    virtual ~ResponseOracle() = default;
    /// nullopt = the oracle has nothing for this sample (an oracle
    /// failure; the sample is skipped and counted).
    virtual std::optional<std::vector<ResponseCandidate>> responses_for(
        const std::string& sample_id) const = 0;
};

/// JSON-lines file of {sample_id, responses: [{text, correct}]}.
class ScriptedOracle final : public ResponseOracle {
public:
    explicit ScriptedOracle(const std::filesystem::path& path) {
        detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t lineno) {
            const std::string id = detail::require_string(j, "sample_id", lineno);
            if (!j.contains("responses") || !j.at("responses").is_array())
                throw std::runtime_error("missing 'responses' array at line " +
                                         std::to_string(lineno));
            std::vector<ResponseCandidate> cs;
            for (const auto& rj : j.at("responses")) {
                if (!rj.contains("text") || !rj.contains("correct"))
                    throw std::runtime_error(
                        "response needs 'text' and 'correct' at line " +
                        std::to_string(lineno));
                cs.emplace_back(rj.at("text").get<std::string>(),
                                rj.at("correct").get<bool>());
            }
            by_id_[id] = std::move(cs);
        });
    }

    std::optional<std::vector<ResponseCandidate>> responses_for(
        const std::string& sample_id) const override {
        auto it = by_id_.find(sample_id);
        if (it == by_id_.end()) return std::nullopt;
        return it->second;
    }

private:
    std::map<std::string, std::vector<ResponseCandidate>> by_id_;
};

struct BuildSummary {
    std::size_t emitted = 0;
    std::size_t skipped_no_correct = 0;
    std::size_t skipped_no_incorrect = 0;
    std::size_t oracle_failures = 0;
};

namespace detail {

// Longest correct candidate; ties go to the smallest index.
inline std::optional<std::size_t> longest_correct(
    const std::vector<ResponseCandidate>& cs) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < cs.size(); ++i) {
        if (!cs[i].correct) continue;
        if (!best || cs[i].length > cs[*best].length) best = i;
    }
    return best;
}

// Shortest incorrect candidate; ties go to the smallest index.
inline std::optional<std::size_t> shortest_incorrect(
    const std::vector<ResponseCandidate>& cs) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < cs.size(); ++i) {
        if (cs[i].correct) continue;
        if (!best || cs[i].length < cs[*best].length) best = i;
    }
    return best;
}

} // namespace detail

/// Per sample: keep the longest correct response. Samples without one
/// are skipped and counted.
inline std::pair<std::vector<SftExample>, BuildSummary> build_sft(
    const std::vector<AugmentedRecord>& records, const ResponseOracle& oracle) {
    std::vector<SftExample> out;
    BuildSummary summary;
    for (const auto& rec : records) {
        const auto responses = oracle.responses_for(rec.sample.id);
        if (!responses) {
            ++summary.oracle_failures;
            continue;
        }
        const auto pos = detail::longest_correct(*responses);
        if (!pos) {
            ++summary.skipped_no_correct;
            continue;
        }
        out.push_back({rec.sample.id, rec.perturb, (*responses)[*pos].text});
        ++summary.emitted;
    }
    return {std::move(out), summary};
}

/// Per sample: chosen = longest correct, rejected = shortest incorrect.
/// Samples lacking either side are skipped and counted.
inline std::pair<std::vector<PreferenceExample>, BuildSummary> build_dpo(
    const std::vector<AugmentedRecord>& records, const ResponseOracle& oracle) {
    std::vector<PreferenceExample> out;
    BuildSummary summary;
    for (const auto& rec : records) {
        const auto responses = oracle.responses_for(rec.sample.id);
        if (!responses) {
            ++summary.oracle_failures;
            continue;
        }
        const auto pos = detail::longest_correct(*responses);
        const auto neg = detail::shortest_incorrect(*responses);
        if (!pos) ++summary.skipped_no_correct;
        if (!neg) ++summary.skipped_no_incorrect;
        if (!pos || !neg) continue;
        out.push_back({rec.sample.id, rec.perturb, (*responses)[*pos].text,
                       (*responses)[*neg].text});
        ++summary.emitted;
    }
    return {std::move(out), summary};
}

inline std::string sft_example_line(const SftExample& e) {
    nlohmann::ordered_json j;
    j["sample_id"] = e.sample_id;
    j["perturbation"] = e.perturb.to_json();
    j["positive"] = e.positive;
    return j.dump();
}

inline std::string preference_example_line(const PreferenceExample& e) {
    nlohmann::ordered_json j;
    j["sample_id"] = e.sample_id;
    j["perturbation"] = e.perturb.to_json();
    j["chosen"] = e.chosen;
    j["rejected"] = e.rejected;
    return j.dump();
}

} // namespace vptk
