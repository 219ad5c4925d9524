#pragma once

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "vptk/dataman.hpp"

namespace vptk {

/// Content of the last "\boxed{...}" marker, brace-balanced; nullopt if
/// the marker is absent or its braces never close.
inline std::optional<std::string> extract_boxed(std::string_view text) {
    const std::string_view marker = "\\boxed{";
    const std::size_t pos = text.rfind(marker);
    if (pos == std::string_view::npos) return std::nullopt;
    std::size_t depth = 1;
    const std::size_t start = pos + marker.size();
    for (std::size_t i = start; i < text.size(); ++i) {
        if (text[i] == '{') ++depth;
        else if (text[i] == '}' && --depth == 0)
            return std::string(text.substr(start, i - start));
    }
    return std::nullopt;
}

namespace detail {

inline std::string normalize_answer(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out += ' ';
            pending_space = false;
        }
        out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (!out.empty() && out.back() == '.') out.pop_back();
    std::erase(out, '$');
    return out;
}

inline std::optional<double> parse_decimal(const std::string& s) {
    if (s.empty()) return std::nullopt;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size()) return std::nullopt;
    return v;
}

} // namespace detail

/// Rule-based equivalence: normalized strings compare numerically when
/// both parse as decimals (|a-b| <= 1e-6*max(1,|b|)), else exactly.
/// No symbolic evaluation: "1/2" does not match "0.5".
inline bool compare_answers(std::string_view predicted, std::string_view gold) {
    const std::string p = detail::normalize_answer(predicted);
    const std::string g = detail::normalize_answer(gold);
    const auto pv = detail::parse_decimal(p);
    const auto gv = detail::parse_decimal(g);
    if (pv && gv) return std::abs(*pv - *gv) <= 1e-6 * std::max(1.0, std::abs(*gv));
    return p == g;
}

/// Answer adjudication seam. The default is compare_answers; an external
/// judge can be slotted in via a client speaking line-delimited JSON
/// {"predicted":..., "gold":...} -> {"equivalent": bool}.
class AnswerJudge {
public:
    virtual ~AnswerJudge() = default;
    virtual bool equivalent(std::string_view predicted, std::string_view gold) const = 0;
};

class RuleBasedJudge final : public AnswerJudge {
public:
    bool equivalent(std::string_view predicted, std::string_view gold) const override {
        return compare_answers(predicted, gold);
    }
};

struct Prediction {
    std::string id;
    std::string output;
};

struct ScoredSample {
    std::string id;
    std::string predicted;
    std::string gold;
    bool correct = false;
    std::optional<std::string> category;
};

struct Tally {
    long correct = 0;
    long total = 0;

    double accuracy() const {
        return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    }
};

struct ScoredRun {
    std::vector<ScoredSample> samples;
    std::map<std::string, Tally> by_category;
    Tally overall;
};

/// JSON-lines predictions: {"id":..., "output": full model text}.
inline std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
    std::vector<Prediction> out;
    detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t lineno) {
        out.push_back({detail::require_string(j, "id", lineno),
                       detail::require_string(j, "output", lineno)});
    });
    return out;
}

/// Extraction plus comparison over a prediction set. A missing box
/// scores as incorrect; a prediction id absent from the manifest is an
/// error. An empty prediction list is an error unless allow_partial.
inline ScoredRun score_run(const std::vector<Prediction>& predictions,
                           const std::vector<Sample>& manifest, bool allow_partial = false,
                           const AnswerJudge& judge = RuleBasedJudge{}) {
    if (predictions.empty() && !allow_partial)
        throw std::invalid_argument("no predictions to score (pass --allow-partial to accept)");

    std::map<std::string, const Sample*> gold;
    for (const Sample& s : manifest) gold.emplace(s.id, &s);

    ScoredRun run;
    for (const Prediction& p : predictions) {
        const auto it = gold.find(p.id);
        if (it == gold.end())
            throw std::invalid_argument("unknown prediction id '" + p.id + "'");
        const Sample& sample = *it->second;

        ScoredSample scored;
        scored.id = p.id;
        scored.gold = sample.answer;
        scored.category = sample.category;
        if (const auto boxed = extract_boxed(p.output)) {
            scored.predicted = *boxed;
            scored.correct = judge.equivalent(*boxed, sample.answer);
        }

        run.overall.total += 1;
        run.overall.correct += scored.correct ? 1 : 0;
        if (scored.category) {
            Tally& t = run.by_category[*scored.category];
            t.total += 1;
            t.correct += scored.correct ? 1 : 0;
        }
        run.samples.push_back(std::move(scored));
    }
    return run;
}

inline nlohmann::ordered_json score_report_json(const ScoredRun& run) {
    nlohmann::ordered_json j;
    j["overall"] = {{"correct", run.overall.correct},
                    {"total", run.overall.total},
                    {"accuracy", run.overall.accuracy()}};
    j["by_category"] = nlohmann::ordered_json::object();
    for (const auto& [name, tally] : run.by_category)
        j["by_category"][name] = {{"correct", tally.correct},
                                  {"total", tally.total},
                                  {"accuracy", tally.accuracy()}};
    return j;
}

namespace detail {

// Half away from zero at one decimal. The epsilon keeps decimal data
// faithful: 52.15 is stored as 52.1499..., which plain rounding would
// pull down to 52.1.
inline double round1(double x) {
    const double scaled = x * 10.0;
    return std::copysign(std::floor(std::abs(scaled) + 0.5 + 1e-7), scaled) / 10.0;
}

} // namespace detail

/// Arithmetic mean, reported at one-decimal precision.
inline double aggregate_average(std::span<const double> scores) {
    if (scores.empty()) throw std::invalid_argument("aggregate_average: empty input");
    double sum = 0.0;
    for (double s : scores) sum += s;
    return detail::round1(sum / static_cast<double>(scores.size()));
}

/// 100*(after-before)/before, reported at one-decimal precision.
inline double relative_change(double before, double after) {
    if (before <= 0.0) throw std::invalid_argument("relative_change: before must be > 0");
    return detail::round1(100.0 * (after - before) / before);
}

/// exp of the Shannon entropy of the normalized singular-value
/// distribution, over singular values above a 1e-9 absolute cutoff.
inline double effective_rank(const Eigen::MatrixXd& m) {
    if (m.rows() < 1 || m.cols() < 1)
        throw std::invalid_argument("effective_rank: empty matrix");
    if (m.rows() > 512 || m.cols() > 512)
        throw std::invalid_argument("effective_rank: dimensions exceed 512");

    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto& sigma = svd.singularValues();
    double sum = 0.0;
    for (Eigen::Index i = 0; i < sigma.size(); ++i)
        if (sigma[i] > 1e-9) sum += sigma[i];
    if (sum == 0.0) throw std::invalid_argument("effective_rank: zero matrix");

    double entropy = 0.0;
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
        if (sigma[i] <= 1e-9) continue;
        const double p = sigma[i] / sum;
        entropy -= p * std::log(p);
    }
    return std::exp(entropy);
}

inline double diff_erank(const Eigen::MatrixXd& before, const Eigen::MatrixXd& after) {
    return effective_rank(after) - effective_rank(before);
}

/// CSV of reals, one matrix row per line.
inline Eigen::MatrixXd read_csv_matrix(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open matrix file: " + path);

    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        std::size_t begin = 0;
        while (begin <= line.size()) {
            std::size_t end = line.find(',', begin);
            if (end == std::string::npos) end = line.size();
            std::string cell = line.substr(begin, end - begin);
            const std::size_t a = cell.find_first_not_of(" \t");
            if (a == std::string::npos)
                throw std::runtime_error("empty cell at line " + std::to_string(lineno));
            cell = cell.substr(a, cell.find_last_not_of(" \t") - a + 1);
            const auto v = detail::parse_decimal(cell);
            if (!v)
                throw std::runtime_error("non-numeric cell '" + cell + "' at line " +
                                         std::to_string(lineno));
            row.push_back(*v);
            begin = end + 1;
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw std::runtime_error("ragged row at line " + std::to_string(lineno));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error("matrix file is empty: " + path);

    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    return m;
}

} // namespace vptk
