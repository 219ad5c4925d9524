#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vptk/dataman.hpp"
#include "vptk/optim.hpp"
#include "vptk/perturb.hpp"
#include "vptk/raster.hpp"
#include "vptk/rng.hpp"

namespace vptk::toy {

constexpr int kCanvas = 64;
constexpr int kFeatureDim = 64;
constexpr int kVocab = 16;
constexpr int kMinSquares = 1;
constexpr int kMaxSquares = 8;
constexpr int kMinSide = 6;
constexpr int kMaxSide = 12;

inline const std::string kQuestion = "How many squares?";

struct SquareSpec {
    int x = 0;
    int y = 0;
    int side = 0;
    Rgb color;
};

/// A counting task: k non-overlapping filled squares on a white 64x64
/// canvas; the answer token is k.
struct ToyTask {
    Image image;
    std::string question = kQuestion;
    int answer_token = 0;
    std::vector<SquareSpec> squares;
};

inline std::string task_id(std::size_t index) {
    return "task-" + std::to_string(index);
}

namespace detail {

inline bool squares_overlap(const SquareSpec& a, const SquareSpec& b) {
    return a.x < b.x + b.side && b.x < a.x + a.side &&
           a.y < b.y + b.side && b.y < a.y + a.side;
}

} // namespace detail

/// Geometry and rendering consistency: count matches the answer token,
/// squares in bounds and pairwise disjoint, square pixels non-white and
/// everything else white.
inline bool validate_task(const ToyTask& task) {
    if (static_cast<int>(task.squares.size()) != task.answer_token) return false;
    if (task.answer_token < kMinSquares || task.answer_token > kMaxSquares) return false;
    for (std::size_t i = 0; i < task.squares.size(); ++i) {
        const SquareSpec& s = task.squares[i];
        if (s.side < kMinSide || s.side > kMaxSide) return false;
        if (s.x < 0 || s.y < 0 || s.x + s.side > kCanvas || s.y + s.side > kCanvas)
            return false;
        for (std::size_t j = i + 1; j < task.squares.size(); ++j)
            if (detail::squares_overlap(s, task.squares[j])) return false;
    }
    if (task.image.width != kCanvas || task.image.height != kCanvas) return false;
    const Rgb white{255, 255, 255};
    for (int y = 0; y < kCanvas; ++y)
        for (int x = 0; x < kCanvas; ++x) {
            bool inside = false;
            for (const SquareSpec& s : task.squares)
                if (x >= s.x && x < s.x + s.side && y >= s.y && y < s.y + s.side) {
                    inside = true;
                    break;
                }
            const Rgb& px = task.image.at(x, y);
            if (inside ? px == white : !(px == white)) return false;
        }
    return true;
}

/// Deterministic task generation; task i depends only on (seed, i).
/// Square channels are drawn below 128, so squares stay well away from
/// the white background. A blocked layout is retried wholesale.
inline std::vector<ToyTask> gen_tasks(std::size_t n, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("gen_tasks: n must be >= 1");
    std::vector<ToyTask> tasks;
    tasks.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        SampleRng rng(derive_seed(seed, i));
        const int k = kMinSquares +
                      static_cast<int>(rng.next_below(kMaxSquares - kMinSquares + 1));

        std::vector<SquareSpec> placed;
        for (int round = 0; round < 64 && static_cast<int>(placed.size()) != k; ++round) {
            placed.clear();
            for (int s = 0; s < k; ++s) {
                bool ok = false;
                for (int attempt = 0; attempt < 256 && !ok; ++attempt) {
                    SquareSpec sq;
                    sq.side = kMinSide +
                              static_cast<int>(rng.next_below(kMaxSide - kMinSide + 1));
                    sq.x = static_cast<int>(rng.next_below(kCanvas - sq.side + 1));
                    sq.y = static_cast<int>(rng.next_below(kCanvas - sq.side + 1));
                    ok = true;
                    for (const SquareSpec& other : placed)
                        if (detail::squares_overlap(sq, other)) {
                            ok = false;
                            break;
                        }
                    if (ok) {
                        sq.color = Rgb{static_cast<std::uint8_t>(rng.next_below(128)),
                                       static_cast<std::uint8_t>(rng.next_below(128)),
                                       static_cast<std::uint8_t>(rng.next_below(128))};
                        placed.push_back(sq);
                    }
                }
                if (!ok) break;
            }
        }
        if (static_cast<int>(placed.size()) != k)
            throw std::runtime_error("gen_tasks: square placement failed");

        ToyTask task;
        task.answer_token = k;
        task.squares = placed;
        task.image = Image(kCanvas, kCanvas);
        for (const SquareSpec& sq : placed)
            for (int y = sq.y; y < sq.y + sq.side; ++y)
                for (int x = sq.x; x < sq.x + sq.side; ++x)
                    task.image.at(x, y) = sq.color;
        tasks.push_back(std::move(task));
    }
    return tasks;
}

/// 8x8 block-average grayscale in [0,1]. Block boundaries are
/// floor(b*dim/8), so any image size (perturbed outputs included) maps
/// to exactly 64 features.
inline std::vector<double> featurize(const Image& img) {
    std::vector<double> feat(kFeatureDim, 0.0);
    for (int by = 0; by < 8; ++by) {
        const int y0 = by * img.height / 8;
        const int y1 = (by + 1) * img.height / 8;
        for (int bx = 0; bx < 8; ++bx) {
            const int x0 = bx * img.width / 8;
            const int x1 = (bx + 1) * img.width / 8;
            const long count = static_cast<long>(y1 - y0) * (x1 - x0);
            if (count == 0) continue;
            double sum = 0.0;
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) {
                    const Rgb& px = img.at(x, y);
                    sum += (static_cast<double>(px.r) + px.g + px.b) / 3.0;
                }
            feat[by * 8 + bx] = sum / (static_cast<double>(count) * 255.0);
        }
    }
    return feat;
}

inline double reward(int answer_token, int gold) {
    return answer_token == gold ? 1.0 : 0.0;
}

/// Linear softmax over 16 answer tokens from the 64 block features.
/// The distribution is prefix-independent, so multi-token responses
/// score as independent draws. Parameters are feature-major.
class ToyPolicy final : public Policy {
public:
    ToyPolicy() : w_(static_cast<std::size_t>(kFeatureDim) * kVocab, 0.0) {}

    int vocab_size() const override { return kVocab; }
    std::size_t param_count() const override { return w_.size(); }
    std::vector<double> get_params() const override { return w_; }

    void set_params(std::span<const double> p) override {
        if (p.size() != w_.size())
            throw std::invalid_argument("ToyPolicy: parameter size mismatch");
        w_.assign(p.begin(), p.end());
    }

    std::vector<double> log_probs(std::span<const double> ctx) const {
        if (ctx.size() != kFeatureDim)
            throw std::invalid_argument("ToyPolicy: context size mismatch");
        std::vector<double> logits(kVocab, 0.0);
        for (int f = 0; f < kFeatureDim; ++f) {
            const double x = ctx[static_cast<std::size_t>(f)];
            for (int v = 0; v < kVocab; ++v)
                logits[static_cast<std::size_t>(v)] +=
                    x * w_[static_cast<std::size_t>(f) * kVocab + v];
        }
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double z = 0.0;
        for (double l : logits) z += std::exp(l - mx);
        const double log_z = mx + std::log(z);
        for (double& l : logits) l -= log_z;
        return logits;
    }

    int greedy_token(std::span<const double> ctx) const {
        const auto lp = log_probs(ctx);
        int best = 0;
        for (int v = 1; v < kVocab; ++v)
            if (lp[static_cast<std::size_t>(v)] > lp[static_cast<std::size_t>(best)])
                best = v;
        return best;
    }

    std::vector<double> token_logprobs(std::span<const double> ctx,
                                       std::span<const int> response) const override {
        const auto lp = log_probs(ctx);
        std::vector<double> out(response.size());
        for (std::size_t t = 0; t < response.size(); ++t) {
            const int tok = response[t];
            if (tok < 0 || tok >= kVocab)
                throw std::out_of_range("ToyPolicy: token outside vocabulary");
            out[t] = lp[static_cast<std::size_t>(tok)];
        }
        return out;
    }

    void accumulate_logprob_grad(std::span<const double> ctx, std::span<const int> response,
                                 std::span<const double> weights,
                                 std::span<double> grad) const override {
        if (weights.size() != response.size())
            throw std::invalid_argument("ToyPolicy: weight count mismatch");
        if (grad.size() != w_.size())
            throw std::invalid_argument("ToyPolicy: gradient size mismatch");
        const auto lp = log_probs(ctx);

        // d logp(tok)/d w[f][v] = ctx[f] * (1[v == tok] - p[v]); p is
        // position-independent, so token weights collapse per vocab entry.
        std::vector<double> token_weight(kVocab, 0.0);
        double sum_w = 0.0;
        for (std::size_t t = 0; t < response.size(); ++t) {
            const int tok = response[t];
            if (tok < 0 || tok >= kVocab)
                throw std::out_of_range("ToyPolicy: token outside vocabulary");
            token_weight[static_cast<std::size_t>(tok)] += weights[t];
            sum_w += weights[t];
        }
        for (int v = 0; v < kVocab; ++v) {
            const double coeff = token_weight[static_cast<std::size_t>(v)] -
                                 std::exp(lp[static_cast<std::size_t>(v)]) * sum_w;
            if (coeff == 0.0) continue;
            for (int f = 0; f < kFeatureDim; ++f)
                grad[static_cast<std::size_t>(f) * kVocab + v] +=
                    ctx[static_cast<std::size_t>(f)] * coeff;
        }
    }

    int sample_token(std::span<const double> ctx, std::span<const int>,
                     SampleRng& rng) const override {
        const auto lp = log_probs(ctx);
        const double u = rng.next_unit_real();
        double acc = 0.0;
        for (int v = 0; v < kVocab; ++v) {
            acc += std::exp(lp[static_cast<std::size_t>(v)]);
            if (u < acc) return v;
        }
        return kVocab - 1;
    }

private:
    std::vector<double> w_;
};

struct IterationLog {
    int iteration = 0;
    double mean_reward = 0.0;
    double loss = 0.0;
};

struct GrpoTrainConfig {
    GrpoConfig grpo;
    double learning_rate = 0.1;
    double max_grad_norm = 1.0;
    int batch_size = 16;
};

/// Calibrated GRPO bundle for the counting toy: on the 24-task corpus it
/// lifts mean training reward from chance (1/16) past 0.9 inside 2000
/// iterations on one core.
inline GrpoTrainConfig toy_preset_grpo() {
    GrpoTrainConfig cfg;
    cfg.grpo.group_size = 16;
    cfg.grpo.kl_coeff = 0.01;
    cfg.learning_rate = 1.0;
    cfg.batch_size = 72;
    return cfg;
}

inline constexpr int kToyPresetGrpoIters = 2000;
inline constexpr std::size_t kToyPresetTasks = 24;

namespace detail {

inline DistractorPool pool_excluding(const std::vector<ToyTask>& tasks,
                                     std::size_t self) {
    DistractorPool pool;
    pool.reserve(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i)
        if (i != self) pool.push_back({task_id(i), &tasks[i].image});
    return pool;
}

inline DistractorPool full_pool(const std::vector<ToyTask>& tasks) {
    DistractorPool pool;
    pool.reserve(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i)
        pool.push_back({task_id(i), &tasks[i].image});
    return pool;
}

inline std::size_t task_index_of(const std::string& id) {
    const std::string prefix = "task-";
    if (id.rfind(prefix, 0) != 0)
        throw std::invalid_argument("unknown toy task id '" + id + "'");
    return static_cast<std::size_t>(std::stoull(id.substr(prefix.size())));
}

} // namespace detail

/// Single-token answer text -> vocabulary index.
inline int parse_answer_token(const std::string& text) {
    if (text.empty()) throw std::invalid_argument("empty answer text");
    std::size_t pos = 0;
    const int value = std::stoi(text, &pos);
    if (pos != text.size() || value < 0 || value >= kVocab)
        throw std::invalid_argument("answer text '" + text + "' is not a vocabulary token");
    return value;
}

/// One GRPO iteration: minibatch of tasks, G rollouts each from the
/// frozen iteration snapshot, group-normalized advantages, one clipped
/// SGD step. vp=on re-perturbs the batch images every iteration with the
/// quality-preserving operator set.
inline std::vector<IterationLog> train_grpo(ToyPolicy& policy,
                                            const std::vector<ToyTask>& tasks,
                                            const GrpoTrainConfig& cfg, bool vp, int iters,
                                            std::uint64_t seed) {
    if (tasks.empty()) throw std::invalid_argument("train_grpo: no tasks");
    if (cfg.batch_size < 1) throw std::invalid_argument("train_grpo: batch_size must be >= 1");
    const int g = cfg.grpo.group_size;
    if (g < 2) throw std::invalid_argument("train_grpo: group_size must be >= 2");

    const ToyPolicy reference = policy;
    std::vector<double> grad(policy.param_count(), 0.0);
    std::vector<IterationLog> log;
    log.reserve(static_cast<std::size_t>(std::max(iters, 0)));
    const std::vector<PerturbKind> ops(kPreservingKinds.begin(), kPreservingKinds.end());

    for (int it = 0; it < iters; ++it) {
        const std::uint64_t step = static_cast<std::uint64_t>(it) * 4;
        SampleRng batch_rng(derive_seed(seed, step));
        const std::uint64_t vp_seed = derive_seed(seed, step + 1);
        SampleRng rollout_rng(derive_seed(seed, step + 2));
        const ToyPolicy old = policy;

        double reward_sum = 0.0;
        double loss_sum = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::size_t idx =
                static_cast<std::size_t>(batch_rng.next_below(tasks.size()));
            const ToyTask& task = tasks[idx];

            RolloutGroup group;
            if (vp) {
                const DistractorPool pool = detail::pool_excluding(tasks, idx);
                group.context =
                    featurize(apply_random(task.image, task_id(idx), pool, vp_seed, ops).first);
            } else {
                group.context = featurize(task.image);
            }

            for (int i = 0; i < g; ++i) {
                const int tok = old.sample_token(group.context, {}, rollout_rng);
                group.responses.push_back({tok});
                group.rewards.push_back(reward(tok, task.answer_token));
                reward_sum += group.rewards.back();
            }
            group.advantages = normalize_advantages(group.rewards, cfg.grpo.std_floor);

            if (b == 0) {
                const auto lp = policy.token_logprobs(group.context, group.responses[0]);
                const auto lp_old = old.token_logprobs(group.context, group.responses[0]);
                for (std::size_t t = 0; t < lp.size(); ++t)
                    if (std::abs(std::exp(lp[t] - lp_old[t]) - 1.0) > 1e-9)
                        throw std::logic_error("train_grpo: stale policy snapshot");
            }
            loss_sum += grpo_loss(policy, old, reference, group, cfg.grpo, grad);
        }

        const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
        for (double& gi : grad) gi *= inv_b;
        sgd_step(policy, grad, cfg.learning_rate, cfg.max_grad_norm);
        log.push_back({it, reward_sum * inv_b / static_cast<double>(g), loss_sum * inv_b});
    }
    return log;
}

/// Builds one SFT example per task from its gold answer, with a
/// perturbation record drawn once so vp=on training can replay it.
inline std::vector<SftExample> make_toy_sft_examples(const std::vector<ToyTask>& tasks,
                                                     std::uint64_t seed) {
    const std::vector<PerturbKind> ops(kPreservingKinds.begin(), kPreservingKinds.end());
    std::vector<SftExample> out;
    out.reserve(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const DistractorPool pool = detail::pool_excluding(tasks, i);
        auto [_, rec] = apply_random(tasks[i].image, task_id(i), pool, seed, ops);
        out.push_back({task_id(i), rec, std::to_string(tasks[i].answer_token)});
    }
    return out;
}

/// Chosen = gold answer, rejected = the cyclically next count.
inline std::vector<PreferenceExample>
make_toy_preference_examples(const std::vector<ToyTask>& tasks, std::uint64_t seed) {
    const std::vector<PerturbKind> ops(kPreservingKinds.begin(), kPreservingKinds.end());
    std::vector<PreferenceExample> out;
    out.reserve(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const DistractorPool pool = detail::pool_excluding(tasks, i);
        auto [_, rec] = apply_random(tasks[i].image, task_id(i), pool, seed, ops);
        const int gold = tasks[i].answer_token;
        const int wrong = gold % kMaxSquares + 1;
        out.push_back({task_id(i), rec, std::to_string(gold), std::to_string(wrong)});
    }
    return out;
}

namespace detail {

inline std::vector<double> example_context(const std::vector<ToyTask>& tasks,
                                           const std::string& sample_id,
                                           const PerturbRecord& rec, bool vp) {
    const std::size_t idx = task_index_of(sample_id);
    if (idx >= tasks.size())
        throw std::invalid_argument("unknown toy task id '" + sample_id + "'");
    if (!vp) return featurize(tasks[idx].image);
    const DistractorPool pool = full_pool(tasks);
    return featurize(apply_record(tasks[idx].image, rec, pool));
}

} // namespace detail

/// Full-batch gradient descent; one epoch is one step. Deterministic
/// independently of `seed` (kept for interface parity with the
/// stochastic loops).
inline std::vector<IterationLog> train_sft(ToyPolicy& policy,
                                           const std::vector<SftExample>& examples,
                                           const std::vector<ToyTask>& tasks, bool vp,
                                           double lr, int epochs, std::uint64_t /*seed*/,
                                           double max_grad_norm = 1.0) {
    if (examples.empty()) throw std::invalid_argument("train_sft: no examples");

    std::vector<std::vector<double>> contexts;
    std::vector<Tokens> positives;
    contexts.reserve(examples.size());
    positives.reserve(examples.size());
    for (const SftExample& ex : examples) {
        contexts.push_back(detail::example_context(tasks, ex.sample_id, ex.perturb, vp));
        positives.push_back({parse_answer_token(ex.positive)});
    }

    const double inv_n = 1.0 / static_cast<double>(examples.size());
    std::vector<double> grad(policy.param_count(), 0.0);
    std::vector<IterationLog> log;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double loss_sum = 0.0;
        for (std::size_t e = 0; e < examples.size(); ++e)
            loss_sum += sft_loss(policy, contexts[e], positives[e], grad);
        for (double& gi : grad) gi *= inv_n;
        sgd_step(policy, grad, lr, max_grad_norm);

        int correct = 0;
        for (std::size_t e = 0; e < examples.size(); ++e)
            if (policy.greedy_token(contexts[e]) == positives[e][0]) ++correct;
        log.push_back({epoch, correct * inv_n, loss_sum * inv_n});
    }
    return log;
}

/// Full-batch DPO against a frozen copy of the entry policy.
inline std::vector<IterationLog> train_dpo(ToyPolicy& policy,
                                           const std::vector<PreferenceExample>& examples,
                                           const std::vector<ToyTask>& tasks, bool vp,
                                           const DpoConfig& cfg, double lr, int epochs,
                                           std::uint64_t /*seed*/,
                                           double max_grad_norm = 1.0) {
    if (examples.empty()) throw std::invalid_argument("train_dpo: no examples");

    std::vector<std::vector<double>> contexts;
    std::vector<Tokens> chosen;
    std::vector<Tokens> rejected;
    for (const PreferenceExample& ex : examples) {
        contexts.push_back(detail::example_context(tasks, ex.sample_id, ex.perturb, vp));
        chosen.push_back({parse_answer_token(ex.chosen)});
        rejected.push_back({parse_answer_token(ex.rejected)});
    }

    const ToyPolicy reference = policy;
    const double inv_n = 1.0 / static_cast<double>(examples.size());
    std::vector<double> grad(policy.param_count(), 0.0);
    std::vector<IterationLog> log;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double loss_sum = 0.0;
        for (std::size_t e = 0; e < examples.size(); ++e)
            loss_sum += dpo_loss(policy, reference, contexts[e], chosen[e], rejected[e],
                                 cfg, grad);
        for (double& gi : grad) gi *= inv_n;
        sgd_step(policy, grad, lr, max_grad_norm);

        int correct = 0;
        for (std::size_t e = 0; e < examples.size(); ++e)
            if (policy.greedy_token(contexts[e]) == chosen[e][0]) ++correct;
        log.push_back({epoch, correct * inv_n, loss_sum * inv_n});
    }
    return log;
}

/// Greedy-decoding accuracy; vp_eval=on perturbs the evaluation images
/// with the quality-preserving set under `seed`.
inline double evaluate_policy(const ToyPolicy& policy, const std::vector<ToyTask>& tasks,
                              bool vp_eval, std::uint64_t seed) {
    if (tasks.empty()) throw std::invalid_argument("evaluate_policy: no tasks");
    const std::vector<PerturbKind> ops(kPreservingKinds.begin(), kPreservingKinds.end());
    int correct = 0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        std::vector<double> ctx;
        if (vp_eval) {
            const DistractorPool pool = detail::pool_excluding(tasks, i);
            ctx = featurize(apply_random(tasks[i].image, task_id(i), pool, seed, ops).first);
        } else {
            ctx = featurize(tasks[i].image);
        }
        if (policy.greedy_token(ctx) == tasks[i].answer_token) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(tasks.size());
}

/// CSV reward log: header plus one row per iteration.
inline std::string iteration_log_csv(const std::vector<IterationLog>& log) {
    std::string out = "iteration,mean_reward,loss\n";
    char row[96];
    for (const IterationLog& entry : log) {
        std::snprintf(row, sizeof(row), "%d,%.6f,%.6f\n", entry.iteration,
                      entry.mean_reward, entry.loss);
        out += row;
    }
    return out;
}

inline nlohmann::ordered_json policy_to_json(const ToyPolicy& policy) {
    nlohmann::ordered_json j;
    j["feature_dim"] = kFeatureDim;
    j["vocab_size"] = kVocab;
    j["weights"] = policy.get_params();
    return j;
}

} // namespace vptk::toy
