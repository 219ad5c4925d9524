#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "vptk/rng.hpp"

namespace vptk {

using Tokens = std::vector<int>;

/// A differentiable conditional sequence scorer. Contexts are plain
/// feature vectors; responses are token sequences over a finite
/// vocabulary.
///
/// Gradients flow through the interface in reverse mode: a loss computes
/// per-token weights w_t and the policy accumulates
///   grad += sum_t w_t * d log pi(tok_t | ctx, tok_<t) / d theta.
class Policy {
public:
    virtual ~Policy() = default;

    virtual int vocab_size() const = 0;
    virtual std::size_t param_count() const = 0;
    virtual std::vector<double> get_params() const = 0;
    virtual void set_params(std::span<const double> p) = 0;

    /// log pi(tok_t | ctx, tok_<t) for every position of `response`.
    virtual std::vector<double> token_logprobs(std::span<const double> ctx,
                                               std::span<const int> response) const = 0;

    virtual void accumulate_logprob_grad(std::span<const double> ctx,
                                         std::span<const int> response,
                                         std::span<const double> weights,
                                         std::span<double> grad) const = 0;

    /// Draws the next token by inverse CDF from one unit draw.
    virtual int sample_token(std::span<const double> ctx, std::span<const int> prefix,
                             SampleRng& rng) const = 0;
};

struct DpoConfig {
    double beta_dpo = 0.1;
};

struct GrpoConfig {
    double clip_eps = 0.2;
    double kl_coeff = 0.01;
    int group_size = 5;
    double std_floor = 1e-8;
};

/// G sampled responses for one context, with outcome rewards and their
/// group-normalized advantages.
struct RolloutGroup {
    std::vector<double> context;
    std::vector<Tokens> responses;
    std::vector<double> rewards;
    std::vector<double> advantages;
};

namespace detail {

inline void check_tokens(const Policy& p, std::span<const int> toks) {
    for (int t : toks)
        if (t < 0 || t >= p.vocab_size())
            throw std::out_of_range("token outside vocabulary");
}

inline double sum(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace detail

/// Â_i = (r_i - mean) / std with the population standard deviation.
/// Groups whose std falls below std_floor (all rewards equal, up to
/// noise) get all-zero advantages and contribute no policy gradient.
///
/// Deviations are computed against the first reward before averaging, so
/// an exactly representable constant shift of the rewards leaves the
/// result bit-identical.
inline std::vector<double> normalize_advantages(std::span<const double> rewards,
                                                double std_floor = 1e-8) {
    const std::size_t n = rewards.size();
    if (n < 2) throw std::invalid_argument("advantage group needs at least 2 rewards");

    const double base = rewards[0];
    std::vector<double> centered(n);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        centered[i] = rewards[i] - base;
        mean += centered[i];
    }
    mean /= static_cast<double>(n);

    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        centered[i] -= mean;
        var += centered[i] * centered[i];
    }
    const double sd = std::sqrt(var / static_cast<double>(n));

    std::vector<double> adv(n, 0.0);
    if (sd < std_floor) return adv;
    for (std::size_t i = 0; i < n; ++i) adv[i] = centered[i] / sd;
    return adv;
}

/// Negative mean token log-likelihood of the positive response:
/// -(1/|o+|) sum_t log pi(o+_t | ctx, o+_<t). Gradient accumulates into
/// `grad`.
inline double sft_loss(const Policy& policy, std::span<const double> ctx,
                       const Tokens& positive, std::span<double> grad) {
    if (positive.empty()) throw std::invalid_argument("sft_loss: empty positive response");
    detail::check_tokens(policy, positive);

    const auto lp = policy.token_logprobs(ctx, positive);
    const double inv = 1.0 / static_cast<double>(lp.size());
    const std::vector<double> w(lp.size(), -inv);
    policy.accumulate_logprob_grad(ctx, positive, w, grad);
    return -inv * detail::sum(lp);
}

/// -log sigmoid(beta * margin) where margin is the chosen-minus-rejected
/// difference of policy-vs-reference total log-probabilities. Only the
/// policy receives gradient.
inline double dpo_loss(const Policy& policy, const Policy& reference,
                       std::span<const double> ctx, const Tokens& chosen,
                       const Tokens& rejected, const DpoConfig& cfg,
                       std::span<double> grad) {
    if (chosen == rejected) throw std::invalid_argument("dpo_loss: chosen equals rejected");
    detail::check_tokens(policy, chosen);
    detail::check_tokens(policy, rejected);

    const double lp_c = detail::sum(policy.token_logprobs(ctx, chosen));
    const double lp_r = detail::sum(policy.token_logprobs(ctx, rejected));
    const double ref_c = detail::sum(reference.token_logprobs(ctx, chosen));
    const double ref_r = detail::sum(reference.token_logprobs(ctx, rejected));

    const double margin = (lp_c - ref_c) - (lp_r - ref_r);
    const double z = cfg.beta_dpo * margin;

    // d/dz of softplus(-z) is -sigmoid(-z).
    const double coeff = cfg.beta_dpo * detail::sigmoid(-z);
    const std::vector<double> wc(chosen.size(), -coeff);
    const std::vector<double> wr(rejected.size(), coeff);
    policy.accumulate_logprob_grad(ctx, chosen, wc, grad);
    policy.accumulate_logprob_grad(ctx, rejected, wr, grad);
    return detail::softplus(-z);
}

/// Nonnegative per-token KL estimate against a frozen reference,
/// averaged over tokens: k_t = rho_t - log rho_t - 1 with
/// rho_t = pi_ref(tok) / pi_theta(tok). Zero iff the policies agree on
/// every response token.
inline double kl_penalty(const Policy& policy, const Policy& reference,
                         std::span<const double> ctx, const Tokens& response,
                         std::span<double> grad) {
    if (response.empty()) throw std::invalid_argument("kl_penalty: empty response");
    detail::check_tokens(policy, response);

    const auto lp = policy.token_logprobs(ctx, response);
    const auto lp_ref = reference.token_logprobs(ctx, response);
    const double inv = 1.0 / static_cast<double>(lp.size());

    double total = 0.0;
    std::vector<double> w(lp.size());
    for (std::size_t t = 0; t < lp.size(); ++t) {
        const double log_rho = lp_ref[t] - lp[t];
        const double rho = std::exp(log_rho);
        total += rho - log_rho - 1.0;
        w[t] = (1.0 - rho) * inv;
    }
    policy.accumulate_logprob_grad(ctx, response, w, grad);
    return total * inv;
}

/// Clipped surrogate for one token: min(gamma * adv,
/// clamp(gamma, 1-eps, 1+eps) * adv). Split out for direct testing.
inline double clipped_surrogate(double gamma, double advantage, double clip_eps) {
    const double clipped = std::clamp(gamma, 1.0 - clip_eps, 1.0 + clip_eps);
    return std::min(gamma * advantage, clipped * advantage);
}

/// The group-relative clipped objective, negated for minimization:
///
///   loss = -(1/G) sum_i (1/|o_i|) sum_t
///            { min[gamma_it * A_i, clip(gamma_it, 1-eps, 1+eps) * A_i]
///              - kl_coeff * k_it }
///
/// gamma_it is the policy-vs-snapshot probability ratio at token t, the
/// outcome advantage A_i is broadcast to every token of response i, and
/// k_it is the same per-token KL estimate as kl_penalty. Gradient flows
/// into the policy only; `old` and `reference` stay frozen.
inline double grpo_loss(const Policy& policy, const Policy& old, const Policy& reference,
                        const RolloutGroup& group, const GrpoConfig& cfg,
                        std::span<double> grad) {
    const std::size_t g = group.responses.size();
    if (g < 2) throw std::invalid_argument("grpo_loss: group size must be >= 2");
    if (static_cast<int>(g) != cfg.group_size)
        throw std::invalid_argument("grpo_loss: group size mismatch with config");
    if (group.rewards.size() != g || group.advantages.size() != g)
        throw std::invalid_argument("grpo_loss: rewards/advantages length mismatch");

    const double inv_g = 1.0 / static_cast<double>(g);
    double loss = 0.0;
    for (std::size_t i = 0; i < g; ++i) {
        const Tokens& response = group.responses[i];
        if (response.empty()) throw std::invalid_argument("grpo_loss: empty response");
        detail::check_tokens(policy, response);

        const auto lp = policy.token_logprobs(group.context, response);
        const auto lp_old = old.token_logprobs(group.context, response);
        const auto lp_ref = reference.token_logprobs(group.context, response);
        const double adv = group.advantages[i];
        const double inv_t = 1.0 / static_cast<double>(lp.size());

        std::vector<double> w(lp.size());
        for (std::size_t t = 0; t < lp.size(); ++t) {
            const double gamma = std::exp(lp[t] - lp_old[t]);
            const double unclipped = gamma * adv;
            const double clipped =
                std::clamp(gamma, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
            const double surrogate = std::min(unclipped, clipped);

            const double log_rho = lp_ref[t] - lp[t];
            const double rho = std::exp(log_rho);
            const double kl = rho - log_rho - 1.0;

            loss -= (surrogate - cfg.kl_coeff * kl) * inv_g * inv_t;

            // min() passes gradient through the unclipped branch when it
            // is selected (ties included), exactly like the value above.
            const double d_surrogate = unclipped <= clipped ? unclipped : 0.0;
            const double d_kl = 1.0 - rho;
            w[t] = -(d_surrogate - cfg.kl_coeff * d_kl) * inv_g * inv_t;
        }
        policy.accumulate_logprob_grad(group.context, response, w, grad);
    }
    return loss;
}

/// One SGD step with global-norm gradient clipping. The buffer is zeroed
/// afterwards; a non-finite gradient aborts the step before any update.
inline void sgd_step(Policy& policy, std::span<double> grad, double learning_rate,
                     double max_grad_norm) {
    if (grad.size() != policy.param_count())
        throw std::invalid_argument("sgd_step: gradient size mismatch");

    double sq = 0.0;
    for (double gi : grad) {
        if (!std::isfinite(gi))
            throw std::runtime_error("sgd_step: non-finite gradient component, step aborted");
        sq += gi * gi;
    }
    const double norm = std::sqrt(sq);
    const double scale = norm > max_grad_norm ? max_grad_norm / norm : 1.0;

    std::vector<double> params = policy.get_params();
    for (std::size_t i = 0; i < params.size(); ++i)
        params[i] -= learning_rate * scale * grad[i];
    policy.set_params(params);
    std::fill(grad.begin(), grad.end(), 0.0);
}

} // namespace vptk
