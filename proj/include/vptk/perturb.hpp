#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vptk/raster.hpp"
#include "vptk/rng.hpp"

namespace vptk {

/// The three information-preserving perturbations followed by the three
/// degrading ones. Enumeration order is load-bearing: apply_random sorts
/// its operator set by it before drawing.
enum class PerturbKind {
    ConcatDistractor,
    MixupDominant,
    RandomRotation,
    GaussianNoise,
    GaussianBlur,
    RandomCrop,
};

constexpr std::array<PerturbKind, 6> kAllPerturbKinds = {
    PerturbKind::ConcatDistractor, PerturbKind::MixupDominant,
    PerturbKind::RandomRotation,   PerturbKind::GaussianNoise,
    PerturbKind::GaussianBlur,     PerturbKind::RandomCrop,
};

/// Default operator set: the information-preserving trio.
constexpr std::array<PerturbKind, 3> kPreservingKinds = {
    PerturbKind::ConcatDistractor, PerturbKind::MixupDominant,
    PerturbKind::RandomRotation,
};

/// Fixed parameters of the degrading operators (ablation settings).
constexpr double kNoiseStdDefault = 300.0;
constexpr int kBlurKernelDefault = 50;
constexpr double kCropFractionDefault = 0.5;

/// Mixup weight range; the original image stays dominant.
constexpr double kMixupLambdaLo = 0.8;
constexpr double kMixupLambdaHi = 0.95;
/// Rotation angle range in degrees.
constexpr double kRotationMaxDeg = 15.0;

inline const char* perturb_kind_name(PerturbKind k) {
    switch (k) {
        case PerturbKind::ConcatDistractor: return "ConcatDistractor";
        case PerturbKind::MixupDominant: return "MixupDominant";
        case PerturbKind::RandomRotation: return "RandomRotation";
        case PerturbKind::GaussianNoise: return "GaussianNoise";
        case PerturbKind::GaussianBlur: return "GaussianBlur";
        case PerturbKind::RandomCrop: return "RandomCrop";
    }
    throw std::logic_error("unreachable perturb kind");
}

/// Accepts both the serialized names and the short CLI spellings
/// (concat, mixup, rotate, noise, blur, crop).
inline std::optional<PerturbKind> parse_perturb_kind(const std::string& name) {
    for (PerturbKind k : kAllPerturbKinds)
        if (name == perturb_kind_name(k)) return k;
    if (name == "concat") return PerturbKind::ConcatDistractor;
    if (name == "mixup") return PerturbKind::MixupDominant;
    if (name == "rotate") return PerturbKind::RandomRotation;
    if (name == "noise") return PerturbKind::GaussianNoise;
    if (name == "blur") return PerturbKind::GaussianBlur;
    if (name == "crop") return PerturbKind::RandomCrop;
    return std::nullopt;
}

/// Everything needed to reproduce one applied perturbation. Fields that
/// do not apply to `kind` stay unset. `seed` is the per-sample SplitMix64
/// seed the drawing stream started from.
struct PerturbRecord {
    PerturbKind kind = PerturbKind::ConcatDistractor;
    std::optional<double> lambda;        // MixupDominant
    std::optional<double> angle_deg;     // RandomRotation
    std::optional<double> noise_std;     // GaussianNoise
    std::optional<int> kernel_size;      // GaussianBlur
    std::optional<double> crop_fraction; // RandomCrop
    std::optional<std::string> distractor_id; // ConcatDistractor, MixupDominant
    std::uint64_t seed = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json params = nlohmann::ordered_json::object();
        if (lambda) params["lambda"] = *lambda;
        if (angle_deg) params["angle_deg"] = *angle_deg;
        if (noise_std) params["noise_std"] = *noise_std;
        if (kernel_size) params["kernel_size"] = *kernel_size;
        if (crop_fraction) params["crop_fraction"] = *crop_fraction;
        nlohmann::ordered_json j;
        j["kind"] = perturb_kind_name(kind);
        j["params"] = std::move(params);
        j["seed"] = seed;
        if (distractor_id) j["distractor_id"] = *distractor_id;
        return j;
    }

    static PerturbRecord from_json(const nlohmann::json& j) {
        PerturbRecord r;
        const auto kind = parse_perturb_kind(j.at("kind").get<std::string>());
        if (!kind) throw std::runtime_error("unknown perturbation kind: " +
                                            j.at("kind").get<std::string>());
        r.kind = *kind;
        const auto& p = j.at("params");
        if (p.contains("lambda")) r.lambda = p.at("lambda").get<double>();
        if (p.contains("angle_deg")) r.angle_deg = p.at("angle_deg").get<double>();
        if (p.contains("noise_std")) r.noise_std = p.at("noise_std").get<double>();
        if (p.contains("kernel_size")) r.kernel_size = p.at("kernel_size").get<int>();
        if (p.contains("crop_fraction")) r.crop_fraction = p.at("crop_fraction").get<double>();
        r.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("distractor_id"))
            r.distractor_id = j.at("distractor_id").get<std::string>();
        return r;
    }
};

// ---------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------

/// Horizontal [img ; distractor]. The distractor is resized to img's
/// height with its aspect ratio preserved (width >= 1); the left region
/// of the result is pixel-identical to img.
inline Image concat_distractor(const Image& img, const Image& distractor) {
    const int dw = std::max(
        1, round_half_away(static_cast<double>(distractor.width) * img.height /
                           distractor.height));
    const Image resized = resize_bilinear(distractor, dw, img.height);
    Image out(img.width + dw, img.height);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) out.at(x, y) = img.at(x, y);
        for (int x = 0; x < dw; ++x) out.at(img.width + x, y) = resized.at(x, y);
    }
    return out;
}

/// out = lambda * img + (1 - lambda) * distractor, per channel, with the
/// distractor first resized to img's dimensions. The public pipeline
/// draws lambda from [0.8, 0.95]; any value in [0, 1] is accepted here.
inline Image mixup_dominant(const Image& img, const Image& distractor, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw std::invalid_argument("mixup lambda must lie in [0, 1]");
    const Image other = resize_bilinear(distractor, img.width, img.height);
    Image out(img.width, img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const Rgb& a = img.pixels[i];
        const Rgb& b = other.pixels[i];
        out.pixels[i] = Rgb{clamp_channel(lambda * a.r + (1.0 - lambda) * b.r),
                            clamp_channel(lambda * a.g + (1.0 - lambda) * b.g),
                            clamp_channel(lambda * a.b + (1.0 - lambda) * b.b)};
    }
    return out;
}

/// Rotation about the image center on the original canvas. Each output
/// pixel center is inverse-mapped and sampled bilinearly; neighbors that
/// fall outside the source read as white. Positive angles rotate the
/// content counterclockwise.
inline Image rotate(const Image& img, double angle_deg) {
    const double rad = angle_deg * 3.14159265358979323846 / 180.0;
    const double c = std::cos(rad);
    const double s = std::sin(rad);
    const double cx = img.width / 2.0;
    const double cy = img.height / 2.0;

    Image out(img.width, img.height);
    auto sample = [&](int x, int y, int ch) -> double {
        if (x < 0 || y < 0 || x >= img.width || y >= img.height) return 255.0;
        const Rgb& p = img.at(x, y);
        return ch == 0 ? p.r : ch == 1 ? p.g : p.b;
    };
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            // Inverse map of a CCW rotation by `rad` (y axis points down).
            const double dx = (x + 0.5) - cx;
            const double dy = (y + 0.5) - cy;
            const double ux = c * dx - s * dy + cx - 0.5;
            const double uy = s * dx + c * dy + cy - 0.5;
            const int x0 = static_cast<int>(std::floor(ux));
            const int y0 = static_cast<int>(std::floor(uy));
            const double wx = ux - x0;
            const double wy = uy - y0;
            Rgb px;
            for (int ch = 0; ch < 3; ++ch) {
                const double top = sample(x0, y0, ch) * (1 - wx) + sample(x0 + 1, y0, ch) * wx;
                const double bot =
                    sample(x0, y0 + 1, ch) * (1 - wx) + sample(x0 + 1, y0 + 1, ch) * wx;
                const std::uint8_t v = clamp_channel(top * (1 - wy) + bot * wy);
                if (ch == 0) px.r = v;
                else if (ch == 1) px.g = v;
                else px.b = v;
            }
            out.at(x, y) = px;
        }
    }
    return out;
}

/// Adds an independent N(0, std) draw to every channel, clamped to
/// [0, 255]. Draws are consumed row-major, channel order r, g, b.
inline Image gaussian_noise(const Image& img, double std_dev, SampleRng& rng) {
    if (std_dev < 0.0) throw std::invalid_argument("noise std must be >= 0");
    Image out(img.width, img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const Rgb& p = img.pixels[i];
        out.pixels[i] = Rgb{clamp_channel(p.r + std_dev * rng.next_gaussian()),
                            clamp_channel(p.g + std_dev * rng.next_gaussian()),
                            clamp_channel(p.b + std_dev * rng.next_gaussian())};
    }
    return out;
}

/// Separable Gaussian blur: radius = floor(kernel_size / 2), so 2r+1 taps
/// per axis, sigma = kernel_size / 6, weights normalized to sum 1. Edge
/// clamp at borders; horizontal then vertical pass; values stay real
/// until both passes finish.
inline Image gaussian_blur(const Image& img, int kernel_size) {
    if (kernel_size < 1) throw std::invalid_argument("blur kernel size must be >= 1");
    const int r = kernel_size / 2;
    if (r == 0) return img;

    const double sigma = kernel_size / 6.0;
    std::vector<double> w(static_cast<std::size_t>(2 * r + 1));
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        w[static_cast<std::size_t>(i + r)] = std::exp(-(static_cast<double>(i) * i) /
                                                      (2.0 * sigma * sigma));
        sum += w[static_cast<std::size_t>(i + r)];
    }
    for (double& wi : w) wi /= sum;

    const std::size_t n = img.pixels.size();
    std::vector<double> tmp(n * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            double acc[3] = {0, 0, 0};
            for (int i = -r; i <= r; ++i) {
                const int xi = std::clamp(x + i, 0, img.width - 1);
                const Rgb& p = img.at(xi, y);
                const double wi = w[static_cast<std::size_t>(i + r)];
                acc[0] += wi * p.r;
                acc[1] += wi * p.g;
                acc[2] += wi * p.b;
            }
            const std::size_t idx = (static_cast<std::size_t>(y) * img.width + x) * 3;
            tmp[idx] = acc[0];
            tmp[idx + 1] = acc[1];
            tmp[idx + 2] = acc[2];
        }
    }
    Image out(img.width, img.height);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            double acc[3] = {0, 0, 0};
            for (int i = -r; i <= r; ++i) {
                const int yi = std::clamp(y + i, 0, img.height - 1);
                const std::size_t idx = (static_cast<std::size_t>(yi) * img.width + x) * 3;
                const double wi = w[static_cast<std::size_t>(i + r)];
                acc[0] += wi * tmp[idx];
                acc[1] += wi * tmp[idx + 1];
                acc[2] += wi * tmp[idx + 2];
            }
            out.at(x, y) = Rgb{clamp_channel(acc[0]), clamp_channel(acc[1]),
                               clamp_channel(acc[2])};
        }
    }
    return out;
}

/// Keeps a window holding `crop_fraction` of the image area: each axis
/// shrinks by sqrt(crop_fraction) (rounded, at least 1 px). The top-left
/// offset is drawn uniformly over valid positions, x before y. The crop
/// is returned at native resolution.
inline Image random_crop(const Image& img, double crop_fraction, SampleRng& rng) {
    if (!(crop_fraction > 0.0 && crop_fraction <= 1.0))
        throw std::invalid_argument("crop fraction must lie in (0, 1]");
    const double scale = std::sqrt(crop_fraction);
    const int cw = std::max(1, round_half_away(img.width * scale));
    const int ch = std::max(1, round_half_away(img.height * scale));
    const int x0 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(img.width - cw + 1)));
    const int y0 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(img.height - ch + 1)));
    Image out(cw, ch);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) out.at(x, y) = img.at(x0 + x, y0 + y);
    return out;
}

// ---------------------------------------------------------------------
// Seeded random application
// ---------------------------------------------------------------------

/// A candidate distractor: stable id plus a borrowed image. Callers build
/// the pool excluding the sample's own image.
struct PoolEntry {
    std::string id;
    const Image* image = nullptr;
};
using DistractorPool = std::vector<PoolEntry>;

namespace detail {

// How many unit draws each kind consumes for its parameters, after the
// one kind-index draw. apply_record relies on these counts for replay.
inline int param_draw_count(PerturbKind k) {
    switch (k) {
        case PerturbKind::ConcatDistractor: return 1; // distractor index
        case PerturbKind::MixupDominant: return 2;    // lambda, distractor index
        case PerturbKind::RandomRotation: return 1;   // angle
        default: return 0;
    }
}

inline std::vector<PerturbKind> sorted_ops(const std::vector<PerturbKind>& op_set) {
    std::vector<PerturbKind> ops = op_set;
    std::sort(ops.begin(), ops.end());
    ops.erase(std::unique(ops.begin(), ops.end()), ops.end());
    return ops;
}

} // namespace detail

/// Applies one operator drawn from `op_set` to `img`, seeding a fresh
/// SplitMix64 stream with global_seed XOR fnv1a64(sample_id). Draw order
/// is fixed: (1) kind index over the set sorted by enumeration order,
/// (2) kind parameters (mixup: lambda then distractor index), (3) any
/// draws the operator itself consumes. Degrading operators use the fixed
/// ablation parameters. Returns the image and a replayable record.
inline std::pair<Image, PerturbRecord> apply_random(const Image& img,
                                                    const std::string& sample_id,
                                                    const DistractorPool& pool,
                                                    std::uint64_t global_seed,
                                                    const std::vector<PerturbKind>& op_set) {
    const std::vector<PerturbKind> ops = detail::sorted_ops(op_set);
    if (ops.empty()) throw std::invalid_argument("apply_random: empty operator set");

    PerturbRecord rec;
    rec.seed = sample_seed(global_seed, sample_id);
    SampleRng rng(rec.seed);

    rec.kind = ops[rng.next_below(ops.size())];

    const bool needs_pool = rec.kind == PerturbKind::ConcatDistractor ||
                            rec.kind == PerturbKind::MixupDominant;
    if (needs_pool && pool.empty())
        throw std::runtime_error("apply_random: empty distractor pool for sample '" +
                                 sample_id + "'");

    switch (rec.kind) {
        case PerturbKind::ConcatDistractor: {
            const auto& d = pool[rng.next_below(pool.size())];
            rec.distractor_id = d.id;
            return {concat_distractor(img, *d.image), rec};
        }
        case PerturbKind::MixupDominant: {
            rec.lambda = kMixupLambdaLo +
                         (kMixupLambdaHi - kMixupLambdaLo) * rng.next_unit_real();
            const auto& d = pool[rng.next_below(pool.size())];
            rec.distractor_id = d.id;
            return {mixup_dominant(img, *d.image, *rec.lambda), rec};
        }
        case PerturbKind::RandomRotation: {
            rec.angle_deg = -kRotationMaxDeg + 2.0 * kRotationMaxDeg * rng.next_unit_real();
            return {rotate(img, *rec.angle_deg), rec};
        }
        case PerturbKind::GaussianNoise: {
            rec.noise_std = kNoiseStdDefault;
            return {gaussian_noise(img, *rec.noise_std, rng), rec};
        }
        case PerturbKind::GaussianBlur: {
            rec.kernel_size = kBlurKernelDefault;
            return {gaussian_blur(img, *rec.kernel_size), rec};
        }
        case PerturbKind::RandomCrop: {
            rec.crop_fraction = kCropFractionDefault;
            return {random_crop(img, *rec.crop_fraction, rng), rec};
        }
    }
    throw std::logic_error("unreachable perturb kind");
}

/// Replays a PerturbRecord on the original image, reproducing the exact
/// bytes apply_random produced: the stream is reseeded from the record
/// and the kind/parameter draws are skipped by count before the operator
/// runs. Distractors are resolved by id against `pool`.
inline Image apply_record(const Image& img, const PerturbRecord& rec,
                          const DistractorPool& pool) {
    auto find_distractor = [&]() -> const Image& {
        for (const auto& e : pool)
            if (rec.distractor_id && e.id == *rec.distractor_id) return *e.image;
        throw std::runtime_error("apply_record: distractor id not in pool");
    };
    SampleRng rng(rec.seed);
    rng.next_unit_real(); // the kind-index draw
    for (int i = 0; i < detail::param_draw_count(rec.kind); ++i) rng.next_unit_real();

    switch (rec.kind) {
        case PerturbKind::ConcatDistractor:
            return concat_distractor(img, find_distractor());
        case PerturbKind::MixupDominant:
            return mixup_dominant(img, find_distractor(), rec.lambda.value());
        case PerturbKind::RandomRotation:
            return rotate(img, rec.angle_deg.value());
        case PerturbKind::GaussianNoise:
            return gaussian_noise(img, rec.noise_std.value(), rng);
        case PerturbKind::GaussianBlur:
            return gaussian_blur(img, rec.kernel_size.value());
        case PerturbKind::RandomCrop:
            return random_crop(img, rec.crop_fraction.value(), rng);
    }
    throw std::logic_error("unreachable perturb kind");
}

} // namespace vptk
