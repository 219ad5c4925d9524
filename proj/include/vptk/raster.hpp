#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vptk {

struct Rgb {
    std::uint8_t r = 0;
    std::uint8_t g = 0;
    std::uint8_t b = 0;

    friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// 8-bit RGB raster. Immutable by convention once built; all image
/// operators return fresh values.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<Rgb> pixels; // row-major, size == width * height

    Image() = default;
    Image(int w, int h, Rgb fill = Rgb{255, 255, 255})
        : width(w), height(h),
          pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {
        if (w < 1 || h < 1) throw std::invalid_argument("image dimensions must be >= 1");
    }

    Rgb& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    const Rgb& at(int x, int y) const {
        return pixels[static_cast<std::size_t>(y) * width + x];
    }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Rounding rule used everywhere a real channel value becomes a byte:
/// nearest integer, half away from zero.
inline int round_half_away(double v) {
    return static_cast<int>(std::lround(v));
}

inline std::uint8_t clamp_channel(double v) {
    const int r = round_half_away(v);
    return static_cast<std::uint8_t>(std::clamp(r, 0, 255));
}

namespace detail {

// Reads one header token, skipping whitespace and '#' comment lines.
inline std::string ppm_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            // skip
        } else {
            break;
        }
        c = in.get();
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok;
}

inline int ppm_int(const std::string& tok, const char* what) {
    if (tok.empty()) throw std::runtime_error(std::string("malformed PPM header: missing ") + what);
    for (char ch : tok)
        if (!std::isdigit(static_cast<unsigned char>(ch)))
            throw std::runtime_error(std::string("malformed PPM header: bad ") + what);
    return std::stoi(tok);
}

} // namespace detail

/// Loads a binary PPM (P6, maxval 255). Each failure mode is reported
/// with its own message: missing file, unsupported variant, malformed
/// header, wrong maxval, truncated pixel data.
inline Image load_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image file: " + path.string());

    const std::string magic = detail::ppm_token(in);
    if (magic != "P6") {
        if (!magic.empty() && magic[0] == 'P')
            throw std::runtime_error("unsupported PPM variant: " + magic);
        throw std::runtime_error("malformed PPM header: bad magic");
    }
    const int w = detail::ppm_int(detail::ppm_token(in), "width");
    const int h = detail::ppm_int(detail::ppm_token(in), "height");
    const int maxval = detail::ppm_int(detail::ppm_token(in), "maxval");
    if (w < 1 || h < 1) throw std::runtime_error("malformed PPM header: bad dimensions");
    if (maxval != 255) throw std::runtime_error("unsupported PPM maxval (must be 255)");

    Image img(w, h);
    const std::size_t n = img.pixels.size() * 3;
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw std::runtime_error("truncated PPM pixel data in " + path.string());
    return img;
}

/// Canonical P6 bytes for an image: "P6\n<w> <h>\n255\n" + raw triplets.
inline std::string encode_ppm(const Image& img) {
    std::string out = "P6\n" + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n255\n";
    out.reserve(out.size() + img.pixels.size() * 3);
    for (const Rgb& p : img.pixels) {
        out.push_back(static_cast<char>(p.r));
        out.push_back(static_cast<char>(p.g));
        out.push_back(static_cast<char>(p.b));
    }
    return out;
}

inline void save_image(const Image& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open image file for writing: " + path.string());
    const std::string bytes = encode_ppm(img);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed to write image file: " + path.string());
}

/// Bilinear resize, align-corners-false: a destination pixel center maps
/// to src = (dst + 0.5) * scale - 0.5, clamped to the border. Channels
/// are rounded half away from zero after interpolation.
inline Image resize_bilinear(const Image& img, int new_width, int new_height) {
    if (new_width < 1 || new_height < 1)
        throw std::invalid_argument("resize dimensions must be >= 1");

    Image out(new_width, new_height);
    const double sx = static_cast<double>(img.width) / new_width;
    const double sy = static_cast<double>(img.height) / new_height;
    for (int y = 0; y < new_height; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(img.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < new_width; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(img.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;

            const Rgb& p00 = img.at(x0, y0);
            const Rgb& p10 = img.at(x1, y0);
            const Rgb& p01 = img.at(x0, y1);
            const Rgb& p11 = img.at(x1, y1);
            auto blend = [&](std::uint8_t c00, std::uint8_t c10, std::uint8_t c01,
                             std::uint8_t c11) {
                const double top = c00 + (c10 - c00) * wx;
                const double bot = c01 + (c11 - c01) * wx;
                return clamp_channel(top + (bot - top) * wy);
            };
            out.at(x, y) = Rgb{blend(p00.r, p10.r, p01.r, p11.r),
                               blend(p00.g, p10.g, p01.g, p11.g),
                               blend(p00.b, p10.b, p01.b, p11.b)};
        }
    }
    return out;
}

} // namespace vptk
