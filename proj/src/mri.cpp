#include "fednull/mri.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "fednull/binary_io.hpp"
#include "fednull/error.hpp"
#include "fednull/rng.hpp"

namespace fednull {
namespace {

constexpr char kImageMagic[4] = {'F', 'N', 'I', 'M'};

void require_pow2(std::size_t h, std::size_t w, const char* what) {
    if (!is_power_of_two(h) || !is_power_of_two(w))
        throw_invalid(std::string(what) + ": dimensions must be powers of two");
}

// Unitary 2D transform over rows then columns.
ComplexField transform2(ComplexField field, bool inverse) {
    const std::size_t h = field.height();
    const std::size_t w = field.width();
    std::vector<Complex> line(w);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) line[c] = field(r, c);
        fft_inplace(line, inverse);
        for (std::size_t c = 0; c < w; ++c) field(r, c) = line[c];
    }
    line.resize(h);
    for (std::size_t c = 0; c < w; ++c) {
        for (std::size_t r = 0; r < h; ++r) line[r] = field(r, c);
        fft_inplace(line, inverse);
        for (std::size_t r = 0; r < h; ++r) field(r, c) = line[r];
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(h * w));
    for (auto& v : field.data()) v *= scale;
    return field;
}

}  // namespace

Image ComplexField::real_part() const {
    Image out(height_, width_);
    for (std::size_t r = 0; r < height_; ++r)
        for (std::size_t c = 0; c < width_; ++c) out(r, c) = (*this)(r, c).real();
    return out;
}

Image ComplexField::magnitude() const {
    Image out(height_, width_);
    for (std::size_t r = 0; r < height_; ++r)
        for (std::size_t c = 0; c < width_; ++c) out(r, c) = std::abs((*this)(r, c));
    return out;
}

double ComplexField::energy() const {
    double acc = 0.0;
    for (const auto& v : data_) acc += std::norm(v);
    return acc;
}

std::size_t SamplingMask::kept_count() const noexcept {
    return static_cast<std::size_t>(std::count(columns_kept.begin(), columns_kept.end(), true));
}

bool SamplingMask::keeps_frequency(std::size_t k) const noexcept {
    const std::size_t w = columns_kept.size();
    return columns_kept[(k + w / 2) % w];
}

bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

void fft_inplace(std::vector<Complex>& data, bool inverse) {
    const std::size_t n = data.size();
    if (!is_power_of_two(n)) throw_invalid("fft: length must be a power of two");

    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(data[i], data[j]);
    }

    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double angle = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
        for (std::size_t start = 0; start < n; start += len) {
            for (std::size_t k = 0; k < len / 2; ++k) {
                // Twiddles from the exact angle rather than a running product.
                const double a = angle * static_cast<double>(k);
                const Complex tw(std::cos(a), std::sin(a));
                const Complex even = data[start + k];
                const Complex odd = data[start + k + len / 2] * tw;
                data[start + k] = even + odd;
                data[start + k + len / 2] = even - odd;
            }
        }
    }
}

ComplexField dft2(const Image& img) {
    require_pow2(img.height(), img.width(), "dft2");
    ComplexField field(img.height(), img.width());
    for (std::size_t r = 0; r < img.height(); ++r)
        for (std::size_t c = 0; c < img.width(); ++c) field(r, c) = img(r, c);
    return transform2(std::move(field), false);
}

ComplexField dft2(const ComplexField& field) {
    require_pow2(field.height(), field.width(), "dft2");
    return transform2(field, false);
}

ComplexField idft2(const ComplexField& k) {
    require_pow2(k.height(), k.width(), "idft2");
    return transform2(k, true);
}

SamplingMask make_mask(std::size_t width, double acceleration, double center_fraction,
                       std::uint64_t seed) {
    if (width == 0) throw_invalid("make_mask: width must be positive");
    if (!(acceleration > 1.0)) throw_invalid("make_mask: acceleration must exceed 1");
    if (!(center_fraction > 0.0 && center_fraction < 1.0))
        throw_invalid("make_mask: center_fraction must lie in (0, 1)");

    const double wd = static_cast<double>(width);
    const auto center = static_cast<std::size_t>(std::floor(center_fraction * wd));
    const auto total = static_cast<std::size_t>(std::lround(wd / acceleration));
    if (total < center)
        throw_invalid("make_mask: requested column count is smaller than the center band");

    SamplingMask mask;
    mask.columns_kept.assign(width, false);
    mask.acceleration = acceleration;
    mask.center_fraction = center_fraction;
    mask.seed = seed;

    const std::size_t first = width / 2 - center / 2;
    for (std::size_t i = 0; i < center; ++i) mask.columns_kept[first + i] = true;

    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < width; ++i)
        if (!mask.columns_kept[i]) rest.push_back(i);
    Rng rng(seed);
    std::shuffle(rest.begin(), rest.end(), rng);
    for (std::size_t i = 0; i < total - center; ++i) mask.columns_kept[rest[i]] = true;
    return mask;
}

ComplexField masked_kspace(const Image& y, const SamplingMask& mask, double noise_std,
                           std::uint64_t seed) {
    if (noise_std < 0.0 || !std::isfinite(noise_std))
        throw_invalid("undersample: noise_std must be finite and non-negative");
    if (mask.width() != y.width()) throw_invalid("undersample: mask width does not match image");
    if (!y.pixels().all_finite()) throw_invalid("undersample: non-finite pixel");

    ComplexField k = dft2(y);
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, noise_std > 0.0 ? noise_std : 1.0);
    for (std::size_t r = 0; r < k.height(); ++r) {
        for (std::size_t c = 0; c < k.width(); ++c) {
            if (!mask.keeps_frequency(c)) {
                k(r, c) = 0.0;
            } else if (noise_std > 0.0) {
                const double re = noise(rng);
                const double im = noise(rng);
                k(r, c) += Complex(re, im);
            }
        }
    }
    return k;
}

ComplexField undersample_complex(const Image& y, const SamplingMask& mask, double noise_std,
                                 std::uint64_t seed) {
    return idft2(masked_kspace(y, mask, noise_std, seed));
}

Image undersample(const Image& y, const SamplingMask& mask, double noise_std, std::uint64_t seed) {
    return undersample_complex(y, mask, noise_std, seed).real_part();
}

void write_image(const std::filesystem::path& path, const Image& img) {
    if (img.height() > 0xFFFF || img.width() > 0xFFFF) throw_invalid("write_image: image too large");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw_io("cannot open " + path.string() + " for writing");
    os.write(kImageMagic, 4);
    binary::put<std::uint16_t>(os, static_cast<std::uint16_t>(img.height()));
    binary::put<std::uint16_t>(os, static_cast<std::uint16_t>(img.width()));
    for (double v : img.pixels().values()) binary::put<double>(os, v);
    if (!os) throw_io("write failed: " + path.string());
}

Image read_image(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw_io("cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || !std::equal(magic, magic + 4, kImageMagic))
        throw_io("bad FNIM magic in " + path.string());
    const auto h = binary::get<std::uint16_t>(is);
    const auto w = binary::get<std::uint16_t>(is);
    Image img(h, w);
    for (double& v : img.pixels().values()) v = binary::get<double>(is);
    return img;
}

void write_image_csv(const std::filesystem::path& path, const Image& img) {
    std::ofstream os(path);
    if (!os) throw_io("cannot open " + path.string() + " for writing");
    char buf[32];
    for (std::size_t r = 0; r < img.height(); ++r) {
        for (std::size_t c = 0; c < img.width(); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", img(r, c));
            if (c) os << ',';
            os << buf;
        }
        os << '\n';
    }
    if (!os) throw_io("write failed: " + path.string());
}

}  // namespace fednull
