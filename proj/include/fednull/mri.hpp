#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "fednull/matrix.hpp"

namespace fednull {

/// Real-valued H×W image. Pixels live in a row-major Matrix.
class Image {
public:
    Image() = default;
    Image(std::size_t height, std::size_t width, double fill = 0.0) : pixels_(height, width, fill) {}
    explicit Image(Matrix pixels) : pixels_(std::move(pixels)) {}

    std::size_t height() const noexcept { return pixels_.rows(); }
    std::size_t width() const noexcept { return pixels_.cols(); }
    std::size_t size() const noexcept { return pixels_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return pixels_(r, c); }
    double operator()(std::size_t r, std::size_t c) const noexcept { return pixels_(r, c); }

    const Matrix& pixels() const noexcept { return pixels_; }
    Matrix& pixels() noexcept { return pixels_; }

    friend bool operator==(const Image&, const Image&) = default;

private:
    Matrix pixels_;
};

using Complex = std::complex<double>;

/// H×W complex field (k-space or complex image), row-major.
class ComplexField {
public:
    ComplexField() = default;
    ComplexField(std::size_t height, std::size_t width)
        : height_(height), width_(width), data_(height * width) {}

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }

    Complex& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * width_ + c]; }
    const Complex& operator()(std::size_t r, std::size_t c) const noexcept {
        return data_[r * width_ + c];
    }

    std::vector<Complex>& data() noexcept { return data_; }
    const std::vector<Complex>& data() const noexcept { return data_; }

    Image real_part() const;
    Image magnitude() const;
    double energy() const;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<Complex> data_;
};

/// Column (phase-encode) sampling pattern.
///
/// `columns_kept` is indexed in centered frequency order: column j holds the
/// frequency j - W/2, so the DC line sits at index W/2 and the low
/// frequencies occupy the middle of the vector.
struct SamplingMask {
    std::vector<bool> columns_kept;
    double acceleration = 1.0;
    double center_fraction = 0.08;
    std::uint64_t seed = 0;

    std::size_t width() const noexcept { return columns_kept.size(); }
    std::size_t kept_count() const noexcept;
    /// Whether the unshifted DFT column `k` (0 = DC) is sampled.
    bool keeps_frequency(std::size_t k) const noexcept;
};

bool is_power_of_two(std::size_t n) noexcept;

/// In-place radix-2 FFT of a power-of-two length sequence, no normalization.
void fft_inplace(std::vector<Complex>& data, bool inverse);

/// Unitary 2D DFT (scaled by 1/sqrt(H·W)).
ComplexField dft2(const Image& img);
ComplexField dft2(const ComplexField& field);
/// Unitary inverse 2D DFT.
ComplexField idft2(const ComplexField& k);

SamplingMask make_mask(std::size_t width, double acceleration, double center_fraction,
                       std::uint64_t seed);

/// M ⊙ F(y) + ε with ε complex Gaussian on kept entries only.
ComplexField masked_kspace(const Image& y, const SamplingMask& mask, double noise_std,
                           std::uint64_t seed);

/// Zero-filled complex reconstruction F⁻¹(M ⊙ F(y) + ε).
ComplexField undersample_complex(const Image& y, const SamplingMask& mask, double noise_std,
                                 std::uint64_t seed);

/// Zero-filled reconstruction, real part retained.
Image undersample(const Image& y, const SamplingMask& mask, double noise_std, std::uint64_t seed);

// FNIM image files: "FNIM", u16 height, u16 width, then H·W little-endian f64
// in row-major order.
void write_image(const std::filesystem::path& path, const Image& img);
Image read_image(const std::filesystem::path& path);
void write_image_csv(const std::filesystem::path& path, const Image& img);

}  // namespace fednull
