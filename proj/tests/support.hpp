#pragma once

#include <random>

#include "fednull/matrix.hpp"
#include "fednull/mri.hpp"
#include "fednull/rng.hpp"

namespace fednull::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = n(rng);
    return m;
}

inline Image random_image(std::size_t h, std::size_t w, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(h, w);
    for (double& v : img.pixels().values()) v = u(rng);
    return img;
}

/// Symmetric PSD matrix with controllable rank: AᵀA for A of shape rank×d.
inline Matrix random_psd(std::size_t d, std::size_t rank, Rng& rng) {
    const Matrix a = random_matrix(rank, d, rng);
    return matmul_tn(a, a);
}

}  // namespace fednull::testing
