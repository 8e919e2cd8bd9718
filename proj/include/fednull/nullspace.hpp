#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "fednull/matrix.hpp"

namespace fednull {

/// Symmetric eigendecomposition Σ = U diag(values) Uᵀ.
///
/// Columns of `basis` are orthonormal eigenvectors, ordered so that `values`
/// is non-increasing. Eigenvalues below zero (round-off on PSD input) are
/// clamped to 0. Each eigenvector is sign-normalized: its first component
/// with magnitude > 1e-12 is positive.
struct EigenDecomposition {
    Matrix basis;
    std::vector<double> values;

    std::size_t dim() const noexcept { return values.size(); }
};

/// Orthonormal basis of the approximate null space of one prompt layer.
///
/// `u2` holds the m = floor(gamma/100 * d) eigenvectors with the smallest
/// eigenvalues (the trailing columns of U); `u1` holds the complementary
/// leading d - m columns, i.e. the principal subspace that projected
/// updates must leave untouched.
struct NullSpaceBasis {
    Matrix u2;
    Matrix u1;
    double gamma_percent = 0.0;
    Matrix projector;
    double residual_ratio = 0.0;
    int layer_index = 0;

    std::size_t dim() const noexcept { return projector.rows(); }
    std::size_t selected() const noexcept { return u2.cols(); }
};

struct ResidualRatioEntry {
    int layer_index = 0;
    double ratio = 0.0;

    friend bool operator==(const ResidualRatioEntry&, const ResidualRatioEntry&) = default;
};

/// Σ = PᵀP for an l×d prompt layer, symmetrized after the product.
Matrix uncentered_covariance(const Matrix& prompt_layer);

/// Cyclic Jacobi eigensolver for symmetric (PSD) input.
///
/// Throws InvalidInput when the input is not symmetric within 1e-8 and
/// NumericalFailure when 100 sweeps do not bring the off-diagonal mass under
/// 1e-12·‖Σ‖_F.
EigenDecomposition eigendecompose(const Matrix& sigma);

/// Number of trailing eigenvectors kept for a given gamma.
std::size_t null_dimension(std::size_t dim, double gamma_percent);

NullSpaceBasis select_null_basis(const EigenDecomposition& eig, double gamma_percent,
                                 int layer_index = 0);

/// ΔP = candidate · Π (projects every token embedding onto span(U₂)).
Matrix project_update(const Matrix& candidate, const NullSpaceBasis& basis);

std::vector<ResidualRatioEntry> residual_ratio_report(std::span<const NullSpaceBasis> bases);

/// Convenience: covariance → eigendecomposition → basis for one prompt layer.
NullSpaceBasis build_null_basis(const Matrix& prompt_layer, double gamma_percent,
                                int layer_index);

}  // namespace fednull
