#include "fednull/nullspace.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fednull/error.hpp"

namespace fednull {
namespace {

constexpr int kMaxSweeps = 100;
constexpr double kOffDiagonalTolerance = 1e-12;
constexpr double kSymmetryTolerance = 1e-8;
constexpr double kSignThreshold = 1e-12;

double off_diagonal_norm(const Matrix& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (i != j) acc += a(i, j) * a(i, j);
    return std::sqrt(acc);
}

// Applies the rotation J(p, q, c, s) as A ← JᵀAJ and V ← VJ.
void rotate(Matrix& a, Matrix& v, std::size_t p, std::size_t q, double c, double s) {
    const std::size_t n = a.rows();
    for (std::size_t k = 0; k < n; ++k) {
        const double akp = a(k, p);
        const double akq = a(k, q);
        a(k, p) = c * akp - s * akq;
        a(k, q) = s * akp + c * akq;
    }
    for (std::size_t k = 0; k < n; ++k) {
        const double apk = a(p, k);
        const double aqk = a(q, k);
        a(p, k) = c * apk - s * aqk;
        a(q, k) = s * apk + c * aqk;
    }
    for (std::size_t k = 0; k < n; ++k) {
        const double vkp = v(k, p);
        const double vkq = v(k, q);
        v(k, p) = c * vkp - s * vkq;
        v(k, q) = s * vkp + c * vkq;
    }
}

}  // namespace

Matrix uncentered_covariance(const Matrix& prompt_layer) {
    if (prompt_layer.rows() == 0 || prompt_layer.cols() == 0)
        throw_invalid("uncentered_covariance: empty prompt layer");
    if (!prompt_layer.all_finite()) throw_invalid("uncentered_covariance: non-finite entry");
    Matrix sigma = matmul_tn(prompt_layer, prompt_layer);
    const std::size_t d = sigma.rows();
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            const double avg = 0.5 * (sigma(i, j) + sigma(j, i));
            sigma(i, j) = avg;
            sigma(j, i) = avg;
        }
    return sigma;
}

EigenDecomposition eigendecompose(const Matrix& sigma) {
    if (sigma.rows() != sigma.cols() || sigma.rows() == 0)
        throw_invalid("eigendecompose: input must be a non-empty square matrix");
    if (!sigma.all_finite()) throw_invalid("eigendecompose: non-finite entry");
    const std::size_t n = sigma.rows();
    const double scale = 1.0 + max_abs(sigma);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(sigma(i, j) - sigma(j, i)) > kSymmetryTolerance * scale)
                throw_invalid("eigendecompose: input is not symmetric");

    Matrix a = sigma;
    Matrix v = Matrix::identity(n);
    const double threshold = kOffDiagonalTolerance * frobenius_norm(sigma);

    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        if (off_diagonal_norm(a) <= threshold) {
            converged = true;
            break;
        }
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = std::copysign(1.0, theta) /
                                 (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                rotate(a, v, p, q, c, s);
                a(p, q) = 0.0;
                a(q, p) = 0.0;
            }
        }
    }
    if (!converged && off_diagonal_norm(a) > threshold)
        throw_numerical("eigendecompose: Jacobi iteration did not converge in 100 sweeps");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    EigenDecomposition out;
    out.basis = Matrix(n, n);
    out.values.resize(n);
    for (std::size_t col = 0; col < n; ++col) {
        const std::size_t src = order[col];
        out.values[col] = std::max(0.0, a(src, src));
        double sign = 1.0;
        for (std::size_t r = 0; r < n; ++r) {
            if (std::abs(v(r, src)) > kSignThreshold) {
                sign = v(r, src) > 0.0 ? 1.0 : -1.0;
                break;
            }
        }
        for (std::size_t r = 0; r < n; ++r) out.basis(r, col) = sign * v(r, src);
    }
    return out;
}

std::size_t null_dimension(std::size_t dim, double gamma_percent) {
    if (!(gamma_percent >= 0.0 && gamma_percent <= 100.0))
        throw_invalid("gamma_percent must lie in [0, 100]");
    const auto m = static_cast<std::size_t>(std::floor(gamma_percent / 100.0 * static_cast<double>(dim)));
    return std::min(m, dim);
}

NullSpaceBasis select_null_basis(const EigenDecomposition& eig, double gamma_percent,
                                 int layer_index) {
    const std::size_t d = eig.dim();
    const std::size_t m = null_dimension(d, gamma_percent);

    NullSpaceBasis basis;
    basis.gamma_percent = gamma_percent;
    basis.layer_index = layer_index;
    basis.u1 = eig.basis.col_block(0, d - m);
    basis.u2 = eig.basis.col_block(d - m, m);
    // U is orthogonal, so the full selection is exactly the identity.
    basis.projector = m == d ? Matrix::identity(d) : matmul_nt(basis.u2, basis.u2);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            const double avg = 0.5 * (basis.projector(i, j) + basis.projector(j, i));
            basis.projector(i, j) = avg;
            basis.projector(j, i) = avg;
        }

    double total = 0.0;
    double selected = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double v = std::max(0.0, eig.values[i]);
        total += v;
        if (i >= d - m) selected += v;
    }
    if (m == d) {
        basis.residual_ratio = 1.0;
    } else {
        basis.residual_ratio = total > 0.0 ? std::clamp(selected / total, 0.0, 1.0) : 0.0;
    }
    return basis;
}

Matrix project_update(const Matrix& candidate, const NullSpaceBasis& basis) {
    if (candidate.cols() != basis.dim())
        throw_invalid("project_update: candidate width does not match basis dimension");
    if (basis.selected() == basis.dim()) return candidate;
    return matmul(candidate, basis.projector);
}

std::vector<ResidualRatioEntry> residual_ratio_report(std::span<const NullSpaceBasis> bases) {
    std::vector<ResidualRatioEntry> out;
    out.reserve(bases.size());
    for (const auto& b : bases) out.push_back({b.layer_index, b.residual_ratio});
    return out;
}

NullSpaceBasis build_null_basis(const Matrix& prompt_layer, double gamma_percent,
                                int layer_index) {
    return select_null_basis(eigendecompose(uncentered_covariance(prompt_layer)), gamma_percent,
                             layer_index);
}

}  // namespace fednull
