// mmsn/linalg.hpp — small dense linear algebra: symmetric eigensolver
// (cyclic Jacobi), clamped inverse square root, SPD solve.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mmsn/errors.hpp"
#include "mmsn/tensor.hpp"

namespace mmsn {

struct SymEig {
    std::vector<double> values;  // ascending
    Tensor vectors;              // columns are eigenvectors, same order
};

// Cyclic Jacobi rotations. Deterministic, adequate for the matrix sizes the
// engine meets (stalk blocks and latent-graph Laplacians).
inline SymEig sym_eig(const Tensor& a, int max_sweeps = 100) {
    if (a.rows() != a.cols()) throw ContractError("sym_eig: matrix not square");
    const int n = a.rows();
    double asym = 0.0, scale = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            asym = std::max(asym, std::abs(a.at(i, j) - a.at(j, i)));
            scale = std::max(scale, std::abs(a.at(i, j)));
        }
    if (asym > 1e-9 * std::max(1.0, scale))
        throw ContractError("sym_eig: matrix not symmetric");

    Tensor m = a;
    Tensor q = Tensor::eye(n);
    const double tol = 1e-14 * std::max(1.0, scale);
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int r = p + 1; r < n; ++r) off = std::max(off, std::abs(m.at(p, r)));
        if (off <= tol) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int r = p + 1; r < n; ++r) {
                double apq = m.at(p, r);
                if (std::abs(apq) <= tol) continue;
                double app = m.at(p, p), aqq = m.at(r, r);
                double theta = 0.5 * (aqq - app) / apq;
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int k = 0; k < n; ++k) {
                    double mkp = m.at(k, p), mkq = m.at(k, r);
                    m.at(k, p) = c * mkp - s * mkq;
                    m.at(k, r) = s * mkp + c * mkq;
                }
                for (int k = 0; k < n; ++k) {
                    double mpk = m.at(p, k), mqk = m.at(r, k);
                    m.at(p, k) = c * mpk - s * mqk;
                    m.at(r, k) = s * mpk + c * mqk;
                }
                for (int k = 0; k < n; ++k) {
                    double qkp = q.at(k, p), qkq = q.at(k, r);
                    q.at(k, p) = c * qkp - s * qkq;
                    q.at(k, r) = s * qkp + c * qkq;
                }
            }
        }
    }

    SymEig out;
    out.values.resize(n);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> diag(n);
    for (int i = 0; i < n; ++i) diag[i] = m.at(i, i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return diag[i] < diag[j]; });
    out.vectors = Tensor(n, n);
    for (int j = 0; j < n; ++j) {
        out.values[j] = diag[order[j]];
        for (int i = 0; i < n; ++i) out.vectors.at(i, j) = q.at(i, order[j]);
    }
    return out;
}

inline std::vector<double> sym_eigenvalues(const Tensor& a) { return sym_eig(a).values; }

// Q * diag(max(lambda, eps))^{-1/2} * Q^T for a symmetric PSD input. The
// clamp keeps singular degree blocks (isolated nodes) finite.
inline Tensor sym_invsqrt(const Tensor& a, double eps) {
    if (eps <= 0.0) throw ContractError("sym_invsqrt: eps must be positive");
    SymEig eig = sym_eig(a);
    const int n = a.rows();
    Tensor out(n, n);
    for (int k = 0; k < n; ++k) {
        double f = 1.0 / std::sqrt(std::max(eig.values[k], eps));
        for (int i = 0; i < n; ++i) {
            double qik = eig.vectors.at(i, k) * f;
            for (int j = 0; j < n; ++j) out.at(i, j) += qik * eig.vectors.at(j, k);
        }
    }
    return out;
}

// Cholesky solve for SPD systems; used by least-squares helpers in the
// synthetic-data checks.
inline Tensor spd_solve(const Tensor& a, const Tensor& b) {
    if (a.rows() != a.cols()) throw ContractError("spd_solve: matrix not square");
    if (a.rows() != b.rows()) throw ContractError("spd_solve: rhs rows mismatch");
    const int n = a.rows();
    Tensor l(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a.at(i, j);
            for (int k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
            if (i == j) {
                if (s <= 0.0) throw NumericError("spd_solve: matrix not positive definite");
                l.at(i, i) = std::sqrt(s);
            } else {
                l.at(i, j) = s / l.at(j, j);
            }
        }
    }
    Tensor x = b;
    for (int c = 0; c < b.cols(); ++c) {
        for (int i = 0; i < n; ++i) {
            double s = x.at(i, c);
            for (int k = 0; k < i; ++k) s -= l.at(i, k) * x.at(k, c);
            x.at(i, c) = s / l.at(i, i);
        }
        for (int i = n - 1; i >= 0; --i) {
            double s = x.at(i, c);
            for (int k = i + 1; k < n; ++k) s -= l.at(k, i) * x.at(k, c);
            x.at(i, c) = s / l.at(i, i);
        }
    }
    return x;
}

// Ridge-regularized least squares: argmin_W |X W - Y|^2 + ridge |W|^2.
inline Tensor least_squares(const Tensor& x, const Tensor& y, double ridge = 1e-10) {
    Tensor gram = matmul_tn(x, x);
    for (int i = 0; i < gram.rows(); ++i) gram.at(i, i) += ridge;
    return spd_solve(gram, matmul_tn(x, y));
}

// Glorot-style uniform init, the default for every weight matrix.
inline Tensor glorot_uniform(int fan_in, int fan_out, Rng& rng) {
    double a = std::sqrt(6.0 / (fan_in + fan_out));
    return Tensor::uniform(fan_in, fan_out, -a, a, rng);
}

}  // namespace mmsn
