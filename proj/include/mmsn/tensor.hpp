// mmsn/tensor.hpp — dense row-major 64-bit float matrix, the one array type
// used by the plain numeric code and the autodiff tape alike.
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "mmsn/errors.hpp"
#include "mmsn/rng.hpp"

namespace mmsn {

class Tensor {
public:
    Tensor() = default;

    Tensor(int rows, int cols) : rows_(rows), cols_(cols) {
        if (rows <= 0 || cols <= 0)
            throw ContractError("Tensor: shape must be positive, got " + std::to_string(rows) +
                                "x" + std::to_string(cols));
        data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    }

    static Tensor zeros(int rows, int cols) { return Tensor(rows, cols); }

    static Tensor full(int rows, int cols, double v) {
        Tensor t(rows, cols);
        for (double& x : t.data_) x = v;
        return t;
    }

    static Tensor eye(int n) {
        Tensor t(n, n);
        for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        int r = static_cast<int>(rows.size());
        int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
        Tensor t(r, c);
        int i = 0;
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != c)
                throw ContractError("Tensor::from_rows: ragged rows");
            int j = 0;
            for (double v : row) t.at(i, j++) = v;
            ++i;
        }
        return t;
    }

    static Tensor row_vector(const std::vector<double>& v) {
        Tensor t(1, static_cast<int>(v.size()));
        t.data_ = v;
        return t;
    }

    static Tensor uniform(int rows, int cols, double lo, double hi, Rng& rng) {
        Tensor t(rows, cols);
        for (double& x : t.data_) x = rng.uniform(lo, hi);
        return t;
    }

    static Tensor normal(int rows, int cols, double stddev, Rng& rng) {
        Tensor t(rows, cols);
        for (double& x : t.data_) x = stddev * rng.normal();
        return t;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int size() const { return rows_ * cols_; }
    bool empty() const { return data_.empty(); }
    std::vector<int> shape() const { return {rows_, cols_}; }

    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool is_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ContractError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                            b.shape_str());
}

// ---- value-level matrix ops (used by plain code paths and as op kernels) ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw ContractError("matmul: inner dims differ, " + a.shape_str() + " * " + b.shape_str());
    Tensor c(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        for (int k = 0; k < a.cols(); ++k) {
            double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols(); ++j) c.at(i, j) += aik * b.at(k, j);
        }
    }
    return c;
}

// a^T * b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows())
        throw ContractError("matmul_tn: inner dims differ, " + a.shape_str() + " ^T * " +
                            b.shape_str());
    Tensor c(a.cols(), b.cols());
    for (int k = 0; k < a.rows(); ++k)
        for (int i = 0; i < a.cols(); ++i) {
            double aki = a.at(k, i);
            if (aki == 0.0) continue;
            for (int j = 0; j < b.cols(); ++j) c.at(i, j) += aki * b.at(k, j);
        }
    return c;
}

// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols())
        throw ContractError("matmul_nt: inner dims differ, " + a.shape_str() + " * " +
                            b.shape_str() + "^T");
    Tensor c(a.rows(), b.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(j, k);
            c.at(i, j) = s;
        }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    Tensor c(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) c.at(j, i) = a.at(i, j);
    return c;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor c = a;
    for (int i = 0; i < c.size(); ++i) c[i] += b[i];
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor c = a;
    for (int i = 0; i < c.size(); ++i) c[i] -= b[i];
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c = a;
    for (int i = 0; i < c.size(); ++i) c[i] *= s;
    return c;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "hadamard");
    Tensor c = a;
    for (int i = 0; i < c.size(); ++i) c[i] *= b[i];
    return c;
}

inline double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double s = 0.0;
    for (int i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(const Tensor& a) { return dot(a, a); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (int i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Sum of the rows as vectors: n x m -> 1 x m.
inline Tensor sum_rows(const Tensor& a) {
    Tensor c(1, a.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) c.at(0, j) += a.at(i, j);
    return c;
}

inline Tensor get_row(const Tensor& a, int r) {
    if (r < 0 || r >= a.rows()) throw ContractError("get_row: index out of range");
    Tensor c(1, a.cols());
    for (int j = 0; j < a.cols(); ++j) c.at(0, j) = a.at(r, j);
    return c;
}

inline void set_row(Tensor& a, int r, const Tensor& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ContractError("set_row: shape mismatch");
    for (int j = 0; j < a.cols(); ++j) a.at(r, j) = row.at(0, j);
}

inline void add_to_row(Tensor& a, int r, const Tensor& row) {
    if (row.rows() != 1 || row.cols() != a.cols())
        throw ContractError("add_to_row: shape mismatch");
    for (int j = 0; j < a.cols(); ++j) a.at(r, j) += row.at(0, j);
}

inline Tensor kron(const Tensor& a, const Tensor& b) {
    Tensor c(a.rows() * b.rows(), a.cols() * b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) {
            double aij = a.at(i, j);
            for (int p = 0; p < b.rows(); ++p)
                for (int q = 0; q < b.cols(); ++q)
                    c.at(i * b.rows() + p, j * b.cols() + q) = aij * b.at(p, q);
        }
    return c;
}

}  // namespace mmsn
