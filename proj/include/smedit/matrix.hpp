#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "smedit/errors.hpp"

namespace smedit {

#ifdef SMEDIT_SINGLE_PRECISION
using real_t = float;
#else
using real_t = double;
#endif

// Dense row-major matrix. Scalars are represented as 1x1 matrices
// throughout the tape machinery.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols);
    Matrix(int rows, int cols, std::vector<real_t> data);

    static Matrix identity(int n);
    static Matrix filled(int rows, int cols, real_t value);
    static Matrix from_rows(std::initializer_list<std::initializer_list<real_t>> rows);
    static Matrix scalar(real_t value);

    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    real_t& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    real_t at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    real_t* data() noexcept { return data_.data(); }
    const real_t* data() const noexcept { return data_.data(); }
    real_t* row(int r) noexcept { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    const real_t* row(int r) const noexcept { return data_.data() + static_cast<std::size_t>(r) * cols_; }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    bool all_finite() const noexcept;

    void fill(real_t value);
    // this += scale * other
    void add_scaled(const Matrix& other, real_t scale);

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<real_t> data_;
};

// out = op_a(a) * op_b(b) with op = transpose when the flag is set.
Matrix matmul(const Matrix& a, const Matrix& b, bool trans_a = false, bool trans_b = false);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, real_t s);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

real_t sum(const Matrix& a);
real_t dot(const Matrix& a, const Matrix& b);
real_t squared_frobenius(const Matrix& a);
real_t frobenius_norm(const Matrix& a);
// ||a - b||_F / max(||b||_F, floor)
real_t relative_frobenius_error(const Matrix& a, const Matrix& b, real_t floor = 1e-300);
bool bitwise_equal(const Matrix& a, const Matrix& b);

// Cholesky factorization of a symmetric positive-definite matrix; returns
// the lower factor L with A = L L^T. Throws a numeric error on breakdown.
Matrix cholesky_factor(const Matrix& spd);
// Solves A X = rhs given the lower factor of A.
Matrix cholesky_solve(const Matrix& lower, const Matrix& rhs);

// Ridge least squares with row-major operands: given d_rows (K x d'),
// u_rows (K x d) and lambda > 0, delta is the d' x d minimizer of
// ||X u_rows^T - d_rows^T||_F^2 + lambda ||X||_F^2, solved via the SPD
// normal equations (never an explicit inverse). The factor is kept for
// reverse-mode use.
struct RidgeSolution {
    Matrix delta;
    Matrix lower;  // cholesky factor of u_rows^T u_rows + lambda I
};
RidgeSolution ridge_solve_rows(const Matrix& d_rows, const Matrix& u_rows, real_t lambda);

}  // namespace smedit
