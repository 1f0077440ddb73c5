#include "smedit/matrix.hpp"

#include <cmath>
#include <cstring>
#include <string>

namespace smedit {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(int rows, int cols)
    : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, real_t(0)) {
    if (rows < 0 || cols < 0) {
        throw_error(ErrorKind::shape, "negative matrix dimension");
    }
}

Matrix::Matrix(int rows, int cols, std::vector<real_t> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows < 0 || cols < 0 ||
        data_.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
        throw_error(ErrorKind::shape, "matrix data length does not match " + shape_str(*this));
    }
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = real_t(1);
    return m;
}

Matrix Matrix::filled(int rows, int cols, real_t value) {
    Matrix m(rows, cols);
    m.fill(value);
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<real_t>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    Matrix m(r, c);
    int i = 0;
    for (const auto& row : rows) {
        if (static_cast<int>(row.size()) != c) {
            throw_error(ErrorKind::shape, "ragged initializer rows");
        }
        int j = 0;
        for (real_t v : row) m.at(i, j++) = v;
        ++i;
    }
    return m;
}

Matrix Matrix::scalar(real_t value) {
    Matrix m(1, 1);
    m.at(0, 0) = value;
    return m;
}

bool Matrix::all_finite() const noexcept {
    for (real_t v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Matrix::fill(real_t value) {
    for (real_t& v : data_) v = value;
}

void Matrix::add_scaled(const Matrix& other, real_t s) {
    if (!same_shape(other)) {
        throw_error(ErrorKind::shape, "add_scaled shape mismatch " + shape_str(*this) + " vs " + shape_str(other));
    }
    const real_t* src = other.data();
    real_t* dst = data();
    for (std::size_t i = 0; i < size(); ++i) dst[i] += s * src[i];
}

Matrix matmul(const Matrix& a, const Matrix& b, bool trans_a, bool trans_b) {
    const int m = trans_a ? a.cols() : a.rows();
    const int k = trans_a ? a.rows() : a.cols();
    const int kb = trans_b ? b.cols() : b.rows();
    const int n = trans_b ? b.rows() : b.cols();
    if (k != kb) {
        throw_error(ErrorKind::shape, "matmul inner dimension mismatch: " + shape_str(a) +
                                          (trans_a ? "^T" : "") + " * " + shape_str(b) +
                                          (trans_b ? "^T" : ""));
    }
    Matrix out(m, n);
    if (m == 0 || n == 0 || k == 0) return out;

    if (!trans_a && !trans_b) {
        // out[i][j] += a[i][p] * b[p][j], p inner over contiguous b rows
        for (int i = 0; i < m; ++i) {
            const real_t* arow = a.row(i);
            real_t* orow = out.row(i);
            for (int p = 0; p < k; ++p) {
                const real_t av = arow[p];
                if (av == real_t(0)) continue;
                const real_t* brow = b.row(p);
                for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // out[i][j] = dot(a.row(i), b.row(j))
        for (int i = 0; i < m; ++i) {
            const real_t* arow = a.row(i);
            real_t* orow = out.row(i);
            for (int j = 0; j < n; ++j) {
                const real_t* brow = b.row(j);
                real_t acc = 0;
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                orow[j] = acc;
            }
        }
    } else if (trans_a && !trans_b) {
        // out[i][j] += a[p][i] * b[p][j]
        for (int p = 0; p < k; ++p) {
            const real_t* arow = a.row(p);
            const real_t* brow = b.row(p);
            for (int i = 0; i < m; ++i) {
                const real_t av = arow[i];
                if (av == real_t(0)) continue;
                real_t* orow = out.row(i);
                for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    } else {
        // rare in hot paths; reuse the NN kernel on swapped operands
        Matrix tmp = matmul(b, a, false, false);
        out = transpose(tmp);
    }
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw_error(ErrorKind::shape, "add shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    Matrix out = a;
    out.add_scaled(b, real_t(1));
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw_error(ErrorKind::shape, "sub shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    Matrix out = a;
    out.add_scaled(b, real_t(-1));
    return out;
}

Matrix scale(const Matrix& a, real_t s) {
    Matrix out = a;
    real_t* d = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) d[i] *= s;
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw_error(ErrorKind::shape, "hadamard shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    Matrix out = a;
    real_t* d = out.data();
    const real_t* s = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) d[i] *= s[i];
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    }
    return out;
}

real_t sum(const Matrix& a) {
    real_t acc = 0;
    const real_t* d = a.data();
    for (std::size_t i = 0; i < a.size(); ++i) acc += d[i];
    return acc;
}

real_t dot(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw_error(ErrorKind::shape, "dot shape mismatch");
    }
    real_t acc = 0;
    const real_t* x = a.data();
    const real_t* y = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) acc += x[i] * y[i];
    return acc;
}

real_t squared_frobenius(const Matrix& a) {
    real_t acc = 0;
    const real_t* d = a.data();
    for (std::size_t i = 0; i < a.size(); ++i) acc += d[i] * d[i];
    return acc;
}

real_t frobenius_norm(const Matrix& a) { return std::sqrt(squared_frobenius(a)); }

real_t relative_frobenius_error(const Matrix& a, const Matrix& b, real_t floor) {
    if (!a.same_shape(b)) {
        throw_error(ErrorKind::shape, "relative_frobenius_error shape mismatch");
    }
    real_t num = 0;
    const real_t* x = a.data();
    const real_t* y = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const real_t d = x[i] - y[i];
        num += d * d;
    }
    const real_t den = frobenius_norm(b);
    return std::sqrt(num) / (den > floor ? den : floor);
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) return false;
    if (a.size() == 0) return true;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(real_t)) == 0;
}

Matrix cholesky_factor(const Matrix& spd) {
    if (spd.rows() != spd.cols()) {
        throw_error(ErrorKind::shape, "cholesky_factor requires a square matrix");
    }
    const int n = spd.rows();
    Matrix lower(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            real_t acc = spd.at(i, j);
            for (int p = 0; p < j; ++p) acc -= lower.at(i, p) * lower.at(j, p);
            if (i == j) {
                if (!(acc > real_t(0)) || !std::isfinite(acc)) {
                    throw_error(ErrorKind::numeric, "cholesky breakdown: matrix not positive definite");
                }
                lower.at(i, i) = std::sqrt(acc);
            } else {
                lower.at(i, j) = acc / lower.at(j, j);
            }
        }
    }
    return lower;
}

RidgeSolution ridge_solve_rows(const Matrix& d_rows, const Matrix& u_rows, real_t lambda) {
    if (d_rows.rows() != u_rows.rows()) {
        throw_error(ErrorKind::shape, "ridge_solve_rows: operand row counts differ");
    }
    if (!(lambda > real_t(0)) || !std::isfinite(lambda)) {
        throw_error(ErrorKind::numeric, "ridge_solve_rows: lambda must be positive and finite");
    }
    if (!d_rows.all_finite() || !u_rows.all_finite()) {
        throw_error(ErrorKind::numeric, "ridge_solve_rows: non-finite operand");
    }
    const int d = u_rows.cols();
    Matrix gram = matmul(u_rows, u_rows, true, false);
    for (int i = 0; i < d; ++i) gram.at(i, i) += lambda;
    RidgeSolution out;
    out.lower = cholesky_factor(gram);
    Matrix cross = matmul(d_rows, u_rows, true, false);     // d' x d
    Matrix solved = cholesky_solve(out.lower, transpose(cross));
    out.delta = transpose(solved);
    return out;
}

Matrix cholesky_solve(const Matrix& lower, const Matrix& rhs) {
    const int n = lower.rows();
    if (lower.cols() != n || rhs.rows() != n) {
        throw_error(ErrorKind::shape, "cholesky_solve shape mismatch");
    }
    Matrix x = rhs;
    const int m = rhs.cols();
    // forward substitution: L y = rhs
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < m; ++c) {
            real_t acc = x.at(i, c);
            for (int p = 0; p < i; ++p) acc -= lower.at(i, p) * x.at(p, c);
            x.at(i, c) = acc / lower.at(i, i);
        }
    }
    // back substitution: L^T x = y
    for (int i = n - 1; i >= 0; --i) {
        for (int c = 0; c < m; ++c) {
            real_t acc = x.at(i, c);
            for (int p = i + 1; p < n; ++p) acc -= lower.at(p, i) * x.at(p, c);
            x.at(i, c) = acc / lower.at(i, i);
        }
    }
    return x;
}

}  // namespace smedit
