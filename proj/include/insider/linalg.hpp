#pragma once

// Grid operators: a tridiagonal core plus an optional dense block for nonlocal
// (jump) terms, with the matching direct solvers.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "insider/error.hpp"

namespace insider {

class GridMatrix {
public:
    GridMatrix() = default;
    explicit GridMatrix(std::size_t n) : n_(n), lower_(n, 0.0), diag_(n, 0.0), upper_(n, 0.0) {}

    std::size_t size() const { return n_; }

    // lower(i) multiplies entry i-1 in row i, upper(i) entry i+1.
    double& lower(std::size_t i) { return lower_[i]; }
    double& diag(std::size_t i) { return diag_[i]; }
    double& upper(std::size_t i) { return upper_[i]; }
    double lower(std::size_t i) const { return lower_[i]; }
    double diag(std::size_t i) const { return diag_[i]; }
    double upper(std::size_t i) const { return upper_[i]; }

    bool has_dense() const { return dense_.has_value(); }
    /// Dense block (row-major), created on first use; added to the banded part.
    double& dense(std::size_t i, std::size_t j) {
        if (!dense_) dense_.emplace(n_ * n_, 0.0);
        return (*dense_)[i * n_ + j];
    }
    double dense(std::size_t i, std::size_t j) const { return dense_ ? (*dense_)[i * n_ + j] : 0.0; }

    double entry(std::size_t i, std::size_t j) const {
        double v = dense(i, j);
        if (i == j) v += diag_[i];
        else if (j + 1 == i) v += lower_[i];
        else if (i + 1 == j) v += upper_[i];
        return v;
    }

    void apply(std::span<const double> x, std::span<double> out) const {
        if (x.size() != n_ || out.size() != n_) throw std::invalid_argument("GridMatrix::apply: size mismatch");
        for (std::size_t i = 0; i < n_; ++i) {
            double s = diag_[i] * x[i];
            if (i > 0) s += lower_[i] * x[i - 1];
            if (i + 1 < n_) s += upper_[i] * x[i + 1];
            out[i] = s;
        }
        if (dense_) {
            for (std::size_t i = 0; i < n_; ++i) {
                double s = 0.0;
                const double* row = dense_->data() + i * n_;
                for (std::size_t j = 0; j < n_; ++j) s += row[j] * x[j];
                out[i] += s;
            }
        }
    }

    std::vector<double> apply(std::span<const double> x) const {
        std::vector<double> out(n_);
        apply(x, out);
        return out;
    }

    GridMatrix transposed() const {
        GridMatrix t(n_);
        for (std::size_t i = 0; i < n_; ++i) {
            t.diag_[i] = diag_[i];
            if (i + 1 < n_) t.lower_[i + 1] = upper_[i];
            if (i > 0) t.upper_[i - 1] = lower_[i];
        }
        if (dense_) {
            t.dense_.emplace(n_ * n_, 0.0);
            for (std::size_t i = 0; i < n_; ++i)
                for (std::size_t j = 0; j < n_; ++j) (*t.dense_)[j * n_ + i] = (*dense_)[i * n_ + j];
        }
        return t;
    }

    /// I - scale * A, with rows listed in `identity_rows` replaced by identity rows.
    GridMatrix implicit_system(double scale, std::span<const std::size_t> identity_rows = {}) const {
        GridMatrix m(n_);
        for (std::size_t i = 0; i < n_; ++i) {
            m.lower_[i] = -scale * lower_[i];
            m.diag_[i] = 1.0 - scale * diag_[i];
            m.upper_[i] = -scale * upper_[i];
        }
        if (dense_) {
            m.dense_.emplace(n_ * n_);
            for (std::size_t k = 0; k < n_ * n_; ++k) (*m.dense_)[k] = -scale * (*dense_)[k];
        }
        for (std::size_t r : identity_rows) m.set_identity_row(r);
        return m;
    }

    void set_identity_row(std::size_t r) {
        lower_[r] = 0.0;
        upper_[r] = 0.0;
        diag_[r] = 1.0;
        if (dense_)
            for (std::size_t j = 0; j < n_; ++j) (*dense_)[r * n_ + j] = 0.0;
    }

    void zero_row(std::size_t r) {
        lower_[r] = upper_[r] = diag_[r] = 0.0;
        if (dense_)
            for (std::size_t j = 0; j < n_; ++j) (*dense_)[r * n_ + j] = 0.0;
    }

private:
    std::size_t n_ = 0;
    std::vector<double> lower_, diag_, upper_;
    std::optional<std::vector<double>> dense_;
};

/// Factorization of a GridMatrix: Thomas algorithm for the tridiagonal case,
/// partial-pivoting LU once a dense block is present.
class GridSolver {
public:
    explicit GridSolver(const GridMatrix& m) : n_(m.size()) {
        if (m.has_dense()) factor_dense(m);
        else factor_tridiagonal(m);
    }

    std::vector<double> solve(std::span<const double> rhs) const {
        if (rhs.size() != n_) throw std::invalid_argument("GridSolver::solve: size mismatch");
        std::vector<double> x(rhs.begin(), rhs.end());
        if (dense_) solve_dense(x);
        else solve_tridiagonal(x);
        return x;
    }

private:
    void factor_tridiagonal(const GridMatrix& m) {
        lower_.resize(n_);
        upper_.resize(n_);
        inv_pivot_.resize(n_);
        double prev_upper = 0.0;
        double prev_inv = 0.0;
        for (std::size_t i = 0; i < n_; ++i) {
            const double l = i > 0 ? m.lower(i) : 0.0;
            const double pivot = m.diag(i) - l * prev_upper * prev_inv;
            if (!(std::abs(pivot) > 1e-300) || !std::isfinite(pivot))
                throw LinearSolveFailure("tridiagonal system is singular at row " + std::to_string(i));
            lower_[i] = l;
            inv_pivot_[i] = 1.0 / pivot;
            upper_[i] = i + 1 < n_ ? m.upper(i) : 0.0;
            prev_upper = upper_[i];
            prev_inv = inv_pivot_[i];
        }
    }

    void solve_tridiagonal(std::vector<double>& x) const {
        for (std::size_t i = 0; i < n_; ++i) {
            if (i > 0) x[i] -= lower_[i] * x[i - 1] * inv_pivot_[i - 1];
        }
        for (std::size_t i = n_; i-- > 0;) {
            double v = x[i];
            if (i + 1 < n_) v -= upper_[i] * x[i + 1];
            x[i] = v * inv_pivot_[i];
        }
    }

    void factor_dense(const GridMatrix& m) {
        dense_.emplace(n_ * n_);
        auto& a = *dense_;
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = 0; j < n_; ++j) a[i * n_ + j] = m.entry(i, j);
        perm_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
        for (std::size_t k = 0; k < n_; ++k) {
            std::size_t p = k;
            for (std::size_t i = k + 1; i < n_; ++i)
                if (std::abs(a[i * n_ + k]) > std::abs(a[p * n_ + k])) p = i;
            if (!(std::abs(a[p * n_ + k]) > 1e-300))
                throw LinearSolveFailure("dense system is singular at column " + std::to_string(k));
            if (p != k) {
                for (std::size_t j = 0; j < n_; ++j) std::swap(a[k * n_ + j], a[p * n_ + j]);
                std::swap(perm_[k], perm_[p]);
            }
            const double inv = 1.0 / a[k * n_ + k];
            for (std::size_t i = k + 1; i < n_; ++i) {
                const double f = a[i * n_ + k] * inv;
                a[i * n_ + k] = f;
                if (f == 0.0) continue;
                for (std::size_t j = k + 1; j < n_; ++j) a[i * n_ + j] -= f * a[k * n_ + j];
            }
        }
    }

    void solve_dense(std::vector<double>& x) const {
        const auto& a = *dense_;
        std::vector<double> y(n_);
        for (std::size_t i = 0; i < n_; ++i) y[i] = x[perm_[i]];
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = 0; j < i; ++j) y[i] -= a[i * n_ + j] * y[j];
        for (std::size_t i = n_; i-- > 0;) {
            for (std::size_t j = i + 1; j < n_; ++j) y[i] -= a[i * n_ + j] * y[j];
            y[i] /= a[i * n_ + i];
        }
        x = std::move(y);
    }

    std::size_t n_;
    std::vector<double> lower_, upper_, inv_pivot_;
    std::optional<std::vector<double>> dense_;
    std::vector<std::size_t> perm_;
};

}  // namespace insider
