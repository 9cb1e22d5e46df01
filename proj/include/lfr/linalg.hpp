#pragma once

// Small dense kernels shared by the parametrizations: spectral norms, the
// (generalized) Cayley transform and inverses. Every routine that participates
// in training is templated on the scalar so that it can be recorded on a Tape.

#include "lfr/diff.hpp"
#include "lfr/types.hpp"

namespace lfr {

inline constexpr double kSingularRcond = 1e-12;

/// Largest singular value, from the symmetric eigen-decomposition of M^T M
/// (or M M^T, whichever is smaller).
double spectral_norm_exact(const Matrix& m);

/// Top right singular vector of `m` (unit norm); used for norm derivatives.
Vector top_right_singular_vector(const Matrix& m);

/// Power-iteration estimate of the spectral norm from the normalized all-ones
/// start vector. Non-decreasing in `iters` and never above the exact norm.
double spectral_norm_diff(const Matrix& m, int iters);

/// Recorded exact spectral norm. Partial derivatives are u1 v1^T.
Var spectral_norm_exact(const MatrixX<Var>& m);
/// Recorded power-iteration surrogate: ||M v|| with v frozen at the iterate.
Var spectral_norm_diff(const MatrixX<Var>& m, int iters);

/// A^{-1}; throws SingularityError when the reciprocal condition estimate is
/// below kSingularRcond.
Matrix inverse(const Matrix& a);
MatrixX<Var> inverse(const MatrixX<Var>& a);

/// (I - N)(I + N)^{-1}
template <typename Scalar>
MatrixX<Scalar> cayley_square(const MatrixX<Scalar>& n) {
    if (n.rows() != n.cols()) throw InvalidInputError("cayley_square: matrix must be square");
    const MatrixX<Scalar> eye = MatrixX<Scalar>::Identity(n.rows(), n.cols());
    const MatrixX<Scalar> inv = inverse(MatrixX<Scalar>(eye + n));
    return (eye - n) * inv;
}

/// Free variables of the generalized Cayley transform producing an n x m
/// matrix (n >= m) with spectral norm strictly below one.
template <typename Scalar>
struct CayleyFree {
    MatrixX<Scalar> x;  // m x m
    MatrixX<Scalar> y;  // m x m
    MatrixX<Scalar> z;  // (n - m) x m
    double eps = 1e-4;

    Index m() const { return x.rows(); }
    Index n() const { return x.rows() + z.rows(); }
};

template <typename Scalar>
void validate(const CayleyFree<Scalar>& f) {
    const Index m = f.x.rows();
    if (m < 1 || f.x.cols() != m || f.y.rows() != m || f.y.cols() != m)
        throw InvalidInputError("CayleyFree: X and Y must be square with matching size");
    if (f.z.cols() != m && f.z.rows() > 0) throw InvalidInputError("CayleyFree: Z must have m columns");
    if (!(f.eps > 0.0)) throw InvalidInputError("CayleyFree: eps must be positive");
}

/// [Cayley(N); -2 Z (I + N)^{-1}] with N = X^T X + (Y - Y^T) + Z^T Z + eps I.
template <typename Scalar>
MatrixX<Scalar> cayley_general(const CayleyFree<Scalar>& f) {
    validate(f);
    const Index m = f.m();
    const MatrixX<Scalar> eye = MatrixX<Scalar>::Identity(m, m);
    MatrixX<Scalar> n = f.x.transpose() * f.x + (f.y - f.y.transpose());
    if (f.z.rows() > 0) n += f.z.transpose() * f.z;
    n += Scalar(f.eps) * eye;

    MatrixX<Scalar> inv;
    try {
        inv = inverse(MatrixX<Scalar>(eye + n));
    } catch (const SingularityError& e) {
        // N + N^T >= 2 eps I rules this out; reaching it is an internal error.
        throw SingularityError(std::string("internal: I + N singular in generalized Cayley transform: ") + e.what());
    }
    MatrixX<Scalar> out(f.n(), m);
    out.topRows(m) = (eye - n) * inv;
    if (f.z.rows() > 0) out.bottomRows(f.z.rows()) = Scalar(-2.0) * f.z * inv;
    return out;
}

}  // namespace lfr
