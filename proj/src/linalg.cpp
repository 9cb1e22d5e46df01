#include "lfr/linalg.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <vector>

namespace lfr {

namespace {

void require_finite(const Eigen::Ref<const Matrix>& m, const char* what) {
    if (!m.allFinite()) throw InvalidInputError(std::string(what) + ": non-finite entries");
}

}  // namespace

double spectral_norm_exact(const Matrix& m) {
    require_finite(m, "spectral_norm_exact");
    if (m.size() == 0) return 0.0;
    const Matrix gram = m.cols() <= m.rows() ? Matrix(m.transpose() * m) : Matrix(m * m.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram, Eigen::EigenvaluesOnly);
    const double lmax = es.eigenvalues().maxCoeff();
    return std::sqrt(std::max(lmax, 0.0));
}

Vector top_right_singular_vector(const Matrix& m) {
    const Matrix gram = m.transpose() * m;
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
    return es.eigenvectors().col(gram.cols() - 1);
}

double spectral_norm_diff(const Matrix& m, int iters) {
    if (iters < 1) throw InvalidInputError("spectral_norm_diff: iters must be >= 1");
    const Index n = m.cols();
    Vector v = Vector::Ones(n) / std::sqrt(static_cast<double>(n));
    for (int k = 0; k < iters; ++k) {
        const Vector w = m.transpose() * (m * v);
        const double nw = w.norm();
        if (nw == 0.0) return 0.0;
        v = w / nw;
    }
    return (m * v).norm();
}

Var spectral_norm_exact(const MatrixX<Var>& m) {
    const Matrix mv = values(m);
    const double s = spectral_norm_exact(mv);
    Tape* tape = nullptr;
    for (Index i = 0; i < m.size() && !tape; ++i) tape = m.data()[i].tape;
    if (!tape) return Var(s);
    std::vector<Var> args(m.data(), m.data() + m.size());
    std::vector<double> partials(args.size(), 0.0);
    if (s > 0.0) {
        const Vector v = top_right_singular_vector(mv);
        const Vector u = mv * v / s;
        for (Index j = 0; j < m.cols(); ++j)
            for (Index i = 0; i < m.rows(); ++i)
                partials[static_cast<std::size_t>(i + j * m.rows())] = u(i) * v(j);
    }
    return tape->record(Op::SpectralNorm, s, args, partials);
}

Var spectral_norm_diff(const MatrixX<Var>& m, int iters) {
    if (iters < 1) throw InvalidInputError("spectral_norm_diff: iters must be >= 1");
    const Matrix mv = values(m);
    const Index n = mv.cols();
    Vector v = Vector::Ones(n) / std::sqrt(static_cast<double>(n));
    bool zero = false;
    for (int k = 0; k < iters; ++k) {
        const Vector w = mv.transpose() * (mv * v);
        const double nw = w.norm();
        if (nw == 0.0) {
            zero = true;
            break;
        }
        v = w / nw;
    }
    const Vector mvv = mv * v;
    const double s = zero ? 0.0 : mvv.norm();
    Tape* tape = nullptr;
    for (Index i = 0; i < m.size() && !tape; ++i) tape = m.data()[i].tape;
    if (!tape) return Var(s);
    std::vector<Var> args(m.data(), m.data() + m.size());
    std::vector<double> partials(args.size(), 0.0);
    if (s > 0.0) {
        const Vector u = mvv / s;
        for (Index j = 0; j < m.cols(); ++j)
            for (Index i = 0; i < m.rows(); ++i)
                partials[static_cast<std::size_t>(i + j * m.rows())] = u(i) * v(j);
    }
    return tape->record(Op::SpectralNorm, s, args, partials);
}

Matrix inverse(const Matrix& a) {
    if (a.rows() != a.cols()) throw InvalidInputError("inverse: matrix must be square");
    require_finite(a, "inverse");
    Eigen::PartialPivLU<Matrix> lu(a);
    const double rcond = lu.rcond();
    if (!(rcond >= kSingularRcond))
        throw SingularityError("matrix is numerically singular (rcond " + std::to_string(rcond) + ")");
    return lu.inverse();
}

MatrixX<Var> inverse(const MatrixX<Var>& a) {
    const Index n = a.rows();
    const Matrix inv = inverse(values(a));
    Tape* tape = nullptr;
    for (Index i = 0; i < a.size() && !tape; ++i) tape = a.data()[i].tape;
    if (!tape) return inv.cast<Var>();

    // d(A^{-1})_{ij} / dA_{kl} = -(A^{-1})_{ik} (A^{-1})_{lj}
    std::vector<Var> args(a.data(), a.data() + a.size());
    std::vector<double> partials(args.size());
    MatrixX<Var> out(n, n);
    for (Index j = 0; j < n; ++j) {
        for (Index i = 0; i < n; ++i) {
            for (Index l = 0; l < n; ++l)
                for (Index k = 0; k < n; ++k)
                    partials[static_cast<std::size_t>(k + l * n)] = -inv(i, k) * inv(l, j);
            out(i, j) = tape->record(Op::Solve, inv(i, j), args, partials);
        }
    }
    return out;
}

}  // namespace lfr
