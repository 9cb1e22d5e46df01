#include "lfr/optim.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace lfr;
using namespace lfr::testing;

namespace {

Objective quadratic_1d(double target) {
    return [target](const Vector& x, Vector& g) {
        g(0) = 2.0 * (x(0) - target);
        return (x(0) - target) * (x(0) - target);
    };
}

Objective rosenbrock() {
    return [](const Vector& x, Vector& g) {
        const double a = 1.0 - x(0), b = x(1) - x(0) * x(0);
        g(0) = -2.0 * a - 400.0 * x(0) * b;
        g(1) = 200.0 * b;
        return a * a + 100.0 * b * b;
    };
}

}  // namespace

TEST(Adam, Quadratic) {
    AdamOptions o;
    o.epochs = 500;
    o.lr = 0.1;
    const OptimResult r = adam_minimize(quadratic_1d(3.0), Vector::Zero(1), o);
    EXPECT_LT(std::abs(r.x(0) - 3.0), 1e-3);
}

TEST(Adam, ZeroEpochsIsIdentity) {
    AdamOptions o;
    o.epochs = 0;
    const Vector x0 = Vector::Constant(1, 0.7);
    EXPECT_EQ(adam_minimize(quadratic_1d(3.0), x0, o).x, x0);
}

TEST(Adam, Rosenbrock) {
    AdamOptions o;
    o.epochs = 5000;
    o.lr = 0.01;
    const OptimResult r = adam_minimize(rosenbrock(), Vector::Zero(2), o);
    EXPECT_LT(r.f, 1e-2);
}

TEST(Adam, RejectsNonFiniteAndAborts) {
    int calls = 0;
    Objective f = [&](const Vector& x, Vector& g) {
        ++calls;
        if (x(0) > 0.5) {
            g(0) = std::numeric_limits<double>::quiet_NaN();
            return std::numeric_limits<double>::quiet_NaN();
        }
        g(0) = -1.0;
        return -x(0);
    };
    AdamOptions o;
    o.epochs = 200;
    o.lr = 0.1;
    const OptimResult r = adam_minimize(f, Vector::Zero(1), o);
    EXPECT_GT(r.rejected, 0);
    EXPECT_TRUE(std::isfinite(r.f));
    EXPECT_LE(r.x(0), 0.5);

    Objective always_nan = [](const Vector&, Vector& g) {
        g.setConstant(std::numeric_limits<double>::quiet_NaN());
        return std::numeric_limits<double>::quiet_NaN();
    };
    const OptimResult bad = adam_minimize(always_nan, Vector::Zero(1), o);
    EXPECT_TRUE(bad.aborted);
}

TEST(Adam, ProjectsOntoBounds) {
    Bounds b = Bounds::unbounded(1);
    b.upper(0) = 1.0;
    AdamOptions o;
    o.epochs = 300;
    o.lr = 0.1;
    const OptimResult r = adam_minimize(quadratic_1d(3.0), Vector::Zero(1), o, &b);
    EXPECT_LE(r.x(0), 1.0);
    EXPECT_NEAR(r.x(0), 1.0, 1e-6);
}

TEST(Lbfgs, UnconstrainedQuadratic) {
    std::mt19937_64 rng(1);
    const Matrix m = random_matrix(rng, 10, 10);
    const Matrix h = m.transpose() * m + Matrix::Identity(10, 10);
    const Vector c = random_vector(rng, 10);
    Objective f = [&](const Vector& x, Vector& g) {
        g = h * x - c;
        return 0.5 * x.dot(h * x) - c.dot(x);
    };
    LbfgsOptions o;
    o.max_iters = 50;
    o.pgtol = 1e-13;
    o.ftol = 0.0;
    const OptimResult r = lbfgs_b_minimize(f, Vector::Zero(10), Bounds::unbounded(10), o);
    const Vector xs = h.ldlt().solve(c);
    EXPECT_LT((r.x - xs).norm(), 1e-8) << r.iters << " " << r.message;
    EXPECT_LE(r.iters, 50);
}

TEST(Lbfgs, Rosenbrock) {
    LbfgsOptions o;
    o.max_iters = 2000;
    const OptimResult r = lbfgs_b_minimize(rosenbrock(), Vector::Zero(2), Bounds::unbounded(2), o);
    EXPECT_LT((r.x - Vector::Ones(2)).norm(), 1e-6);
}

TEST(Lbfgs, ActiveBound) {
    Bounds b = Bounds::unbounded(2);
    b.lower(1) = 2.0;
    const OptimResult r = lbfgs_b_minimize(rosenbrock(), Vector::Constant(2, 3.0), b, LbfgsOptions{});
    EXPECT_DOUBLE_EQ(r.x(1), 2.0);
    EXPECT_NEAR(r.x(0), std::sqrt(2.0), 1e-3);
}

TEST(Lbfgs, LineSearchFailureFlagged) {
    // Gradient points the wrong way: no Armijo step exists.
    Objective f = [](const Vector& x, Vector& g) {
        g(0) = -2.0 * x(0) - 1.0;
        return x(0) * x(0) + x(0);
    };
    const OptimResult r = lbfgs_b_minimize(f, Vector::Constant(1, 1.0), Bounds::unbounded(1), LbfgsOptions{});
    EXPECT_TRUE(r.line_search_failed);
    EXPECT_TRUE(std::isfinite(r.x(0)));
}

TEST(L1Split, OneDimensionalLasso) {
    for (const auto& [lambda, expect] : {std::pair{1.0, 0.5}, std::pair{3.0, 0.0}}) {
        L1Split s;
        s.n = 1;
        s.index = {0};
        s.weight = Vector::Constant(1, lambda);
        const Objective f = s.wrap(quadratic_1d(1.0));
        LbfgsOptions o;
        o.pgtol = 1e-14;
        const OptimResult r = lbfgs_b_minimize(f, s.split(Vector::Constant(1, 0.3)), s.bounds(Bounds::unbounded(1)), o);
        const Vector theta = s.merge(r.x);
        if (expect == 0.0) {
            EXPECT_EQ(theta(0), 0.0);
            EXPECT_EQ(r.x(0), 0.0);
            EXPECT_EQ(r.x(1), 0.0);
        } else {
            EXPECT_NEAR(theta(0), expect, 1e-10);
        }
    }
}

TEST(L1Split, SplitMergeRoundTrip) {
    L1Split s;
    s.n = 4;
    s.index = {1, 3};
    s.weight = Vector::Ones(2);
    const Vector t = (Vector(4) << 1.0, -2.0, 3.0, 4.0).finished();
    const Vector xi = s.split(t);
    EXPECT_EQ(xi.size(), 6);
    EXPECT_TRUE((xi.segment(4, 2).array() >= 0).all());
    EXPECT_EQ(s.merge(xi), t);
    EXPECT_DOUBLE_EQ(s.l1_value(t), 6.0);
}

TEST(L1Split, RandomLassoMatchesCoordinateDescent) {
    std::mt19937_64 rng(7);
    const Index m = 80, n = 50;
    const Matrix a = random_matrix(rng, m, n);
    Vector x_true = Vector::Zero(n);
    for (Index i = 0; i < n; i += 5) x_true(i) = random_vector(rng, 1, 3.0)(0);
    const Vector b = a * x_true + random_vector(rng, m, 0.1);
    const double lambda = 5.0;
    const Vector oracle = lasso_cd(a, b, lambda);

    L1Split s;
    s.n = n;
    for (Index i = 0; i < n; ++i) s.index.push_back(i);
    s.weight = Vector::Constant(n, lambda);
    const Objective smooth = [&](const Vector& x, Vector& g) {
        const Vector r = a * x - b;
        g = a.transpose() * r;
        return 0.5 * r.squaredNorm();
    };
    LbfgsOptions o;
    o.max_iters = 5000;
    o.pgtol = 1e-12;
    o.ftol = 0.0;
    const OptimResult r = lbfgs_b_minimize(s.wrap(smooth), s.split(Vector::Zero(n)), s.bounds(Bounds::unbounded(n)), o);
    const Vector x = s.merge(r.x);
    EXPECT_LT((x - oracle).cwiseAbs().maxCoeff(), 1e-6);
    for (Index i = 0; i < n; ++i) {
        if (oracle(i) == 0.0) {
            EXPECT_LT(std::abs(x(i)), 1e-9);
        }
    }
}
