#include "lfr/diff.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace lfr;
using namespace lfr::testing;

TEST(Grad, Quadratic) {
    GradVector p;
    p.append("theta", Vector((Vector(2) << 1.0, 2.0).finished()));
    const GradVector g = grad([](Tape&, const VectorX<Var>& t) { return t.dot(t); }, p);
    EXPECT_DOUBLE_EQ(g.grad(0), 2.0);
    EXPECT_DOUBLE_EQ(g.grad(1), 4.0);
    EXPECT_TRUE(g.layout_consistent());
}

TEST(Grad, SigmoidAtZero) {
    GradVector p;
    p.append("t", Matrix::Zero(1, 1));
    const GradVector g = grad([](Tape&, const VectorX<Var>& t) { return sigmoid(t(0)); }, p);
    EXPECT_DOUBLE_EQ(g.grad(0), 0.25);
}

TEST(Grad, NonFiniteForward) {
    GradVector p;
    p.append("t", Matrix::Constant(1, 1, -1.0));
    EXPECT_THROW(grad([](Tape&, const VectorX<Var>& t) { return log(t(0)); }, p), NonFiniteError);
    p.values(0) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(grad([](Tape&, const VectorX<Var>& t) { return t(0); }, p), NonFiniteError);
}

TEST(Grad, LayoutBlocks) {
    GradVector p;
    p.append("a", Matrix::Ones(2, 3));
    p.append("b", Matrix::Zero(1, 1));
    EXPECT_EQ(p.values.size(), 7);
    EXPECT_EQ(p.entry("b").offset, 6);
    EXPECT_EQ(p.block("a").rows(), 2);
    EXPECT_TRUE(p.layout_consistent());
    p.layout.pop_back();
    EXPECT_FALSE(p.layout_consistent());
}

TEST(Grad, ThreeLayerTanhNetwork) {
    std::mt19937_64 rng(42);
    const Index in = 3, h1 = 5, h2 = 4;
    GradVector p;
    p.append("W0", random_matrix(rng, h1, in, 0.7));
    p.append("b0", random_matrix(rng, h1, 1, 0.3));
    p.append("W1", random_matrix(rng, h2, h1, 0.7));
    p.append("b1", random_matrix(rng, h2, 1, 0.3));
    p.append("W2", random_matrix(rng, 1, h2, 0.7));
    const Vector x = random_vector(rng, in);
    const auto net = [&](const auto& theta) {
        using S = std::decay_t<decltype(theta(0))>;
        auto sl = [&](const std::string& n) {
            const LayoutEntry& e = p.entry(n);
            return MatrixX<S>(Eigen::Map<const MatrixX<S>>(theta.data() + e.offset, e.rows, e.cols));
        };
        VectorX<S> h = sl("W0") * x.cast<S>() + sl("b0");
        for (Index i = 0; i < h.size(); ++i) h(i) = tanh(h(i));
        VectorX<S> h2v = sl("W1") * h + sl("b1");
        for (Index i = 0; i < h2v.size(); ++i) h2v(i) = tanh(h2v(i));
        return S((sl("W2") * h2v)(0, 0));
    };
    const GradVector g = grad([&](Tape&, const VectorX<Var>& t) { return net(t); }, p);
    for (Index i = 0; i < p.values.size(); ++i) {
        const double h = 1e-5 * std::max(1.0, std::abs(p.values(i)));
        Vector a = p.values, b = p.values;
        a(i) += h;
        b(i) -= h;
        const double fd = (net(a) - net(b)) / (2 * h);
        EXPECT_LT(rel_err(g.grad(i), fd, 1e-6), 1e-5) << "coordinate " << i;
    }
}

TEST(Grad, PrimitivesMatchFiniteDifferences) {
    using Fn = std::function<Var(const Var&, const Var&)>;
    using Fd = std::function<double(double, double)>;
    struct Prim {
        const char* name;
        Fn f;
        Fd g;
        double lo, hi;
    };
    const std::vector<Prim> prims = {
        {"add", [](const Var& a, const Var& b) { return a + b; }, [](double a, double b) { return a + b; }, -3, 3},
        {"sub", [](const Var& a, const Var& b) { return a - b; }, [](double a, double b) { return a - b; }, -3, 3},
        {"mul", [](const Var& a, const Var& b) { return a * b; }, [](double a, double b) { return a * b; }, -3, 3},
        {"div", [](const Var& a, const Var& b) { return a / b; }, [](double a, double b) { return a / b; }, 0.5, 3},
        {"neg", [](const Var& a, const Var&) { return -a; }, [](double a, double) { return -a; }, -3, 3},
        {"exp", [](const Var& a, const Var&) { return exp(a); }, [](double a, double) { return std::exp(a); }, -3, 3},
        {"log", [](const Var& a, const Var&) { return log(a); }, [](double a, double) { return std::log(a); }, 0.2, 5},
        {"sqrt", [](const Var& a, const Var&) { return sqrt(a); }, [](double a, double) { return std::sqrt(a); }, 0.2, 5},
        {"tanh", [](const Var& a, const Var&) { return tanh(a); }, [](double a, double) { return std::tanh(a); }, -3, 3},
        {"sigmoid", [](const Var& a, const Var&) { return sigmoid(a); }, [](double a, double) { return sigmoid(a); }, -5, 5},
        {"sin", [](const Var& a, const Var&) { return sin(a); }, [](double a, double) { return std::sin(a); }, -3, 3},
        {"cos", [](const Var& a, const Var&) { return cos(a); }, [](double a, double) { return std::cos(a); }, -3, 3},
        {"abs", [](const Var& a, const Var&) { return abs(a); }, [](double a, double) { return std::abs(a); }, 0.1, 3},
        {"relu", [](const Var& a, const Var&) { return relu(a); }, [](double a, double) { return relu(a); }, 0.1, 3},
    };
    std::mt19937_64 rng(1);
    for (const Prim& p : prims) {
        std::uniform_real_distribution<double> dist(p.lo, p.hi);
        for (int trial = 0; trial < 100; ++trial) {
            const double a = dist(rng), b = dist(rng);
            Tape tape;
            const Var va = tape.variable(a), vb = tape.variable(b);
            tape.backward(p.f(va, vb));
            const double ha = 1e-6 * std::max(1.0, std::abs(a)), hb = 1e-6 * std::max(1.0, std::abs(b));
            const double fa = (p.g(a + ha, b) - p.g(a - ha, b)) / (2 * ha);
            const double fb = (p.g(a, b + hb) - p.g(a, b - hb)) / (2 * hb);
            EXPECT_LT(rel_err(tape.adjoint(va), fa, 1e-3), 1e-6) << p.name;
            EXPECT_LT(rel_err(tape.adjoint(vb), fb, 1e-3), 1e-6) << p.name;
        }
    }
}

TEST(FixedPoint, ScalarSensitivity) {
    // g(z) = 0.5 z + c at c = 1, z* = 2: dz*/dc = 2.
    Tape tape;
    const Var c = tape.variable(1.0);
    const VectorX<Var> z = fixed_point_on_tape(
        tape, [&](const VectorX<Var>& zz) { return VectorX<Var>(VectorX<Var>::Constant(1, Var(0.5) * zz(0) + c)); },
        Vector::Constant(1, 2.0));
    tape.backward(z(0));
    EXPECT_NEAR(tape.adjoint(c), 2.0, 1e-14);
    EXPECT_DOUBLE_EQ(z(0).val, 2.0);
}

TEST(FixedPoint, ParameterInSlope) {
    const double a0 = 0.3;
    Tape tape;
    const Var a = tape.variable(a0);
    const double zs = 1.0 / (1.0 - a0);
    const VectorX<Var> z = fixed_point_on_tape(
        tape, [&](const VectorX<Var>& zz) { return VectorX<Var>(VectorX<Var>::Constant(1, a * zz(0) + Var(1.0))); },
        Vector::Constant(1, zs));
    tape.backward(z(0));
    EXPECT_NEAR(tape.adjoint(a), zs / (1.0 - a0), 1e-12);
    EXPECT_NEAR(tape.adjoint(a), 2.0408, 1e-4);
}

TEST(FixedPoint, ImplicitAdjointSolve) {
    // theta-free map: dz*/dtheta contribution is zero, lambda = upstream / (1 - 0.5).
    const Vector lam = implicit_adjoint(Matrix::Constant(1, 1, 0.5), Vector::Ones(1));
    EXPECT_NEAR(lam(0), 2.0, 1e-14);
    EXPECT_THROW(implicit_adjoint(Matrix::Identity(2, 2), Vector::Ones(2)), WellPosednessError);
}

TEST(FixedPoint, SingularRecordingFails) {
    Tape tape;
    EXPECT_THROW(fixed_point_on_tape(
                     tape, [](const VectorX<Var>& zz) { return VectorX<Var>(zz); }, Vector::Zero(2)),
                 WellPosednessError);
}

TEST(FixedPoint, VectorMatchesUnrolled) {
    std::mt19937_64 rng(4);
    const Index n = 3;
    Matrix a0 = random_matrix(rng, n, n);
    a0 *= 0.5 / spectral_norm_exact(a0);
    const Vector c0 = random_vector(rng, n);
    const Vector wts = random_vector(rng, n);
    Vector zs = Vector::Zero(n);
    for (int i = 0; i < 200; ++i) zs = (a0 * zs).array().tanh().matrix() + c0;

    auto run = [&](bool implicit) {
        Tape tape;
        MatrixX<Var> a(n, n);
        for (Index i = 0; i < a.size(); ++i) a.data()[i] = tape.variable(a0.data()[i]);
        const VectorX<Var> c = tape.variables(c0);
        auto g = [&](const VectorX<Var>& z) {
            VectorX<Var> out = a * z;
            for (Index i = 0; i < n; ++i) out(i) = tanh(out(i)) + c(i);
            return out;
        };
        VectorX<Var> z;
        if (implicit) {
            z = fixed_point_on_tape(tape, g, zs);
        } else {
            z = VectorX<Var>::Zero(n);
            for (int i = 0; i < 60; ++i) z = g(z);
        }
        Var s(0.0);
        for (Index i = 0; i < n; ++i) s = s + z(i) * wts(i);
        tape.backward(s);
        Vector out(n * n + n);
        for (Index i = 0; i < a.size(); ++i) out(i) = tape.adjoint(a.data()[i]);
        for (Index i = 0; i < n; ++i) out(n * n + i) = tape.adjoint(c(i));
        return out;
    };
    EXPECT_LT(rel_err(run(true), run(false)), 1e-10);
}
