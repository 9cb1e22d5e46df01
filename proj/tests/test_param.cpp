#include "lfr/bench.hpp"
#include "lfr/metrics.hpp"
#include "lfr/param.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace lfr;
using namespace lfr::testing;

TEST(LtiLipschitz, Examples) {
    EXPECT_DOUBLE_EQ(lti_lipschitz(Matrix::Constant(1, 1, 0.5), Matrix::Zero(1, 1)), 0.5);
    EXPECT_NEAR(lti_lipschitz(Matrix(0.3 * Matrix::Identity(2, 2)), Matrix(0.4 * Matrix::Identity(2, 2))), 0.5, 1e-14);
    EXPECT_THROW(lti_lipschitz(Matrix::Zero(2, 2), Matrix::Zero(3, 1)), InvalidInputError);
}

TEST(LtiLipschitz, SampledSupAndTopDirection) {
    std::mt19937_64 rng(4);
    const Matrix a = random_matrix(rng, 3, 3), b = random_matrix(rng, 3, 2);
    Matrix ab(3, 5);
    ab << a, b;
    const double l = lti_lipschitz(a, b);
    double sup = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const Vector dz = random_vector(rng, 5);
        sup = std::max(sup, (ab * dz).norm() / dz.norm());
    }
    EXPECT_GE(l, sup);
    const Vector v = top_right_singular_vector(ab);
    EXPECT_LT(std::abs(l - (ab * v).norm() / v.norm()), 1e-6);
}

TEST(NonlinearLipschitz, LinearMap) {
    std::mt19937_64 rng(2);
    const Matrix a = random_matrix(rng, 2, 2), b = random_matrix(rng, 2, 1);
    Matrix ab(2, 3);
    ab << a, b;
    const double est = nonlinear_lipschitz_estimate([&](const Vector& z) { return Vector(ab * z); },
                                                    Vector::Constant(3, -1), Vector::Constant(3, 1), 3);
    EXPECT_NEAR(est, 1.1 * lti_lipschitz(a, b), 1e-5);
}

TEST(NonlinearLipschitz, Sine) {
    const double est = nonlinear_lipschitz_estimate(
        [](const Vector& z) { return Vector::Constant(1, std::sin(z(0))); }, Vector::Constant(1, -M_PI),
        Vector::Constant(1, M_PI), 11);
    EXPECT_NEAR(est, 1.1, 1e-6);
}

TEST(NonlinearLipschitz, CctSqrtBlowUp) {
    const double k = 0.05, ts = 4.0;
    auto cct = cct_baseline(Vector::Constant(4, k), ts);
    auto f = [&](const Vector& z) { return cct->eval(z.head(2), z.tail(1), cct->theta0()); };
    const Vector lo = (Vector(3) << 0.01, 0.01, 0.0).finished();
    const Vector hi = (Vector(3) << 20.0, 20.0, 10.0).finished();
    const double est = nonlinear_lipschitz_estimate(f, lo, hi, 5);
    // The dominant term is ts k / (2 sqrt(0.01)) = 1, attained at the box corner next to zero.
    const double d = ts * k / (2.0 * std::sqrt(0.01));
    EXPECT_TRUE(std::isfinite(est));
    EXPECT_GT(est, 1.1 * d * 0.9);
    EXPECT_LT(est, 1.1 * 3.0 * d);
    const Vector lo_tight = (Vector(3) << 1e-8, 1e-8, 0.0).finished();
    EXPECT_GT(nonlinear_lipschitz_estimate(f, lo_tight, hi, 5), 20.0 * est);
}

TEST(AnnLipschitz, Examples) {
    AnnParams<double> one;
    one.weights = {Matrix(2.0 * Matrix::Identity(3, 3))};
    one.biases = {Vector::Zero(3)};
    EXPECT_NEAR(ann_lipschitz_bound(one), 2.0, 1e-14);
    AnnParams<double> two;
    two.weights = {Matrix(2.0 * Matrix::Identity(2, 2)), Matrix(3.0 * Matrix::Identity(2, 2))};
    two.biases = {Vector::Zero(2), Vector::Zero(2)};
    EXPECT_NEAR(ann_lipschitz_bound(two), 6.0, 1e-14);
}

TEST(AnnLipschitz, BoundsSampledJacobian) {
    std::mt19937_64 rng(3);
    AnnParams<double> ann;
    ann.weights = {random_matrix(rng, 6, 2), random_matrix(rng, 6, 6), random_matrix(rng, 2, 6)};
    ann.biases = {random_vector(rng, 6), random_vector(rng, 6), random_vector(rng, 2)};
    const double bound = ann_lipschitz_bound(ann);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const Vector z = random_vector(rng, 2, 2.0);
        Matrix jac(2, 2);
        for (int j = 0; j < 2; ++j) {
            Vector p = z, q = z;
            p(j) += 1e-6;
            q(j) -= 1e-6;
            jac.col(j) = (ann_forward(ann, p) - ann_forward(ann, q)) / 2e-6;
        }
        worst = std::max(worst, spectral_norm_exact(jac));
    }
    EXPECT_GE(bound, worst);
}

TEST(LipschitzPenalty, Examples) {
    AnnParams<double> ann;
    ann.weights = {Matrix(2.0 * Matrix::Identity(2, 2)), Matrix(1.5 * Matrix::Identity(2, 2))};
    ann.biases = {Vector::Zero(2), Vector::Zero(2)};
    EXPECT_EQ(lipschitz_penalty(ann, 3.0, 0.1, true), 0.0);
    EXPECT_EQ(lipschitz_penalty(ann, 4.0, 0.1, true), 0.0);
    EXPECT_NEAR(lipschitz_penalty(ann, 2.0, 0.1, true), 0.1, 1e-14);
    EXPECT_EQ(lipschitz_penalty(ann, 0.5, 0.0, true), 0.0);
    EXPECT_NEAR(lipschitz_penalty(ann, 2.0, 0.1, false), 0.1, 1e-8);
}

TEST(BuildDzw, Saturation) {
    std::mt19937_64 rng(1);
    WellPosedFree<double> f;
    f.dzw = random_core(rng, 5, 3);
    f.d = -20.0;
    f.l_phi = 1.0;
    const Matrix d = build_dzw(f, 5, 3);
    EXPECT_LT(spectral_norm_exact(d), 3e-9);
    EXPECT_NEAR(sigmoid(-20.0), 2.06e-9, 0.01e-9);
}

TEST(BuildDzw, HalfScale) {
    std::mt19937_64 rng(2);
    WellPosedFree<double> f;
    f.dzw = random_core(rng, 4, 4, 3.0);
    f.d = 0.0;
    f.l_phi = 2.5;
    EXPECT_LT(spectral_norm_exact(build_dzw(f, 4, 4)), 0.2);
}

TEST(BuildDzw, CertificateSweep) {
    std::mt19937_64 rng(3);
    const std::pair<Index, Index> shapes[] = {{1, 1}, {3, 5}, {5, 3}, {4, 4}, {2, 7}};
    std::uniform_real_distribution<double> ud(-5.0, 8.0), ul(0.1, 20.0);
    for (int i = 0; i < 1000; ++i) {
        const auto [nz, nw] = shapes[i % 5];
        const auto [n, m] = cayley_core_shape(nz, nw);
        WellPosedFree<double> f;
        f.dzw = random_core(rng, n, m, 0.1 + (i % 4));
        f.d = ud(rng);
        f.l_phi = ul(rng);
        const Matrix d = build_dzw(f, nz, nw);
        ASSERT_EQ(d.rows(), nz);
        ASSERT_EQ(d.cols(), nw);
        EXPECT_LT(spectral_norm_exact(d) * f.l_phi, 1.0 - 1e-12);
    }
}

TEST(BuildContracting, Examples) {
    std::mt19937_64 rng(5);
    const LfrDims d{2, 1, 1, 1, 2, 2};
    ContractingFree<double> f = random_contracting(rng, d);
    f.alpha = 0.0;
    const Matrix dzw = Matrix::Zero(d.n_z(), d.n_w());
    EXPECT_DOUBLE_EQ(build_contracting(f, dzw, 1.0, d, SigmaCMode::Safe).sigma_a, 0.5);
    f.gamma = 30.0;
    const auto cb = build_contracting(f, dzw, 1.0, d, SigmaCMode::Safe);
    EXPECT_LT(spectral_norm_exact(cb.cz), 1e-12);
    const double bound = contraction_bound(cb.a, cb.bw, cb.cz, dzw, 1.0);
    EXPECT_LT(bound, f.alpha_bar * 0.5 + 1e-12);
}

TEST(BuildContracting, PaperModeRejectsNegativeSigmaC) {
    std::mt19937_64 rng(6);
    const LfrDims d{2, 0, 1, 1, 1, 1};
    ContractingFree<double> f = random_contracting(rng, d);
    f.alpha = std::log(0.9 / 0.1);  // sigma_A = 0.9
    f.gamma = 0.0;                  // sigmoid = 0.5 > 1 - sigma_A
    EXPECT_THROW(build_contracting(f, Matrix(Matrix::Zero(d.n_z(), d.n_w())), 1.0, d, SigmaCMode::Paper),
                 InvalidInputError);
    EXPECT_NO_THROW(build_contracting(f, Matrix(Matrix::Zero(d.n_z(), d.n_w())), 1.0, d, SigmaCMode::Safe));
}

TEST(BuildContracting, BoundSweep) {
    std::mt19937_64 rng(7);
    const LfrDims shapes[] = {{2, 0, 1, 1, 1, 1}, {2, 2, 1, 1, 3, 3}, {1, 1, 2, 1, 2, 1}};
    std::uniform_real_distribution<double> ab(0.2, 1.0), ul(0.5, 5.0), ud(-6.0, 3.0);
    int accepted = 0;
    for (int i = 0; accepted < 1000; ++i) {
        const LfrDims& d = shapes[i % 3];
        ContractingFree<double> f = random_contracting(rng, d, 0.1 + (i % 3));
        f.alpha_bar = ab(rng);
        WellPosedFree<double> wp;
        auto [n, m] = cayley_core_shape(d.n_z(), d.n_w());
        wp.dzw = random_core(rng, n, m);
        wp.d = ud(rng);
        wp.l_phi = ul(rng);
        const Matrix dzw = build_dzw(wp, d.n_z(), d.n_w());
        const SigmaCMode mode = (i % 2) ? SigmaCMode::Paper : SigmaCMode::Safe;
        ContractingBlocks<double> cb;
        try {
            cb = build_contracting(f, dzw, wp.l_phi, d, mode);
        } catch (const InvalidInputError&) {
            ASSERT_EQ(mode, SigmaCMode::Paper);
            continue;
        }
        ++accepted;
        const double bound = contraction_bound(cb.a, cb.bw, cb.cz, dzw, wp.l_phi);
        // Paper mode: sum < abar (1 - s). Safe mode scales C_z by (1 - s) instead: sum < abar (1 - s (1 - sigma_A)).
        const double s = sigmoid(f.gamma);
        const double margin = mode == SigmaCMode::Paper ? 1.0 - s : 1.0 - s * (1.0 - cb.sigma_a);
        EXPECT_LT(bound, f.alpha_bar * margin + 1e-9);
        EXPECT_LT(bound, f.alpha_bar);
    }
}

TEST(PhiNlLipschitz, Examples) {
    EXPECT_DOUBLE_EQ(phi_nl_lipschitz(3.0, 4.0, 0.0, LipschitzMode::Paper), 4.0);
    EXPECT_DOUBLE_EQ(phi_nl_lipschitz(3.0, 4.0, 0.0, LipschitzMode::Safe), 5.0);
    EXPECT_DOUBLE_EQ(phi_nl_lipschitz(1.0, 1.0, 2.0, LipschitzMode::Safe), 2.0);
}

TEST(PhiNlLipschitz, MsdPipeline) {
    const MsdParams p;
    auto base = msd_baseline(p);
    const Normalizer id = Normalizer::identity(1, 1, 2);
    const auto [lf, lh] = scaled_baseline_lipschitz(*base, base->theta0(), id);
    Matrix fa(2, 3);
    fa << 1.0, p.ts, 0.0, -p.ts * p.k_s / p.m, 1.0 - p.ts * p.c_d / p.m, p.ts / p.m;
    EXPECT_NEAR(lf, spectral_norm_exact(fa), 1e-9);
    EXPECT_NEAR(lh, 1.0, 1e-12);
    const double l = phi_nl_lipschitz(lf, lh, 1.0, LipschitzMode::Safe);
    std::mt19937_64 rng(1);
    WellPosedFree<double> f;
    f.dzw = random_core(rng, 5, 5, 2.0);
    f.d = 3.0;
    f.l_phi = l;
    EXPECT_LT(spectral_norm_exact(build_dzw(f, 5, 5)), 1.0 / l);
}

TEST(Init, FreeModeReproducesBaselineStep) {
    std::mt19937_64 rng(11);
    for (ParamMode mode : {ParamMode::Free, ParamMode::DzwZero, ParamMode::WellPosed}) {
        ParamSpec s = small_spec(rng, 2, 1, 1, 1, mode);
        const ParamSet p = init_fp_equivalent(s, Vector::Zero(2), InitOptions{});
        const LfrModel m = realize(p).model;
        const auto* lti = dynamic_cast<const LtiBaseline*>(s.baseline.get());
        for (int t = 0; t < 5; ++t) {
            Vector x = Vector::Zero(3);
            x.head(2) = random_vector(rng, 2);
            const Vector u = random_vector(rng, 1);
            const StepResult r = step(m, x, u);
            if (mode == ParamMode::WellPosed) {
                // The residual feedback only perturbs the fixed point.
                LfrModel open = m;
                open.blocks.Dzw.setZero();
                EXPECT_LT(rel_err(r.z, step(open, x, u).z), 1e-4);
                continue;
            }
            const Vector xb = lti->a() * x.head(2) + lti->b() * u;
            const Vector yb = lti->c() * x.head(2) + lti->d() * u;
            EXPECT_LT(rel_err(Vector(r.x_next.head(2)), xb), 1e-12) << to_string(mode);
            EXPECT_LT(rel_err(r.y_hat, yb), 1e-12) << to_string(mode);
        }
    }
}

TEST(Init, ContractingOnMsdRecordsMismatch) {
    const MsdParams mp;
    const Dataset data = msd_generate(mp, 500, -100, 100, 3);
    auto base = msd_baseline(mp);
    ParamSpec s;
    s.baseline = base;
    s.dims = {2, 0, 1, 1, 1, 1};
    s.hidden = {8};
    s.mode = ParamMode::Contracting;
    s.norm = fit_normalizer(data, *base, base->theta0(), Vector::Zero(2));
    const auto [lf, lh] = scaled_baseline_lipschitz(*base, base->theta0(), s.norm);
    s.l_phi = phi_nl_lipschitz(lf, lh, 1.0, LipschitzMode::Safe);
    build_layout(s);
    InitOptions o;
    o.data = &data;
    InitReport rep;
    const ParamSet p = init_fp_equivalent(s, Vector::Zero(2), o, &rep);
    EXPECT_TRUE(std::isfinite(rep.nrmse_vs_baseline));
    EXPECT_LT(rep.nrmse_vs_baseline, 50.0);
    const auto r = realize(p);
    ASSERT_TRUE(r.contracting.has_value());
    EXPECT_LT(contraction_bound(r.model.blocks.A, r.model.blocks.Bw, r.model.blocks.Cz, r.model.blocks.Dzw, s.l_phi),
              s.alpha_bar);
}

TEST(Init, WellPosedSimulationMatchesBaseline) {
    const MsdParams mp;
    const Dataset data = msd_generate(mp, 1000, -100, 100, 4);
    auto base = msd_baseline(mp);
    ParamSpec s;
    s.baseline = base;
    s.dims = {2, 0, 1, 1, 1, 1};
    s.hidden = {8};
    s.norm = fit_normalizer(data, *base, base->theta0(), Vector::Zero(2));
    const auto [lf, lh] = scaled_baseline_lipschitz(*base, base->theta0(), s.norm);
    s.l_phi = phi_nl_lipschitz(lf, lh, 1.0, LipschitzMode::Safe);
    build_layout(s);
    InitOptions o;
    o.data = &data;
    InitReport rep;
    const ParamSet p = init_fp_equivalent(s, Vector::Zero(2), o, &rep);
    EXPECT_TRUE(rep.post_check_passed);
    EXPECT_LT(rep.nrmse_vs_baseline, 0.1);
    const auto r = realize(p);
    const auto [xs, yb] = simulate_baseline(*base, base->theta0(), Vector::Zero(2), data.u);
    const SimulationResult sim = simulate(r.model, r.x0, data.u);
    EXPECT_LT(metrics(yb, sim.y_hat).nrmse_percent, 0.1);
}

TEST(ParamSet, LayoutCoversVector) {
    std::mt19937_64 rng(12);
    for (ParamMode mode : {ParamMode::Free, ParamMode::DzwZero, ParamMode::DzwAbOnly, ParamMode::WellPosed,
                           ParamMode::Contracting}) {
        const ParamSpec s = small_spec(rng, 2, 1, 2, 3, mode);
        Index covered = 0;
        for (const LayoutEntry& e : s.layout) {
            EXPECT_EQ(e.offset, covered);
            covered += e.size();
        }
        EXPECT_EQ(covered, s.size());
        EXPECT_EQ(parse_param_mode(to_string(mode)), mode);
    }
}

TEST(ParamSet, RoundTripThroughModel) {
    std::mt19937_64 rng(13);
    const ParamSpec s = small_spec(rng, 2, 1, 2, 2, ParamMode::Free);
    const Vector theta = random_theta(rng, s);
    const auto r = realize<double>(s, theta);
    const ParamSet p = params_from_model(s, r.model, r.x0);
    EXPECT_LT((p.theta - theta).norm(), 1e-14);
}
