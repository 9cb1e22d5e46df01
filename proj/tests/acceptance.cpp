// End-to-end acceptance suite. Prints one PASS/FAIL (or SKIP) line per
// criterion; exits non-zero when any criterion fails.
//
//   acceptance            run everything
//   acceptance 1 4 8      run a subset

#include "lfr/config.hpp"

#include "test_util.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

using namespace lfr;
using namespace lfr::testing;
namespace fs = std::filesystem;

namespace {

enum class Outcome { Pass, Fail, Skip };

struct Verdict {
    Outcome outcome;
    std::string detail;
};

Verdict verdict(bool ok, const std::string& detail) { return {ok ? Outcome::Pass : Outcome::Fail, detail}; }

template <typename... T>
std::string fmt(const char* f, T... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

RunConfig shipped(const std::string& name) { return load_run_config(fs::path(LFR_CONFIG_DIR) / name); }

Metrics test_metrics(const LfrModel& m, const Dataset& test, Index n_init) {
    const Vector x0 = estimate_x0_test(m, test, n_init);
    return metrics(test.y, predict(m, x0, test.u), n_init);
}

// ---- 1 ---------------------------------------------------------------------------------

Verdict wellposed_sweep() {
    std::mt19937_64 rng(101);
    const std::pair<Index, Index> shapes[] = {{1, 1}, {3, 5}, {5, 3}, {4, 4}};
    std::uniform_real_distribution<double> ud(-10.0, 10.0), ul(0.05, 50.0);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto [nz, nw] = shapes[i % 4];
        const auto [n, m] = cayley_core_shape(nz, nw);
        WellPosedFree<double> f;
        f.dzw = random_core(rng, n, m, 0.1 + (i % 5));
        f.d = ud(rng);
        f.l_phi = ul(rng);
        const Matrix d = build_dzw(f, nz, nw);
        if (d.rows() != nz || d.cols() != nw) return verdict(false, "wrong D_zw shape");
        worst = std::max(worst, f.l_phi * spectral_norm_exact(d));
    }
    return verdict(worst < 1.0, fmt("1000 draws, max L_phi*||D_zw|| = %.6f", worst));
}

// ---- 2 ---------------------------------------------------------------------------------

Verdict cayley_sweep() {
    std::mt19937_64 rng(102);
    std::uniform_int_distribution<int> dim(1, 6);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        // Tall cores only; wide matrices are handled by transposition in the parametrization.
        Index n = dim(rng), m = dim(rng);
        if (n < m) std::swap(n, m);
        worst = std::max(worst, spectral_norm_exact(cayley_general(random_core(rng, n, m, 0.1 + (i % 7)))));
    }
    return verdict(worst < 1.0, fmt("1000 draws, max ||M|| = %.9f", worst));
}

// ---- 3 ---------------------------------------------------------------------------------

Verdict banach_bound() {
    std::mt19937_64 rng(103);
    int violations = 0;
    double c_max = 0.0;
    for (int model = 0; model < 100; ++model) {
        const CertifiedDraw d = certified_draw(rng, 1 + model % 3, model % 2, 1 + model % 3, 1 + model % 2,
                                               ParamMode::WellPosed, 0.5, 2.0);
        const LfrModel m = realize<double>(d.spec, d.theta).model;
        const double c = d.spec.l_phi * spectral_norm_exact(m.blocks.Dzw);
        if (!(c < 1.0)) return verdict(false, fmt("model %d not contracting (c = %g)", model, c));
        c_max = std::max(c_max, c);
        const Vector x = random_vector(rng, m.dims.n_x()), u = random_vector(rng, m.dims.n_u);
        const Vector zs = solve_fixed_point(m, x, u, 1e-14, 2000).z;
        const Vector z0 = m.blocks.Cz * x + m.blocks.Dzu * u;
        const double d1 = (g_map(m, z0, x, u) - z0).norm();
        for (int n = 1; n <= 40; ++n) {
            const Vector zn = solve_fixed_point(m, x, u, 0.0, n).z;
            if ((zn - zs).norm() > std::pow(c, n) / (1.0 - c) * d1 + 1e-12) ++violations;
        }
    }
    return verdict(violations == 0, fmt("100 models x 40 iterates, max c = %.3f, violations %d", c_max, violations));
}

// ---- 4 ---------------------------------------------------------------------------------

Verdict gradients() {
    std::mt19937_64 rng(104);
    double worst_fd = 0.0, worst_unrolled = 0.0;
    for (int model = 0; model < 10; ++model) {
        const Index nxb = 1 + model % 2, nxa = model % 3;
        const GradProblem p = grad_problem(rng, nxb, nxa, 50);
        worst_fd = std::max(worst_fd, fd_direction_error(rng, p, 20));
        const Vector imp = problem_grad(p, p.theta, GradPath::TapeImplicit);
        const Vector unr = problem_grad(p, p.theta, GradPath::TapeUnrolled);
        worst_unrolled = std::max(worst_unrolled, rel_err(imp, unr));
    }
    return verdict(worst_fd < 1e-5 && worst_unrolled < 1e-4,
                   fmt("FD rel err %.2e, implicit vs unrolled %.2e", worst_fd, worst_unrolled));
}

// ---- 5 ---------------------------------------------------------------------------------

Verdict contraction() {
    std::mt19937_64 rng(105);
    const LfrDims shapes[] = {{2, 0, 1, 1, 1, 1}, {2, 2, 1, 1, 3, 3}, {1, 1, 2, 1, 2, 1}};
    std::uniform_real_distribution<double> ab(0.2, 1.0), ul(0.5, 5.0), ud(-6.0, 3.0);
    int accepted = 0, bound_fail = 0;
    double worst_ratio = 0.0;
    for (int i = 0; accepted < 1000; ++i) {
        const LfrDims& d = shapes[i % 3];
        ContractingFree<double> f = random_contracting(rng, d, 0.1 + (i % 3));
        f.alpha_bar = ab(rng);
        WellPosedFree<double> wp;
        const auto [n, m] = cayley_core_shape(d.n_z(), d.n_w());
        wp.dzw = random_core(rng, n, m);
        wp.d = ud(rng);
        wp.l_phi = ul(rng);
        const Matrix dzw = build_dzw(wp, d.n_z(), d.n_w());
        const SigmaCMode mode = (i % 2) ? SigmaCMode::Paper : SigmaCMode::Safe;
        ContractingBlocks<double> cb;
        try {
            cb = build_contracting(f, dzw, wp.l_phi, d, mode);
        } catch (const InvalidInputError&) {
            continue;
        }
        ++accepted;
        const double bound = contraction_bound(cb.a, cb.bw, cb.cz, dzw, wp.l_phi);
        if (!(bound < f.alpha_bar)) ++bound_fail;
        worst_ratio = std::max(worst_ratio, bound / f.alpha_bar);
    }

    int step_fail = 0;
    double worst_rate = 0.0;
    for (int model = 0; model < 20; ++model) {
        CertifiedDraw c = certified_draw(rng, 1 + model % 2, model % 3, 1 + model % 2, 1 + model % 2,
                                         ParamMode::Contracting, 0.6, 1.0);
        c.spec.alpha_bar = 0.9 + 0.1 * (model % 2);
        c.spec.fpi = {1e-15, 2000, false};
        const LfrModel m = realize<double>(c.spec, c.theta).model;
        const Matrix u = random_matrix(rng, 200, m.dims.n_u, 2.0);
        for (int pair = 0; pair < 10; ++pair) {
            const Matrix xa = simulate(m, random_vector(rng, m.dims.n_x(), 3.0), u).x;
            const Matrix xb = simulate(m, random_vector(rng, m.dims.n_x(), 3.0), u).x;
            for (Index k = 0; k + 1 < xa.rows(); ++k) {
                const double dk = (xa.row(k) - xb.row(k)).norm(), dn = (xa.row(k + 1) - xb.row(k + 1)).norm();
                if (dk < 1e-12) break;  // converged below round-off
                worst_rate = std::max(worst_rate, dn / dk / c.spec.alpha_bar);
                if (dn > (c.spec.alpha_bar + 1e-9) * dk) ++step_fail;
            }
        }
    }
    return verdict(bound_fail == 0 && step_fail == 0,
                   fmt("1000 draws, max bound/abar %.6f; trajectories max rate/abar %.6f, violations %d",
                       worst_ratio, worst_rate, step_fail));
}

// ---- 6 ---------------------------------------------------------------------------------

Verdict lti_lipschitz_check() {
    std::mt19937_64 rng(106);
    std::uniform_int_distribution<int> dim(1, 5);
    double worst = 0.0;
    bool sampled_ok = true;
    for (int sys = 0; sys < 100; ++sys) {
        const Index nx = dim(rng), nu = dim(rng);
        const Matrix a = random_matrix(rng, nx, nx), b = random_matrix(rng, nx, nu);
        Matrix ab(nx, nx + nu);
        ab << a, b;
        const double l = lti_lipschitz(a, b);
        const Vector v = top_right_singular_vector(ab);
        worst = std::max(worst, std::abs(l - (ab * v).norm() / v.norm()) / std::max(1.0, l));
        for (int k = 0; k < 200; ++k) {
            const Vector dz = random_vector(rng, nx + nu);
            if ((ab * dz).norm() / dz.norm() > l * (1 + 1e-12)) sampled_ok = false;
        }
    }
    return verdict(worst < 1e-9 && sampled_ok, fmt("100 systems, max |L - ratio| = %.2e", worst));
}

// ---- 7 ---------------------------------------------------------------------------------

Verdict lasso() {
    double err1 = 0.0;
    for (const auto& [lambda, expect] : {std::pair{1.0, 0.5}, std::pair{3.0, 0.0}}) {
        L1Split s;
        s.n = 1;
        s.index = {0};
        s.weight = Vector::Constant(1, lambda);
        const Objective quad = [](const Vector& x, Vector& g) {
            g(0) = 2.0 * (x(0) - 1.0);
            return (x(0) - 1.0) * (x(0) - 1.0);
        };
        LbfgsOptions o;
        o.pgtol = 1e-14;
        const OptimResult r = lbfgs_b_minimize(s.wrap(quad), s.split(Vector::Constant(1, 0.3)),
                                               s.bounds(Bounds::unbounded(1)), o);
        const double t = s.merge(r.x)(0);
        err1 = std::max(err1, expect == 0.0 ? (t == 0.0 ? 0.0 : 1.0) : std::abs(t - expect));
    }

    std::mt19937_64 rng(107);
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
    const double err50 = (s.merge(r.x) - oracle).cwiseAbs().maxCoeff();
    return verdict(err1 < 1e-10 && err50 < 1e-6, fmt("1-D err %.1e, 50-D max err vs oracle %.2e", err1, err50));
}

// ---- 8 / 12 -----------------------------------------------------------------------------

struct MsdWellPosed {
    RunConfig cfg;
    RunData data;
    TrainResult dense, sparse;
    double seconds = 0.0;
};

const MsdWellPosed& msd_well_posed() {
    static std::optional<MsdWellPosed> cache;
    if (!cache) {
        const auto t0 = std::chrono::steady_clock::now();
        MsdWellPosed r;
        r.cfg = shipped("msd_well_posed.yaml");
        r.data = load_run_data(r.cfg);
        r.sparse = reweighted_l1_discover(r.data.train, r.cfg.baseline.build(), r.cfg.train, &r.dense);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        cache = std::move(r);
    }
    return *cache;
}

Verdict msd_end_to_end() {
    const MsdWellPosed& r = msd_well_posed();
    const Dataset& test = *r.data.test;
    const Index n_init = r.cfg.n_init;
    const auto base = r.cfg.baseline.build();
    const Matrix y_base = simulate_baseline(*base, base->theta0(), Vector::Zero(base->n_x()), test.u).second;
    const double nrmse_base = metrics(test.y, y_base, n_init).nrmse_percent;
    const double nrmse_dense = test_metrics(r.dense.model, test, n_init).nrmse_percent;
    const double nrmse_sparse = test_metrics(r.sparse.model, test, n_init).nrmse_percent;
    const SparsityReport& s = *r.sparse.sparsity;
    const bool a = nrmse_base > 10.0;
    const bool b = nrmse_dense <= 3.3 && nrmse_dense <= nrmse_base / 10.0;
    const bool c = s.fraction() >= 0.5 && s.dzw_zeroed && nrmse_sparse <= 2.0 * nrmse_dense;
    return verdict(a && b && c,
                   fmt("baseline %.2f%%, well-posed %.4f%%, discovery zeroed %.1f%% (D_zw %s) refit %.4f%%, %.0f s",
                       nrmse_base, nrmse_dense, 100.0 * s.fraction(), s.dzw_zeroed ? "zeroed" : "kept",
                       nrmse_sparse, r.seconds));
}

Verdict lipschitz_flag() {
    const MsdWellPosed& r = msd_well_posed();
    const FitContext ctx = make_context(r.data.train, r.cfg.baseline.build(), r.cfg.train);
    const Certificates& c = r.dense.cert;
    const bool within = c.ann_bound <= 1.05 * ctx.l_ann;
    const bool consistent = c.lipschitz_violated == (c.ann_bound > ctx.l_ann);
    return verdict(consistent && (within || c.lipschitz_violated),
                   fmt("prod ||W_i|| = %.4f, L = %.4f, flag %s", c.ann_bound, ctx.l_ann,
                       c.lipschitz_violated ? "set" : "clear"));
}

// ---- 9 ---------------------------------------------------------------------------------

Verdict contracting_demo() {
    const RunConfig cfg = shipped("msd_contracting.yaml");
    const RunData data = load_run_data(cfg);
    const TrainResult r = fit(data.train, cfg.baseline.build(), cfg.train);
    const LfrModel& m = r.model;
    const Matrix xs = simulate(m, r.x0, data.train.u).x;
    double env = 0.0;
    for (Index k = 0; k < xs.rows(); ++k) env = std::max(env, xs.row(k).norm());

    std::mt19937_64 rng(109);
    std::uniform_real_distribution<double> scale(0.0, 5.0);
    const Matrix& u = data.test->u;
    std::vector<Vector> finals;
    for (int i = 0; i < 10; ++i) {
        Vector x0 = random_vector(rng, m.dims.n_x());
        x0 *= (i == 0 ? 5.0 : scale(rng)) * env / x0.norm();
        SimulationResult s;
        try {
            s = simulate(m, x0, u);
        } catch (const NumericalError& e) {
            return verdict(false, std::string("divergence: ") + e.what());
        }
        finals.push_back(s.x.row(s.x.rows() - 1).transpose());
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < finals.size(); ++i)
        for (std::size_t j = i + 1; j < finals.size(); ++j) worst = std::max(worst, (finals[i] - finals[j]).norm() / env);
    return verdict(worst < 1e-3 && r.cert.contraction_ok,
                   fmt("bound %.4f < %.2f, state envelope %.3f, max final separation %.2e", r.cert.contraction_bound,
                       r.cert.alpha_bar, env, worst));
}

// ---- 10 --------------------------------------------------------------------------------

Verdict order_selection() {
    const RunConfig cfg = shipped("msd_order_select.yaml");
    const RunData data = load_run_data(cfg);
    const auto rows = group_lasso_select(data.train, &*data.test, cfg.baseline.build(), cfg.train,
                                         cfg.order_select->target, cfg.order_select->rho_grid);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& row : rows) best = std::min(best, row.refit.nrmse_percent);
    bool ok = false;
    std::ostringstream os;
    for (const auto& row : rows) {
        os << fmt("rho %.0e: n_xa %ld nrmse %.4f%%; ", row.rho, static_cast<long>(row.surviving),
                  row.refit.nrmse_percent);
        if (row.surviving == 0 && row.refit.nrmse_percent <= 1.5 * best) ok = true;
    }
    return verdict(ok, os.str());
}

// ---- 11 --------------------------------------------------------------------------------

Verdict cascaded_tanks() {
    RunConfig cfg = shipped("cct.yaml");
    if (const char* env = std::getenv("LFR_CCT_BENCHMARK")) cfg.data.cct_benchmark = fs::path(env);
    if (!cfg.data.cct_benchmark || !fs::exists(*cfg.data.cct_benchmark))
        return {Outcome::Skip, "benchmark file not found (set LFR_CCT_BENCHMARK or data.cct_benchmark)"};
    const RunData data = load_run_data(cfg);
    const TrainResult r = fit(data.train, cfg.baseline.build(), cfg.train);
    const Metrics m = test_metrics(r.model, *data.test, cfg.n_init);
    return verdict(m.rmse <= 0.45, fmt("test RMSE %.4f", m.rmse));
}

}  // namespace

int main(int argc, char** argv) {
    const std::map<int, std::pair<const char*, std::function<Verdict()>>> criteria = {
        {1, {"well-posedness certificate sweep", wellposed_sweep}},
        {2, {"generalized Cayley contraction", cayley_sweep}},
        {3, {"FPI a-priori error bound", banach_bound}},
        {4, {"simulation-loss gradient", gradients}},
        {5, {"contracting parametrization", contraction}},
        {6, {"LTI Lipschitz constant", lti_lipschitz_check}},
        {7, {"l1 splitting optimizer", lasso}},
        {8, {"MSD end-to-end", msd_end_to_end}},
        {9, {"contracting MSD from large initial states", contracting_demo}},
        {10, {"group-lasso order selection", order_selection}},
        {11, {"cascaded tanks", cascaded_tanks}},
        {12, {"ANN Lipschitz flag", lipschitz_flag}},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failures = 0;
    for (const auto& [id, entry] : criteria) {
        if (!selected.empty() && !selected.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = entry.second();
        } catch (const std::exception& e) {
            v = {Outcome::Fail, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const char* tag = v.outcome == Outcome::Pass ? "PASS" : v.outcome == Outcome::Fail ? "FAIL" : "SKIP";
        if (v.outcome == Outcome::Fail) ++failures;
        std::printf("%s  %2d  %s: %s [%.1f s]\n", tag, id, entry.first, v.detail.c_str(), secs);
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
