#pragma once

// Constraint-free parametrizations of the interconnection matrix and the
// Lipschitz bookkeeping they depend on.

#include "lfr/linalg.hpp"
#include "lfr/model.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace lfr {

// ---- Lipschitz constants ------------------------------------------------------

/// ||[A B]||_2, the Lipschitz constant of (x, u) -> A x + B u.
double lti_lipschitz(const Matrix& a, const Matrix& b);

/// Sup of the central-difference Jacobian norm of `f` over a grid of `grid`
/// points per coordinate plus 10x as many seeded uniform samples, times 1.1.
double nonlinear_lipschitz_estimate(const std::function<Vector(const Vector&)>& f, const Vector& lo,
                                    const Vector& hi, int grid, std::uint64_t seed = 0);

double ann_lipschitz_bound(const AnnParams<double>& ann);

/// rho_L * max(prod ||W_i|| - L, 0)^2. `exact` selects the exact norm, otherwise
/// the power-iteration surrogate with `power_iters` steps.
template <typename Scalar>
Scalar lipschitz_penalty(const AnnParams<Scalar>& ann, double l, double rho_l, bool exact = false,
                         int power_iters = 30) {
    if (rho_l == 0.0 || ann.weights.empty()) return Scalar(0.0);
    Scalar prod(1.0);
    for (const auto& w : ann.weights) prod = prod * (exact ? spectral_norm_exact(w) : spectral_norm_diff(w, power_iters));
    const Scalar excess = prod - Scalar(l);
    if (!(value_of(excess) > 0.0)) return Scalar(0.0);
    return Scalar(rho_l) * excess * excess;
}

enum class LipschitzMode { Safe, Paper };

LipschitzMode parse_lipschitz_mode(const std::string& s);
std::string to_string(LipschitzMode m);

/// Paper mode: max(L_f, L_h). Safe mode: max(sqrt(L_f^2 + L_h^2), L_ann).
double phi_nl_lipschitz(double l_f, double l_h, double l_ann, LipschitzMode mode);
double phi_nl_lipschitz(const BaselineModel& baseline, const AnnParams<double>& ann, LipschitzMode mode);

/// (L_f, L_h) of the baseline block as seen inside the LFR, i.e. of the map
/// z_b -> w_b including the normalization wrappers. Linear baselines are
/// evaluated exactly, others through `nonlinear_lipschitz_estimate` on the
/// operating box.
std::pair<double, double> scaled_baseline_lipschitz(const BaselineModel& baseline, const Vector& theta,
                                                    const Normalizer& norm, int grid = 11);

// ---- well-posed D_zw -------------------------------------------------------------

template <typename Scalar>
struct WellPosedFree {
    CayleyFree<Scalar> dzw;  // core of shape max(n_z, n_w) x min(n_z, n_w)
    Scalar d = Scalar(-10.0);
    double l_phi = 1.0;
};

/// Shape (rows, cols) of the Cayley core for a rows x cols target.
std::pair<Index, Index> cayley_core_shape(Index rows, Index cols);

/// Cayley output reshaped to rows x cols (transposed when rows < cols).
template <typename Scalar>
MatrixX<Scalar> cayley_shaped(const CayleyFree<Scalar>& core, Index rows, Index cols) {
    const MatrixX<Scalar> m = cayley_general(core);
    if (rows >= cols) {
        if (m.rows() != rows || m.cols() != cols) throw InvalidInputError("Cayley core has the wrong shape");
        return m;
    }
    if (m.rows() != cols || m.cols() != rows) throw InvalidInputError("Cayley core has the wrong shape");
    return m.transpose();
}

/// D_zw = (sigmoid(d) / L) * Dbar with ||Dbar|| < 1, so L ||D_zw|| < 1.
template <typename Scalar>
MatrixX<Scalar> build_dzw(const WellPosedFree<Scalar>& f, Index n_z, Index n_w) {
    if (!(f.l_phi > 0.0)) throw InvalidInputError("build_dzw: L_phi must be positive");
    const Scalar scale = sigmoid(f.d) / Scalar(f.l_phi);
    return scale * cayley_shaped(f.dzw, n_z, n_w);
}

// ---- contracting A, B_w, C_z ---------------------------------------------------

enum class SigmaCMode { Safe, Paper };

SigmaCMode parse_sigma_c_mode(const std::string& s);
std::string to_string(SigmaCMode m);

template <typename Scalar>
struct ContractingFree {
    CayleyFree<Scalar> a_core, bw_core, cz_core;
    Scalar alpha = Scalar(0.0);
    Scalar beta = Scalar(0.0);
    Scalar gamma = Scalar(0.0);
    double alpha_bar = 1.0;
};

template <typename Scalar>
struct ContractingBlocks {
    MatrixX<Scalar> a, bw, cz;
    Scalar sigma_a, sigma_b, sigma_c, kappa;
};

template <typename Scalar>
ContractingBlocks<Scalar> build_contracting(const ContractingFree<Scalar>& f, const MatrixX<Scalar>& dzw,
                                            double l_phi, const LfrDims& dims, SigmaCMode mode) {
    using std::exp;
    using std::sqrt;
    if (!(f.alpha_bar > 0.0 && f.alpha_bar <= 1.0)) throw InvalidInputError("alpha_bar must lie in (0, 1]");
    if (!(l_phi > 0.0)) throw InvalidInputError("build_contracting: L_phi must be positive");
    const Scalar dnorm = spectral_norm_exact(dzw);
    if (!(l_phi * value_of(dnorm) < 1.0)) throw InvalidInputError("build_contracting: L ||D_zw|| must be < 1");

    ContractingBlocks<Scalar> out;
    out.kappa = Scalar(l_phi) / (Scalar(1.0) - Scalar(l_phi) * dnorm);
    out.sigma_a = sigmoid(f.alpha);
    const Scalar sqrt_ab(std::sqrt(f.alpha_bar));
    const Scalar r = (Scalar(1.0) - out.sigma_a) / out.kappa;
    const Scalar sqrt_r = sqrt(r);
    const Scalar eb = exp(f.beta);
    const Scalar s = sigmoid(f.gamma);
    out.sigma_b = sqrt_ab * eb * sqrt_r;
    if (mode == SigmaCMode::Safe) {
        out.sigma_c = sqrt_ab / eb * sqrt_r * (Scalar(1.0) - s);
    } else {
        out.sigma_c = sqrt_ab / eb * sqrt_r - sqrt_ab * s / (out.kappa * eb * sqrt_r);
        if (!(value_of(out.sigma_c) >= 0.0))
            throw InvalidInputError("build_contracting: paper-mode sigma_C is negative (sigmoid(gamma) > 1 - sigma_A)");
    }
    out.a = Scalar(f.alpha_bar) * out.sigma_a * cayley_shaped(f.a_core, dims.n_x(), dims.n_x());
    out.bw = out.sigma_b * cayley_shaped(f.bw_core, dims.n_x(), dims.n_w());
    out.cz = out.sigma_c * cayley_shaped(f.cz_core, dims.n_z(), dims.n_x());
    return out;
}

/// ||A|| + kappa ||B_w|| ||C_z||, with kappa = L / (1 - L ||D_zw||).
double contraction_bound(const Matrix& a, const Matrix& bw, const Matrix& cz, const Matrix& dzw, double l_phi);

// ---- parameter sets ----------------------------------------------------------------

enum class ParamMode { Free, DzwZero, DzwAbOnly, WellPosed, Contracting };

ParamMode parse_param_mode(const std::string& s);
std::string to_string(ParamMode m);

/// Everything that maps a flat free-variable vector to a model.
struct ParamSpec {
    LfrDims dims;
    ParamMode mode = ParamMode::WellPosed;
    SigmaCMode sigma_c_mode = SigmaCMode::Safe;
    double l_phi = 1.0;
    double alpha_bar = 1.0;
    double cayley_eps = 1e-4;
    Activation activation = Activation::Tanh;
    std::vector<Index> hidden;  // ANN hidden layer widths
    std::shared_ptr<const BaselineModel> baseline;
    Normalizer norm;
    FpiOptions fpi;
    std::vector<LayoutEntry> layout;

    const LayoutEntry* find(const std::string& name) const;
    const LayoutEntry& entry(const std::string& name) const;
    Index size() const;
    /// True when block `id` is stored entry-by-entry in the free vector.
    bool is_direct(BlockId id) const;
};

/// Builds the layout for the given settings (x0, theta_b, ANN, then blocks).
void build_layout(ParamSpec& spec);

struct ParamSet {
    ParamSpec spec;
    Vector theta;
    Vector mask;  // 1 free, 0 frozen

    Matrix block(const std::string& name) const;
    void set_block(const std::string& name, const Matrix& value);
    void freeze(const std::string& name);
};

template <typename Scalar>
struct Realized {
    LfrModelT<Scalar> model;
    VectorX<Scalar> x0;
    std::optional<ContractingBlocks<Scalar>> contracting;
};

namespace detail {

template <typename Scalar>
MatrixX<Scalar> slice(const ParamSpec& spec, const VectorX<Scalar>& theta, const std::string& name) {
    const LayoutEntry& e = spec.entry(name);
    return Eigen::Map<const MatrixX<Scalar>>(theta.data() + e.offset, e.rows, e.cols);
}

template <typename Scalar>
CayleyFree<Scalar> core(const ParamSpec& spec, const VectorX<Scalar>& theta, const std::string& prefix) {
    CayleyFree<Scalar> c;
    c.x = slice(spec, theta, prefix + ".X");
    c.y = slice(spec, theta, prefix + ".Y");
    c.z = slice(spec, theta, prefix + ".Z");
    c.eps = spec.cayley_eps;
    return c;
}

template <typename Scalar>
Scalar scalar(const ParamSpec& spec, const VectorX<Scalar>& theta, const std::string& name) {
    return theta(spec.entry(name).offset);
}

}  // namespace detail

/// Realizes the model (and x0) from free variables.
template <typename Scalar>
Realized<Scalar> realize(const ParamSpec& spec, const VectorX<Scalar>& theta) {
    if (theta.size() != spec.size()) throw InvalidInputError("realize: parameter vector has the wrong length");
    const LfrDims& d = spec.dims;
    Realized<Scalar> r;
    LfrModelT<Scalar>& m = r.model;
    m.dims = d;
    m.baseline = spec.baseline;
    m.norm = spec.norm;
    m.fpi = spec.fpi;
    r.x0 = detail::slice(spec, theta, "x0");
    if (spec.find("theta_b"))
        m.theta_b = detail::slice(spec, theta, "theta_b");
    else
        m.theta_b = VectorX<Scalar>(0);
    m.ann.activation = spec.activation;
    if (d.has_ann()) {
        for (std::size_t i = 0; i <= spec.hidden.size(); ++i) {
            m.ann.weights.push_back(detail::slice(spec, theta, "ann.W" + std::to_string(i)));
            m.ann.biases.push_back(detail::slice(spec, theta, "ann.b" + std::to_string(i)));
        }
    }
    m.blocks = LfrBlocks<Scalar>::zeros(d);
    for (BlockId id : kAllBlocks)
        if (spec.is_direct(id)) m.blocks[id] = detail::slice(spec, theta, block_name(id));

    if (spec.mode == ParamMode::DzwAbOnly)
        m.blocks.Dzw.block(d.n_zb(), 0, d.n_za, d.n_wb()) = detail::slice(spec, theta, "Dzw.ab");
    if (spec.mode == ParamMode::WellPosed || spec.mode == ParamMode::Contracting) {
        WellPosedFree<Scalar> wp;
        wp.dzw = detail::core(spec, theta, "dzw");
        wp.d = detail::scalar(spec, theta, "dzw.d");
        wp.l_phi = spec.l_phi;
        m.blocks.Dzw = build_dzw(wp, d.n_z(), d.n_w());
    }
    if (spec.mode == ParamMode::Contracting) {
        ContractingFree<Scalar> cf;
        cf.a_core = detail::core(spec, theta, "A");
        cf.bw_core = detail::core(spec, theta, "Bw");
        cf.cz_core = detail::core(spec, theta, "Cz");
        cf.alpha = detail::scalar(spec, theta, "alpha");
        cf.beta = detail::scalar(spec, theta, "beta");
        cf.gamma = detail::scalar(spec, theta, "gamma");
        cf.alpha_bar = spec.alpha_bar;
        auto cb = build_contracting(cf, m.blocks.Dzw, spec.l_phi, d, spec.sigma_c_mode);
        m.blocks.A = cb.a;
        m.blocks.Bw = cb.bw;
        m.blocks.Cz = cb.cz;
        r.contracting = std::move(cb);
    }
    return r;
}

Realized<double> realize(const ParamSet& p);

struct InitOptions {
    std::uint64_t seed = 0;
    double coupling_std = 1e-2;  // x_a couplings
    int contracting_steps = 500;
    const Dataset* data = nullptr;  // training data for the post-check
};

struct InitReport {
    double nrmse_vs_baseline = 0.0;  // percent
    bool post_check_passed = true;
    std::string note;
};

/// Parameters that make the LFR model reproduce the baseline: z_b carries the
/// scaled (x_b, u), x_b+ takes the f part of w_b and y takes the h part.
ParamSet init_fp_equivalent(const ParamSpec& spec, const Vector& x0_physical, const InitOptions& opts,
                            InitReport* report = nullptr);

/// Copies realized blocks, ANN, theta_b and x0 of `model` into a parameter set
/// for `spec`. Blocks that `spec` parametrizes indirectly are taken from `donor`
/// when its layout matches, otherwise left at the spec defaults.
ParamSet params_from_model(const ParamSpec& spec, const LfrModel& model, const Vector& x0,
                           const ParamSet* donor = nullptr);

/// Baseline-state part of x0 in normalized coordinates.
Vector normalize_state(const Normalizer& norm, const Vector& x_physical, Index n_xa);

}  // namespace lfr
