#pragma once

// The LFR augmentation structure:
//
//   [x+; y; z] = W [x; u; w],   w = [phi_FP(z_b); phi_ANN(z_a)]
//
// All signals inside the structure are normalized. The baseline block is
// evaluated in physical units through scaling wrappers at the LFR boundary.

#include "lfr/diff.hpp"
#include "lfr/types.hpp"

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace lfr {

// ---- dimensions and interconnection blocks ---------------------------------

struct LfrDims {
    Index n_xb = 1;  // baseline states
    Index n_xa = 0;  // augmentation states
    Index n_u = 1;
    Index n_y = 1;
    Index n_za = 0;  // ANN input dimension
    Index n_wa = 0;  // ANN output dimension

    Index n_x() const { return n_xb + n_xa; }
    Index n_zb() const { return n_xb + n_u; }
    Index n_wb() const { return n_xb + n_y; }
    Index n_z() const { return n_zb() + n_za; }
    Index n_w() const { return n_wb() + n_wa; }
    bool has_ann() const { return n_za > 0 && n_wa > 0; }

    void validate() const;
    bool operator==(const LfrDims&) const = default;
};

enum class BlockId { A, Bu, Bw, Cy, Dyu, Dyw, Cz, Dzu, Dzw };
inline constexpr std::array<BlockId, 9> kAllBlocks = {BlockId::A,   BlockId::Bu,  BlockId::Bw,
                                                      BlockId::Cy,  BlockId::Dyu, BlockId::Dyw,
                                                      BlockId::Cz,  BlockId::Dzu, BlockId::Dzw};
const char* block_name(BlockId id);
std::pair<Index, Index> block_shape(const LfrDims& dims, BlockId id);

template <typename Scalar>
struct LfrBlocks {
    MatrixX<Scalar> A, Bu, Bw, Cy, Dyu, Dyw, Cz, Dzu, Dzw;

    static LfrBlocks zeros(const LfrDims& d) {
        LfrBlocks b;
        for (BlockId id : kAllBlocks) {
            auto [r, c] = block_shape(d, id);
            b[id] = MatrixX<Scalar>::Zero(r, c);
        }
        return b;
    }

    MatrixX<Scalar>& operator[](BlockId id) {
        switch (id) {
        case BlockId::A: return A;
        case BlockId::Bu: return Bu;
        case BlockId::Bw: return Bw;
        case BlockId::Cy: return Cy;
        case BlockId::Dyu: return Dyu;
        case BlockId::Dyw: return Dyw;
        case BlockId::Cz: return Cz;
        case BlockId::Dzu: return Dzu;
        case BlockId::Dzw: return Dzw;
        }
        return A;
    }
    const MatrixX<Scalar>& operator[](BlockId id) const { return const_cast<LfrBlocks&>(*this)[id]; }

    Index entry_count() const {
        Index n = 0;
        for (BlockId id : kAllBlocks) n += (*this)[id].size();
        return n;
    }
};

void validate(const LfrBlocks<double>& blocks, const LfrDims& dims);

/// The full interconnection matrix [[A Bu Bw]; [Cy Dyu Dyw]; [Cz Dzu Dzw]].
Matrix assemble_w(const LfrBlocks<double>& blocks);

// ---- learning component -----------------------------------------------------

enum class Activation { Tanh, SwishScaled };

Activation parse_activation(const std::string& s);
std::string to_string(Activation a);

// swish(x) / 1.1 keeps the activation 1-Lipschitz (swish itself peaks at ~1.0998).
inline constexpr double kSwishScale = 1.1;

template <typename Scalar>
Scalar activate(Activation a, const Scalar& x) {
    using std::tanh;
    if (a == Activation::Tanh) return tanh(x);
    return x * sigmoid(x) / Scalar(kSwishScale);
}

double activation_derivative(Activation a, double x);

template <typename Scalar>
struct AnnParams {
    std::vector<MatrixX<Scalar>> weights;  // W_i is (out x in)
    std::vector<VectorX<Scalar>> biases;
    Activation activation = Activation::Tanh;

    Index input_dim() const { return weights.empty() ? 0 : weights.front().cols(); }
    Index output_dim() const { return weights.empty() ? 0 : weights.back().rows(); }
    Index param_count() const {
        Index n = 0;
        for (std::size_t i = 0; i < weights.size(); ++i) n += weights[i].size() + biases[i].size();
        return n;
    }
};

void validate(const AnnParams<double>& ann, Index n_za, Index n_wa);

/// Hidden layers use the activation, the output layer is affine.
template <typename Scalar>
VectorX<Scalar> ann_forward(const AnnParams<Scalar>& ann, const VectorX<Scalar>& z) {
    VectorX<Scalar> h = z;
    const std::size_t n = ann.weights.size();
    for (std::size_t i = 0; i < n; ++i) {
        VectorX<Scalar> pre = ann.weights[i] * h + ann.biases[i];
        if (i + 1 < n) {
            for (Index k = 0; k < pre.size(); ++k) pre(k) = activate(ann.activation, pre(k));
        }
        h = std::move(pre);
    }
    return h;
}

// ---- normalization ---------------------------------------------------------

struct Normalizer {
    Vector mu_u, sigma_u;
    Vector mu_y, sigma_y;
    Vector sigma_x;  // baseline-state scale

    static Normalizer identity(Index n_u, Index n_y, Index n_xb);
    void validate() const;

    // Rows are samples.
    Matrix normalize_u(const Matrix& u) const;
    Matrix normalize_y(const Matrix& y) const;
    Matrix denormalize_y(const Matrix& y) const;
    Matrix denormalize_u(const Matrix& u) const;
};

// ---- baseline --------------------------------------------------------------

struct OperatingBox {
    Vector x_lo, x_hi, u_lo, u_hi;
};

/// First-principles model x+ = f(x, u; theta), y = h(x, u; theta) in physical
/// units. Implementations provide a double and a recorded evaluation.
class BaselineModel {
public:
    virtual ~BaselineModel() = default;

    virtual std::string kind() const = 0;
    virtual Index n_x() const = 0;
    virtual Index n_u() const = 0;
    virtual Index n_y() const = 0;

    /// Stacked [f; h].
    virtual Vector eval(const Vector& x, const Vector& u, const Vector& theta) const = 0;
    virtual VectorX<Var> eval(const VectorX<Var>& x, const VectorX<Var>& u, const VectorX<Var>& theta) const = 0;

    /// d[f; h]/d[x; u]. The default records `eval` on a tape.
    virtual Matrix jacobian_z(const Vector& x, const Vector& u, const Vector& theta) const;
    /// d[f; h]/dtheta. The default records `eval` on a tape.
    virtual Matrix jacobian_theta(const Vector& x, const Vector& u, const Vector& theta) const;

    /// Index of the state that the output map reads directly, if any.
    virtual std::optional<Index> output_state_index() const { return std::nullopt; }
    /// True when [f; h] is linear in (x, u) for every theta.
    virtual bool is_linear() const { return false; }

    Index n_theta() const { return theta0_.size(); }
    const Vector& theta0() const { return theta0_; }
    const std::vector<bool>& trainable() const { return trainable_; }
    bool any_trainable() const;
    double lipschitz_f() const { return l_f_; }
    double lipschitz_h() const { return l_h_; }
    const OperatingBox& operating_box() const { return box_; }

    void set_trainable(std::vector<bool> flags);
    void set_lipschitz(double l_f, double l_h);
    void set_operating_box(OperatingBox box);

protected:
    void init_common(Vector theta0, std::vector<bool> trainable, double l_f, double l_h, OperatingBox box);

private:
    Vector theta0_;
    std::vector<bool> trainable_;
    double l_f_ = 0.0;
    double l_h_ = 0.0;
    OperatingBox box_;
};

/// f = A x + B u, h = C x + D u. Matrices are fixed (no physical parameters).
class LtiBaseline final : public BaselineModel {
public:
    LtiBaseline(Matrix a, Matrix b, Matrix c, Matrix d, std::string kind = "lti");

    std::string kind() const override { return kind_; }
    bool is_linear() const override { return true; }
    Index n_x() const override { return a_.rows(); }
    Index n_u() const override { return b_.cols(); }
    Index n_y() const override { return c_.rows(); }

    Vector eval(const Vector& x, const Vector& u, const Vector& theta) const override;
    VectorX<Var> eval(const VectorX<Var>& x, const VectorX<Var>& u, const VectorX<Var>& theta) const override;
    Matrix jacobian_z(const Vector& x, const Vector& u, const Vector& theta) const override;
    Matrix jacobian_theta(const Vector& x, const Vector& u, const Vector& theta) const override;
    std::optional<Index> output_state_index() const override;

    const Matrix& a() const { return a_; }
    const Matrix& b() const { return b_; }
    const Matrix& c() const { return c_; }
    const Matrix& d() const { return d_; }

private:
    Matrix a_, b_, c_, d_;
    std::string kind_;
};

// ---- dataset ----------------------------------------------------------------

struct Dataset {
    Matrix u;  // N x n_u, physical units
    Matrix y;  // N x n_y, physical units
    double ts = 1.0;
    std::string name;

    Index size() const { return u.rows(); }
    void validate() const;
    Dataset head(Index n) const;
};

// ---- the assembled model ----------------------------------------------------

struct FpiOptions {
    double tol = 1e-5;
    int n_max = 10;
    // In strict mode a non-converged solve raises NumericalError instead of
    // being recorded as a diagnostic.
    bool strict = false;
};

template <typename Scalar>
struct LfrModelT {
    LfrDims dims;
    LfrBlocks<Scalar> blocks;
    AnnParams<Scalar> ann;
    std::shared_ptr<const BaselineModel> baseline;
    VectorX<Scalar> theta_b;
    Normalizer norm;
    FpiOptions fpi;
};

using LfrModel = LfrModelT<double>;

void validate(const LfrModel& model);
LfrModelT<Var> as_constant_var(const LfrModel& model);
LfrModel values_of(const LfrModelT<Var>& model);

/// Baseline block in normalized coordinates: z_b = [x_b / sigma_x; (u - mu_u) / sigma_u]
/// maps to w_b = [f / sigma_x; (h - mu_y) / sigma_y].
template <typename Scalar>
VectorX<Scalar> phi_fp_scaled(const LfrModelT<Scalar>& m, const VectorX<Scalar>& zb) {
    const Index nx = m.dims.n_xb;
    const Index nu = m.dims.n_u;
    VectorX<Scalar> x(nx), u(nu);
    for (Index i = 0; i < nx; ++i) x(i) = zb(i) * Scalar(m.norm.sigma_x(i));
    for (Index i = 0; i < nu; ++i) u(i) = zb(nx + i) * Scalar(m.norm.sigma_u(i)) + Scalar(m.norm.mu_u(i));
    const VectorX<Scalar> fh = m.baseline->eval(x, u, m.theta_b);
    VectorX<Scalar> w(nx + m.dims.n_y);
    for (Index i = 0; i < nx; ++i) w(i) = fh(i) / Scalar(m.norm.sigma_x(i));
    for (Index i = 0; i < m.dims.n_y; ++i)
        w(nx + i) = (fh(nx + i) - Scalar(m.norm.mu_y(i))) / Scalar(m.norm.sigma_y(i));
    return w;
}

/// phi_NL(z) = [phi_FP(z_b); phi_ANN(z_a)]
template <typename Scalar>
VectorX<Scalar> phi_nl(const LfrModelT<Scalar>& m, const VectorX<Scalar>& z) {
    const LfrDims& d = m.dims;
    VectorX<Scalar> w(d.n_w());
    w.head(d.n_wb()) = phi_fp_scaled(m, VectorX<Scalar>(z.head(d.n_zb())));
    if (d.n_wa > 0) {
        if (d.has_ann())
            w.tail(d.n_wa) = ann_forward(m.ann, VectorX<Scalar>(z.tail(d.n_za)));
        else
            w.tail(d.n_wa).setZero();
    }
    return w;
}

/// g(z, x, u) = D_zw phi_NL(z) + C_z x + D_zu u
template <typename Scalar>
VectorX<Scalar> g_map(const LfrModelT<Scalar>& m, const VectorX<Scalar>& z, const VectorX<Scalar>& x,
                      const VectorX<Scalar>& u) {
    return m.blocks.Dzw * phi_nl(m, z) + m.blocks.Cz * x + m.blocks.Dzu * u;
}

struct FpiResult {
    Vector z;
    int iters = 0;
    double residual = 0.0;
    bool converged = true;
};

/// Fixed-point iteration z_n = g(z_{n-1}) from z_0 = C_z x + D_zu u. Stops when
/// ||z_n - z_{n-1}|| < tol or after n_max applications.
FpiResult solve_fixed_point(const LfrModel& model, const Vector& x, const Vector& u, double tol, int n_max);
inline FpiResult solve_fixed_point(const LfrModel& model, const Vector& x, const Vector& u) {
    return solve_fixed_point(model, x, u, model.fpi.tol, model.fpi.n_max);
}

struct StepResult {
    Vector x_next;  // normalized state
    Vector y_hat;   // physical output
    Vector z;
    Vector w;
    FpiResult fpi;
};

/// One transition. `u` is the normalized input.
StepResult step(const LfrModel& model, const Vector& x, const Vector& u_normalized);

struct FpiStats {
    int max_iters = 0;
    double mean_iters = 0.0;
    Index non_converged = 0;
};

struct SimulationResult {
    Matrix y_hat;  // N x n_y physical
    Matrix x;      // (N + 1) x n_x normalized states
    FpiStats fpi;
};

/// Free-run simulation on physical inputs (rows are samples). Raises
/// NumericalError naming the step when the state becomes non-finite.
SimulationResult simulate(const LfrModel& model, const Vector& x0, const Matrix& u_physical);

/// Means and standard deviations per channel (floored at 1e-8); the state scale
/// comes from the baseline simulated on the training input from `x0_physical`.
Normalizer fit_normalizer(const Dataset& data, const BaselineModel& baseline, const Vector& theta_b,
                          const Vector& x0_physical, std::vector<std::string>* warnings = nullptr);

/// Plain baseline simulation in physical units; returns (N+1) x n_x states and N x n_y outputs.
std::pair<Matrix, Matrix> simulate_baseline(const BaselineModel& baseline, const Vector& theta,
                                            const Vector& x0, const Matrix& u);

}  // namespace lfr
