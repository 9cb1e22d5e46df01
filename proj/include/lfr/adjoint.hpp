#pragma once

// Gradient of the free-run simulation loss
//
//   V = (1/N) sum_k ||y_n(k) - yhat_n(k)||^2     (normalized outputs)
//
// with respect to the realized blocks, the ANN, theta_b and x0. The
// production path is a backward-in-time adjoint sweep that differentiates each
// fixed point implicitly; the recorded variants below build the same loss
// scalar-by-scalar on a Tape and serve as oracles.

#include "lfr/diff.hpp"
#include "lfr/model.hpp"

#include <vector>

namespace lfr {

struct TrajectoryGradient {
    double loss = 0.0;
    bool diverged = false;
    Index diverged_at = -1;
    FpiStats fpi;

    LfrBlocks<double> d_blocks;
    std::vector<Matrix> d_ann_w;
    std::vector<Vector> d_ann_b;
    Vector d_theta_b;
    Vector d_x0;
};

/// Local evaluation of phi_NL at z: output, Jacobian and the intermediates
/// needed for parameter vector-Jacobian products.
struct PhiLocal {
    Vector z;
    Vector w;
    Matrix jac;  // n_w x n_z
    Vector x_phys, u_phys;
    std::vector<Vector> ann_pre;  // pre-activations per layer
    std::vector<Vector> ann_in;   // layer inputs
};

PhiLocal phi_local(const LfrModel& m, const Vector& z);

/// Accumulates v^T dphi/d(theta_b, ANN) at the point described by `local`.
void phi_param_vjp(const LfrModel& m, const PhiLocal& local, const Vector& v, TrajectoryGradient& acc);

/// Loss and (optionally) its gradient. A non-finite simulation sets `diverged`
/// and reports kDivergedLoss with a zero gradient. Inputs and outputs are
/// normalized, rows are samples.
TrajectoryGradient simulation_loss_gradient(const LfrModel& m, const Vector& x0, const Matrix& u_n,
                                            const Matrix& y_n, bool with_gradient = true);

/// Records the loss as a single tape node whose partials come from
/// `simulation_loss_gradient`.
Var record_simulation_loss(Tape& tape, const LfrModelT<Var>& m, const VectorX<Var>& x0, const Matrix& u_n,
                           const Matrix& y_n, TrajectoryGradient* info = nullptr);

enum class FixedPointGrad { Implicit, Unrolled };

/// Scalar-level recording of the same loss. Implicit mode solves each fixed
/// point in double and records it through `fixed_point_on_tape`; unrolled mode
/// records `unroll_iters` applications of g starting from C_z x + D_zu u.
Var simulation_loss_on_tape(Tape& tape, const LfrModelT<Var>& m, const VectorX<Var>& x0, const Matrix& u_n,
                            const Matrix& y_n, FixedPointGrad mode, int unroll_iters = 30);

}  // namespace lfr
