#pragma once

// Full-batch first-order and quasi-Newton minimizers on flat vectors, plus the
// positive/negative splitting that turns l1 terms into bound-constrained linear
// ones.

#include "lfr/types.hpp"

#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace lfr {

/// Returns f(x) and writes the gradient into `grad` (already sized).
using Objective = std::function<double(const Vector& x, Vector& grad)>;

/// Objective value reported for a diverged simulation.
inline constexpr double kDivergedLoss = 1e12;

struct Bounds {
    Vector lower;
    Vector upper;

    static Bounds unbounded(Index n);
    Vector project(const Vector& x) const;
};

struct OptimResult {
    Vector x;
    double f = 0.0;
    int iters = 0;
    int rejected = 0;
    bool aborted = false;
    bool line_search_failed = false;
    bool converged = false;
    std::vector<double> trace;  // objective per accepted iteration
    std::string message;
};

struct AdamOptions {
    int epochs = 4000;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int max_rejections = 10;
    std::function<void(int, const Vector&, double)> on_epoch;
};

/// Bias-corrected Adam. A non-finite (or diverged) evaluation rejects the step:
/// the previous iterate is restored and the learning rate halved. Ten
/// consecutive rejections abort. `bounds`, if given, is applied by projection.
OptimResult adam_minimize(const Objective& fn, Vector x0, const AdamOptions& opts, const Bounds* bounds = nullptr);

struct LbfgsOptions {
    int max_iters = 5000;
    int memory = 10;
    double c1 = 1e-4;
    double pgtol = 1e-10;
    double ftol = 1e-15;
    int max_backtracks = 40;
    std::function<void(int, const Vector&, double)> on_iter;
};

/// Projected limited-memory BFGS for lower/upper bounds: the two-loop direction
/// is computed on the variables not held at an active bound, and the trial
/// point is projected back onto the box before an Armijo backtracking test.
OptimResult lbfgs_b_minimize(const Objective& fn, Vector x0, const Bounds& bounds, const LbfgsOptions& opts);

/// theta = p - q on selected coordinates, with p, q >= 0. The split vector holds
/// p in place of theta_i and appends the q parts.
struct L1Split {
    Index n = 0;                  // length of the unsplit vector
    std::vector<Index> index;     // split coordinates
    Vector weight;                // l1 weight per split coordinate

    Index split_size() const { return n + static_cast<Index>(index.size()); }
    Vector split(const Vector& theta) const;
    Vector merge(const Vector& xi) const;
    /// Unsplit bounds extended with [0, inf) for p and q.
    Bounds bounds(const Bounds& base) const;
    /// f(xi) = smooth(merge(xi)) + sum_i w_i (p_i + q_i).
    Objective wrap(const Objective& smooth) const;
    double l1_value(const Vector& theta) const;
};

}  // namespace lfr
