#pragma once

// Loss assembly, regularizers, the two-phase optimizer pipeline and the
// structure-discovery / order-selection procedures built on it.

#include "lfr/adjoint.hpp"
#include "lfr/metrics.hpp"
#include "lfr/optim.hpp"
#include "lfr/param.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace lfr {

enum class X0Init { Zero, Selector, Output };
X0Init parse_x0_init(const std::string& s);
std::string to_string(X0Init v);

struct TrainConfig {
    // Regularization weights.
    double rho_a_l2 = 0.0;
    double rho_a_l1 = 0.0;
    double rho_x0 = 0.0;
    double rho_b = 0.005;
    double rho_l = 0.1;
    std::optional<double> rho_lfr;  // unset: eps_reweight * V_base in discovery, 0 in plain fits
    double rho_za = 0.0;
    double rho_wa = 0.0;
    double rho_xa = 0.0;

    // Optimizers.
    int adam_epochs = 4000;
    int lbfgs_epochs = 5000;
    double adam_lr = 1e-3;
    int lbfgs_memory = 10;

    // Fixed-point iterations.
    double eps_fpi = 1e-5;
    int n_max = 10;

    // Reweighted l1.
    double eps_reweight = 1e-3;
    int reweight_max_iters = 10;

    // Structure.
    Index n_xa = 0;
    Index n_za = 1;
    Index n_wa = 1;
    std::vector<Index> hidden = {8};
    Activation activation = Activation::Tanh;
    ParamMode param_mode = ParamMode::WellPosed;
    LipschitzMode l_mode = LipschitzMode::Safe;
    SigmaCMode sigma_c_mode = SigmaCMode::Safe;
    std::optional<double> lipschitz_bound;  // L; unset: the baseline's own bound
    double alpha_bar = 1.0;
    double cayley_eps = 1e-4;
    int power_iters = 30;

    // Initial state.
    bool train_x0 = true;
    X0Init x0_init = X0Init::Selector;

    std::uint64_t seed = 0;
    int certificate_every = 100;
    double group_smoothing = 1e-6;
    double abs_smoothing = 1e-6;
    bool verbose = false;

    void validate() const;
};

struct Certificates {
    double l_phi = 0.0;
    double dzw_norm = 0.0;
    double wellposed_product = 0.0;  // L_phi ||D_zw||
    bool wellposed_ok = true;
    double contraction_bound = 0.0;  // ||A|| + kappa ||B_w|| ||C_z||
    double alpha_bar = 1.0;
    bool contraction_ok = true;
    int contraction_checks = 0;
    int contraction_failures = 0;
    double ann_bound = 0.0;      // exact prod ||W_i||
    bool lipschitz_violated = false;
    bool present = false;        // well-posed or contracting mode
};

struct TraceEntry {
    std::string phase;
    int iter = 0;
    double objective = 0.0;
    double loss = 0.0;
};

struct SparsityReport {
    Index total = 0;
    Index zeroed = 0;
    bool dzw_zeroed = false;
    std::vector<std::pair<std::string, Index>> per_block;  // zeroed count per block
    int iterations = 0;
    bool converged = false;
    double rho_lfr = 0.0;
    double fraction() const { return total > 0 ? static_cast<double>(zeroed) / static_cast<double>(total) : 0.0; }
};

struct TrainResult {
    ParamSet params;
    LfrModel model;
    Vector x0;  // normalized
    std::vector<TraceEntry> trace;
    FpiStats fpi;
    Certificates cert;
    std::optional<SparsityReport> sparsity;
    double loss = 0.0;       // final simulation loss (normalized units)
    double objective = 0.0;  // final total objective
    Metrics train_metrics;   // physical units
    bool adam_aborted = false;
    bool line_search_failed = false;
    std::vector<std::string> warnings;
};

// ---- losses and regularizers ------------------------------------------------------

/// (1/N) sum ||y_n - yhat_n||^2 on normalized outputs of the free-run simulation.
/// Diverged simulations return kDivergedLoss.
double loss_simulation(const LfrModel& model, const Dataset& data, const Vector& x0);

template <typename Scalar>
Scalar reg_ann(const AnnParams<Scalar>& ann, double rho_l2, double rho_l1) {
    using std::abs;
    Scalar sq(0.0), ab(0.0);
    auto acc = [&](const auto& m) {
        for (Index i = 0; i < m.size(); ++i) {
            sq = sq + m.data()[i] * m.data()[i];
            ab = ab + abs(m.data()[i]);
        }
    };
    for (std::size_t i = 0; i < ann.weights.size(); ++i) {
        acc(ann.weights[i]);
        acc(ann.biases[i]);
    }
    return Scalar(rho_l2 / 2.0) * sq + Scalar(rho_l1) * ab;
}

template <typename Scalar>
Scalar reg_x0(const VectorX<Scalar>& x0, double rho) {
    Scalar s(0.0);
    for (Index i = 0; i < x0.size(); ++i) s = s + x0(i) * x0(i);
    return Scalar(rho / 2.0) * s;
}

/// (rho/2) ||diag(theta0)^{-1} (theta - theta0)||^2 over the trainable entries.
template <typename Scalar>
Scalar reg_baseline(const VectorX<Scalar>& theta, const Vector& theta0, double rho,
                    const std::vector<bool>* trainable = nullptr) {
    Scalar s(0.0);
    if (rho == 0.0) return s;
    for (Index i = 0; i < theta.size(); ++i) {
        if (trainable && !(*trainable)[static_cast<std::size_t>(i)]) continue;
        if (theta0(i) == 0.0) throw ConfigError("reg_baseline: nominal parameter " + std::to_string(i) + " is zero");
        const Scalar r = (theta(i) - Scalar(theta0(i))) / Scalar(theta0(i));
        s = s + r * r;
    }
    return Scalar(rho / 2.0) * s;
}

/// rho * sum lambda_ij |W_ij| over all nine blocks.
template <typename Scalar>
Scalar reg_lfr_l1(const LfrBlocks<Scalar>& blocks, const LfrBlocks<double>& weights, double rho) {
    using std::abs;
    Scalar s(0.0);
    if (rho == 0.0) return s;
    for (BlockId id : kAllBlocks) {
        const auto& m = blocks[id];
        const Matrix& w = weights[id];
        for (Index i = 0; i < m.size(); ++i)
            if (w.data()[i] != 0.0) s = s + Scalar(w.data()[i]) * abs(m.data()[i]);
    }
    return Scalar(rho) * s;
}

/// rho_lfr rule of thumb: eps * V_base.
double rho_lfr_rule_of_thumb(double eps, double v_base);

enum class GroupTarget { Za, Wa, Xa };
GroupTarget parse_group_target(const std::string& s);
std::string to_string(GroupTarget t);

/// Indices (into the realized model) belonging to one group.
struct GroupMember {
    BlockId block;
    Index row, col;
};
// First-layer weight column, or last-layer weight row / bias entry.
struct AnnMember {
    enum Kind { FirstColumn, LastRow, LastBias } kind;
    Index index;
};
struct Group {
    std::vector<GroupMember> blocks;
    std::vector<AnnMember> ann;
};

std::vector<Group> groups_for(const LfrDims& dims, GroupTarget target);

template <typename Scalar>
Scalar group_norm(const LfrModelT<Scalar>& m, const Group& g, double smoothing) {
    using std::sqrt;
    Scalar s(smoothing * smoothing);
    for (const auto& e : g.blocks) {
        const Scalar& v = m.blocks[e.block](e.row, e.col);
        s = s + v * v;
    }
    if (!m.ann.weights.empty()) {
        for (const auto& e : g.ann) {
            if (e.kind == AnnMember::LastBias) {
                const Scalar& v = m.ann.biases.back()(e.index);
                s = s + v * v;
                continue;
            }
            const auto& w = e.kind == AnnMember::FirstColumn ? m.ann.weights.front() : m.ann.weights.back();
            const Index n = e.kind == AnnMember::FirstColumn ? w.rows() : w.cols();
            for (Index k = 0; k < n; ++k) {
                const Scalar& v = e.kind == AnnMember::FirstColumn ? w(k, e.index) : w(e.index, k);
                s = s + v * v;
            }
        }
    }
    return sqrt(s) - Scalar(smoothing);
}

/// sum over targets of rho * sum_i ||theta_group_i||_2 (smoothing 0 gives the exact norm).
template <typename Scalar>
Scalar reg_group_lasso(const LfrModelT<Scalar>& m, double rho_za, double rho_wa, double rho_xa,
                       double smoothing = 0.0) {
    Scalar s(0.0);
    const std::pair<GroupTarget, double> parts[] = {
        {GroupTarget::Za, rho_za}, {GroupTarget::Wa, rho_wa}, {GroupTarget::Xa, rho_xa}};
    for (const auto& [t, rho] : parts) {
        if (rho == 0.0) continue;
        for (const Group& g : groups_for(m.dims, t)) s = s + Scalar(rho) * group_norm(m, g, smoothing);
    }
    return s;
}

/// Rejects group-lasso targets that touch blocks realized through Cayley cores.
void check_group_lasso_mode(ParamMode mode, GroupTarget target);

// ---- training ---------------------------------------------------------------------

struct FitContext {
    std::shared_ptr<const BaselineModel> baseline;
    Normalizer norm;
    double l_phi = 0.0;
    double l_ann = 0.0;  // target bound for the ANN
    Vector x0_physical;
};

/// Normalizer, Lipschitz constants and initial state for a dataset/baseline pair.
FitContext make_context(const Dataset& data, std::shared_ptr<const BaselineModel> baseline, const TrainConfig& cfg,
                        std::vector<std::string>* warnings = nullptr);

ParamSpec make_spec(const FitContext& ctx, const TrainConfig& cfg);

struct FitOptions {
    const ParamSet* warm = nullptr;               // start here instead of the FP-equivalent init
    const LfrBlocks<double>* lfr_weights = nullptr;
    double rho_lfr = 0.0;
};

TrainResult fit(const Dataset& data, std::shared_ptr<const BaselineModel> baseline, const TrainConfig& cfg,
                const FitOptions& opts = {});
TrainResult fit(const Dataset& data, const FitContext& ctx, const TrainConfig& cfg, const FitOptions& opts = {});

/// Certificates for a realized parameter set.
Certificates certify(const ParamSet& p, const TrainConfig& cfg);

/// Next reweighting weights 1 / (|W_ij| + eps).
LfrBlocks<double> reweight(const LfrBlocks<double>& blocks, double eps);

/// Iteratively reweighted l1 on the realized interconnection matrix, then
/// masking of entries below eps and a refit without the penalty.
TrainResult reweighted_l1_discover(const Dataset& data, std::shared_ptr<const BaselineModel> baseline,
                                   const TrainConfig& cfg, TrainResult* dense = nullptr);

/// Removes augmentation dimensions not listed in the keep sets. The ANN is
/// dropped when either n_za or n_wa becomes zero.
LfrModel reduce_dims(const LfrModel& m, const std::vector<Index>& keep_xa, const std::vector<Index>& keep_za,
                     const std::vector<Index>& keep_wa, Vector* x0 = nullptr);

/// Exact l2 norms of the target's groups.
Vector group_norms(const LfrModel& m, GroupTarget target);
/// Group i survives iff its norm exceeds 1e-4 * max(1, max_j norm_j).
std::vector<Index> surviving_groups(const Vector& norms);

struct OrderSelectRow {
    double rho = 0.0;
    Index surviving = 0;
    std::vector<Index> kept;
    Metrics refit;
    double refit_loss = 0.0;
};

std::vector<OrderSelectRow> group_lasso_select(const Dataset& train, const Dataset* eval,
                                               std::shared_ptr<const BaselineModel> baseline, const TrainConfig& cfg,
                                               GroupTarget target, const std::vector<double>& rho_grid);

/// Minimizes the loss over the first n_i samples with respect to x0 only,
/// starting from zero; on divergence retries from a guess built from the
/// measured output when the baseline output reads a state.
Vector estimate_x0_test(const LfrModel& model, const Dataset& test, Index n_i);

/// Simulates with x0 (normalized) and returns physical outputs.
Matrix predict(const LfrModel& model, const Vector& x0, const Matrix& u_physical);

}  // namespace lfr
