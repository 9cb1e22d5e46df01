#include "lfr/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace lfr {

X0Init parse_x0_init(const std::string& s) {
    if (s == "zero") return X0Init::Zero;
    if (s == "selector") return X0Init::Selector;
    if (s == "output") return X0Init::Output;
    throw ConfigError("unknown x0_init '" + s + "' (expected zero, selector or output)");
}

std::string to_string(X0Init v) {
    switch (v) {
        case X0Init::Zero: return "zero";
        case X0Init::Selector: return "selector";
        case X0Init::Output: return "output";
    }
    return "zero";
}

void TrainConfig::validate() const {
    const std::pair<const char*, double> weights[] = {
        {"rho_a_l2", rho_a_l2}, {"rho_a_l1", rho_a_l1}, {"rho_x0", rho_x0}, {"rho_b", rho_b}, {"rho_L", rho_l},
        {"rho_za", rho_za},     {"rho_wa", rho_wa},     {"rho_xa", rho_xa}};
    for (const auto& [name, v] : weights)
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be a finite value >= 0");
    if (rho_lfr && !(*rho_lfr >= 0.0)) throw ConfigError("rho_LFR must be >= 0");
    if (adam_epochs < 0 || lbfgs_epochs < 0) throw ConfigError("epoch counts must be >= 0");
    if (!(adam_lr > 0.0)) throw ConfigError("adam_lr must be positive");
    if (lbfgs_memory < 1) throw ConfigError("lbfgs_memory must be >= 1");
    if (!(eps_fpi > 0.0)) throw ConfigError("eps_fpi must be positive");
    if (n_max < 1) throw ConfigError("n_max must be >= 1");
    if (!(eps_reweight > 0.0)) throw ConfigError("eps_reweight must be positive");
    if (reweight_max_iters < 0) throw ConfigError("reweight_max_iters must be >= 0");
    if (n_xa < 0 || n_za < 0 || n_wa < 0) throw ConfigError("augmentation dimensions must be >= 0");
    for (Index h : hidden)
        if (h < 1) throw ConfigError("hidden layer widths must be >= 1");
    if (lipschitz_bound && !(*lipschitz_bound > 0.0)) throw ConfigError("lipschitz_bound must be positive");
    if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) throw ConfigError("alpha_bar must lie in (0, 1]");
    if (!(cayley_eps > 0.0)) throw ConfigError("cayley_eps must be positive");
    if (power_iters < 1) throw ConfigError("power_iters must be >= 1");
    if (certificate_every < 1) throw ConfigError("certificate_every must be >= 1");
}

// ---- losses and regularizers ------------------------------------------------------

double loss_simulation(const LfrModel& model, const Dataset& data, const Vector& x0) {
    data.validate();
    if (data.size() < 1) throw InvalidInputError("loss_simulation: empty dataset");
    return simulation_loss_gradient(model, x0, model.norm.normalize_u(data.u), model.norm.normalize_y(data.y), false)
        .loss;
}

double rho_lfr_rule_of_thumb(double eps, double v_base) {
    if (!(eps > 0.0) || !(v_base >= 0.0)) throw InvalidInputError("rule of thumb needs eps > 0 and V_base >= 0");
    return eps * v_base;
}

GroupTarget parse_group_target(const std::string& s) {
    if (s == "za") return GroupTarget::Za;
    if (s == "wa") return GroupTarget::Wa;
    if (s == "xa") return GroupTarget::Xa;
    throw ConfigError("unknown group target '" + s + "' (expected za, wa or xa)");
}

std::string to_string(GroupTarget t) {
    switch (t) {
        case GroupTarget::Za: return "za";
        case GroupTarget::Wa: return "wa";
        case GroupTarget::Xa: return "xa";
    }
    return "za";
}

std::vector<Group> groups_for(const LfrDims& d, GroupTarget target) {
    std::vector<Group> out;
    auto rows = [](Group& g, BlockId id, Index row, Index cols) {
        for (Index j = 0; j < cols; ++j) g.blocks.push_back({id, row, j});
    };
    auto cols = [](Group& g, BlockId id, Index col, Index rows, Index skip_row = -1) {
        for (Index i = 0; i < rows; ++i)
            if (i != skip_row) g.blocks.push_back({id, i, col});
    };
    const Index nx = d.n_x(), nz = d.n_z(), nw = d.n_w();
    switch (target) {
        case GroupTarget::Za:
            for (Index i = 0; i < d.n_za; ++i) {
                Group g;
                const Index r = d.n_zb() + i;
                rows(g, BlockId::Cz, r, nx);
                rows(g, BlockId::Dzu, r, d.n_u);
                rows(g, BlockId::Dzw, r, nw);
                if (d.has_ann()) g.ann.push_back({AnnMember::FirstColumn, i});
                out.push_back(std::move(g));
            }
            break;
        case GroupTarget::Wa:
            for (Index i = 0; i < d.n_wa; ++i) {
                Group g;
                const Index c = d.n_wb() + i;
                cols(g, BlockId::Dzw, c, nz);
                cols(g, BlockId::Bw, c, nx);
                cols(g, BlockId::Dyw, c, d.n_y);
                if (d.has_ann()) {
                    g.ann.push_back({AnnMember::LastRow, i});
                    g.ann.push_back({AnnMember::LastBias, i});
                }
                out.push_back(std::move(g));
            }
            break;
        case GroupTarget::Xa:
            for (Index i = 0; i < d.n_xa; ++i) {
                Group g;
                const Index s = d.n_xb + i;
                rows(g, BlockId::A, s, nx);
                rows(g, BlockId::Bu, s, d.n_u);
                rows(g, BlockId::Bw, s, nw);
                cols(g, BlockId::A, s, nx, s);
                cols(g, BlockId::Cy, s, d.n_y);
                cols(g, BlockId::Cz, s, nz);
                out.push_back(std::move(g));
            }
            break;
    }
    return out;
}

void check_group_lasso_mode(ParamMode mode, GroupTarget target) {
    const bool cayley_dzw = mode == ParamMode::WellPosed || mode == ParamMode::Contracting;
    if (mode == ParamMode::Contracting || (cayley_dzw && target != GroupTarget::Xa))
        throw ConfigError("group lasso on " + to_string(target) + " touches blocks realized through Cayley cores in " +
                          to_string(mode) + " mode; use dzw_zero or free");
}

Vector group_norms(const LfrModel& m, GroupTarget target) {
    const auto groups = groups_for(m.dims, target);
    Vector out(static_cast<Index>(groups.size()));
    for (std::size_t i = 0; i < groups.size(); ++i) out(static_cast<Index>(i)) = group_norm(m, groups[i], 0.0);
    return out;
}

std::vector<Index> surviving_groups(const Vector& norms) {
    const double ref = std::max(1.0, norms.size() > 0 ? norms.maxCoeff() : 0.0);
    std::vector<Index> keep;
    for (Index i = 0; i < norms.size(); ++i)
        if (norms(i) > 1e-4 * ref) keep.push_back(i);
    return keep;
}

// ---- context / spec --------------------------------------------------------------

FitContext make_context(const Dataset& data, std::shared_ptr<const BaselineModel> baseline, const TrainConfig& cfg,
                        std::vector<std::string>* warnings) {
    if (!baseline) throw ConfigError("no baseline model");
    data.validate();
    if (data.u.cols() != baseline->n_u() || data.y.cols() != baseline->n_y())
        throw ConfigError("dataset channels do not match the baseline (n_u, n_y)");
    FitContext c;
    c.baseline = baseline;
    c.x0_physical = Vector::Zero(baseline->n_x());
    const auto idx = baseline->output_state_index();
    if (cfg.x0_init == X0Init::Selector && idx) c.x0_physical(*idx) = data.y(0, 0);
    if (cfg.x0_init == X0Init::Output) c.x0_physical.setConstant(data.y(0, 0));
    c.norm = fit_normalizer(data, *baseline, baseline->theta0(), c.x0_physical, warnings);
    const auto [lf, lh] = scaled_baseline_lipschitz(*baseline, baseline->theta0(), c.norm);
    const double base = phi_nl_lipschitz(lf, lh, 0.0, cfg.l_mode);
    c.l_ann = cfg.lipschitz_bound.value_or(base);
    c.l_phi = phi_nl_lipschitz(lf, lh, c.l_ann, cfg.l_mode);
    return c;
}

ParamSpec make_spec(const FitContext& ctx, const TrainConfig& cfg) {
    ParamSpec s;
    s.dims.n_xb = ctx.baseline->n_x();
    s.dims.n_xa = cfg.n_xa;
    s.dims.n_u = ctx.baseline->n_u();
    s.dims.n_y = ctx.baseline->n_y();
    s.dims.n_za = cfg.n_za;
    s.dims.n_wa = cfg.n_wa;
    if (s.dims.n_za == 0 || s.dims.n_wa == 0) s.dims.n_za = s.dims.n_wa = 0;
    s.mode = cfg.param_mode;
    s.sigma_c_mode = cfg.sigma_c_mode;
    s.l_phi = ctx.l_phi;
    s.alpha_bar = cfg.alpha_bar;
    s.cayley_eps = cfg.cayley_eps;
    s.activation = cfg.activation;
    s.hidden = cfg.hidden;
    s.baseline = ctx.baseline;
    s.norm = ctx.norm;
    s.fpi.tol = cfg.eps_fpi;
    s.fpi.n_max = cfg.n_max;
    build_layout(s);
    return s;
}

// ---- certificates ----------------------------------------------------------------

namespace {

Certificates certify_realized(const ParamSpec& spec, const LfrModel& m, double l_ann, double rho_l) {
    Certificates c;
    c.present = spec.mode == ParamMode::WellPosed || spec.mode == ParamMode::Contracting;
    c.l_phi = spec.l_phi;
    c.dzw_norm = spectral_norm_exact(m.blocks.Dzw);
    c.wellposed_product = c.l_phi * c.dzw_norm;
    c.wellposed_ok = c.wellposed_product < 1.0;
    c.alpha_bar = spec.alpha_bar;
    if (spec.mode == ParamMode::Contracting && c.wellposed_ok) {
        c.contraction_bound = contraction_bound(m.blocks.A, m.blocks.Bw, m.blocks.Cz, m.blocks.Dzw, spec.l_phi);
        c.contraction_ok = c.contraction_bound < spec.alpha_bar;
    } else if (spec.mode == ParamMode::Contracting) {
        c.contraction_ok = false;
    }
    if (m.dims.has_ann()) {
        c.ann_bound = ann_lipschitz_bound(m.ann);
        c.lipschitz_violated = rho_l > 0.0 && c.ann_bound > l_ann;
    }
    return c;
}

}  // namespace

Certificates certify(const ParamSet& p, const TrainConfig& cfg) {
    const Realized<double> r = realize(p);
    const double l_ann = cfg.lipschitz_bound.value_or(p.spec.l_phi);
    return certify_realized(p.spec, r.model, l_ann, cfg.rho_l);
}

// ---- the training objective ---------------------------------------------------------

namespace {

struct Problem {
    const ParamSpec& spec;
    const TrainConfig& cfg;
    const FitContext& ctx;
    Matrix u_n, y_n;
    Vector theta_full;           // frozen entries live here
    std::vector<Index> free_idx; // reduced coordinate -> full index
    LfrBlocks<double> weights;   // rho_lfr * lambda, zero when unused
    bool use_weights = false;
    std::vector<bool> trainable_b;
    double last_loss = 0.0;
    FpiStats last_fpi;

    Problem(const ParamSpec& s, const TrainConfig& c, const FitContext& x) : spec(s), cfg(c), ctx(x) {}

    Vector expand(const Vector& r) const {
        Vector t = theta_full;
        for (std::size_t k = 0; k < free_idx.size(); ++k) t(free_idx[k]) = r(static_cast<Index>(k));
        return t;
    }

    // Smooth part of the objective; split l1 terms are added by L1Split.
    double operator()(const Vector& r, Vector& grad) {
        grad.setZero();
        Tape tape;
        VectorX<Var> tv(theta_full.size());
        for (Index i = 0; i < theta_full.size(); ++i) tv(i) = Var(theta_full(i));
        std::vector<Var> leaves;
        leaves.reserve(free_idx.size());
        for (std::size_t k = 0; k < free_idx.size(); ++k) {
            leaves.push_back(tape.variable(r(static_cast<Index>(k))));
            tv(free_idx[k]) = leaves.back();
        }
        Realized<Var> rz;
        try {
            rz = realize<Var>(spec, tv);
        } catch (const InvalidInputError&) {
            last_loss = kDivergedLoss;
            return kDivergedLoss;
        }
        TrajectoryGradient info;
        const Var v = record_simulation_loss(tape, rz.model, rz.x0, u_n, y_n, &info);
        last_fpi = info.fpi;
        if (info.diverged) {
            last_loss = kDivergedLoss;
            return kDivergedLoss;
        }
        last_loss = v.val;
        Var total = v;
        const LfrModelT<Var>& m = rz.model;
        if (cfg.rho_x0 > 0.0) total = total + reg_x0(rz.x0, cfg.rho_x0);
        if (cfg.rho_a_l2 > 0.0 && m.dims.has_ann()) total = total + reg_ann(m.ann, cfg.rho_a_l2, 0.0);
        if (cfg.rho_l > 0.0 && m.dims.has_ann())
            total = total + lipschitz_penalty(m.ann, ctx.l_ann, cfg.rho_l, false, cfg.power_iters);
        if (cfg.rho_b > 0.0 && spec.baseline->any_trainable())
            total = total + reg_baseline(m.theta_b, spec.baseline->theta0(), cfg.rho_b, &trainable_b);
        if (use_weights) {
            // Realized entries of blocks that are not stored directly.
            for (BlockId id : kAllBlocks) {
                if (spec.is_direct(id)) continue;
                if (id == BlockId::Dzw && spec.mode == ParamMode::DzwAbOnly) continue;
                const Matrix& w = weights[id];
                const MatrixX<Var>& b = m.blocks[id];
                for (Index i = 0; i < b.size(); ++i) {
                    const double wi = w.data()[i];
                    if (wi == 0.0) continue;
                    const Var& e = b.data()[i];
                    const double d = cfg.abs_smoothing;
                    total = total + Var(wi) * (sqrt(e * e + Var(d * d)) - Var(d));
                }
            }
        }
        if (cfg.rho_za > 0.0 || cfg.rho_wa > 0.0 || cfg.rho_xa > 0.0)
            total = total + reg_group_lasso(m, cfg.rho_za, cfg.rho_wa, cfg.rho_xa, cfg.group_smoothing);
        if (!std::isfinite(total.val)) return std::numeric_limits<double>::quiet_NaN();
        tape.backward(total);
        for (std::size_t k = 0; k < leaves.size(); ++k) grad(static_cast<Index>(k)) = tape.adjoint(leaves[k]);
        return total.val;
    }
};

// Split coordinates (reduced indexing) and their l1 weights.
void build_split(const ParamSpec& spec, const Problem& pb, const TrainConfig& cfg, L1Split& split) {
    std::vector<Index> full_to_red(static_cast<std::size_t>(spec.size()), -1);
    for (std::size_t k = 0; k < pb.free_idx.size(); ++k)
        full_to_red[static_cast<std::size_t>(pb.free_idx[k])] = static_cast<Index>(k);
    std::vector<double> w;
    auto add = [&](Index full, double weight) {
        const Index r = full_to_red[static_cast<std::size_t>(full)];
        if (r < 0 || weight <= 0.0) return;
        split.index.push_back(r);
        w.push_back(weight);
    };
    const LfrDims& d = spec.dims;
    if (cfg.rho_a_l1 > 0.0 && d.has_ann()) {
        for (const auto& e : spec.layout)
            if (e.name.rfind("ann.", 0) == 0)
                for (Index i = 0; i < e.size(); ++i) add(e.offset + i, cfg.rho_a_l1);
    }
    if (pb.use_weights) {
        for (BlockId id : kAllBlocks) {
            if (!spec.is_direct(id)) continue;
            const LayoutEntry& e = spec.entry(block_name(id));
            const Matrix& wt = pb.weights[id];
            for (Index i = 0; i < e.size(); ++i) add(e.offset + i, wt.data()[i]);
        }
        if (spec.mode == ParamMode::DzwAbOnly) {
            const LayoutEntry& e = spec.entry("Dzw.ab");
            const Matrix wt = pb.weights.Dzw.block(d.n_zb(), 0, d.n_za, d.n_wb());
            for (Index i = 0; i < e.size(); ++i) add(e.offset + i, wt.data()[i]);
        }
    }
    // Merge duplicate coordinates (ANN never overlaps blocks, so this is a no-op guard).
    split.weight = Eigen::Map<const Vector>(w.data(), static_cast<Index>(w.size()));
}

}  // namespace

TrainResult fit(const Dataset& data, std::shared_ptr<const BaselineModel> baseline, const TrainConfig& cfg,
                const FitOptions& opts) {
    std::vector<std::string> warnings;
    const FitContext ctx = make_context(data, std::move(baseline), cfg, &warnings);
    TrainResult r = fit(data, ctx, cfg, opts);
    r.warnings.insert(r.warnings.begin(), warnings.begin(), warnings.end());
    return r;
}

TrainResult fit(const Dataset& data, const FitContext& ctx, const TrainConfig& cfg, const FitOptions& opts) {
    cfg.validate();
    data.validate();
    TrainResult res;

    ParamSet p;
    if (opts.warm) {
        p = *opts.warm;
    } else {
        const ParamSpec spec = make_spec(ctx, cfg);
        InitOptions io;
        io.seed = cfg.seed;
        io.data = &data;
        InitReport rep;
        p = init_fp_equivalent(spec, ctx.x0_physical, io, &rep);
        if (!rep.post_check_passed || !rep.note.empty()) res.warnings.push_back(rep.note);
    }
    const ParamSpec& spec = p.spec;
    if (!cfg.train_x0) p.freeze("x0");
    if (spec.find("theta_b")) {
        const auto& tr = spec.baseline->trainable();
        const LayoutEntry& e = spec.entry("theta_b");
        for (Index i = 0; i < e.size(); ++i)
            if (!tr[static_cast<std::size_t>(i)]) p.mask(e.offset + i) = 0.0;
    }

    Problem pb(spec, cfg, ctx);
    pb.u_n = spec.norm.normalize_u(data.u);
    pb.y_n = spec.norm.normalize_y(data.y);
    pb.theta_full = p.theta;
    for (Index i = 0; i < p.mask.size(); ++i)
        if (p.mask(i) != 0.0) pb.free_idx.push_back(i);
    pb.trainable_b = spec.baseline->trainable();
    if (opts.lfr_weights && opts.rho_lfr > 0.0) {
        pb.use_weights = true;
        pb.weights = *opts.lfr_weights;
        for (BlockId id : kAllBlocks) pb.weights[id] *= opts.rho_lfr;
    }

    L1Split split;
    split.n = static_cast<Index>(pb.free_idx.size());
    build_split(spec, pb, cfg, split);
    const Bounds bounds = split.bounds(Bounds::unbounded(split.n));
    Objective smooth = [&pb](const Vector& x, Vector& g) { return pb(x, g); };
    const Objective obj = split.wrap(smooth);

    Vector r0(split.n);
    for (Index k = 0; k < split.n; ++k) r0(k) = p.theta(pb.free_idx[static_cast<std::size_t>(k)]);
    Vector xi = split.split(r0);

    auto spot_check = [&](int iter, const Vector& x) {
        if (spec.mode != ParamMode::Contracting || iter % cfg.certificate_every != 0) return;
        const Realized<double> rz = realize<double>(spec, pb.expand(split.merge(x)));
        ++res.cert.contraction_checks;
        const double b = contraction_bound(rz.model.blocks.A, rz.model.blocks.Bw, rz.model.blocks.Cz,
                                           rz.model.blocks.Dzw, spec.l_phi);
        if (!(b < spec.alpha_bar)) ++res.cert.contraction_failures;
    };
    int checks = 0, failures = 0;

    if (cfg.adam_epochs > 0) {
        AdamOptions ao;
        ao.epochs = cfg.adam_epochs;
        ao.lr = cfg.adam_lr;
        ao.on_epoch = [&](int it, const Vector& x, double f) {
            res.trace.push_back({"adam", it, f, pb.last_loss});
            spot_check(it, x);
        };
        const OptimResult o = adam_minimize(obj, xi, ao, &bounds);
        res.adam_aborted = o.aborted;
        if (o.aborted) res.warnings.push_back(o.message);
        xi = o.x;
    }
    checks += res.cert.contraction_checks;
    failures += res.cert.contraction_failures;
    if (cfg.lbfgs_epochs > 0) {
        LbfgsOptions lo;
        lo.max_iters = cfg.lbfgs_epochs;
        lo.memory = cfg.lbfgs_memory;
        lo.on_iter = [&](int it, const Vector& x, double f) {
            res.trace.push_back({"lbfgs", it, f, pb.last_loss});
            spot_check(it, x);
        };
        const OptimResult o = lbfgs_b_minimize(obj, xi, bounds, lo);
        res.line_search_failed = o.line_search_failed;
        if (o.line_search_failed) res.warnings.push_back("line search failed; kept the last accepted iterate");
        xi = o.x;
    }
    checks = res.cert.contraction_checks;
    failures = res.cert.contraction_failures;

    p.theta = pb.expand(split.merge(xi));
    // Split coordinates that ended at zero are exact zeros by construction.
    const Realized<double> rz = realize(p);
    res.params = p;
    res.model = rz.model;
    res.x0 = rz.x0;
    Vector g(split.split_size());
    res.objective = obj(xi, g);
    const TrajectoryGradient tg = simulation_loss_gradient(res.model, res.x0, pb.u_n, pb.y_n, false);
    res.loss = tg.loss;
    res.fpi = tg.fpi;
    res.cert = certify_realized(spec, res.model, ctx.l_ann, cfg.rho_l);
    res.cert.contraction_checks = checks;
    res.cert.contraction_failures = failures;
    if (spec.mode == ParamMode::Contracting && failures > 0) res.cert.contraction_ok = false;
    if (res.cert.lipschitz_violated) {
        std::ostringstream os;
        os << "ANN Lipschitz bound " << res.cert.ann_bound << " exceeds L = " << ctx.l_ann
           << "; retrain with a larger rho_L";
        res.warnings.push_back(os.str());
    }
    if (tg.diverged) {
        res.warnings.push_back("final model diverges on the training data");
        res.train_metrics = {kDivergedLoss, kDivergedLoss, 0.0};
    } else {
        res.train_metrics = metrics(data.y, simulate(res.model, res.x0, data.u).y_hat);
    }
    return res;
}

// ---- structure discovery ---------------------------------------------------------

LfrBlocks<double> reweight(const LfrBlocks<double>& b, double eps) {
    LfrBlocks<double> w = b;
    for (BlockId id : kAllBlocks) w[id] = (b[id].array().abs() + eps).inverse().matrix();
    return w;
}

namespace {

double max_relative_change(const LfrBlocks<double>& a, const LfrBlocks<double>& b) {
    double m = 0.0;
    for (BlockId id : kAllBlocks)
        if (a[id].size() > 0) m = std::max(m, ((a[id] - b[id]).array().abs() / b[id].array().abs()).maxCoeff());
    return m;
}

double baseline_loss(const Dataset& data, const FitContext& ctx) {
    const Matrix yb = simulate_baseline(*ctx.baseline, ctx.baseline->theta0(), ctx.x0_physical, data.u).second;
    const Matrix e = ctx.norm.normalize_y(yb) - ctx.norm.normalize_y(data.y);
    return e.squaredNorm() / static_cast<double>(data.size());
}

SparsityReport sparsity_of(const LfrModel& m, double eps) {
    SparsityReport s;
    for (BlockId id : kAllBlocks) {
        const Matrix& b = m.blocks[id];
        const Index z = (b.array().abs() < eps).count();
        s.total += b.size();
        s.zeroed += z;
        s.per_block.emplace_back(block_name(id), z);
    }
    s.dzw_zeroed = (m.blocks.Dzw.array().abs() < eps).all();
    return s;
}

}  // namespace

TrainResult reweighted_l1_discover(const Dataset& data, std::shared_ptr<const BaselineModel> baseline,
                                   const TrainConfig& cfg, TrainResult* dense) {
    cfg.validate();
    std::vector<std::string> warnings;
    const FitContext ctx = make_context(data, std::move(baseline), cfg, &warnings);
    const double eps = cfg.eps_reweight;
    const double v_base = baseline_loss(data, ctx);
    const double rho = cfg.rho_lfr.value_or(rho_lfr_rule_of_thumb(eps, v_base));

    TrainResult cur = fit(data, ctx, cfg);
    std::vector<TraceEntry> trace = cur.trace;
    if (dense) *dense = cur;

    int iterations = 0;
    bool converged = false;
    FitOptions fo;
    fo.rho_lfr = rho;
    LfrBlocks<double> lambda;
    try {
        if (cfg.reweight_max_iters == 0) {
            lambda = cur.model.blocks;
            for (BlockId id : kAllBlocks) lambda[id].setOnes();
            fo.lfr_weights = &lambda;
            fo.warm = &cur.params;
            cur = fit(data, ctx, cfg, fo);
            trace.insert(trace.end(), cur.trace.begin(), cur.trace.end());
            iterations = 1;
        } else {
            for (int it = 1; it <= cfg.reweight_max_iters; ++it) {
                const LfrBlocks<double> next = reweight(cur.model.blocks, eps);
                if (it > 1 && max_relative_change(next, lambda) < 1e-2) {
                    converged = true;
                    break;
                }
                lambda = next;
                fo.lfr_weights = &lambda;
                const ParamSet warm = cur.params;
                fo.warm = &warm;
                cur = fit(data, ctx, cfg, fo);
                trace.insert(trace.end(), cur.trace.begin(), cur.trace.end());
                iterations = it;
            }
        }
    } catch (const NumericalError& e) {
        warnings.push_back(std::string("reweighting aborted: ") + e.what());
    }

    // Mask small entries of directly stored blocks; D_zw only as a whole block.
    ParamSet p = cur.params;
    const LfrModel& m = cur.model;
    bool dzw_zero = false;
    if ((p.spec.mode == ParamMode::WellPosed || p.spec.mode == ParamMode::DzwAbOnly ||
         p.spec.mode == ParamMode::Free) &&
        (m.blocks.Dzw.array().abs() < eps).all()) {
        dzw_zero = true;
    }
    if (dzw_zero && p.spec.mode != ParamMode::DzwZero) {
        ParamSpec s = p.spec;
        s.mode = ParamMode::DzwZero;
        s.layout.clear();
        build_layout(s);
        LfrModel mz = m;
        mz.blocks.Dzw.setZero();
        p = params_from_model(s, mz, cur.x0);
        // Carry frozen flags of x0 / theta_b.
        const ParamSet& old = cur.params;
        for (const char* name : {"x0", "theta_b"}) {
            const LayoutEntry* eo = old.spec.find(name);
            if (!eo) continue;
            const LayoutEntry& en = p.spec.entry(name);
            p.mask.segment(en.offset, en.size()) = old.mask.segment(eo->offset, eo->size());
        }
    }
    for (BlockId id : kAllBlocks) {
        if (!p.spec.is_direct(id)) continue;
        const LayoutEntry& e = p.spec.entry(block_name(id));
        for (Index i = 0; i < e.size(); ++i)
            if (std::abs(p.theta(e.offset + i)) < eps) {
                p.theta(e.offset + i) = 0.0;
                p.mask(e.offset + i) = 0.0;
            }
    }
    if (p.spec.mode == ParamMode::DzwAbOnly) {
        const LayoutEntry& e = p.spec.entry("Dzw.ab");
        for (Index i = 0; i < e.size(); ++i)
            if (std::abs(p.theta(e.offset + i)) < eps) {
                p.theta(e.offset + i) = 0.0;
                p.mask(e.offset + i) = 0.0;
            }
    }

    TrainConfig refit_cfg = cfg;
    refit_cfg.param_mode = p.spec.mode;
    FitOptions ro;
    ro.warm = &p;
    TrainResult out = fit(data, ctx, refit_cfg, ro);
    trace.insert(trace.end(), out.trace.begin(), out.trace.end());
    out.trace = std::move(trace);
    out.warnings.insert(out.warnings.begin(), warnings.begin(), warnings.end());

    SparsityReport s = sparsity_of(out.model, eps);
    s.dzw_zeroed = s.dzw_zeroed && (dzw_zero || out.params.spec.mode == ParamMode::DzwZero ||
                                    (out.model.blocks.Dzw.array().abs() < eps).all());
    s.iterations = iterations;
    s.converged = converged;
    s.rho_lfr = rho;
    out.sparsity = s;
    return out;
}

// ---- order selection ------------------------------------------------------------

LfrModel reduce_dims(const LfrModel& m, const std::vector<Index>& keep_xa, const std::vector<Index>& keep_za,
                     const std::vector<Index>& keep_wa, Vector* x0) {
    const LfrDims& d = m.dims;
    LfrDims nd = d;
    nd.n_xa = static_cast<Index>(keep_xa.size());
    nd.n_za = static_cast<Index>(keep_za.size());
    nd.n_wa = static_cast<Index>(keep_wa.size());
    const bool ann = nd.n_za > 0 && nd.n_wa > 0 && d.has_ann();
    if (!ann) nd.n_za = nd.n_wa = 0;
    for (Index i : keep_xa)
        if (i < 0 || i >= d.n_xa) throw InvalidInputError("reduce_dims: x_a index out of range");
    for (Index i : keep_za)
        if (i < 0 || i >= d.n_za) throw InvalidInputError("reduce_dims: z_a index out of range");
    for (Index i : keep_wa)
        if (i < 0 || i >= d.n_wa) throw InvalidInputError("reduce_dims: w_a index out of range");

    std::vector<Index> sx, sz, sw, su, sy;
    for (Index i = 0; i < d.n_xb; ++i) sx.push_back(i);
    for (Index i : keep_xa) sx.push_back(d.n_xb + i);
    for (Index i = 0; i < d.n_zb(); ++i) sz.push_back(i);
    for (Index i = 0; i < d.n_wb(); ++i) sw.push_back(i);
    if (ann) {
        for (Index i : keep_za) sz.push_back(d.n_zb() + i);
        for (Index i : keep_wa) sw.push_back(d.n_wb() + i);
    }
    for (Index i = 0; i < d.n_u; ++i) su.push_back(i);
    for (Index i = 0; i < d.n_y; ++i) sy.push_back(i);

    LfrModel r = m;
    r.dims = nd;
    const auto& b = m.blocks;
    r.blocks.A = b.A(sx, sx);
    r.blocks.Bu = b.Bu(sx, su);
    r.blocks.Bw = b.Bw(sx, sw);
    r.blocks.Cy = b.Cy(sy, sx);
    r.blocks.Dyu = b.Dyu;
    r.blocks.Dyw = b.Dyw(sy, sw);
    r.blocks.Cz = b.Cz(sz, sx);
    r.blocks.Dzu = b.Dzu(sz, su);
    r.blocks.Dzw = b.Dzw(sz, sw);
    if (ann) {
        r.ann.weights.front() = Matrix(m.ann.weights.front()(Eigen::all, keep_za));
        r.ann.weights.back() = Matrix(r.ann.weights.back()(keep_wa, Eigen::all));
        r.ann.biases.back() = Vector(m.ann.biases.back()(keep_wa));
    } else {
        r.ann.weights.clear();
        r.ann.biases.clear();
    }
    if (x0) *x0 = Vector((*x0)(sx));
    return r;
}

std::vector<OrderSelectRow> group_lasso_select(const Dataset& train, const Dataset* eval,
                                               std::shared_ptr<const BaselineModel> baseline, const TrainConfig& cfg,
                                               GroupTarget target, const std::vector<double>& rho_grid) {
    if (rho_grid.empty()) throw ConfigError("order selection needs a non-empty rho grid");
    for (double r : rho_grid)
        if (!(r >= 0.0)) throw ConfigError("rho grid values must be >= 0");
    cfg.validate();
    check_group_lasso_mode(cfg.param_mode, target);
    const FitContext ctx = make_context(train, std::move(baseline), cfg);

    std::vector<OrderSelectRow> rows;
    for (double rho : rho_grid) {
        TrainConfig c = cfg;
        c.rho_za = target == GroupTarget::Za ? rho : 0.0;
        c.rho_wa = target == GroupTarget::Wa ? rho : 0.0;
        c.rho_xa = target == GroupTarget::Xa ? rho : 0.0;
        const TrainResult res = fit(train, ctx, c);
        OrderSelectRow row;
        row.rho = rho;
        row.kept = surviving_groups(group_norms(res.model, target));
        row.surviving = static_cast<Index>(row.kept.size());

        auto all = [](Index n) {
            std::vector<Index> v;
            for (Index i = 0; i < n; ++i) v.push_back(i);
            return v;
        };
        const LfrDims& d = res.model.dims;
        Vector x0 = res.x0;
        const LfrModel reduced =
            reduce_dims(res.model, target == GroupTarget::Xa ? row.kept : all(d.n_xa),
                        target == GroupTarget::Za ? row.kept : all(d.n_za),
                        target == GroupTarget::Wa ? row.kept : all(d.n_wa), &x0);

        TrainConfig rc = cfg;
        rc.rho_za = rc.rho_wa = rc.rho_xa = 0.0;
        rc.n_xa = reduced.dims.n_xa;
        rc.n_za = reduced.dims.n_za;
        rc.n_wa = reduced.dims.n_wa;
        const ParamSpec rs = make_spec(ctx, rc);
        const ParamSet warm = params_from_model(rs, reduced, x0, &res.params);
        FitOptions fo;
        fo.warm = &warm;
        const TrainResult refit = fit(train, ctx, rc, fo);
        row.refit_loss = refit.loss;
        if (eval) {
            const Index n_i = std::min<Index>(50, eval->size());
            try {
                const Vector xe = estimate_x0_test(refit.model, *eval, n_i);
                row.refit = metrics(eval->y, predict(refit.model, xe, eval->u), n_i < eval->size() ? n_i : 0);
            } catch (const NumericalError&) {
                row.refit = {kDivergedLoss, kDivergedLoss, 0.0};
            }
        } else {
            row.refit = refit.train_metrics;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---- test-time initial state ------------------------------------------------------

Vector estimate_x0_test(const LfrModel& model, const Dataset& test, Index n_i) {
    test.validate();
    if (n_i < 1 || n_i > test.size()) throw InvalidInputError("estimate_x0_test: need 1 <= N_i <= N_test");
    const Dataset head = test.head(n_i);
    const Matrix u_n = model.norm.normalize_u(head.u);
    const Matrix y_n = model.norm.normalize_y(head.y);
    Objective fn = [&](const Vector& x, Vector& g) {
        const TrajectoryGradient tg = simulation_loss_gradient(model, x, u_n, y_n, true);
        if (tg.diverged) {
            g.setZero();
            return kDivergedLoss;
        }
        g = tg.d_x0;
        return tg.loss;
    };
    const Index nx = model.dims.n_x();
    LbfgsOptions lo;
    lo.max_iters = 1000;
    lo.pgtol = 1e-13;
    lo.ftol = 1e-20;
    auto run = [&](const Vector& start) { return lbfgs_b_minimize(fn, start, Bounds::unbounded(nx), lo); };
    OptimResult r = run(Vector::Zero(nx));
    if (std::isfinite(r.f) && r.f < kDivergedLoss) return r.x;

    Vector guess = Vector::Zero(nx);
    const auto idx = model.baseline->output_state_index();
    if (!idx) throw NumericalError("x0 estimation diverged from zero and the output map is not a state selector");
    guess(*idx) = test.y(0, 0) / model.norm.sigma_x(*idx);
    r = run(guess);
    if (std::isfinite(r.f) && r.f < kDivergedLoss) return r.x;
    throw NumericalError("x0 estimation diverged from both starting points");
}

Matrix predict(const LfrModel& model, const Vector& x0, const Matrix& u_physical) {
    return simulate(model, x0, u_physical).y_hat;
}

}  // namespace lfr
