#include "lfr/adjoint.hpp"

#include "lfr/optim.hpp"

#include <cmath>

namespace lfr {

PhiLocal phi_local(const LfrModel& m, const Vector& z) {
    const LfrDims& d = m.dims;
    const Index nx = d.n_xb, nu = d.n_u, ny = d.n_y;
    PhiLocal p;
    p.z = z;
    p.w = Vector::Zero(d.n_w());
    p.jac = Matrix::Zero(d.n_w(), d.n_z());

    p.x_phys = z.head(nx).cwiseProduct(m.norm.sigma_x);
    p.u_phys = z.segment(nx, nu).cwiseProduct(m.norm.sigma_u) + m.norm.mu_u;
    const Vector fh = m.baseline->eval(p.x_phys, p.u_phys, m.theta_b);
    p.w.head(nx) = fh.head(nx).cwiseQuotient(m.norm.sigma_x);
    p.w.segment(nx, ny) = (fh.tail(ny) - m.norm.mu_y).cwiseQuotient(m.norm.sigma_y);
    const Matrix jz = m.baseline->jacobian_z(p.x_phys, p.u_phys, m.theta_b);
    Vector s_out(nx + ny), s_in(nx + nu);
    s_out << m.norm.sigma_x.cwiseInverse(), m.norm.sigma_y.cwiseInverse();
    s_in << m.norm.sigma_x, m.norm.sigma_u;
    p.jac.topLeftCorner(nx + ny, nx + nu) = s_out.asDiagonal() * jz * s_in.asDiagonal();

    if (d.has_ann()) {
        const auto& ann = m.ann;
        const std::size_t layers = ann.weights.size();
        Vector h = z.tail(d.n_za);
        Matrix j = Matrix::Identity(d.n_za, d.n_za);
        for (std::size_t i = 0; i < layers; ++i) {
            p.ann_in.push_back(h);
            Vector pre = ann.weights[i] * h + ann.biases[i];
            j = ann.weights[i] * j;
            p.ann_pre.push_back(pre);
            if (i + 1 < layers) {
                Vector dact(pre.size());
                for (Index k = 0; k < pre.size(); ++k) {
                    dact(k) = activation_derivative(ann.activation, pre(k));
                    pre(k) = activate(ann.activation, pre(k));
                }
                j = dact.asDiagonal() * j;
            }
            h = std::move(pre);
        }
        p.w.tail(d.n_wa) = h;
        p.jac.bottomRightCorner(d.n_wa, d.n_za) = j;
    }
    return p;
}

void phi_param_vjp(const LfrModel& m, const PhiLocal& p, const Vector& v, TrajectoryGradient& acc) {
    const LfrDims& d = m.dims;
    const Index nx = d.n_xb, ny = d.n_y;
    if (m.theta_b.size() > 0) {
        const Matrix jt = m.baseline->jacobian_theta(p.x_phys, p.u_phys, m.theta_b);
        Vector vs(nx + ny);
        vs << v.head(nx).cwiseQuotient(m.norm.sigma_x), v.segment(nx, ny).cwiseQuotient(m.norm.sigma_y);
        acc.d_theta_b.noalias() += jt.transpose() * vs;
    }
    if (d.has_ann()) {
        const auto& ann = m.ann;
        Vector delta = v.tail(d.n_wa);
        for (std::size_t i = ann.weights.size(); i-- > 0;) {
            acc.d_ann_w[i].noalias() += delta * p.ann_in[i].transpose();
            acc.d_ann_b[i] += delta;
            if (i == 0) break;
            delta = ann.weights[i].transpose() * delta;
            const Vector& pre = p.ann_pre[i - 1];
            for (Index k = 0; k < delta.size(); ++k) delta(k) *= activation_derivative(ann.activation, pre(k));
        }
    }
}

namespace {

void zero_gradient(const LfrModel& m, TrajectoryGradient& g) {
    g.d_blocks = LfrBlocks<double>::zeros(m.dims);
    g.d_ann_w.clear();
    g.d_ann_b.clear();
    for (std::size_t i = 0; i < m.ann.weights.size(); ++i) {
        g.d_ann_w.push_back(Matrix::Zero(m.ann.weights[i].rows(), m.ann.weights[i].cols()));
        g.d_ann_b.push_back(Vector::Zero(m.ann.biases[i].size()));
    }
    g.d_theta_b = Vector::Zero(m.theta_b.size());
    g.d_x0 = Vector::Zero(m.dims.n_x());
}

}  // namespace

TrajectoryGradient simulation_loss_gradient(const LfrModel& m, const Vector& x0, const Matrix& u_n,
                                            const Matrix& y_n, bool with_gradient) {
    const LfrDims& d = m.dims;
    const Index n = u_n.rows();
    if (n < 1 || y_n.rows() != n) throw InvalidInputError("simulation loss: input/output length mismatch");
    if (x0.size() != d.n_x()) throw InvalidInputError("simulation loss: x0 has the wrong length");
    const LfrBlocks<double>& b = m.blocks;
    const bool feedback = !b.Dzw.isZero(0.0);

    TrajectoryGradient g;
    zero_gradient(m, g);
    Matrix xs(d.n_x(), n + 1), zs(d.n_z(), n), ws(d.n_w(), n), err(d.n_y, n);
    xs.col(0) = x0;
    double sum = 0.0;
    long iters = 0;
    for (Index k = 0; k < n; ++k) {
        const Vector x = xs.col(k);
        const Vector u = u_n.row(k).transpose();
        FpiResult fp;
        Vector w;
        try {
            fp = solve_fixed_point(m, x, u);
            w = phi_nl(m, fp.z);
        } catch (const NumericalError&) {
            g.diverged = true;
        }
        if (!g.diverged) {
            xs.col(k + 1) = b.A * x + b.Bu * u + b.Bw * w;
            const Vector yh = b.Cy * x + b.Dyu * u + b.Dyw * w;
            err.col(k) = yh - y_n.row(k).transpose();
            sum += err.col(k).squaredNorm();
            if (!xs.col(k + 1).allFinite() || !std::isfinite(sum) || sum / static_cast<double>(n) >= kDivergedLoss)
                g.diverged = true;
        }
        if (g.diverged) {
            g.diverged_at = k;
            g.loss = kDivergedLoss;
            return g;
        }
        zs.col(k) = fp.z;
        ws.col(k) = w;
        iters += fp.iters;
        g.fpi.max_iters = std::max(g.fpi.max_iters, fp.iters);
        if (!fp.converged) ++g.fpi.non_converged;
    }
    g.fpi.mean_iters = static_cast<double>(iters) / static_cast<double>(n);
    g.loss = sum / static_cast<double>(n);
    if (!with_gradient) return g;

    const double scale = 2.0 / static_cast<double>(n);
    Vector xbar = Vector::Zero(d.n_x());  // adjoint of x(k+1)
    LfrBlocks<double>& db = g.d_blocks;
    for (Index k = n; k-- > 0;) {
        const Vector x = xs.col(k);
        const Vector u = u_n.row(k).transpose();
        const Vector w = ws.col(k);
        const Vector ybar = scale * err.col(k);

        db.A.noalias() += xbar * x.transpose();
        db.Bu.noalias() += xbar * u.transpose();
        db.Bw.noalias() += xbar * w.transpose();
        db.Cy.noalias() += ybar * x.transpose();
        db.Dyu.noalias() += ybar * u.transpose();
        db.Dyw.noalias() += ybar * w.transpose();

        const Vector wbar = b.Bw.transpose() * xbar + b.Dyw.transpose() * ybar;
        Vector xprev = b.A.transpose() * xbar + b.Cy.transpose() * ybar;

        const PhiLocal loc = phi_local(m, zs.col(k));
        const Vector zbar = loc.jac.transpose() * wbar;
        Vector lambda;
        if (feedback) {
            const Matrix mt = Matrix::Identity(d.n_z(), d.n_z()) - loc.jac.transpose() * b.Dzw.transpose();
            Eigen::PartialPivLU<Matrix> lu(mt);
            if (!(lu.rcond() > 1e-12)) throw WellPosednessError("I - dg/dz is singular at the fixed point");
            lambda = lu.solve(zbar);
        } else {
            lambda = zbar;
        }
        db.Dzw.noalias() += lambda * w.transpose();
        db.Cz.noalias() += lambda * x.transpose();
        db.Dzu.noalias() += lambda * u.transpose();
        xprev.noalias() += b.Cz.transpose() * lambda;

        Vector v = wbar;
        if (feedback) v.noalias() += b.Dzw.transpose() * lambda;
        phi_param_vjp(m, loc, v, g);
        xbar = std::move(xprev);
    }
    g.d_x0 = xbar;
    return g;
}

Var record_simulation_loss(Tape& tape, const LfrModelT<Var>& mv, const VectorX<Var>& x0, const Matrix& u_n,
                           const Matrix& y_n, TrajectoryGradient* info) {
    const LfrModel m = values_of(mv);
    TrajectoryGradient g = simulation_loss_gradient(m, values(x0), u_n, y_n, true);
    std::vector<Var> args;
    std::vector<double> partials;
    auto push = [&](const auto& vars, const auto& grads) {
        for (Index i = 0; i < vars.size(); ++i) {
            args.push_back(vars.data()[i]);
            partials.push_back(grads.data()[i]);
        }
    };
    for (BlockId id : kAllBlocks) push(mv.blocks[id], g.d_blocks[id]);
    for (std::size_t i = 0; i < mv.ann.weights.size(); ++i) {
        push(mv.ann.weights[i], g.d_ann_w[i]);
        push(mv.ann.biases[i], g.d_ann_b[i]);
    }
    push(mv.theta_b, g.d_theta_b);
    push(x0, g.d_x0);
    const Var out = tape.record(Op::Trajectory, g.loss, args, partials);
    if (info) *info = std::move(g);
    return out;
}

Var simulation_loss_on_tape(Tape& tape, const LfrModelT<Var>& m, const VectorX<Var>& x0, const Matrix& u_n,
                            const Matrix& y_n, FixedPointGrad mode, int unroll_iters) {
    const Index n = u_n.rows();
    const LfrModel mvals = values_of(m);
    VectorX<Var> x = x0;
    Var sum(0.0);
    for (Index k = 0; k < n; ++k) {
        const VectorX<Var> u = u_n.row(k).transpose().cast<Var>();
        VectorX<Var> z;
        if (mode == FixedPointGrad::Unrolled) {
            const VectorX<Var> base = m.blocks.Cz * x + m.blocks.Dzu * u;
            z = base;
            for (int it = 0; it < unroll_iters; ++it) z = m.blocks.Dzw * phi_nl(m, z) + base;
        } else {
            const FpiResult fp = solve_fixed_point(mvals, values(x), values(u));
            auto g = [&](const VectorX<Var>& zz) { return g_map(m, zz, x, u); };
            z = fixed_point_on_tape(tape, g, fp.z);
        }
        const VectorX<Var> w = phi_nl(m, z);
        const VectorX<Var> yh = m.blocks.Cy * x + m.blocks.Dyu * u + m.blocks.Dyw * w;
        for (Index i = 0; i < yh.size(); ++i) {
            const Var e = yh(i) - Var(y_n(k, i));
            sum = sum + e * e;
        }
        x = m.blocks.A * x + m.blocks.Bu * u + m.blocks.Bw * w;
    }
    return sum / Var(static_cast<double>(n));
}

}  // namespace lfr
