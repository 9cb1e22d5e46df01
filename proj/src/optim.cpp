#include "lfr/optim.hpp"

#include <cmath>
#include <deque>

namespace lfr {

Bounds Bounds::unbounded(Index n) {
    const double inf = std::numeric_limits<double>::infinity();
    return {Vector::Constant(n, -inf), Vector::Constant(n, inf)};
}

Vector Bounds::project(const Vector& x) const { return x.cwiseMax(lower).cwiseMin(upper); }

namespace {

bool usable(double f, const Vector& g) { return std::isfinite(f) && f < kDivergedLoss && g.allFinite(); }

}  // namespace

OptimResult adam_minimize(const Objective& fn, Vector x0, const AdamOptions& o, const Bounds* bounds) {
    if (o.epochs < 0) throw InvalidInputError("adam: epochs must be >= 0");
    OptimResult r;
    const Index n = x0.size();
    if (bounds) x0 = bounds->project(x0);
    r.x = x0;
    Vector g(n);
    r.f = fn(r.x, g);
    if (!usable(r.f, g)) {
        r.aborted = true;
        r.message = "adam: objective not finite at the starting point";
        return r;
    }
    Vector m = Vector::Zero(n), v = Vector::Zero(n);
    double lr = o.lr;
    int consecutive = 0;
    int t = 0;
    Vector x_good = r.x, g_good = g, m_good = m, v_good = v;
    double f_good = r.f;
    Vector g_new(n);

    for (int epoch = 0; epoch < o.epochs; ++epoch) {
        ++t;
        m = o.beta1 * m_good + (1.0 - o.beta1) * g_good;
        v = o.beta2 * v_good + (1.0 - o.beta2) * g_good.cwiseAbs2();
        const double bc1 = 1.0 - std::pow(o.beta1, t);
        const double bc2 = 1.0 - std::pow(o.beta2, t);
        Vector x = x_good - lr * ((m / bc1).array() / ((v / bc2).array().sqrt() + o.eps)).matrix();
        if (bounds) x = bounds->project(x);
        g_new.setZero();
        const double f = fn(x, g_new);
        if (!usable(f, g_new)) {
            --t;
            lr *= 0.5;
            ++r.rejected;
            if (++consecutive >= o.max_rejections) {
                r.aborted = true;
                r.message = "adam: too many consecutive rejected steps";
                break;
            }
            continue;
        }
        consecutive = 0;
        x_good = x;
        g_good = g_new;
        m_good = m;
        v_good = v;
        f_good = f;
        r.trace.push_back(f);
        r.iters = epoch + 1;
        if (o.on_epoch) o.on_epoch(epoch, x_good, f);
    }
    r.x = x_good;
    r.f = f_good;
    return r;
}

namespace {

// Two-loop recursion restricted to coordinates with free[i] = true.
Vector two_loop(const Vector& g, const std::deque<Vector>& s, const std::deque<Vector>& y,
                const std::vector<bool>& free) {
    const Index n = g.size();
    auto mask = [&](Vector v) {
        for (Index i = 0; i < n; ++i)
            if (!free[static_cast<std::size_t>(i)]) v(i) = 0.0;
        return v;
    };
    Vector q = mask(g);
    const std::size_t k = s.size();
    std::vector<double> alpha(k), rho(k);
    std::vector<Vector> sm(k), ym(k);
    for (std::size_t i = 0; i < k; ++i) {
        sm[i] = mask(s[i]);
        ym[i] = mask(y[i]);
        const double sy = sm[i].dot(ym[i]);
        rho[i] = sy > 0.0 ? 1.0 / sy : 0.0;
    }
    for (std::size_t i = k; i-- > 0;) {
        alpha[i] = rho[i] * sm[i].dot(q);
        q -= alpha[i] * ym[i];
    }
    double gamma = 1.0;
    if (k > 0) {
        const double yy = ym[k - 1].squaredNorm();
        const double sy = sm[k - 1].dot(ym[k - 1]);
        if (yy > 0.0 && sy > 0.0) gamma = sy / yy;
    }
    q *= gamma;
    for (std::size_t i = 0; i < k; ++i) {
        const double beta = rho[i] * ym[i].dot(q);
        q += (alpha[i] - beta) * sm[i];
    }
    return mask(-q);
}

}  // namespace

OptimResult lbfgs_b_minimize(const Objective& fn, Vector x0, const Bounds& b, const LbfgsOptions& o) {
    const Index n = x0.size();
    if (b.lower.size() != n || b.upper.size() != n) throw InvalidInputError("lbfgs: bounds size mismatch");
    OptimResult r;
    r.x = b.project(x0);
    Vector g(n);
    r.f = fn(r.x, g);
    if (!std::isfinite(r.f) || !g.allFinite()) {
        r.aborted = true;
        r.message = "lbfgs: objective not finite at the starting point";
        return r;
    }
    std::deque<Vector> s_hist, y_hist;
    Vector g_new(n);

    for (int it = 0; it < o.max_iters; ++it) {
        std::vector<bool> free(static_cast<std::size_t>(n));
        Vector pg = g;
        for (Index i = 0; i < n; ++i) {
            const bool at_lo = r.x(i) <= b.lower(i) && g(i) > 0.0;
            const bool at_hi = r.x(i) >= b.upper(i) && g(i) < 0.0;
            free[static_cast<std::size_t>(i)] = !(at_lo || at_hi);
            if (at_lo || at_hi) pg(i) = 0.0;
        }
        if (pg.lpNorm<Eigen::Infinity>() < o.pgtol) {
            r.converged = true;
            r.message = "projected gradient below tolerance";
            break;
        }

        bool accepted = false;
        for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
            Vector d = s_hist.empty() ? Vector(-pg) : two_loop(g, s_hist, y_hist, free);
            if (d.dot(pg) >= 0.0) {
                d = -pg;
                s_hist.clear();
                y_hist.clear();
            }
            double t = 1.0;
            if (s_hist.empty()) t = std::min(1.0, 1.0 / std::max(pg.norm(), 1e-300));
            for (int bt = 0; bt < o.max_backtracks; ++bt, t *= 0.5) {
                const Vector x_new = b.project(r.x + t * d);
                const Vector step = x_new - r.x;
                if (step.lpNorm<Eigen::Infinity>() == 0.0) break;
                g_new.setZero();
                const double f_new = fn(x_new, g_new);
                if (std::isfinite(f_new) && g_new.allFinite() && f_new <= r.f + o.c1 * g.dot(step)) {
                    const Vector yv = g_new - g;
                    const double sy = step.dot(yv);
                    if (sy > 1e-10 * step.norm() * yv.norm()) {
                        s_hist.push_back(step);
                        y_hist.push_back(yv);
                        if (static_cast<int>(s_hist.size()) > o.memory) {
                            s_hist.pop_front();
                            y_hist.pop_front();
                        }
                    }
                    const double f_old = r.f;
                    r.x = x_new;
                    r.f = f_new;
                    g = g_new;
                    accepted = true;
                    if (f_old - f_new <= o.ftol * std::max({std::abs(f_old), std::abs(f_new), 1.0})) {
                        r.converged = true;
                        r.message = "relative reduction below tolerance";
                    }
                    break;
                }
            }
            if (!accepted && !s_hist.empty()) {
                // Retry once along the projected steepest descent direction.
                s_hist.clear();
                y_hist.clear();
            } else if (!accepted) {
                break;
            }
        }
        if (!accepted) {
            r.line_search_failed = true;
            r.message = "line search failed";
            break;
        }
        r.iters = it + 1;
        r.trace.push_back(r.f);
        if (o.on_iter) o.on_iter(it, r.x, r.f);
        if (r.converged) break;
    }
    return r;
}

Vector L1Split::split(const Vector& theta) const {
    Vector xi(split_size());
    xi.head(n) = theta;
    for (std::size_t k = 0; k < index.size(); ++k) {
        const double v = theta(index[k]);
        xi(index[k]) = std::max(v, 0.0);
        xi(n + static_cast<Index>(k)) = std::max(-v, 0.0);
    }
    return xi;
}

Vector L1Split::merge(const Vector& xi) const {
    Vector theta = xi.head(n);
    for (std::size_t k = 0; k < index.size(); ++k) theta(index[k]) = xi(index[k]) - xi(n + static_cast<Index>(k));
    return theta;
}

Bounds L1Split::bounds(const Bounds& base) const {
    Bounds out = Bounds::unbounded(split_size());
    out.lower.head(n) = base.lower;
    out.upper.head(n) = base.upper;
    for (std::size_t k = 0; k < index.size(); ++k) {
        out.lower(index[k]) = 0.0;
        out.lower(n + static_cast<Index>(k)) = 0.0;
    }
    return out;
}

Objective L1Split::wrap(const Objective& smooth) const {
    return [this, smooth](const Vector& xi, Vector& grad) {
        const Vector theta = merge(xi);
        Vector g = Vector::Zero(n);
        double f = smooth(theta, g);
        grad.head(n) = g;
        for (std::size_t k = 0; k < index.size(); ++k) {
            const Index i = index[k];
            const Index j = n + static_cast<Index>(k);
            f += weight(static_cast<Index>(k)) * (xi(i) + xi(j));
            grad(i) = g(i) + weight(static_cast<Index>(k));
            grad(j) = -g(i) + weight(static_cast<Index>(k));
        }
        return f;
    };
}

double L1Split::l1_value(const Vector& theta) const {
    double s = 0.0;
    for (std::size_t k = 0; k < index.size(); ++k) s += weight(static_cast<Index>(k)) * std::abs(theta(index[k]));
    return s;
}

}  // namespace lfr
