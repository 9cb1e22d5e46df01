#include "lfr/model.hpp"

#include <cmath>
#include <sstream>

namespace lfr {

void LfrDims::validate() const {
    if (n_xb < 1 || n_u < 1 || n_y < 1) throw InvalidInputError("LfrDims: n_xb, n_u and n_y must be >= 1");
    if (n_xa < 0 || n_za < 0 || n_wa < 0) throw InvalidInputError("LfrDims: dimensions must be >= 0");
}

const char* block_name(BlockId id) {
    switch (id) {
    case BlockId::A: return "A";
    case BlockId::Bu: return "Bu";
    case BlockId::Bw: return "Bw";
    case BlockId::Cy: return "Cy";
    case BlockId::Dyu: return "Dyu";
    case BlockId::Dyw: return "Dyw";
    case BlockId::Cz: return "Cz";
    case BlockId::Dzu: return "Dzu";
    case BlockId::Dzw: return "Dzw";
    }
    return "?";
}

std::pair<Index, Index> block_shape(const LfrDims& d, BlockId id) {
    switch (id) {
    case BlockId::A: return {d.n_x(), d.n_x()};
    case BlockId::Bu: return {d.n_x(), d.n_u};
    case BlockId::Bw: return {d.n_x(), d.n_w()};
    case BlockId::Cy: return {d.n_y, d.n_x()};
    case BlockId::Dyu: return {d.n_y, d.n_u};
    case BlockId::Dyw: return {d.n_y, d.n_w()};
    case BlockId::Cz: return {d.n_z(), d.n_x()};
    case BlockId::Dzu: return {d.n_z(), d.n_u};
    case BlockId::Dzw: return {d.n_z(), d.n_w()};
    }
    return {0, 0};
}

void validate(const LfrBlocks<double>& blocks, const LfrDims& dims) {
    for (BlockId id : kAllBlocks) {
        const auto [r, c] = block_shape(dims, id);
        const Matrix& m = blocks[id];
        if (m.rows() != r || m.cols() != c) {
            std::ostringstream os;
            os << "block " << block_name(id) << " has shape " << m.rows() << "x" << m.cols() << ", expected " << r
               << "x" << c;
            throw InvalidInputError(os.str());
        }
        if (!m.allFinite()) throw InvalidInputError(std::string("block ") + block_name(id) + " has non-finite entries");
    }
}

Matrix assemble_w(const LfrBlocks<double>& b) {
    const Index nx = b.A.rows(), ny = b.Cy.rows(), nz = b.Cz.rows();
    const Index nu = b.Bu.cols(), nw = b.Bw.cols();
    Matrix w(nx + ny + nz, nx + nu + nw);
    w << b.A, b.Bu, b.Bw, b.Cy, b.Dyu, b.Dyw, b.Cz, b.Dzu, b.Dzw;
    return w;
}

Activation parse_activation(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "swish" || s == "swish_scaled" || s == "swish-scaled") return Activation::SwishScaled;
    throw InvalidInputError("unknown activation '" + s + "'");
}

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "swish_scaled"; }

double activation_derivative(Activation a, double x) {
    if (a == Activation::Tanh) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
    }
    const double s = sigmoid(x);
    return (s + x * s * (1.0 - s)) / kSwishScale;
}

void validate(const AnnParams<double>& ann, Index n_za, Index n_wa) {
    if (ann.weights.size() != ann.biases.size()) throw InvalidInputError("ANN: weights and biases differ in count");
    if (ann.weights.empty()) {
        if (n_za > 0 && n_wa > 0) throw InvalidInputError("ANN: no layers but n_za, n_wa > 0");
        return;
    }
    if (ann.input_dim() != n_za) throw InvalidInputError("ANN: first layer input dim does not match n_za");
    if (ann.output_dim() != n_wa) throw InvalidInputError("ANN: last layer output dim does not match n_wa");
    for (std::size_t i = 0; i < ann.weights.size(); ++i) {
        if (ann.biases[i].size() != ann.weights[i].rows()) throw InvalidInputError("ANN: bias size mismatch");
        if (i > 0 && ann.weights[i].cols() != ann.weights[i - 1].rows())
            throw InvalidInputError("ANN: consecutive layer dimensions do not chain");
        if (!ann.weights[i].allFinite() || !ann.biases[i].allFinite())
            throw InvalidInputError("ANN: non-finite parameters");
    }
}

// ---- Normalizer -------------------------------------------------------------

Normalizer Normalizer::identity(Index n_u, Index n_y, Index n_xb) {
    Normalizer n;
    n.mu_u = Vector::Zero(n_u);
    n.sigma_u = Vector::Ones(n_u);
    n.mu_y = Vector::Zero(n_y);
    n.sigma_y = Vector::Ones(n_y);
    n.sigma_x = Vector::Ones(n_xb);
    return n;
}

void Normalizer::validate() const {
    if (mu_u.size() != sigma_u.size() || mu_y.size() != sigma_y.size())
        throw InvalidInputError("Normalizer: mean/scale size mismatch");
    if ((sigma_u.array() <= 0.0).any() || (sigma_y.array() <= 0.0).any() || (sigma_x.array() <= 0.0).any())
        throw InvalidInputError("Normalizer: scales must be positive");
}

Matrix Normalizer::normalize_u(const Matrix& u) const {
    return ((u.rowwise() - mu_u.transpose()).array().rowwise() / sigma_u.transpose().array()).matrix();
}

Matrix Normalizer::normalize_y(const Matrix& y) const {
    return ((y.rowwise() - mu_y.transpose()).array().rowwise() / sigma_y.transpose().array()).matrix();
}

Matrix Normalizer::denormalize_y(const Matrix& y) const {
    return (y.array().rowwise() * sigma_y.transpose().array()).matrix().rowwise() + mu_y.transpose();
}

Matrix Normalizer::denormalize_u(const Matrix& u) const {
    return (u.array().rowwise() * sigma_u.transpose().array()).matrix().rowwise() + mu_u.transpose();
}

// ---- BaselineModel ------------------------------------------------------------

namespace {

Matrix tape_jacobian(const BaselineModel& b, const Vector& x, const Vector& u, const Vector& theta, bool wrt_theta) {
    Tape tape;
    VectorX<Var> xv, uv, tv;
    if (wrt_theta) {
        xv = x.cast<Var>();
        uv = u.cast<Var>();
        tv = tape.variables(theta);
    } else {
        xv = tape.variables(x);
        uv = tape.variables(u);
        tv = theta.cast<Var>();
    }
    const VectorX<Var> out = b.eval(xv, uv, tv);
    const Index cols = wrt_theta ? theta.size() : x.size() + u.size();
    Matrix jac(out.size(), cols);
    for (Index i = 0; i < out.size(); ++i) {
        tape.backward(out(i));
        if (wrt_theta) {
            for (Index j = 0; j < theta.size(); ++j) jac(i, j) = tape.adjoint(tv(j));
        } else {
            for (Index j = 0; j < x.size(); ++j) jac(i, j) = tape.adjoint(xv(j));
            for (Index j = 0; j < u.size(); ++j) jac(i, x.size() + j) = tape.adjoint(uv(j));
        }
    }
    return jac;
}

}  // namespace

Matrix BaselineModel::jacobian_z(const Vector& x, const Vector& u, const Vector& theta) const {
    return tape_jacobian(*this, x, u, theta, false);
}

Matrix BaselineModel::jacobian_theta(const Vector& x, const Vector& u, const Vector& theta) const {
    return tape_jacobian(*this, x, u, theta, true);
}

bool BaselineModel::any_trainable() const {
    for (bool t : trainable_)
        if (t) return true;
    return false;
}

void BaselineModel::set_trainable(std::vector<bool> flags) {
    if (static_cast<Index>(flags.size()) != theta0_.size())
        throw InvalidInputError("trainable flags must match the parameter count");
    trainable_ = std::move(flags);
}

void BaselineModel::set_lipschitz(double l_f, double l_h) {
    if (!(l_f >= 0.0) || !(l_h >= 0.0)) throw InvalidInputError("Lipschitz constants must be nonnegative");
    l_f_ = l_f;
    l_h_ = l_h;
}

void BaselineModel::set_operating_box(OperatingBox box) {
    if (box.x_lo.size() != box.x_hi.size() || box.u_lo.size() != box.u_hi.size())
        throw InvalidInputError("operating box bound sizes differ");
    if ((box.x_lo.array() > box.x_hi.array()).any() || (box.u_lo.array() > box.u_hi.array()).any())
        throw InvalidInputError("operating box is empty");
    box_ = std::move(box);
}

void BaselineModel::init_common(Vector theta0, std::vector<bool> trainable, double l_f, double l_h,
                                OperatingBox box) {
    theta0_ = std::move(theta0);
    set_trainable(std::move(trainable));
    set_lipschitz(l_f, l_h);
    set_operating_box(std::move(box));
}

LtiBaseline::LtiBaseline(Matrix a, Matrix b, Matrix c, Matrix d, std::string kind)
    : a_(std::move(a)), b_(std::move(b)), c_(std::move(c)), d_(std::move(d)), kind_(std::move(kind)) {
    if (a_.rows() != a_.cols() || b_.rows() != a_.rows() || c_.cols() != a_.rows() || d_.rows() != c_.rows() ||
        d_.cols() != b_.cols())
        throw InvalidInputError("LtiBaseline: inconsistent matrix shapes");
    Matrix ab(a_.rows(), a_.cols() + b_.cols());
    ab << a_, b_;
    Matrix cd(c_.rows(), c_.cols() + d_.cols());
    cd << c_, d_;
    // Norms of the concatenations; computed here to avoid a dependency on param.
    auto norm2 = [](const Matrix& m) { return Eigen::JacobiSVD<Matrix>(m).singularValues()(0); };
    OperatingBox box{Vector::Constant(n_x(), -1.0), Vector::Constant(n_x(), 1.0), Vector::Constant(n_u(), -1.0),
                     Vector::Constant(n_u(), 1.0)};
    init_common(Vector(), {}, norm2(ab), norm2(cd), box);
}

Vector LtiBaseline::eval(const Vector& x, const Vector& u, const Vector&) const {
    Vector out(n_x() + n_y());
    out.head(n_x()) = a_ * x + b_ * u;
    out.tail(n_y()) = c_ * x + d_ * u;
    return out;
}

VectorX<Var> LtiBaseline::eval(const VectorX<Var>& x, const VectorX<Var>& u, const VectorX<Var>&) const {
    VectorX<Var> out(n_x() + n_y());
    out.head(n_x()) = a_.cast<Var>() * x + b_.cast<Var>() * u;
    out.tail(n_y()) = c_.cast<Var>() * x + d_.cast<Var>() * u;
    return out;
}

Matrix LtiBaseline::jacobian_z(const Vector&, const Vector&, const Vector&) const {
    Matrix j(n_x() + n_y(), n_x() + n_u());
    j << a_, b_, c_, d_;
    return j;
}

Matrix LtiBaseline::jacobian_theta(const Vector&, const Vector&, const Vector&) const {
    return Matrix(n_x() + n_y(), 0);
}

std::optional<Index> LtiBaseline::output_state_index() const {
    if (n_y() != 1 || !d_.isZero(0.0)) return std::nullopt;
    Index hit = -1;
    for (Index j = 0; j < n_x(); ++j) {
        if (c_(0, j) == 1.0 && hit < 0)
            hit = j;
        else if (c_(0, j) != 0.0)
            return std::nullopt;
    }
    if (hit < 0) return std::nullopt;
    return hit;
}

// ---- Dataset ------------------------------------------------------------------

void Dataset::validate() const {
    if (u.rows() != y.rows()) throw DataError("dataset: input and output row counts differ");
    if (u.rows() < 1) throw DataError("dataset: no samples");
    if (!(ts > 0.0)) throw DataError("dataset: sampling time must be positive");
    if (!u.allFinite() || !y.allFinite()) throw DataError("dataset: non-finite samples");
}

Dataset Dataset::head(Index n) const {
    Dataset d = *this;
    n = std::min(n, size());
    d.u = u.topRows(n);
    d.y = y.topRows(n);
    return d;
}

// ---- model ---------------------------------------------------------------------

void validate(const LfrModel& m) {
    m.dims.validate();
    validate(m.blocks, m.dims);
    if (m.dims.has_ann()) validate(m.ann, m.dims.n_za, m.dims.n_wa);
    if (!m.baseline) throw InvalidInputError("model has no baseline");
    if (m.baseline->n_x() != m.dims.n_xb || m.baseline->n_u() != m.dims.n_u || m.baseline->n_y() != m.dims.n_y)
        throw InvalidInputError("baseline dimensions do not match the LFR dimensions");
    if (m.theta_b.size() != m.baseline->n_theta()) throw InvalidInputError("theta_b has the wrong length");
    m.norm.validate();
    if (m.norm.sigma_x.size() != m.dims.n_xb || m.norm.sigma_u.size() != m.dims.n_u ||
        m.norm.sigma_y.size() != m.dims.n_y)
        throw InvalidInputError("normalizer dimensions do not match the model");
}

LfrModelT<Var> as_constant_var(const LfrModel& m) {
    LfrModelT<Var> out;
    out.dims = m.dims;
    for (BlockId id : kAllBlocks) out.blocks[id] = m.blocks[id].cast<Var>();
    out.ann.activation = m.ann.activation;
    for (std::size_t i = 0; i < m.ann.weights.size(); ++i) {
        out.ann.weights.push_back(m.ann.weights[i].cast<Var>());
        out.ann.biases.push_back(m.ann.biases[i].cast<Var>());
    }
    out.baseline = m.baseline;
    out.theta_b = m.theta_b.cast<Var>();
    out.norm = m.norm;
    out.fpi = m.fpi;
    return out;
}

LfrModel values_of(const LfrModelT<Var>& m) {
    LfrModel out;
    out.dims = m.dims;
    for (BlockId id : kAllBlocks) out.blocks[id] = values(m.blocks[id]);
    out.ann.activation = m.ann.activation;
    for (std::size_t i = 0; i < m.ann.weights.size(); ++i) {
        out.ann.weights.push_back(values(m.ann.weights[i]));
        out.ann.biases.push_back(values(m.ann.biases[i]));
    }
    out.baseline = m.baseline;
    out.theta_b = values(m.theta_b);
    out.norm = m.norm;
    out.fpi = m.fpi;
    return out;
}

FpiResult solve_fixed_point(const LfrModel& m, const Vector& x, const Vector& u, double tol, int n_max) {
    if (n_max < 1) throw InvalidInputError("solve_fixed_point: n_max must be >= 1");
    FpiResult r;
    const Vector base = m.blocks.Cz * x + m.blocks.Dzu * u;
    r.z = base;
    if (m.blocks.Dzw.isZero(0.0)) {
        r.iters = 1;
        r.residual = 0.0;
        r.converged = true;
        return r;
    }
    r.converged = false;
    for (int n = 1; n <= n_max; ++n) {
        Vector next = m.blocks.Dzw * phi_nl(m, r.z) + base;
        r.residual = (next - r.z).norm();
        r.z = std::move(next);
        r.iters = n;
        if (!std::isfinite(r.residual)) throw NumericalError("fixed-point iteration produced non-finite values");
        if (r.residual < tol) {
            r.converged = true;
            break;
        }
    }
    if (!r.converged && m.fpi.strict) {
        std::ostringstream os;
        os << "fixed-point iteration did not converge in " << n_max << " iterations (residual " << r.residual << ")";
        throw NumericalError(os.str());
    }
    return r;
}

StepResult step(const LfrModel& m, const Vector& x, const Vector& u) {
    StepResult s;
    s.fpi = solve_fixed_point(m, x, u);
    s.z = s.fpi.z;
    s.w = phi_nl(m, s.z);
    s.x_next = m.blocks.A * x + m.blocks.Bu * u + m.blocks.Bw * s.w;
    const Vector yn = m.blocks.Cy * x + m.blocks.Dyu * u + m.blocks.Dyw * s.w;
    s.y_hat = (yn.array() * m.norm.sigma_y.array()).matrix() + m.norm.mu_y;
    return s;
}

SimulationResult simulate(const LfrModel& m, const Vector& x0, const Matrix& u_physical) {
    if (x0.size() != m.dims.n_x()) throw InvalidInputError("simulate: x0 has the wrong length");
    if (u_physical.cols() != m.dims.n_u) throw InvalidInputError("simulate: input has the wrong width");
    const Index n = u_physical.rows();
    if (n < 1) throw InvalidInputError("simulate: empty input");
    const Matrix un = m.norm.normalize_u(u_physical);
    SimulationResult r;
    r.y_hat.resize(n, m.dims.n_y);
    r.x.resize(n + 1, m.dims.n_x());
    r.x.row(0) = x0.transpose();
    Vector x = x0;
    long total_iters = 0;
    for (Index k = 0; k < n; ++k) {
        const StepResult s = step(m, x, un.row(k).transpose());
        if (!s.x_next.allFinite() || !s.y_hat.allFinite()) {
            std::ostringstream os;
            os << "simulation diverged at step " << k;
            throw NumericalError(os.str());
        }
        r.y_hat.row(k) = s.y_hat.transpose();
        r.x.row(k + 1) = s.x_next.transpose();
        x = s.x_next;
        total_iters += s.fpi.iters;
        r.fpi.max_iters = std::max(r.fpi.max_iters, s.fpi.iters);
        if (!s.fpi.converged) ++r.fpi.non_converged;
    }
    r.fpi.mean_iters = static_cast<double>(total_iters) / static_cast<double>(n);
    return r;
}

std::pair<Matrix, Matrix> simulate_baseline(const BaselineModel& b, const Vector& theta, const Vector& x0,
                                            const Matrix& u) {
    const Index n = u.rows();
    Matrix xs(n + 1, b.n_x());
    Matrix ys(n, b.n_y());
    Vector x = x0;
    xs.row(0) = x.transpose();
    for (Index k = 0; k < n; ++k) {
        const Vector fh = b.eval(x, u.row(k).transpose(), theta);
        if (!fh.allFinite()) {
            std::ostringstream os;
            os << "baseline simulation produced non-finite values at step " << k;
            throw NumericalError(os.str());
        }
        x = fh.head(b.n_x());
        ys.row(k) = fh.tail(b.n_y()).transpose();
        xs.row(k + 1) = x.transpose();
    }
    return {xs, ys};
}

namespace {

constexpr double kScaleFloor = 1e-8;

Vector floored_std(const Matrix& data, const Vector& mean, const char* what, std::vector<std::string>* warnings) {
    Vector s(data.cols());
    for (Index j = 0; j < data.cols(); ++j) {
        const double var = (data.col(j).array() - mean(j)).square().mean();
        s(j) = std::sqrt(var);
        if (!(s(j) >= kScaleFloor)) {
            s(j) = kScaleFloor;
            if (warnings) {
                std::ostringstream os;
                os << what << " channel " << j << " is constant; scale floored at " << kScaleFloor;
                warnings->push_back(os.str());
            }
        }
    }
    return s;
}

}  // namespace

Normalizer fit_normalizer(const Dataset& data, const BaselineModel& baseline, const Vector& theta_b,
                          const Vector& x0_physical, std::vector<std::string>* warnings) {
    data.validate();
    if (data.size() < 2) throw DataError("fit_normalizer: need at least two samples");
    Normalizer n;
    n.mu_u = data.u.colwise().mean().transpose();
    n.sigma_u = floored_std(data.u, n.mu_u, "input", warnings);
    n.mu_y = data.y.colwise().mean().transpose();
    n.sigma_y = floored_std(data.y, n.mu_y, "output", warnings);
    const Matrix xs = simulate_baseline(baseline, theta_b, x0_physical, data.u).first;
    const Vector mu_x = xs.colwise().mean().transpose();
    n.sigma_x = floored_std(xs, mu_x, "baseline state", warnings);
    return n;
}

}  // namespace lfr
