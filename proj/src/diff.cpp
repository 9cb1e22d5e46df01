#include "lfr/diff.hpp"

#include <algorithm>
#include <sstream>

namespace lfr {

const char* op_name(Op op) {
    switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Abs: return "abs";
    case Op::Relu: return "relu";
    case Op::Custom: return "custom";
    case Op::FixedPoint: return "fixed_point";
    case Op::Solve: return "solve";
    case Op::SpectralNorm: return "spectral_norm";
    case Op::Trajectory: return "trajectory";
    }
    return "?";
}

Var Tape::variable(double value) {
    if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite leaf value at node " << nodes_.size();
        throw NonFiniteError(os.str());
    }
    nodes_.push_back({value, static_cast<std::uint32_t>(args_.size()), 0, Op::Leaf});
    return Var(value, static_cast<std::int32_t>(nodes_.size() - 1), this);
}

VectorX<Var> Tape::variables(const Eigen::Ref<const Vector>& values) {
    VectorX<Var> out(values.size());
    for (Index i = 0; i < values.size(); ++i) out(i) = variable(values(i));
    return out;
}

Var Tape::record(Op op, double value, std::span<const Var> args, std::span<const double> partials) {
    if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite value in forward pass at node " << nodes_.size() << " (" << op_name(op) << ")";
        throw NonFiniteError(os.str());
    }
    const auto begin = static_cast<std::uint32_t>(args_.size());
    std::uint32_t count = 0;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i].is_constant() || partials[i] == 0.0) continue;
        args_.push_back(static_cast<std::uint32_t>(args[i].idx));
        partials_.push_back(partials[i]);
        ++count;
    }
    nodes_.push_back({value, begin, count, op});
    return Var(value, static_cast<std::int32_t>(nodes_.size() - 1), this);
}

Var Tape::unary(Op op, double value, const Var& a, double da) {
    const Var args[1] = {a};
    const double partials[1] = {da};
    return record(op, value, args, partials);
}

Var Tape::binary(Op op, double value, const Var& a, double da, const Var& b, double db) {
    const Var args[2] = {a, b};
    const double partials[2] = {da, db};
    return record(op, value, args, partials);
}

void Tape::sweep(const Var& output, std::int32_t first) {
    adjoints_.assign(nodes_.size(), 0.0);
    if (output.is_constant()) return;
    adjoints_[static_cast<std::size_t>(output.idx)] = 1.0;
    for (std::int32_t i = output.idx; i >= first; --i) {
        const double adj = adjoints_[static_cast<std::size_t>(i)];
        if (adj == 0.0) continue;
        const Node& n = nodes_[static_cast<std::size_t>(i)];
        for (std::uint32_t k = 0; k < n.arg_count; ++k) {
            const std::uint32_t a = args_[n.arg_begin + k];
            adjoints_[a] += partials_[n.arg_begin + k] * adj;
        }
    }
}

void Tape::backward(const Var& output) { sweep(output, 0); }

void Tape::backward_from(const Var& output, std::int32_t first) { sweep(output, first); }

double Tape::adjoint(const Var& v) const {
    if (v.is_constant() || static_cast<std::size_t>(v.idx) >= adjoints_.size()) return 0.0;
    return adjoints_[static_cast<std::size_t>(v.idx)];
}

void Tape::clear() {
    nodes_.clear();
    args_.clear();
    partials_.clear();
    adjoints_.clear();
}

namespace {

Tape* tape_of(const Var& a, const Var& b) { return a.tape ? a.tape : b.tape; }

}  // namespace

Var& Var::operator+=(const Var& o) { return *this = *this + o; }
Var& Var::operator-=(const Var& o) { return *this = *this - o; }
Var& Var::operator*=(const Var& o) { return *this = *this * o; }
Var& Var::operator/=(const Var& o) { return *this = *this / o; }

Var operator+(const Var& a, const Var& b) {
    Tape* t = tape_of(a, b);
    if (!t) return Var(a.val + b.val);
    return t->binary(Op::Add, a.val + b.val, a, 1.0, b, 1.0);
}

Var operator-(const Var& a, const Var& b) {
    Tape* t = tape_of(a, b);
    if (!t) return Var(a.val - b.val);
    return t->binary(Op::Sub, a.val - b.val, a, 1.0, b, -1.0);
}

Var operator*(const Var& a, const Var& b) {
    Tape* t = tape_of(a, b);
    if (!t) return Var(a.val * b.val);
    return t->binary(Op::Mul, a.val * b.val, a, b.val, b, a.val);
}

Var operator/(const Var& a, const Var& b) {
    Tape* t = tape_of(a, b);
    if (!t) return Var(a.val / b.val);
    const double q = a.val / b.val;
    return t->binary(Op::Div, q, a, 1.0 / b.val, b, -q / b.val);
}

Var operator-(const Var& a) {
    if (!a.tape) return Var(-a.val);
    return a.tape->unary(Op::Neg, -a.val, a, -1.0);
}

#define LFR_UNARY(name, op, fval, fder)                    \
    Var name(const Var& a) {                               \
        const double x = a.val;                            \
        const double y = (fval);                           \
        if (!a.tape) return Var(y);                        \
        return a.tape->unary(Op::op, y, a, (fder));        \
    }

LFR_UNARY(exp, Exp, std::exp(x), y)
LFR_UNARY(log, Log, std::log(x), 1.0 / x)
LFR_UNARY(sqrt, Sqrt, std::sqrt(x), 0.5 / y)
LFR_UNARY(tanh, Tanh, std::tanh(x), 1.0 - y * y)
LFR_UNARY(sin, Sin, std::sin(x), std::cos(x))
LFR_UNARY(cos, Cos, std::cos(x), -std::sin(x))
LFR_UNARY(abs, Abs, std::abs(x), (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0)))
LFR_UNARY(relu, Relu, (x > 0.0 ? x : 0.0), (x > 0.0 ? 1.0 : 0.0))
LFR_UNARY(sigmoid, Sigmoid, 1.0 / (1.0 + std::exp(-x)), y * (1.0 - y))

#undef LFR_UNARY

const LayoutEntry& GradVector::entry(const std::string& name) const {
    for (const auto& e : layout)
        if (e.name == name) return e;
    throw InvalidInputError("unknown parameter block '" + name + "'");
}

const LayoutEntry& GradVector::append(const std::string& name, const Eigen::Ref<const Matrix>& block) {
    LayoutEntry e{name, values.size(), block.rows(), block.cols()};
    Vector grown(values.size() + e.size());
    grown << values, Eigen::Map<const Vector>(Matrix(block).data(), e.size());
    values = std::move(grown);
    grad = Vector::Zero(values.size());
    layout.push_back(e);
    return layout.back();
}

Matrix GradVector::block(const std::string& name) const {
    const auto& e = entry(name);
    return Eigen::Map<const Matrix>(values.data() + e.offset, e.rows, e.cols);
}

Matrix GradVector::grad_block(const std::string& name) const {
    const auto& e = entry(name);
    return Eigen::Map<const Matrix>(grad.data() + e.offset, e.rows, e.cols);
}

bool GradVector::layout_consistent() const {
    std::vector<int> hits(static_cast<std::size_t>(values.size()), 0);
    for (const auto& e : layout) {
        if (e.offset < 0 || e.offset + e.size() > values.size()) return false;
        for (Index i = 0; i < e.size(); ++i) ++hits[static_cast<std::size_t>(e.offset + i)];
    }
    return grad.size() == values.size() &&
           std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; });
}

GradVector grad(const TapeLoss& loss_fn, GradVector params) {
    if (!params.values.allFinite()) throw NonFiniteError("non-finite parameter value");
    Tape tape;
    const VectorX<Var> theta = tape.variables(params.values);
    const Var loss = loss_fn(tape, theta);
    tape.backward(loss);
    params.grad.resize(params.values.size());
    for (Index i = 0; i < theta.size(); ++i) params.grad(i) = tape.adjoint(theta(i));
    return params;
}

Vector implicit_adjoint(const Eigen::Ref<const Matrix>& dg_dz, const Eigen::Ref<const Vector>& upstream) {
    const Index n = dg_dz.rows();
    const Matrix m = Matrix::Identity(n, n) - dg_dz.transpose();
    Eigen::PartialPivLU<Matrix> lu(m);
    const double rcond = lu.rcond();
    if (!(rcond > 1e-12))
        throw WellPosednessError("I - dg/dz is singular at the fixed point (rcond " + std::to_string(rcond) + ")");
    return lu.solve(upstream);
}

VectorX<Var> fixed_point_on_tape(Tape& tape,
                                 const std::function<VectorX<Var>(const VectorX<Var>&)>& g,
                                 const Eigen::Ref<const Vector>& z_star) {
    const Index n = z_star.size();
    const std::int32_t first = tape.next_index();
    const VectorX<Var> z_leaf = tape.variables(z_star);
    const VectorX<Var> g_out = g(z_leaf);

    Matrix jac(n, n);
    for (Index i = 0; i < n; ++i) {
        tape.backward_from(g_out(i), first);
        for (Index j = 0; j < n; ++j) jac(i, j) = tape.adjoint(z_leaf(j));
    }

    Eigen::PartialPivLU<Matrix> lu(Matrix::Identity(n, n) - jac);
    if (!(lu.rcond() > 1e-12)) throw WellPosednessError("I - dg/dz is singular at the fixed point");
    const Matrix sens = lu.inverse();

    std::vector<Var> args(g_out.data(), g_out.data() + n);
    VectorX<Var> z(n);
    for (Index i = 0; i < n; ++i) {
        std::vector<double> partials(static_cast<std::size_t>(n));
        for (Index j = 0; j < n; ++j) partials[static_cast<std::size_t>(j)] = sens(i, j);
        z(i) = tape.record(Op::FixedPoint, z_star(i), args, partials);
    }
    return z;
}

}  // namespace lfr
