#pragma once

// Reverse-mode differentiation on a flat tape of scalar nodes.
//
// `Var` is a scalar usable inside Eigen matrices, so every templated routine in
// the library can be instantiated with `double` (plain evaluation) or `Var`
// (recorded evaluation). Multi-input primitives such as the implicit
// fixed-point node or the fused trajectory loss are recorded as a single n-ary
// node carrying its local partial derivatives.

#include "lfr/types.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace lfr {

class Tape;

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Sin,
    Cos,
    Abs,
    Relu,
    Custom,
    FixedPoint,
    Solve,
    SpectralNorm,
    Trajectory,
};

const char* op_name(Op op);

struct Var {
    double val = 0.0;
    std::int32_t idx = -1;
    Tape* tape = nullptr;

    Var() = default;
    Var(double v) : val(v) {}  // NOLINT: implicit constants are intended
    Var(double v, std::int32_t i, Tape* t) : val(v), idx(i), tape(t) {}

    double value() const { return val; }
    bool is_constant() const { return idx < 0; }

    Var& operator+=(const Var& o);
    Var& operator-=(const Var& o);
    Var& operator*=(const Var& o);
    Var& operator/=(const Var& o);
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var variable(double value);
    VectorX<Var> variables(const Eigen::Ref<const Vector>& values);

    // Records a node with value `value` whose local partials with respect to
    // `args` are `partials`. Constant arguments are dropped.
    Var record(Op op, double value, std::span<const Var> args, std::span<const double> partials);
    Var unary(Op op, double value, const Var& a, double da);
    Var binary(Op op, double value, const Var& a, double da, const Var& b, double db);

    // Full reverse sweep seeded at `output`. Adjoints are kept until the next sweep.
    void backward(const Var& output);
    // Reverse sweep restricted to nodes with index >= `first`; used for local
    // Jacobians of sub-graphs recorded after `first`.
    void backward_from(const Var& output, std::int32_t first);
    double adjoint(const Var& v) const;

    std::size_t size() const { return nodes_.size(); }
    std::int32_t next_index() const { return static_cast<std::int32_t>(nodes_.size()); }
    void clear();

private:
    struct Node {
        double value;
        std::uint32_t arg_begin;
        std::uint32_t arg_count;
        Op op;
    };

    void sweep(const Var& output, std::int32_t first);

    std::vector<Node> nodes_;
    std::vector<std::uint32_t> args_;
    std::vector<double> partials_;
    std::vector<double> adjoints_;
};

// ---- scalar arithmetic ----------------------------------------------------

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
inline Var operator+(const Var& a) { return a; }

inline bool operator<(const Var& a, const Var& b) { return a.val < b.val; }
inline bool operator>(const Var& a, const Var& b) { return a.val > b.val; }
inline bool operator<=(const Var& a, const Var& b) { return a.val <= b.val; }
inline bool operator>=(const Var& a, const Var& b) { return a.val >= b.val; }
inline bool operator==(const Var& a, const Var& b) { return a.val == b.val; }
inline bool operator!=(const Var& a, const Var& b) { return a.val != b.val; }

Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var tanh(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var abs(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
inline Var square(const Var& a) { return a * a; }
inline Var abs2(const Var& a) { return a * a; }
inline bool isfinite(const Var& a) { return std::isfinite(a.val); }
inline bool isnan(const Var& a) { return std::isnan(a.val); }
inline bool isinf(const Var& a) { return std::isinf(a.val); }
inline Var conj(const Var& a) { return a; }
inline Var real(const Var& a) { return a; }
inline Var imag(const Var&) { return Var(0.0); }

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double relu(double x) { return x > 0.0 ? x : 0.0; }

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.val; }

template <typename Derived>
Matrix values(const Eigen::MatrixBase<Derived>& m) {
    return m.unaryExpr([](const auto& x) { return value_of(x); }).template cast<double>();
}

// ---- parameter vectors -----------------------------------------------------

struct LayoutEntry {
    std::string name;
    Index offset = 0;
    Index rows = 0;
    Index cols = 0;
    Index size() const { return rows * cols; }
};

// Flat parameter vector with its gradient and a name -> (offset, shape) map.
struct GradVector {
    Vector values;
    Vector grad;
    std::vector<LayoutEntry> layout;

    const LayoutEntry& entry(const std::string& name) const;
    // Appends a rows x cols block (column-major) and returns its entry.
    const LayoutEntry& append(const std::string& name, const Eigen::Ref<const Matrix>& block);
    Matrix block(const std::string& name) const;
    Matrix grad_block(const std::string& name) const;
    // Checks that layout entries tile [0, values.size()) exactly once.
    bool layout_consistent() const;
};

using TapeLoss = std::function<Var(Tape&, const VectorX<Var>&)>;

// Gradient of a scalar function composed of tape primitives. Non-finite values
// encountered during the forward pass raise NonFiniteError naming the node.
GradVector grad(const TapeLoss& loss_fn, GradVector params);

// Adjoint of a fixed point z* = g(z*, theta): solves (I - J)^T lambda = upstream
// with J = dg/dz at z*. Returns lambda; the caller contracts it with dg/dtheta.
Vector implicit_adjoint(const Eigen::Ref<const Matrix>& dg_dz, const Eigen::Ref<const Vector>& upstream);

// Records z* = g(z*) on the tape via the implicit function theorem. `g` is
// evaluated once at the (constant) fixed point; the returned nodes carry
// dz*/dg_out = (I - dg/dz)^{-1}, so upstream adjoints reach the parameters
// captured by `g` as upstream^T (I - dg/dz)^{-1} dg/dtheta.
VectorX<Var> fixed_point_on_tape(Tape& tape,
                                 const std::function<VectorX<Var>(const VectorX<Var>&)>& g,
                                 const Eigen::Ref<const Vector>& z_star);

}  // namespace lfr

namespace Eigen {

template <>
struct NumTraits<lfr::Var> : NumTraits<double> {
    using Real = lfr::Var;
    using NonInteger = lfr::Var;
    using Nested = lfr::Var;
    using Literal = lfr::Var;
    enum {
        IsComplex = 0,
        IsInteger = 0,
        IsSigned = 1,
        RequireInitialization = 1,
        ReadCost = 1,
        AddCost = 3,
        MulCost = 3
    };
};

template <typename BinaryOp>
struct ScalarBinaryOpTraits<lfr::Var, double, BinaryOp> {
    using ReturnType = lfr::Var;
};
template <typename BinaryOp>
struct ScalarBinaryOpTraits<double, lfr::Var, BinaryOp> {
    using ReturnType = lfr::Var;
};

}  // namespace Eigen
