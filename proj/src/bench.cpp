#include "lfr/bench.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <vector>

namespace lfr {

void MsdParams::validate() const {
    if (!(m > 0.0 && k_s > 0.0 && ts > 0.0)) throw InvalidInputError("MSD: m, k_s and ts must be positive");
    if (!(c_d >= 0.0 && f_c >= 0.0 && v_eps >= 0.0 && c_v >= 0.0))
        throw InvalidInputError("MSD: c_d, F_c, v_eps and c_v must be nonnegative");
    if (f_c > 0.0 && !(v_eps > 0.0)) throw InvalidInputError("MSD: v_eps must be positive when F_c > 0");
}

double MsdParams::friction(double v) const {
    const double coulomb = f_c > 0.0 ? f_c * std::tanh(v / v_eps) : 0.0;
    return coulomb + c_v * v;
}

Dataset msd_generate(const MsdParams& p, Index n, double u_lo, double u_hi, std::uint64_t seed,
                     std::optional<double> snr_db) {
    p.validate();
    if (n < 1) throw InvalidInputError("msd_generate: n must be >= 1");
    if (!(u_lo <= u_hi)) throw InvalidInputError("msd_generate: empty input range");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(u_lo, u_hi);
    Dataset d;
    d.ts = p.ts;
    d.name = "msd";
    d.u.resize(n, 1);
    d.y.resize(n, 1);
    double x1 = 0.0, x2 = 0.0;
    for (Index k = 0; k < n; ++k) {
        const double u = dist(rng);
        d.u(k, 0) = u;
        d.y(k, 0) = x1;
        const double x1n = x1 + p.ts * x2;
        const double x2n = x2 + (p.ts / p.m) * (-p.k_s * x1 - p.c_d * x2 - p.friction(x2) + u);
        x1 = x1n;
        x2 = x2n;
    }
    if (snr_db) {
        const double mean = d.y.mean();
        const double sig = std::sqrt((d.y.array() - mean).square().mean());
        const double std = sig / std::pow(10.0, *snr_db / 20.0);
        std::normal_distribution<double> noise(0.0, std);
        for (Index k = 0; k < n; ++k) d.y(k, 0) += noise(rng);
    }
    return d;
}

std::shared_ptr<BaselineModel> msd_baseline(const MsdParams& p) {
    p.validate();
    Matrix a(2, 2), b(2, 1), c(1, 2), dd(1, 1);
    a << 1.0, p.ts, -p.ts * p.k_s / p.m, 1.0 - p.ts * p.c_d / p.m;
    b << 0.0, p.ts / p.m;
    c << 1.0, 0.0;
    dd << 0.0;
    auto base = std::make_shared<LtiBaseline>(a, b, c, dd, "msd");
    base->set_operating_box({Vector::Constant(2, -1.0), Vector::Constant(2, 1.0), Vector::Constant(1, -100.0),
                             Vector::Constant(1, 100.0)});
    return base;
}

// ---- cascaded tanks -------------------------------------------------------------

namespace {

template <typename Scalar>
Scalar sqrt_clamped(const Scalar& x) {
    using std::sqrt;
    if (!(value_of(x) > 0.0)) return Scalar(0.0);
    return sqrt(x);
}

double dsqrt_clamped(double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; }

template <typename Scalar>
VectorX<Scalar> cct_eval(double ts, const VectorX<Scalar>& x, const VectorX<Scalar>& u, const VectorX<Scalar>& k) {
    const Scalar s1 = sqrt_clamped(x(0));
    const Scalar s2 = sqrt_clamped(x(1));
    VectorX<Scalar> out(3);
    out(0) = x(0) + Scalar(ts) * (-k(0) * s1 + k(1) * u(0));
    out(1) = x(1) + Scalar(ts) * (k(2) * s1 - k(3) * s2);
    out(2) = x(1);
    return out;
}

}  // namespace

CctBaseline::CctBaseline(const Vector& k_init, double ts) : ts_(ts) {
    if (k_init.size() != 4) throw InvalidInputError("CCT baseline needs four parameters");
    if (!(ts > 0.0)) throw InvalidInputError("CCT baseline: ts must be positive");
    OperatingBox box{Vector::Constant(2, 0.01), Vector::Constant(2, 20.0), Vector::Constant(1, 0.0),
                     Vector::Constant(1, 10.0)};
    init_common(k_init, std::vector<bool>(4, true), 0.0, 1.0, box);
}

Vector CctBaseline::eval(const Vector& x, const Vector& u, const Vector& theta) const {
    return cct_eval<double>(ts_, x, u, theta);
}

VectorX<Var> CctBaseline::eval(const VectorX<Var>& x, const VectorX<Var>& u, const VectorX<Var>& theta) const {
    return cct_eval<Var>(ts_, x, u, theta);
}

Matrix CctBaseline::jacobian_z(const Vector& x, const Vector&, const Vector& k) const {
    Matrix j = Matrix::Zero(3, 3);
    const double d1 = dsqrt_clamped(x(0)), d2 = dsqrt_clamped(x(1));
    j(0, 0) = 1.0 - ts_ * k(0) * d1;
    j(0, 2) = ts_ * k(1);
    j(1, 0) = ts_ * k(2) * d1;
    j(1, 1) = 1.0 - ts_ * k(3) * d2;
    j(2, 1) = 1.0;
    return j;
}

Matrix CctBaseline::jacobian_theta(const Vector& x, const Vector& u, const Vector&) const {
    Matrix j = Matrix::Zero(3, 4);
    const double s1 = x(0) > 0.0 ? std::sqrt(x(0)) : 0.0;
    const double s2 = x(1) > 0.0 ? std::sqrt(x(1)) : 0.0;
    j(0, 0) = -ts_ * s1;
    j(0, 1) = ts_ * u(0);
    j(1, 2) = ts_ * s1;
    j(1, 3) = -ts_ * s2;
    return j;
}

std::shared_ptr<BaselineModel> cct_baseline(const Vector& k_init, double ts) {
    auto b = std::make_shared<CctBaseline>(k_init, ts);
    // Lipschitz constants of the physical map on the default operating box.
    const OperatingBox& box = b->operating_box();
    double lf = 0.0;
    for (int i = 0; i <= 200; ++i) {
        for (int j = 0; j <= 200; ++j) {
            Vector x(2);
            x << box.x_lo(0) + (box.x_hi(0) - box.x_lo(0)) * i / 200.0,
                box.x_lo(1) + (box.x_hi(1) - box.x_lo(1)) * j / 200.0;
            const Matrix jz = b->jacobian_z(x, Vector::Zero(1), k_init);
            lf = std::max(lf, Eigen::JacobiSVD<Matrix>(jz.topRows(2)).singularValues()(0));
        }
    }
    b->set_lipschitz(1.1 * lf, 1.0);
    return b;
}

// ---- dataset I/O -------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_number(const std::string& cell, const std::string& path, long line) {
    const std::string t = trim(cell);
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(t.c_str(), &end);
    if (t.empty() || end != t.c_str() + t.size() || errno == ERANGE || !std::isfinite(v)) {
        std::ostringstream os;
        os << path << ":" << line << ": non-numeric field '" << t << "'";
        throw DataError(os.str());
    }
    return v;
}

}  // namespace

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset '" + path + "'");
    Dataset d;
    d.name = path;
    std::string line;
    long lineno = 0;
    Index n_u = 0, n_y = 0;
    bool header = false;
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (t[0] == '#') {
            const auto pos = t.find("ts=");
            if (pos != std::string::npos) d.ts = parse_number(t.substr(pos + 3), path, lineno);
            continue;
        }
        const auto cells = split_csv(t);
        if (!header) {
            if (cells.empty() || trim(cells[0]) != "k") {
                std::ostringstream os;
                os << path << ":" << lineno << ": malformed header, expected 'k,u1..,y1..'";
                throw DataError(os.str());
            }
            for (std::size_t i = 1; i < cells.size(); ++i) {
                const std::string c = trim(cells[i]);
                const bool is_u = c.size() > 1 && c[0] == 'u';
                const bool is_y = c.size() > 1 && c[0] == 'y';
                const std::string num = c.size() > 1 ? c.substr(1) : "";
                const bool numbered = !num.empty() && num.find_first_not_of("0123456789") == std::string::npos;
                if (!numbered || (!is_u && !is_y) || (is_u && n_y > 0)) {
                    std::ostringstream os;
                    os << path << ":" << lineno << ": malformed header column '" << c << "'";
                    throw DataError(os.str());
                }
                const Index expect = (is_u ? n_u : n_y) + 1;
                if (std::stol(num) != expect) {
                    std::ostringstream os;
                    os << path << ":" << lineno << ": header column '" << c << "' out of order";
                    throw DataError(os.str());
                }
                (is_u ? n_u : n_y) += 1;
            }
            if (n_u < 1 || n_y < 1) {
                std::ostringstream os;
                os << path << ":" << lineno << ": header needs at least one u and one y column";
                throw DataError(os.str());
            }
            header = true;
            continue;
        }
        if (static_cast<Index>(cells.size()) != 1 + n_u + n_y) {
            std::ostringstream os;
            os << path << ":" << lineno << ": expected " << 1 + n_u + n_y << " fields, found " << cells.size();
            throw DataError(os.str());
        }
        std::vector<double> row;
        for (std::size_t i = 1; i < cells.size(); ++i) row.push_back(parse_number(cells[i], path, lineno));
        parse_number(cells[0], path, lineno);
        rows.push_back(std::move(row));
    }
    if (!header) throw DataError(path + ": missing header");
    if (rows.empty()) throw DataError(path + ": no samples");
    d.u.resize(static_cast<Index>(rows.size()), n_u);
    d.y.resize(static_cast<Index>(rows.size()), n_y);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        for (Index i = 0; i < n_u; ++i) d.u(static_cast<Index>(k), i) = rows[k][static_cast<std::size_t>(i)];
        for (Index i = 0; i < n_y; ++i) d.y(static_cast<Index>(k), i) = rows[k][static_cast<std::size_t>(n_u + i)];
    }
    d.validate();
    return d;
}

void save_dataset(const Dataset& d, const std::string& path) {
    d.validate();
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw DataError("cannot write dataset '" + path + "'");
    std::fprintf(f, "# ts=%.17g\nk", d.ts);
    for (Index i = 0; i < d.u.cols(); ++i) std::fprintf(f, ",u%ld", static_cast<long>(i + 1));
    for (Index i = 0; i < d.y.cols(); ++i) std::fprintf(f, ",y%ld", static_cast<long>(i + 1));
    std::fputc('\n', f);
    for (Index k = 0; k < d.size(); ++k) {
        std::fprintf(f, "%ld", static_cast<long>(k));
        for (Index i = 0; i < d.u.cols(); ++i) std::fprintf(f, ",%.17g", d.u(k, i));
        for (Index i = 0; i < d.y.cols(); ++i) std::fprintf(f, ",%.17g", d.y(k, i));
        std::fputc('\n', f);
    }
    if (std::fclose(f) != 0) throw DataError("failed to write dataset '" + path + "'");
}

}  // namespace lfr
