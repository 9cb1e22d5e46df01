#include "lfr/metrics.hpp"

#include <cmath>
#include <limits>

namespace lfr {

Metrics metrics(const Matrix& y, const Matrix& y_hat, Index skip) {
    if (y.rows() != y_hat.rows() || y.cols() != y_hat.cols()) throw InvalidInputError("metrics: shape mismatch");
    if (skip < 0 || skip >= y.rows()) throw InvalidInputError("metrics: skip must leave at least one sample");
    const Index n = y.rows() - skip;
    const Matrix yy = y.bottomRows(n);
    const Matrix e = yy - y_hat.bottomRows(n);
    const Matrix dev = yy.rowwise() - yy.colwise().mean();

    Metrics m;
    m.rmse = std::sqrt(e.squaredNorm() / static_cast<double>(e.size()));
    double acc = 0.0;
    for (Index c = 0; c < y.cols(); ++c) {
        const double num = e.col(c).norm();
        const double den = dev.col(c).norm();
        acc += den > 0.0 ? 100.0 * num / den : (num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
    }
    m.nrmse_percent = acc / static_cast<double>(y.cols());
    const double den = dev.norm();
    const double ratio = den > 0.0 ? e.norm() / den : (e.norm() == 0.0 ? 0.0 : 1.0);
    m.bfr_percent = 100.0 * std::max(0.0, 1.0 - ratio);
    return m;
}

}  // namespace lfr
