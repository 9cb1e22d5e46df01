#pragma once

#include "lfr/types.hpp"

namespace lfr {

struct Metrics {
    double rmse = 0.0;
    double nrmse_percent = 0.0;  // 100 rms(e) / rms(y - mean(y)), averaged over channels
    double bfr_percent = 0.0;    // 100 max(0, 1 - ||e|| / ||y - mean(y)||)
};

/// Rows are samples; the first `skip` rows are excluded.
Metrics metrics(const Matrix& y, const Matrix& y_hat, Index skip = 0);

}  // namespace lfr
