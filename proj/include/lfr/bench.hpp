#pragma once

// Built-in data generators, baseline models and dataset I/O.

#include "lfr/model.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>

namespace lfr {

struct MsdParams {
    double m = 1.0;      // kg
    double k_s = 1e3;    // N/m
    double c_d = 90.0;   // N s/m
    double ts = 0.01;    // s
    double f_c = 20.0;   // N, Coulomb level of the friction surrogate
    double v_eps = 0.05; // m/s, smoothing velocity
    double c_v = 5.0;    // N s/m, viscous part

    void validate() const;
    /// F_c tanh(v / v_eps) + c_v v
    double friction(double v) const;
    double friction_lipschitz() const { return f_c / v_eps + c_v; }
};

/// Simulates the friction-affected mass-spring-damper from rest under an i.i.d.
/// uniform input. With `snr_db` set, white Gaussian noise is added to y at that
/// signal-to-noise ratio.
Dataset msd_generate(const MsdParams& p, Index n, double u_lo, double u_hi, std::uint64_t seed,
                     std::optional<double> snr_db = std::nullopt);

/// The same system with the friction term removed; parameters are fixed.
std::shared_ptr<BaselineModel> msd_baseline(const MsdParams& p);

/// Cascaded tanks: x1+ = x1 + ts(-k1 sqrt(x1) + k2 u), x2+ = x2 + ts(k3 sqrt(x1) - k4 sqrt(x2)),
/// y = x2, with square roots taken of max(x, 0). theta = (k1, k2, k3, k4), trainable.
class CctBaseline final : public BaselineModel {
public:
    CctBaseline(const Vector& k_init, double ts);

    std::string kind() const override { return "cct"; }
    Index n_x() const override { return 2; }
    Index n_u() const override { return 1; }
    Index n_y() const override { return 1; }
    double ts() const { return ts_; }

    Vector eval(const Vector& x, const Vector& u, const Vector& theta) const override;
    VectorX<Var> eval(const VectorX<Var>& x, const VectorX<Var>& u, const VectorX<Var>& theta) const override;
    Matrix jacobian_z(const Vector& x, const Vector& u, const Vector& theta) const override;
    Matrix jacobian_theta(const Vector& x, const Vector& u, const Vector& theta) const override;
    std::optional<Index> output_state_index() const override { return 1; }

private:
    double ts_;
};

std::shared_ptr<BaselineModel> cct_baseline(const Vector& k_init, double ts);

/// CSV with header `k,u1..,y1..` and an optional leading `# ts=<seconds>` line.
Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& data, const std::string& path);

}  // namespace lfr
