#pragma once

// Run configuration (YAML) and the self-describing model dump (JSON).

#include "lfr/bench.hpp"
#include "lfr/train.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace lfr {

inline constexpr int kSchemaVersion = 1;

struct BaselineSpec {
    std::string kind = "msd";  // msd | cct | lti
    MsdParams msd;
    Vector cct_k = Vector::Constant(4, 0.05);
    double cct_ts = 4.0;
    bool cct_trainable = true;
    Matrix a, b, c, d;                  // lti
    std::optional<OperatingBox> box;    // lti override

    std::shared_ptr<BaselineModel> build() const;
};

struct GeneratorSpec {
    Index n_train = 10000;
    Index n_test = 1000;
    double u_lo = -100.0;
    double u_hi = 100.0;
    std::uint64_t seed_train = 1;
    std::uint64_t seed_test = 2;
    std::optional<double> snr_db;
};

struct DataSpec {
    std::optional<std::filesystem::path> train, test;
    std::optional<std::filesystem::path> cct_benchmark;  // uEst,uVal,yEst,yVal layout
    std::optional<GeneratorSpec> generator;              // MSD system with friction
};

struct OrderSelectSpec {
    GroupTarget target = GroupTarget::Xa;
    std::vector<double> rho_grid;
};

struct RunConfig {
    int schema_version = kSchemaVersion;
    std::string name = "run";
    std::filesystem::path out = "out";
    BaselineSpec baseline;
    DataSpec data;
    TrainConfig train;
    Index n_init = 50;  // test-time state initialization window
    std::optional<OrderSelectSpec> order_select;
    std::filesystem::path source_dir = ".";
};

/// Parses and validates; unknown keys are rejected. Relative paths resolve
/// against the config file's directory.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const std::string& yaml_text, const std::filesystem::path& source_dir = ".");

/// Checks referenced files and dataset/baseline consistency without training.
void validate_run(const RunConfig& cfg);

struct RunData {
    Dataset train;
    std::optional<Dataset> test;
};
RunData load_run_data(const RunConfig& cfg);

/// The standard cascaded-tanks benchmark CSV: columns uEst,uVal,yEst,yVal.
std::pair<Dataset, Dataset> load_cct_benchmark(const std::filesystem::path& path, double ts = 4.0);

// ---- model dump ----------------------------------------------------------------------

struct SavedModel {
    ParamSet params;
    BaselineSpec baseline;
    LfrModel model;
    Vector x0;
};

std::string model_to_json(const ParamSet& params, const BaselineSpec& baseline, const Certificates* cert = nullptr);
void save_model(const std::filesystem::path& path, const ParamSet& params, const BaselineSpec& baseline,
                const Certificates* cert = nullptr);
/// Rebuilds the parameter set and checks it against the stored realized
/// matrices; a mismatch or malformed content raises DataError.
SavedModel model_from_json(const std::string& text);
SavedModel load_model(const std::filesystem::path& path);

}  // namespace lfr
