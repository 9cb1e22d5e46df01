// lfraug: train, simulate and inspect LFR-augmented models.

#include "lfr/config.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace lfr;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kNumerical = 4 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool validate_only = false;
};

void add_common(CLI::App* app, Common& c, bool needs_config) {
    auto* opt = app->add_option("--config", c.config, "run configuration (YAML)");
    if (needs_config) opt->required();
    app->add_option("--seed", c.seed, "override the configured seed");
    app->add_option("--out", c.out, "output directory (overrides the config)");
    app->add_flag("--validate-only", c.validate_only, "check config and data, then exit");
}

RunConfig prepare(const Common& c) {
    RunConfig cfg = load_run_config(c.config);
    if (c.seed) cfg.train.seed = *c.seed;
    if (!c.out.empty()) cfg.out = c.out;
    validate_run(cfg);
    return cfg;
}

fs::path out_dir(const fs::path& p) {
    fs::create_directories(p);
    return p;
}

void write_metrics(const fs::path& path, const std::vector<std::pair<std::string, Metrics>>& rows) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write '" + path.string() + "'");
    f << "split,rmse,nrmse_percent,bfr_percent\n";
    char buf[256];
    for (const auto& [name, m] : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g\n", name.c_str(), m.rmse, m.nrmse_percent,
                      m.bfr_percent);
        f << buf;
    }
}

void write_trace(const fs::path& path, const std::vector<TraceEntry>& trace) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write '" + path.string() + "'");
    f << "step,phase,iter,objective,loss\n";
    char buf[256];
    for (std::size_t i = 0; i < trace.size(); ++i) {
        const TraceEntry& t = trace[i];
        std::snprintf(buf, sizeof buf, "%zu,%s,%d,%.17g,%.17g\n", i, t.phase.c_str(), t.iter, t.objective, t.loss);
        f << buf;
    }
}

void write_certificates(const fs::path& path, const TrainResult& r) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write '" + path.string() + "'");
    const Certificates& c = r.cert;
    const ParamMode mode = r.params.spec.mode;
    f.precision(12);
    f << "mode " << to_string(mode) << "\n";
    f << "L_phi " << c.l_phi << "\n";
    f << "dzw_norm " << c.dzw_norm << "\n";
    f << "L_phi*dzw_norm " << c.wellposed_product << (c.wellposed_ok ? " < 1 ok" : " >= 1 NOT CERTIFIED") << "\n";
    if (mode == ParamMode::Contracting) {
        f << "contraction_bound " << c.contraction_bound << " alpha_bar " << c.alpha_bar
          << (c.contraction_ok ? " ok" : " VIOLATED") << "\n";
        f << "contraction_spot_checks " << c.contraction_checks << " failures " << c.contraction_failures << "\n";
    }
    f << "ann_lipschitz_bound " << c.ann_bound << "\n";
    f << "lipschitz_condition " << (c.lipschitz_violated ? "VIOLATED (increase rho_L and retrain)" : "ok") << "\n";
    f << "fpi_max_iters " << r.fpi.max_iters << " mean " << r.fpi.mean_iters << " non_converged "
      << r.fpi.non_converged << "\n";
    for (const auto& w : r.warnings) f << "warning " << w << "\n";
}

Metrics test_metrics(const LfrModel& m, const Dataset& test, Index n_init) {
    const Vector x0 = estimate_x0_test(m, test, n_init);
    return metrics(test.y, predict(m, x0, test.u), n_init < test.size() ? n_init : 0);
}

Metrics baseline_metrics(const RunConfig& cfg, const BaselineModel& b, const Dataset& d, Index skip) {
    Vector x0 = Vector::Zero(b.n_x());
    const auto idx = b.output_state_index();
    if (cfg.train.x0_init == X0Init::Selector && idx) x0(*idx) = d.y(0, 0);
    if (cfg.train.x0_init == X0Init::Output) x0.setConstant(d.y(0, 0));
    return metrics(d.y, simulate_baseline(b, b.theta0(), x0, d.u).second, skip < d.size() ? skip : 0);
}

void report(const RunConfig& cfg, const RunData& data, const TrainResult& r, const fs::path& dir) {
    const auto baseline = cfg.baseline.build();
    save_model(dir / "model.json", r.params, cfg.baseline, &r.cert);
    std::vector<std::pair<std::string, Metrics>> rows;
    rows.emplace_back("train", r.train_metrics);
    rows.emplace_back("baseline_train", baseline_metrics(cfg, *baseline, data.train, 0));
    if (data.test) {
        rows.emplace_back("test", test_metrics(r.model, *data.test, cfg.n_init));
        rows.emplace_back("baseline_test", baseline_metrics(cfg, *baseline, *data.test, cfg.n_init));
    }
    write_metrics(dir / "metrics.csv", rows);
    write_trace(dir / "loss_trace.csv", r.trace);
    write_certificates(dir / "certificates.txt", r);
    for (const auto& [name, m] : rows)
        std::printf("%-15s rmse %.6g  nrmse %.4f%%  bfr %.4f%%\n", name.c_str(), m.rmse, m.nrmse_percent,
                    m.bfr_percent);
}

int cmd_train(const Common& c) {
    const RunConfig cfg = prepare(c);
    if (c.validate_only) {
        std::puts("config ok");
        return kOk;
    }
    const RunData data = load_run_data(cfg);
    const TrainResult r = fit(data.train, cfg.baseline.build(), cfg.train);
    report(cfg, data, r, out_dir(cfg.out));
    return kOk;
}

int cmd_discover(const Common& c) {
    const RunConfig cfg = prepare(c);
    if (c.validate_only) {
        std::puts("config ok");
        return kOk;
    }
    const RunData data = load_run_data(cfg);
    TrainResult dense;
    const TrainResult r = reweighted_l1_discover(data.train, cfg.baseline.build(), cfg.train, &dense);
    const fs::path dir = out_dir(cfg.out);
    report(cfg, data, r, dir);
    const SparsityReport& s = *r.sparsity;
    std::ofstream f(dir / "sparsity.txt");
    f.precision(10);
    f << "rho_LFR " << s.rho_lfr << (cfg.train.rho_lfr ? " (configured)" : " (rule of thumb eps * V_base)") << "\n";
    f << "reweight_iterations " << s.iterations << (s.converged ? " converged" : " not converged") << "\n";
    f << "zeroed " << s.zeroed << " of " << s.total << " (" << 100.0 * s.fraction() << "%)\n";
    f << "Dzw_block " << (s.dzw_zeroed ? "zeroed" : "kept") << "\n";
    for (const auto& [name, z] : s.per_block) f << "block " << name << " zeroed " << z << "\n";
    f << "dense_train_nrmse " << dense.train_metrics.nrmse_percent << "\n";
    std::printf("rho_LFR %.6g, zeroed %td/%td W entries, D_zw %s\n", s.rho_lfr, s.zeroed, s.total,
                s.dzw_zeroed ? "zeroed" : "kept");
    return kOk;
}

int cmd_order_select(const Common& c, const std::string& target_s, const std::vector<double>& grid_cli) {
    const RunConfig cfg = prepare(c);
    OrderSelectSpec os = cfg.order_select.value_or(OrderSelectSpec{});
    if (!target_s.empty()) os.target = parse_group_target(target_s);
    if (!grid_cli.empty()) os.rho_grid = grid_cli;
    if (os.rho_grid.empty()) throw ConfigError("order-select needs a non-empty rho grid (--rho-grid or config)");
    check_group_lasso_mode(cfg.train.param_mode, os.target);
    if (c.validate_only) {
        std::puts("config ok");
        return kOk;
    }
    const RunData data = load_run_data(cfg);
    const auto rows = group_lasso_select(data.train, data.test ? &*data.test : nullptr, cfg.baseline.build(),
                                         cfg.train, os.target, os.rho_grid);
    const fs::path dir = out_dir(cfg.out);
    std::ofstream f(dir / "order_select.csv");
    f << "rho,target,surviving,kept,refit_nrmse_percent,refit_bfr_percent,refit_rmse,refit_loss\n";
    char buf[512];
    for (const auto& r : rows) {
        std::string kept;
        for (std::size_t i = 0; i < r.kept.size(); ++i) kept += (i ? ";" : "") + std::to_string(r.kept[i]);
        std::snprintf(buf, sizeof buf, "%.10g,%s,%td,%s,%.10g,%.10g,%.10g,%.10g\n", r.rho,
                      to_string(os.target).c_str(), r.surviving, kept.c_str(), r.refit.nrmse_percent,
                      r.refit.bfr_percent, r.refit.rmse, r.refit_loss);
        f << buf;
        std::printf("rho %-10.4g %s surviving %td  nrmse %.4f%%  bfr %.3f%%\n", r.rho, to_string(os.target).c_str(),
                    r.surviving, r.refit.nrmse_percent, r.refit.bfr_percent);
    }
    return kOk;
}

int cmd_gen_data(const Common& c) {
    const RunConfig cfg = prepare(c);
    if (!cfg.data.generator) throw ConfigError("gen-data needs a data.generator section");
    if (c.validate_only) {
        std::puts("config ok");
        return kOk;
    }
    const RunData data = load_run_data(cfg);
    const fs::path dir = out_dir(cfg.out);
    save_dataset(data.train, (dir / "train.csv").string());
    if (data.test) save_dataset(*data.test, (dir / "test.csv").string());
    std::printf("wrote %s\n", dir.string().c_str());
    return kOk;
}

struct SimArgs {
    std::string model, data;
    Index n_init = 50;
};

int cmd_simulate(const Common& c, const SimArgs& a, bool write_yhat) {
    const SavedModel sm = load_model(a.model);
    const Dataset d = load_dataset(a.data);
    if (d.u.cols() != sm.model.dims.n_u || d.y.cols() != sm.model.dims.n_y)
        throw DataError("dataset channels do not match the model");
    if (a.n_init < 1 || a.n_init > d.size()) throw ConfigError("--n-init must lie in [1, N]");
    if (c.validate_only) {
        std::puts("inputs ok");
        return kOk;
    }
    const Vector x0 = estimate_x0_test(sm.model, d, a.n_init);
    const Matrix yh = predict(sm.model, x0, d.u);
    const Metrics m = metrics(d.y, yh, a.n_init < d.size() ? a.n_init : 0);
    std::printf("rmse %.6g  nrmse %.4f%%  bfr %.4f%%\n", m.rmse, m.nrmse_percent, m.bfr_percent);
    if (!c.out.empty() || write_yhat) {
        const fs::path dir = out_dir(c.out.empty() ? fs::path(".") : fs::path(c.out));
        write_metrics(dir / "metrics.csv", {{"eval", m}});
        if (write_yhat) {
            Dataset out = d;
            out.y = yh;
            out.name = "y_hat";
            save_dataset(out, (dir / "y_hat.csv").string());
        }
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LFR model augmentation: training, structure discovery and order selection"};
    app.require_subcommand(1);
    Common common;
    std::string target;
    std::vector<double> grid;
    SimArgs sim;

    auto* train = app.add_subcommand("train", "fit a model and write model.json, metrics and certificates");
    add_common(train, common, true);
    auto* discover = app.add_subcommand("discover", "reweighted l1 structure discovery");
    add_common(discover, common, true);
    auto* order = app.add_subcommand("order-select", "group-lasso sweep over a rho grid");
    add_common(order, common, true);
    order->add_option("--target", target, "za, wa or xa");
    order->add_option("--rho-grid", grid, "regularization weights")->delimiter(',');
    auto* gen = app.add_subcommand("gen-data", "write generated MSD train/test CSV files");
    add_common(gen, common, true);
    auto* simulate = app.add_subcommand("simulate", "estimate x0, simulate a dataset and write y_hat.csv");
    auto* eval = app.add_subcommand("eval", "estimate x0 and report metrics on a dataset");
    for (auto* s : {simulate, eval}) {
        add_common(s, common, false);
        s->add_option("--model", sim.model, "model.json")->required();
        s->add_option("--data", sim.data, "dataset CSV")->required();
        s->add_option("--n-init", sim.n_init, "state initialization window");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*train) return cmd_train(common);
        if (*discover) return cmd_discover(common);
        if (*order) return cmd_order_select(common, target, grid);
        if (*gen) return cmd_gen_data(common);
        if (*simulate) return cmd_simulate(common, sim, true);
        if (*eval) return cmd_simulate(common, sim, false);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const InvalidInputError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kData;
    } catch (const Error& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kNumerical;
    }
    return kOk;
}
