#include "lfr/config.hpp"

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace lfr {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- baseline -------------------------------------------------------------------------

std::shared_ptr<BaselineModel> BaselineSpec::build() const {
    if (kind == "msd") return msd_baseline(msd);
    if (kind == "cct") {
        auto b = cct_baseline(cct_k, cct_ts);
        if (!cct_trainable) b->set_trainable(std::vector<bool>(4, false));
        return b;
    }
    if (kind == "lti") {
        if (a.rows() == 0 || a.rows() != a.cols()) throw ConfigError("baseline.lti.A must be square and non-empty");
        if (b.rows() != a.rows()) throw ConfigError("baseline.lti.B must have as many rows as A");
        if (c.cols() != a.rows()) throw ConfigError("baseline.lti.C must have as many columns as A");
        Matrix dd = d.size() == 0 ? Matrix::Zero(c.rows(), b.cols()) : d;
        if (dd.rows() != c.rows() || dd.cols() != b.cols()) throw ConfigError("baseline.lti.D has the wrong shape");
        auto m = std::make_shared<LtiBaseline>(a, b, c, dd);
        if (box) m->set_operating_box(*box);
        return m;
    }
    throw ConfigError("unknown baseline kind '" + kind + "' (expected msd, cct or lti)");
}

// ---- YAML ------------------------------------------------------------------------------

namespace {

std::string where(const YAML::Node& n) {
    const YAML::Mark m = n.Mark();
    return m.line >= 0 ? " (line " + std::to_string(m.line + 1) + ")" : "";
}

void check_keys(const YAML::Node& n, const std::set<std::string>& allowed, const std::string& ctx) {
    if (!n) return;
    if (!n.IsMap()) throw ConfigError(ctx + " must be a mapping" + where(n));
    for (const auto& kv : n) {
        const std::string k = kv.first.as<std::string>();
        if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + ctx + where(kv.first));
    }
}

template <typename T>
T get(const YAML::Node& n, const char* key, T def, const std::string& ctx) {
    if (!n || !n[key]) return def;
    try {
        return n[key].as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError("bad value for " + ctx + "." + key + where(n[key]));
    }
}

template <typename T>
std::optional<T> get_opt(const YAML::Node& n, const char* key, const std::string& ctx) {
    if (!n || !n[key] || n[key].IsNull()) return std::nullopt;
    return get<T>(n, key, T{}, ctx);
}

Vector get_vector(const YAML::Node& n, const std::string& ctx) {
    if (!n.IsSequence()) throw ConfigError(ctx + " must be a list of numbers" + where(n));
    Vector v(static_cast<Index>(n.size()));
    for (std::size_t i = 0; i < n.size(); ++i) {
        try {
            v(static_cast<Index>(i)) = n[i].as<double>();
        } catch (const YAML::Exception&) {
            throw ConfigError(ctx + " must contain numbers" + where(n[i]));
        }
    }
    return v;
}

Matrix get_matrix(const YAML::Node& n, const std::string& ctx) {
    if (!n.IsSequence()) throw ConfigError(ctx + " must be a list of rows" + where(n));
    if (n.size() == 0) return Matrix(0, 0);
    const bool nested = n[0].IsSequence();
    if (!nested) return get_vector(n, ctx).transpose();
    const Index rows = static_cast<Index>(n.size());
    const Index cols = static_cast<Index>(n[0].size());
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        const Vector r = get_vector(n[static_cast<std::size_t>(i)], ctx);
        if (r.size() != cols) throw ConfigError(ctx + " has ragged rows" + where(n[static_cast<std::size_t>(i)]));
        m.row(i) = r.transpose();
    }
    return m;
}

void parse_msd(const YAML::Node& n, MsdParams& p) {
    check_keys(n, {"m", "k_s", "c_d", "ts", "f_c", "v_eps", "c_v"}, "baseline.msd");
    p.m = get(n, "m", p.m, "baseline.msd");
    p.k_s = get(n, "k_s", p.k_s, "baseline.msd");
    p.c_d = get(n, "c_d", p.c_d, "baseline.msd");
    p.ts = get(n, "ts", p.ts, "baseline.msd");
    p.f_c = get(n, "f_c", p.f_c, "baseline.msd");
    p.v_eps = get(n, "v_eps", p.v_eps, "baseline.msd");
    p.c_v = get(n, "c_v", p.c_v, "baseline.msd");
    try {
        p.validate();
    } catch (const InvalidInputError& e) {
        throw ConfigError(std::string("baseline.msd: ") + e.what());
    }
}

BaselineSpec parse_baseline(const YAML::Node& n) {
    BaselineSpec s;
    if (!n) throw ConfigError("missing 'baseline' section");
    check_keys(n, {"kind", "msd", "cct", "lti"}, "baseline");
    s.kind = get<std::string>(n, "kind", "", "baseline");
    if (s.kind == "external" || s.kind == "external-plugin") s.kind = "lti";
    if (n["msd"] || s.kind == "msd") parse_msd(n["msd"], s.msd);
    if (s.kind == "cct") {
        const YAML::Node c = n["cct"];
        check_keys(c, {"k", "ts", "trainable"}, "baseline.cct");
        if (c && c["k"]) s.cct_k = get_vector(c["k"], "baseline.cct.k");
        if (s.cct_k.size() != 4) throw ConfigError("baseline.cct.k needs 4 values");
        s.cct_ts = get(c, "ts", s.cct_ts, "baseline.cct");
        s.cct_trainable = get(c, "trainable", s.cct_trainable, "baseline.cct");
        if (!(s.cct_ts > 0.0)) throw ConfigError("baseline.cct.ts must be positive");
        for (Index i = 0; i < 4; ++i)
            if (s.cct_k(i) == 0.0) throw ConfigError("baseline.cct.k entries must be nonzero (relative regularization)");
    } else if (s.kind == "lti") {
        const YAML::Node l = n["lti"];
        if (!l) throw ConfigError("baseline.kind lti needs a 'baseline.lti' section");
        check_keys(l, {"A", "B", "C", "D", "x_lo", "x_hi", "u_lo", "u_hi"}, "baseline.lti");
        for (const char* k : {"A", "B", "C"})
            if (!l[k]) throw ConfigError(std::string("baseline.lti.") + k + " is required");
        s.a = get_matrix(l["A"], "baseline.lti.A");
        s.b = get_matrix(l["B"], "baseline.lti.B");
        s.c = get_matrix(l["C"], "baseline.lti.C");
        if (l["D"]) s.d = get_matrix(l["D"], "baseline.lti.D");
        if (l["x_lo"] || l["x_hi"] || l["u_lo"] || l["u_hi"]) {
            for (const char* k : {"x_lo", "x_hi", "u_lo", "u_hi"})
                if (!l[k]) throw ConfigError(std::string("baseline.lti.") + k + " is required when a box is given");
            s.box = OperatingBox{get_vector(l["x_lo"], "baseline.lti.x_lo"), get_vector(l["x_hi"], "baseline.lti.x_hi"),
                                 get_vector(l["u_lo"], "baseline.lti.u_lo"), get_vector(l["u_hi"], "baseline.lti.u_hi")};
        }
    } else if (s.kind != "msd") {
        throw ConfigError("unknown baseline kind '" + s.kind + "' (expected msd, cct or lti)");
    }
    return s;
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() ? q : base / q;
}

DataSpec parse_data(const YAML::Node& n, const fs::path& base) {
    DataSpec s;
    if (!n) throw ConfigError("missing 'data' section");
    check_keys(n, {"train", "test", "cct_benchmark", "generator"}, "data");
    if (n["train"]) s.train = resolve(base, get<std::string>(n, "train", "", "data"));
    if (n["test"]) s.test = resolve(base, get<std::string>(n, "test", "", "data"));
    if (n["cct_benchmark"]) s.cct_benchmark = resolve(base, get<std::string>(n, "cct_benchmark", "", "data"));
    if (const YAML::Node g = n["generator"]) {
        check_keys(g, {"n_train", "n_test", "u_lo", "u_hi", "seed_train", "seed_test", "snr_db"}, "data.generator");
        GeneratorSpec gs;
        gs.n_train = get<Index>(g, "n_train", gs.n_train, "data.generator");
        gs.n_test = get<Index>(g, "n_test", gs.n_test, "data.generator");
        gs.u_lo = get(g, "u_lo", gs.u_lo, "data.generator");
        gs.u_hi = get(g, "u_hi", gs.u_hi, "data.generator");
        gs.seed_train = get<std::uint64_t>(g, "seed_train", gs.seed_train, "data.generator");
        gs.seed_test = get<std::uint64_t>(g, "seed_test", gs.seed_test, "data.generator");
        gs.snr_db = get_opt<double>(g, "snr_db", "data.generator");
        if (gs.n_train < 1 || gs.n_test < 0) throw ConfigError("data.generator: n_train >= 1 and n_test >= 0 required");
        if (!(gs.u_lo < gs.u_hi)) throw ConfigError("data.generator: u_lo must be below u_hi");
        s.generator = gs;
    }
    const int sources = (s.train ? 1 : 0) + (s.cct_benchmark ? 1 : 0) + (s.generator ? 1 : 0);
    if (sources != 1) throw ConfigError("data: give exactly one of train, cct_benchmark or generator");
    if (s.test && !s.train) throw ConfigError("data.test requires data.train");
    return s;
}

void parse_model(const YAML::Node& n, TrainConfig& t) {
    if (!n) return;
    const std::string c = "model";
    check_keys(n,
               {"n_xa", "n_za", "n_wa", "hidden", "activation", "param_mode", "sigma_c_mode", "alpha_bar",
                "lipschitz_mode", "lipschitz_bound", "cayley_eps"},
               c);
    t.n_xa = get<Index>(n, "n_xa", t.n_xa, c);
    t.n_za = get<Index>(n, "n_za", t.n_za, c);
    t.n_wa = get<Index>(n, "n_wa", t.n_wa, c);
    if (n["hidden"]) {
        t.hidden.clear();
        for (const auto& h : n["hidden"]) t.hidden.push_back(h.as<Index>());
    }
    if (n["activation"]) {
        try {
            t.activation = parse_activation(get<std::string>(n, "activation", "", c));
        } catch (const InvalidInputError& e) {
            throw ConfigError(e.what());
        }
    }
    auto parse = [&](const char* key, auto fn) {
        if (!n[key]) return;
        try {
            fn(get<std::string>(n, key, "", c));
        } catch (const InvalidInputError& e) {
            throw ConfigError(std::string("model.") + key + ": " + e.what());
        }
    };
    parse("param_mode", [&](const std::string& s) { t.param_mode = parse_param_mode(s); });
    parse("sigma_c_mode", [&](const std::string& s) { t.sigma_c_mode = parse_sigma_c_mode(s); });
    parse("lipschitz_mode", [&](const std::string& s) { t.l_mode = parse_lipschitz_mode(s); });
    t.alpha_bar = get(n, "alpha_bar", t.alpha_bar, c);
    t.cayley_eps = get(n, "cayley_eps", t.cayley_eps, c);
    t.lipschitz_bound = get_opt<double>(n, "lipschitz_bound", c);
}

void parse_train(const YAML::Node& n, TrainConfig& t, Index& n_init) {
    if (!n) return;
    const std::string c = "train";
    check_keys(n,
               {"rho_a_l2", "rho_a_l1", "rho_x0", "rho_b", "rho_L", "rho_LFR", "rho_za", "rho_wa", "rho_xa",
                "adam_epochs", "lbfgs_epochs", "adam_lr", "lbfgs_memory", "eps_fpi", "n_max", "eps_reweight",
                "reweight_max_iters", "train_x0", "x0_init", "n_init", "certificate_every", "power_iters"},
               c);
    t.rho_a_l2 = get(n, "rho_a_l2", t.rho_a_l2, c);
    t.rho_a_l1 = get(n, "rho_a_l1", t.rho_a_l1, c);
    t.rho_x0 = get(n, "rho_x0", t.rho_x0, c);
    t.rho_b = get(n, "rho_b", t.rho_b, c);
    t.rho_l = get(n, "rho_L", t.rho_l, c);
    t.rho_lfr = get_opt<double>(n, "rho_LFR", c);
    t.rho_za = get(n, "rho_za", t.rho_za, c);
    t.rho_wa = get(n, "rho_wa", t.rho_wa, c);
    t.rho_xa = get(n, "rho_xa", t.rho_xa, c);
    t.adam_epochs = get(n, "adam_epochs", t.adam_epochs, c);
    t.lbfgs_epochs = get(n, "lbfgs_epochs", t.lbfgs_epochs, c);
    t.adam_lr = get(n, "adam_lr", t.adam_lr, c);
    t.lbfgs_memory = get(n, "lbfgs_memory", t.lbfgs_memory, c);
    t.eps_fpi = get(n, "eps_fpi", t.eps_fpi, c);
    t.n_max = get(n, "n_max", t.n_max, c);
    t.eps_reweight = get(n, "eps_reweight", t.eps_reweight, c);
    t.reweight_max_iters = get(n, "reweight_max_iters", t.reweight_max_iters, c);
    t.train_x0 = get(n, "train_x0", t.train_x0, c);
    t.certificate_every = get(n, "certificate_every", t.certificate_every, c);
    t.power_iters = get(n, "power_iters", t.power_iters, c);
    if (n["x0_init"]) t.x0_init = parse_x0_init(get<std::string>(n, "x0_init", "", c));
    n_init = get<Index>(n, "n_init", n_init, c);
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const fs::path& source_dir) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    if (!root.IsMap()) throw ConfigError("config must be a mapping");
    check_keys(root, {"schema_version", "name", "seed", "out", "baseline", "data", "model", "train", "order_select"},
               "config");
    RunConfig cfg;
    cfg.source_dir = source_dir;
    if (!root["schema_version"]) throw ConfigError("config: schema_version is required");
    cfg.schema_version = get<int>(root, "schema_version", 0, "config");
    if (cfg.schema_version != kSchemaVersion)
        throw ConfigError("unsupported schema_version " + std::to_string(cfg.schema_version) + " (expected " +
                          std::to_string(kSchemaVersion) + ")");
    cfg.name = get<std::string>(root, "name", cfg.name, "config");
    cfg.train.seed = get<std::uint64_t>(root, "seed", 0, "config");
    cfg.out = resolve(source_dir, get<std::string>(root, "out", "out", "config"));
    cfg.baseline = parse_baseline(root["baseline"]);
    cfg.data = parse_data(root["data"], source_dir);
    if (cfg.data.generator && cfg.baseline.kind != "msd")
        throw ConfigError("data.generator produces MSD data; baseline.kind must be msd");
    parse_model(root["model"], cfg.train);
    parse_train(root["train"], cfg.train, cfg.n_init);
    if (cfg.n_init < 1) throw ConfigError("train.n_init must be >= 1");
    if (const YAML::Node o = root["order_select"]) {
        check_keys(o, {"target", "rho_grid"}, "order_select");
        OrderSelectSpec os;
        os.target = parse_group_target(get<std::string>(o, "target", "xa", "order_select"));
        if (o["rho_grid"]) {
            const Vector g = get_vector(o["rho_grid"], "order_select.rho_grid");
            os.rho_grid.assign(g.data(), g.data() + g.size());
        }
        cfg.order_select = os;
    }
    cfg.train.validate();
    return cfg;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str(), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

std::pair<Dataset, Dataset> load_cct_benchmark(const fs::path& path, double ts) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    std::string line;
    std::getline(in, line);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cols;
    {
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
    }
    auto col = [&](const char* name) {
        for (std::size_t i = 0; i < cols.size(); ++i)
            if (cols[i] == name) return static_cast<int>(i);
        throw DataError(path.string() + ":1: missing column '" + name + "'");
    };
    const int iue = col("uEst"), iuv = col("uVal"), iye = col("yEst"), iyv = col("yVal");
    std::vector<std::array<double, 4>> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> v;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) {
            try {
                std::size_t pos = 0;
                v.push_back(std::stod(f, &pos));
                if (pos != f.size()) throw std::invalid_argument(f);
            } catch (const std::exception&) {
                throw DataError(path.string() + ":" + std::to_string(lineno) + ": non-numeric field '" + f + "'");
            }
        }
        if (v.size() != cols.size())
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols.size()) +
                            " fields");
        rows.push_back({v[static_cast<std::size_t>(iue)], v[static_cast<std::size_t>(iuv)],
                        v[static_cast<std::size_t>(iye)], v[static_cast<std::size_t>(iyv)]});
    }
    if (rows.empty()) throw DataError(path.string() + ": no samples");
    const Index n = static_cast<Index>(rows.size());
    Dataset est, val;
    est.u.resize(n, 1);
    est.y.resize(n, 1);
    val.u.resize(n, 1);
    val.y.resize(n, 1);
    for (Index i = 0; i < n; ++i) {
        const auto& r = rows[static_cast<std::size_t>(i)];
        est.u(i, 0) = r[0];
        val.u(i, 0) = r[1];
        est.y(i, 0) = r[2];
        val.y(i, 0) = r[3];
    }
    est.ts = val.ts = ts;
    est.name = "cct_est";
    val.name = "cct_val";
    return {est, val};
}

RunData load_run_data(const RunConfig& cfg) {
    RunData d;
    if (cfg.data.generator) {
        const GeneratorSpec& g = *cfg.data.generator;
        d.train = msd_generate(cfg.baseline.msd, g.n_train, g.u_lo, g.u_hi, g.seed_train, g.snr_db);
        if (g.n_test > 0) d.test = msd_generate(cfg.baseline.msd, g.n_test, g.u_lo, g.u_hi, g.seed_test, g.snr_db);
    } else if (cfg.data.cct_benchmark) {
        auto [est, val] = load_cct_benchmark(*cfg.data.cct_benchmark, cfg.baseline.cct_ts);
        d.train = std::move(est);
        d.test = std::move(val);
    } else {
        d.train = load_dataset(cfg.data.train->string());
        if (cfg.data.test) d.test = load_dataset(cfg.data.test->string());
    }
    return d;
}

void validate_run(const RunConfig& cfg) {
    for (const auto& p : {cfg.data.train, cfg.data.test, cfg.data.cct_benchmark})
        if (p && !fs::exists(*p)) throw DataError("dataset file not found: " + p->string());
    const auto baseline = cfg.baseline.build();
    if (cfg.data.generator) return;  // generated data matches the MSD baseline by construction
    const RunData d = load_run_data(cfg);
    auto check = [&](const Dataset& ds, const char* which) {
        if (ds.u.cols() != baseline->n_u() || ds.y.cols() != baseline->n_y())
            throw ConfigError(std::string(which) + " dataset has " + std::to_string(ds.u.cols()) + " inputs / " +
                              std::to_string(ds.y.cols()) + " outputs, baseline expects " +
                              std::to_string(baseline->n_u()) + " / " + std::to_string(baseline->n_y()));
    };
    check(d.train, "training");
    if (d.test) {
        check(*d.test, "test");
        if (cfg.n_init > d.test->size()) throw ConfigError("train.n_init exceeds the test set length");
    }
}

// ---- JSON model dump -----------------------------------------------------------------

namespace {

json to_json(const Matrix& m) {
    json rows = json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        json r = json::array();
        for (Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
        rows.push_back(r);
    }
    return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Matrix matrix_from(const json& j) {
    const Index r = j.at("rows").get<Index>(), c = j.at("cols").get<Index>();
    Matrix m(r, c);
    const json& d = j.at("data");
    if (static_cast<Index>(d.size()) != r) throw DataError("model: matrix row count mismatch");
    for (Index i = 0; i < r; ++i) {
        const json& row = d.at(static_cast<std::size_t>(i));
        if (static_cast<Index>(row.size()) != c) throw DataError("model: matrix column count mismatch");
        for (Index k = 0; k < c; ++k) m(i, k) = row.at(static_cast<std::size_t>(k)).get<double>();
    }
    return m;
}

Vector vector_from(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

json baseline_json(const BaselineSpec& b) {
    json j{{"kind", b.kind}};
    if (b.kind == "msd")
        j["msd"] = {{"m", b.msd.m}, {"k_s", b.msd.k_s}, {"c_d", b.msd.c_d}, {"ts", b.msd.ts}};
    if (b.kind == "cct") j["cct"] = {{"k", to_json(b.cct_k)}, {"ts", b.cct_ts}, {"trainable", b.cct_trainable}};
    if (b.kind == "lti") {
        j["lti"] = {{"A", to_json(b.a)}, {"B", to_json(b.b)}, {"C", to_json(b.c)}, {"D", to_json(b.d)}};
        if (b.box)
            j["lti"]["box"] = {{"x_lo", to_json(b.box->x_lo)},
                               {"x_hi", to_json(b.box->x_hi)},
                               {"u_lo", to_json(b.box->u_lo)},
                               {"u_hi", to_json(b.box->u_hi)}};
    }
    return j;
}

BaselineSpec baseline_from(const json& j) {
    BaselineSpec b;
    b.kind = j.at("kind").get<std::string>();
    if (b.kind == "msd") {
        const json& m = j.at("msd");
        b.msd.m = m.at("m").get<double>();
        b.msd.k_s = m.at("k_s").get<double>();
        b.msd.c_d = m.at("c_d").get<double>();
        b.msd.ts = m.at("ts").get<double>();
    } else if (b.kind == "cct") {
        const json& c = j.at("cct");
        b.cct_k = vector_from(c.at("k"));
        b.cct_ts = c.at("ts").get<double>();
        b.cct_trainable = c.at("trainable").get<bool>();
    } else if (b.kind == "lti") {
        const json& l = j.at("lti");
        b.a = matrix_from(l.at("A"));
        b.b = matrix_from(l.at("B"));
        b.c = matrix_from(l.at("C"));
        b.d = matrix_from(l.at("D"));
        if (l.contains("box")) {
            const json& x = l.at("box");
            b.box = OperatingBox{vector_from(x.at("x_lo")), vector_from(x.at("x_hi")), vector_from(x.at("u_lo")),
                                 vector_from(x.at("u_hi"))};
        }
    } else {
        throw DataError("model: unknown baseline kind '" + b.kind + "'");
    }
    return b;
}

}  // namespace

std::string model_to_json(const ParamSet& p, const BaselineSpec& baseline, const Certificates* cert) {
    const ParamSpec& s = p.spec;
    const Realized<double> r = realize(p);
    json j;
    j["format"] = "lfraug-model";
    j["version"] = 1;
    j["dims"] = {{"n_xb", s.dims.n_xb}, {"n_xa", s.dims.n_xa}, {"n_u", s.dims.n_u},
                 {"n_y", s.dims.n_y},   {"n_za", s.dims.n_za}, {"n_wa", s.dims.n_wa}};
    j["mode"] = to_string(s.mode);
    j["sigma_c_mode"] = to_string(s.sigma_c_mode);
    j["l_phi"] = s.l_phi;
    j["alpha_bar"] = s.alpha_bar;
    j["cayley_eps"] = s.cayley_eps;
    j["activation"] = to_string(s.activation);
    j["hidden"] = s.hidden;
    j["fpi"] = {{"tol", s.fpi.tol}, {"n_max", s.fpi.n_max}};
    j["baseline"] = baseline_json(baseline);
    j["normalizer"] = {{"mu_u", to_json(s.norm.mu_u)},   {"sigma_u", to_json(s.norm.sigma_u)},
                       {"mu_y", to_json(s.norm.mu_y)},   {"sigma_y", to_json(s.norm.sigma_y)},
                       {"sigma_x", to_json(s.norm.sigma_x)}};
    json layout = json::array();
    for (const auto& e : s.layout)
        layout.push_back({{"name", e.name}, {"offset", e.offset}, {"rows", e.rows}, {"cols", e.cols}});
    j["free"] = {{"layout", layout}, {"theta", to_json(p.theta)}, {"mask", to_json(p.mask)}};
    json real;
    for (BlockId id : kAllBlocks) real[block_name(id)] = to_json(r.model.blocks[id]);
    json ann = json::array();
    for (std::size_t i = 0; i < r.model.ann.weights.size(); ++i)
        ann.push_back({{"W", to_json(r.model.ann.weights[i])}, {"b", to_json(r.model.ann.biases[i])}});
    real["ann"] = ann;
    real["theta_b"] = to_json(r.model.theta_b);
    real["x0"] = to_json(r.x0);
    j["realized"] = real;
    if (cert) {
        j["certificates"] = {{"l_phi", cert->l_phi},
                             {"dzw_norm", cert->dzw_norm},
                             {"wellposed_product", cert->wellposed_product},
                             {"wellposed_ok", cert->wellposed_ok},
                             {"contraction_bound", cert->contraction_bound},
                             {"alpha_bar", cert->alpha_bar},
                             {"contraction_ok", cert->contraction_ok},
                             {"ann_bound", cert->ann_bound},
                             {"lipschitz_violated", cert->lipschitz_violated}};
    }
    return j.dump(1);
}

void save_model(const fs::path& path, const ParamSet& p, const BaselineSpec& b, const Certificates* cert) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << model_to_json(p, b, cert) << "\n";
}

SavedModel model_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(std::string("model file is not valid JSON: ") + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != "lfraug-model") throw DataError("not a model file");
        SavedModel sm;
        sm.baseline = baseline_from(j.at("baseline"));
        ParamSpec s;
        const json& d = j.at("dims");
        s.dims.n_xb = d.at("n_xb").get<Index>();
        s.dims.n_xa = d.at("n_xa").get<Index>();
        s.dims.n_u = d.at("n_u").get<Index>();
        s.dims.n_y = d.at("n_y").get<Index>();
        s.dims.n_za = d.at("n_za").get<Index>();
        s.dims.n_wa = d.at("n_wa").get<Index>();
        s.mode = parse_param_mode(j.at("mode").get<std::string>());
        s.sigma_c_mode = parse_sigma_c_mode(j.at("sigma_c_mode").get<std::string>());
        s.l_phi = j.at("l_phi").get<double>();
        s.alpha_bar = j.at("alpha_bar").get<double>();
        s.cayley_eps = j.at("cayley_eps").get<double>();
        s.activation = parse_activation(j.at("activation").get<std::string>());
        s.hidden = j.at("hidden").get<std::vector<Index>>();
        s.fpi.tol = j.at("fpi").at("tol").get<double>();
        s.fpi.n_max = j.at("fpi").at("n_max").get<int>();
        s.baseline = sm.baseline.build();
        const json& n = j.at("normalizer");
        s.norm.mu_u = vector_from(n.at("mu_u"));
        s.norm.sigma_u = vector_from(n.at("sigma_u"));
        s.norm.mu_y = vector_from(n.at("mu_y"));
        s.norm.sigma_y = vector_from(n.at("sigma_y"));
        s.norm.sigma_x = vector_from(n.at("sigma_x"));
        s.norm.validate();
        build_layout(s);
        const json& fr = j.at("free");
        const json& lay = fr.at("layout");
        if (lay.size() != s.layout.size()) throw DataError("model: parameter layout does not match its settings");
        for (std::size_t i = 0; i < lay.size(); ++i) {
            const LayoutEntry& e = s.layout[i];
            if (lay[i].at("name").get<std::string>() != e.name || lay[i].at("offset").get<Index>() != e.offset ||
                lay[i].at("rows").get<Index>() != e.rows || lay[i].at("cols").get<Index>() != e.cols)
                throw DataError("model: parameter layout entry '" + e.name + "' does not match");
        }
        sm.params.spec = s;
        sm.params.theta = vector_from(fr.at("theta"));
        sm.params.mask = vector_from(fr.at("mask"));
        if (sm.params.theta.size() != s.size() || sm.params.mask.size() != s.size())
            throw DataError("model: free-variable vector has the wrong length");
        if (!sm.params.theta.allFinite()) throw DataError("model: non-finite free variables");
        const Realized<double> r = realize(sm.params);
        const json& real = j.at("realized");
        auto close = [](const Matrix& a, const Matrix& b) {
            return a.rows() == b.rows() && a.cols() == b.cols() &&
                   (a.size() == 0 || (a - b).cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, b.cwiseAbs().maxCoeff()));
        };
        for (BlockId id : kAllBlocks)
            if (!close(r.model.blocks[id], matrix_from(real.at(block_name(id)))))
                throw DataError(std::string("model: realized block ") + block_name(id) +
                                " disagrees with the free variables");
        if (!close(r.x0, vector_from(real.at("x0")))) throw DataError("model: realized x0 disagrees");
        sm.model = r.model;
        sm.x0 = r.x0;
        validate(sm.model);
        return sm;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed model file: ") + e.what());
    } catch (const InvalidInputError& e) {
        throw DataError(std::string("malformed model file: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("malformed model file: ") + e.what());
    }
}

SavedModel load_model(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open model '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return model_from_json(ss.str());
}

}  // namespace lfr
