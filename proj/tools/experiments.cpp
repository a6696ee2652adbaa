#include "experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>

#include "insider/insider.hpp"
#include "json.hpp"

namespace insider::cli {

namespace fs = std::filesystem;

namespace {

std::vector<FieldSpec> common_fields() {
    return {
        {"kind", FieldType::string, "", "experiment kind (see `list`)"},
        {"seed", FieldType::integer, "0", "master seed; every random stream is keyed by it"},
        {"threads", FieldType::integer, "1", "worker threads (0 = hardware); results do not depend on it"},
        {"output", FieldType::string, "results", "output directory; nothing is written outside it"},
    };
}

std::vector<FieldSpec> market_fields() {
    return {
        {"model.a0", FieldType::number, "0.1", "drift coefficient a0"},
        {"model.b0", FieldType::number, "0.3", "volatility coefficient b0"},
        {"model.T", FieldType::number, "0.5", "trading horizon T (must be < T0)"},
        {"model.T0", FieldType::number, "1.0", "time at which Z = B(T0) is revealed"},
        {"model.z", FieldType::number, "0.0", "insider value z"},
        {"model.eps_vol", FieldType::number, "1e-8", "lower bound on |b0|"},
        {"grid.n_steps", FieldType::integer, "500", "time steps on [0, T]"},
        {"grid.n_cells", FieldType::integer, "32", "spatial cells on D = (0, 1)"},
        {"control.lo", FieldType::number, "-50", "lower end of U"},
        {"control.hi", FieldType::number, "50", "upper end of U"},
        {"donsker.method", FieldType::string, "closed_form", "closed_form | fourier"},
    };
}

std::vector<KindInfo> build_kinds() {
    std::vector<KindInfo> k;
    k.push_back({"donsker-table",
                 "conditional Donsker delta by Fourier quadrature against the Gaussian kernel",
                 {{"model.T0", FieldType::number, "1.0", "horizon of Z = B(T0)"},
                  {"model.history_mean", FieldType::number, "0.0", "realized int_0^t beta dB"},
                  {"grid.t_values", FieldType::number_list, "[0.0, 0.2, 0.4, 0.6, 0.8]", "evaluation times (< T0)"},
                  {"grid.z_min", FieldType::number, "-2.0", "smallest z"},
                  {"grid.z_max", FieldType::number, "2.0", "largest z"},
                  {"grid.n_z", FieldType::integer, "5", "number of z points"},
                  {"grid.normalization_points", FieldType::integer, "400", "trapezoid intervals for int dz on [-8, 8]"},
                  {"tolerance.oracle", FieldType::number, "1e-8", "max |quadrature - closed form|"},
                  {"tolerance.normalization", FieldType::number, "1e-6", "max |int dz - 1|"}},
                 {{"donsker_table.csv", "t,z,quadrature,closed_form,abs_error,malliavin_b,phi1,intervals"},
                  {"donsker_normalization.csv", "t,integral,abs_error"}}});
    k.push_back({"forward-convergence",
                 "heat-equation refinement study of the semi-implicit forward scheme",
                 {{"model.T", FieldType::number, "0.1", "final time"},
                  {"grid.dx_cells", FieldType::integer_list, "[8, 16, 32]", "cell counts for the space study"},
                  {"grid.dx_fixed_steps", FieldType::integer, "20000", "time steps held fixed in the space study"},
                  {"grid.dt_steps", FieldType::integer_list, "[10, 20, 40]", "step counts for the time study"},
                  {"grid.dt_fixed_cells", FieldType::integer, "256", "cells held fixed in the time study"},
                  {"tolerance.dx_order_lo", FieldType::number, "1.8", ""},
                  {"tolerance.dx_order_hi", FieldType::number, "2.2", ""},
                  {"tolerance.dt_order_lo", FieldType::number, "0.8", ""},
                  {"tolerance.dt_order_hi", FieldType::number, "1.2", ""}},
                 {{"forward_convergence.csv", "study,n_cells,n_steps,max_error,order"}}});
    {
        KindInfo p{"portfolio", "log-utility wealth SPDE: insider control vs shifted and Merton controls", market_fields(),
                   {{"portfolio.csv", "control,j_mean,stderr,n_paths,rejection_rate,gap_to_optimal,gap_stderr"}}};
        p.fields.push_back({"mc.n_paths", FieldType::integer, "10000", "Monte Carlo paths (common random numbers)"});
        p.fields.push_back({"mc.antithetic", FieldType::boolean, "true", "pair each path with its mirror"});
        p.fields.push_back({"candidates.shifts", FieldType::number_list, "[-0.25, 0.25]", "constant shifts of the optimum"});
        p.fields.push_back({"candidates.merton", FieldType::boolean, "true", "include the a0/b0^2 control"});
        p.fields.push_back({"tolerance.gap_sigmas", FieldType::number, "2.0", "required gap in standard errors"});
        k.push_back(p);
    }
    {
        KindInfo s{"stationarity", "x-independent first-order condition at the optimum and at a shifted control",
                   market_fields(),
                   {{"stationarity.csv", "control,path,step,t,statistic,stderr,t_stat"},
                    {"stationarity_report.json", "JSON report per control"}}};
        s.fields.push_back({"stationarity.sample_steps", FieldType::integer_list, "[125, 250, 375]", "time indices k (0<k<n)"});
        s.fields.push_back({"stationarity.n_outer_paths", FieldType::integer, "2", "outer paths"});
        s.fields.push_back({"stationarity.n_continuations", FieldType::integer, "2000", "continuations per (path, step)"});
        s.fields.push_back({"stationarity.bump", FieldType::number, "1e-4", "dB bump for the Malliavin difference"});
        s.fields.push_back({"stationarity.shift", FieldType::number, "1.0", "shift of the comparison control"});
        s.fields.push_back({"tolerance.sigmas", FieldType::number, "3.0", "threshold in standard errors"});
        k.push_back(s);
    }
    k.push_back({"zakai-benchmark",
                 "linear-Gaussian filter: Zakai grid vs Kalman-Bucy vs particle filter",
                 {{"model.a", FieldType::number, "-1.0", "signal drift dX = a X dt + b dv"},
                  {"model.b", FieldType::number, "1.0", "signal volatility"},
                  {"model.c", FieldType::number, "1.0", "observation dR = c X dt + dw"},
                  {"model.m0", FieldType::number, "0.5", "prior mean"},
                  {"model.P0", FieldType::number, "0.25", "prior variance (> 0)"},
                  {"model.T", FieldType::number, "1.0", "final time"},
                  {"grid.x_min", FieldType::number, "-4.0", "truncated state space"},
                  {"grid.x_max", FieldType::number, "4.0", ""},
                  {"grid.n_cells", FieldType::integer, "800", "cells at the base resolution"},
                  {"grid.n_steps", FieldType::integer, "100", "steps at the base resolution"},
                  {"filter.n_particles", FieldType::integer, "10000", "particles per replicate (>= 100)"},
                  {"filter.replicates", FieldType::integer, "8", "independent particle filters (stderr)"},
                  {"filter.substeps", FieldType::integer, "4", "Euler substeps per observation step"},
                  {"mc.n_obs_paths", FieldType::integer, "4", "observation paths in the refinement study"},
                  {"output.snapshot_stride", FieldType::integer, "10", "time stride of filter_snapshots.csv"},
                  {"tolerance.grid_error", FieldType::number, "0.05", "max |Zakai mean - Kalman mean|"},
                  {"tolerance.particle_sigmas", FieldType::number, "3.0", ""},
                  {"tolerance.ratio_lo", FieldType::number, "1.6", "error reduction when dx, dt halve"},
                  {"tolerance.ratio_hi", FieldType::number, "2.6", ""}},
                 {{"zakai_benchmark.csv",
                   "t,zakai_mean,zakai_variance,kalman_mean,kalman_variance,particle_mean,particle_stderr,zakai_mass,"
                   "particle_mass,particle_mass_stderr,boundary_mass"},
                  {"zakai_convergence.csv", "path,n_steps,n_cells,zakai_mean,kalman_mean,abs_error"},
                  {"filter_snapshots.csv", "t,x,unnormalized,normalized"},
                  {"zakai_report.json", "terminal means, refinement errors, verdicts"}}});
    k.push_back({"coercivity",
                 "discrete energy identity 2<-L*y,y> = pi^2 beta^2 |y'|^2 on a hat function",
                 {{"model.pi", FieldType::number, "1.0", "control value"},
                  {"model.beta", FieldType::number, "1.0", "signal volatility"},
                  {"model.alpha", FieldType::number, "1.0", "signal drift coefficient"},
                  {"grid.n_cells", FieldType::integer_list, "[32, 64, 128]", "even cell counts on (0, 1)"},
                  {"tolerance.C_max", FieldType::number, "5.0", "ratio must lie in 1 +- C_max dx"},
                  {"tolerance.C_spread", FieldType::number, "0.1", "max relative spread of the fitted C"}},
                 {{"coercivity.csv", "n_cells,dx,pi,lhs,rhs,ratio,fitted_C"}}});
    return k;
}

std::string join_path(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

const FieldSpec* find_field(const std::vector<FieldSpec>& fields, const std::string& path) {
    for (const auto& f : fields)
        if (f.path == path) return &f;
    return nullptr;
}

std::vector<FieldSpec> all_fields(const KindInfo& k) {
    auto v = common_fields();
    v.insert(v.end(), k.fields.begin(), k.fields.end());
    return v;
}

void check_type(const YAML::Node& n, const FieldSpec& f) {
    auto fail = [&](const char* want) {
        throw ConfigError("field '" + f.path + "' must be " + want);
    };
    try {
        switch (f.type) {
            case FieldType::integer:
                if (!n.IsScalar()) fail("an integer");
                (void)n.as<long long>();
                break;
            case FieldType::number:
                if (!n.IsScalar()) fail("a number");
                (void)n.as<double>();
                break;
            case FieldType::boolean:
                if (!n.IsScalar()) fail("true or false");
                (void)n.as<bool>();
                break;
            case FieldType::string:
                if (!n.IsScalar()) fail("a string");
                break;
            case FieldType::integer_list:
                if (!n.IsSequence() || n.size() == 0) fail("a non-empty list of integers");
                for (const auto& e : n) (void)e.as<long long>();
                break;
            case FieldType::number_list:
                if (!n.IsSequence() || n.size() == 0) fail("a non-empty list of numbers");
                for (const auto& e : n) (void)e.as<double>();
                break;
        }
    } catch (const YAML::Exception&) {
        fail(f.type == FieldType::integer || f.type == FieldType::integer_list ? "integer-valued" : "numeric");
    }
}

void walk(const YAML::Node& node, const std::string& prefix, const std::vector<FieldSpec>& fields, const std::string& kind) {
    for (const auto& kv : node) {
        const std::string path = join_path(prefix, kv.first.as<std::string>());
        const FieldSpec* f = find_field(fields, path);
        if (f) {
            check_type(kv.second, *f);
            continue;
        }
        if (kv.second.IsMap()) {
            walk(kv.second, path, fields, kind);
            continue;
        }
        std::string best;
        std::size_t bd = std::string::npos;
        for (const auto& c : fields) {
            const std::size_t d = edit_distance(path, c.path);
            if (d < bd) {
                bd = d;
                best = c.path;
            }
        }
        throw ConfigError("unknown field '" + path + "' for kind '" + kind + "'; did you mean '" + best + "'?");
    }
}

std::optional<YAML::Node> lookup(const YAML::Node& root, const std::string& path) {
    YAML::Node cur = root;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        const YAML::Node& c = cur;
        if (!c.IsMap() || !c[key]) return std::nullopt;
        cur.reset(c[key]);  // plain assignment would write through
        if (dot == std::string::npos) return cur;
        start = dot + 1;
    }
}

/// Effective parameter access with schema defaults.
class Params {
public:
    Params(const ExperimentConfig& cfg) : cfg_(cfg), kind_(*find_kind(cfg.kind)), fields_(all_fields(kind_)) {}

    YAML::Node node(const std::string& path) const {
        const FieldSpec* f = find_field(fields_, path);
        if (!f) throw std::logic_error("schema has no field " + path);
        if (auto n = lookup(cfg_.root, path)) return *n;
        return YAML::Load(f->default_value);
    }
    double num(const std::string& p) const { return node(p).as<double>(); }
    long long integer(const std::string& p) const { return node(p).as<long long>(); }
    std::size_t count(const std::string& p) const {
        const long long v = integer(p);
        if (v < 0) throw ConfigError("field '" + p + "' must be >= 0");
        return static_cast<std::size_t>(v);
    }
    bool flag(const std::string& p) const { return node(p).as<bool>(); }
    std::string str(const std::string& p) const { return node(p).as<std::string>(); }
    std::vector<double> nums(const std::string& p) const { return node(p).as<std::vector<double>>(); }
    std::vector<long long> ints(const std::string& p) const { return node(p).as<std::vector<long long>>(); }

    const std::vector<FieldSpec>& fields() const { return fields_; }

private:
    const ExperimentConfig& cfg_;
    const KindInfo& kind_;
    std::vector<FieldSpec> fields_;
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string brief(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

void validate_market(const Params& p) {
    const double T = p.num("model.T"), T0 = p.num("model.T0");
    require(T > 0.0, "constraint violated: model.T > 0");
    require(T0 > 0.0, "constraint violated: model.T0 > 0");
    require(T < T0, "constraint violated: T < T0 (model.T = " + brief(T) + ", model.T0 = " + brief(T0) + ")");
    require(p.num("model.eps_vol") > 0.0, "constraint violated: model.eps_vol > 0");
    require(std::abs(p.num("model.b0")) >= p.num("model.eps_vol"), "constraint violated: |b0| >= eps_vol");
    require(p.integer("grid.n_steps") >= 1, "constraint violated: grid.n_steps >= 1");
    require(p.integer("grid.n_cells") >= 2, "constraint violated: grid.n_cells >= 2");
    require(p.num("control.lo") < p.num("control.hi"), "constraint violated: control.lo < control.hi");
    const std::string m = p.str("donsker.method");
    require(m == "closed_form" || m == "fourier", "donsker.method must be closed_form or fourier");
    // The last weight is taken at T, strictly before T0.
    const double dt = T / static_cast<double>(p.integer("grid.n_steps"));
    require(T <= T0 - 0.5 * dt, "constraint violated: T <= T0 - dt/2");
}

void validate_physics(const ExperimentConfig& cfg) {
    const Params p(cfg);
    const std::string& k = cfg.kind;
    require(p.integer("threads") >= 0, "constraint violated: threads >= 0");
    if (k == "donsker-table") {
        const double T0 = p.num("model.T0");
        require(T0 > 0.0, "constraint violated: model.T0 > 0");
        for (double t : p.nums("grid.t_values")) require(t >= 0.0 && t < T0, "constraint violated: 0 <= t < T0 for every t in grid.t_values");
        require(p.integer("grid.n_z") >= 2, "constraint violated: grid.n_z >= 2");
        require(p.num("grid.z_max") > p.num("grid.z_min"), "constraint violated: grid.z_max > grid.z_min");
        require(p.integer("grid.normalization_points") >= 10, "constraint violated: grid.normalization_points >= 10");
    } else if (k == "forward-convergence") {
        require(p.num("model.T") > 0.0, "constraint violated: model.T > 0");
        for (long long c : p.ints("grid.dx_cells")) require(c >= 2, "constraint violated: grid.dx_cells entries >= 2");
        for (long long c : p.ints("grid.dt_steps")) require(c >= 1, "constraint violated: grid.dt_steps entries >= 1");
        require(p.ints("grid.dx_cells").size() >= 2 && p.ints("grid.dt_steps").size() >= 2, "refinement studies need >= 2 levels");
        require(p.integer("grid.dx_fixed_steps") >= 1 && p.integer("grid.dt_fixed_cells") >= 2, "fixed resolutions must be positive");
    } else if (k == "portfolio") {
        validate_market(p);
        require(p.integer("mc.n_paths") >= 4, "constraint violated: mc.n_paths >= 4");
    } else if (k == "stationarity") {
        validate_market(p);
        const long long n = p.integer("grid.n_steps");
        for (long long s : p.ints("stationarity.sample_steps"))
            require(s > 0 && s < n, "constraint violated: 0 < sample step < grid.n_steps");
        require(p.integer("stationarity.n_outer_paths") >= 1, "constraint violated: n_outer_paths >= 1");
        require(p.integer("stationarity.n_continuations") >= 2, "constraint violated: n_continuations >= 2");
        require(p.num("stationarity.bump") > 0.0, "constraint violated: stationarity.bump > 0");
    } else if (k == "zakai-benchmark") {
        require(p.num("model.T") > 0.0, "constraint violated: model.T > 0");
        require(p.num("model.P0") > 0.0, "constraint violated: model.P0 > 0");
        require(p.num("grid.x_max") > p.num("grid.x_min"), "constraint violated: grid.x_max > grid.x_min");
        require(p.integer("grid.n_cells") >= 2, "constraint violated: grid.n_cells >= 2");
        require(p.integer("grid.n_steps") >= 1, "constraint violated: grid.n_steps >= 1");
        require(p.integer("filter.n_particles") >= 100, "constraint violated: filter.n_particles >= 100");
        require(p.integer("filter.replicates") >= 2, "constraint violated: filter.replicates >= 2");
        require(p.integer("filter.substeps") >= 1, "constraint violated: filter.substeps >= 1");
        require(p.integer("mc.n_obs_paths") >= 1, "constraint violated: mc.n_obs_paths >= 1");
        require(p.integer("output.snapshot_stride") >= 1, "constraint violated: output.snapshot_stride >= 1");
    } else if (k == "coercivity") {
        for (long long c : p.ints("grid.n_cells")) require(c >= 4 && c % 2 == 0, "constraint violated: grid.n_cells entries even and >= 4");
        require(p.ints("grid.n_cells").size() >= 2, "coercivity needs >= 2 refinements");
        require(p.num("model.beta") != 0.0, "constraint violated: model.beta != 0");
    }
}

// ---------------------------------------------------------------------------------------------

class OutputDir {
public:
    explicit OutputDir(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

    void write(const std::string& name, const std::string& content, RunResult& res) {
        if (name.find('/') != std::string::npos || name.find("..") != std::string::npos)
            throw std::logic_error("output names must be plain file names");
        std::ofstream os(root_ / name, std::ios::binary);
        os << content;
        if (!os) throw std::runtime_error("cannot write " + (root_ / name).string());
        res.files.push_back(name);
    }

    const fs::path& root() const { return root_; }

private:
    fs::path root_;
};

void add_check(RunResult& r, std::string name, bool ok, double value, double threshold, std::string detail = {}) {
    r.checks.push_back({std::move(name), ok, value, threshold, std::move(detail)});
}

DonskerMethod method_of(const Params& p) {
    return p.str("donsker.method") == "fourier" ? DonskerMethod::fourier : DonskerMethod::closed_form;
}

PortfolioBenchmark benchmark_of(const Params& p) {
    PortfolioBenchmark b = PortfolioBenchmark::standard(p.count("grid.n_steps"), p.count("grid.n_cells"), p.num("model.z"),
                                                        p.num("model.a0"), p.num("model.b0"), p.num("model.T"),
                                                        p.num("model.T0"));
    b.range = ControlRange{p.num("control.lo"), p.num("control.hi")};
    b.market.eps_vol = p.num("model.eps_vol");
    return b;
}

// ---------------------------------------------------------------------------------------------

void run_donsker(const ExperimentConfig& cfg, const Params& p, OutputDir& out, RunResult& res) {
    const FirstOrderChaosSpec spec = FirstOrderChaosSpec::brownian(p.num("model.T0"));
    const double m = p.num("model.history_mean");
    const std::size_t nz = p.count("grid.n_z");
    const double z0 = p.num("grid.z_min"), z1 = p.num("grid.z_max");
    std::ostringstream os, on;
    os << "t,z,quadrature,closed_form,abs_error,malliavin_b,phi1,intervals\n";
    on << "t,integral,abs_error\n";
    double worst = 0.0, worst_norm = 0.0;
    for (double t : p.nums("grid.t_values")) {
        const auto h = HistorySnapshot::brownian_only(t, m);
        for (std::size_t i = 0; i < nz; ++i) {
            const double z = z0 + (z1 - z0) * static_cast<double>(i) / static_cast<double>(nz - 1);
            const DonskerValue q = conditional_delta_detailed(spec, z, h);
            const double c = gaussian_conditional_delta(spec, z, h);
            worst = std::max(worst, std::abs(q.value - c));
            os << fmt(t) << ',' << fmt(z) << ',' << fmt(q.value) << ',' << fmt(c) << ',' << fmt(std::abs(q.value - c)) << ','
               << fmt(conditional_malliavin_b(spec, z, h)) << ',' << fmt(phi1(spec, z, h)) << ',' << q.intervals << '\n';
        }
        const std::size_t n = p.count("grid.normalization_points");
        const double a = m - 8.0, b = m + 8.0, dz = (b - a) / static_cast<double>(n);
        double s = 0.0;
        for (std::size_t i = 0; i <= n; ++i)
            s += ((i == 0 || i == n) ? 0.5 : 1.0) * conditional_delta(spec, a + dz * static_cast<double>(i), h);
        s *= dz;
        worst_norm = std::max(worst_norm, std::abs(s - 1.0));
        on << fmt(t) << ',' << fmt(s) << ',' << fmt(std::abs(s - 1.0)) << '\n';
    }
    out.write("donsker_table.csv", os.str(), res);
    out.write("donsker_normalization.csv", on.str(), res);
    add_check(res, "oracle_equivalence", worst <= p.num("tolerance.oracle"), worst, p.num("tolerance.oracle"));
    add_check(res, "normalization", worst_norm <= p.num("tolerance.normalization"), worst_norm, p.num("tolerance.normalization"));
    (void)cfg;
}

double heat_error(std::size_t cells, std::size_t steps, double T) {
    const SpatialGrid g(0.0, 1.0, cells);
    const TimeGrid tg(0.0, T, steps);
    CoefficientSet c;
    c.xi = [](double x, double) { return std::sin(std::numbers::pi * x); };
    const StateField f = solve_forward(c, OperatorSpec::half_laplacian(), g, ControlPolicy::constant(0.0), 0.0,
                                       sample_bundle(tg, {}, 0, 0));
    const double decay = std::exp(-0.5 * std::numbers::pi * std::numbers::pi * T);
    double err = 0.0;
    for (std::size_t i = 0; i < g.n_nodes(); ++i)
        err = std::max(err, std::abs(f.terminal()[i] - decay * std::sin(std::numbers::pi * g.x(i))));
    return err;
}

void run_forward(const ExperimentConfig&, const Params& p, OutputDir& out, RunResult& res) {
    const double T = p.num("model.T");
    std::ostringstream os;
    os << "study,n_cells,n_steps,max_error,order\n";
    auto study = [&](const std::string& name, const std::vector<std::pair<std::size_t, std::size_t>>& levels, double lo,
                     double hi) {
        double prev = 0.0;
        bool ok = true;
        double worst = 0.0;
        for (std::size_t i = 0; i < levels.size(); ++i) {
            const double e = heat_error(levels[i].first, levels[i].second, T);
            os << name << ',' << levels[i].first << ',' << levels[i].second << ',' << fmt(e) << ',';
            if (i > 0) {
                const double ratio = name == "dx" ? static_cast<double>(levels[i].first) / static_cast<double>(levels[i - 1].first)
                                                  : static_cast<double>(levels[i].second) / static_cast<double>(levels[i - 1].second);
                const double order = std::log(prev / e) / std::log(ratio);
                os << fmt(order);
                if (!(order >= lo && order <= hi)) ok = false;
                if (i == 1 || std::abs(order - 0.5 * (lo + hi)) > std::abs(worst - 0.5 * (lo + hi))) worst = order;
            }
            os << '\n';
            prev = e;
        }
        add_check(res, name + "_order", ok, worst, lo, "bounds [" + brief(lo) + ", " + brief(hi) + "]");
    };
    std::vector<std::pair<std::size_t, std::size_t>> dx, dt;
    for (long long c : p.ints("grid.dx_cells")) dx.emplace_back(static_cast<std::size_t>(c), p.count("grid.dx_fixed_steps"));
    for (long long s : p.ints("grid.dt_steps")) dt.emplace_back(p.count("grid.dt_fixed_cells"), static_cast<std::size_t>(s));
    study("dx", dx, p.num("tolerance.dx_order_lo"), p.num("tolerance.dx_order_hi"));
    study("dt", dt, p.num("tolerance.dt_order_lo"), p.num("tolerance.dt_order_hi"));
    out.write("forward_convergence.csv", os.str(), res);
}

void run_portfolio(const ExperimentConfig& cfg, const Params& p, OutputDir& out, RunResult& res) {
    const PortfolioBenchmark b = benchmark_of(p);
    EstimatorOptions o;
    o.n_paths = p.count("mc.n_paths");
    o.seed = cfg.seed;
    o.threads = cfg.threads;
    o.antithetic = p.flag("mc.antithetic");
    o.method = method_of(p);
    std::vector<NamedControl> cands{{"optimal", b.optimal(o.method)}};
    for (double s : p.nums("candidates.shifts")) {
        char name[64];
        std::snprintf(name, sizeof name, "optimal%+g", s);
        cands.push_back({name, b.optimal(o.method).shifted(s)});
    }
    if (p.flag("candidates.merton")) cands.push_back({"merton", merton_policy(b.market, b.range)});
    const auto rows = run_portfolio_experiment(b.market, b.utility, b.spec, b.z, b.time, cands, o);
    std::ostringstream os;
    write_portfolio_csv(os, rows);
    out.write("portfolio.csv", os.str(), res);
    bool max_ok = true;
    std::size_t rejected = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) max_ok = max_ok && rows[0].estimate.mean > rows[i].estimate.mean;
    for (const auto& r : rows) rejected += r.estimate.n_rejected;
    add_check(res, "optimal_has_max_mean", max_ok, rows[0].estimate.mean, 0.0);
    const double k = p.num("tolerance.gap_sigmas");
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& g = rows[i].gap_to_first;
        const double t = g.stderr > 0.0 ? g.mean / g.stderr : 0.0;
        add_check(res, "gap_" + rows[i].name, t >= k, t, k, "gap " + brief(g.mean) + " +- " + brief(g.stderr));
    }
    add_check(res, "positivity", rejected == 0, static_cast<double>(rejected), 0.0);
}

void run_stationarity(const ExperimentConfig& cfg, const Params& p, OutputDir& out, RunResult& res) {
    const PortfolioBenchmark b = benchmark_of(p);
    StationarityOptions o;
    for (long long s : p.ints("stationarity.sample_steps")) o.sample_steps.push_back(static_cast<std::size_t>(s));
    o.n_outer_paths = p.count("stationarity.n_outer_paths");
    o.n_continuations = p.count("stationarity.n_continuations");
    o.bump = p.num("stationarity.bump");
    o.threshold = p.num("tolerance.sigmas");
    o.seed = cfg.seed;
    o.threads = cfg.threads;
    o.method = method_of(p);
    const double shift = p.num("stationarity.shift");
    const auto at = verify_x_independent_stationarity(b.problem(), b.optimal(o.method), b.performance(), b.spec, b.z, o);
    const auto off =
        verify_x_independent_stationarity(b.problem(), b.optimal(o.method).shifted(shift), b.performance(), b.spec, b.z, o);
    std::ostringstream os;
    os << "control,path,step,t,statistic,stderr,t_stat\n";
    auto dump = [&](const std::string& name, const StationarityReport& r) {
        for (const auto& s : r.samples)
            os << name << ',' << s.path << ',' << s.step << ',' << fmt(s.t) << ',' << fmt(s.statistic) << ',' << fmt(s.stderr)
               << ',' << fmt(s.t_stat()) << '\n';
    };
    char sname[64];
    std::snprintf(sname, sizeof sname, "optimal%+g", shift);
    dump("optimal", at);
    dump(sname, off);
    out.write("stationarity.csv", os.str(), res);
    nlohmann::json j;
    j["optimal"] = at.to_json();
    j[sname] = off.to_json();
    out.write("stationarity_report.json", j.dump(2) + "\n", res);
    add_check(res, "stationary_at_optimum", at.stationary(), at.max_abs_t(), o.threshold);
    add_check(res, "definite_sign_when_shifted", off.definite_sign() != 0, static_cast<double>(off.definite_sign()), o.threshold,
              "min |t| must exceed the threshold with one sign");
}

void run_zakai(const ExperimentConfig& cfg, const Params& p, OutputDir& out, RunResult& res) {
    const LinearGaussianModel lg{p.num("model.a"), p.num("model.b"), p.num("model.c"), p.num("model.m0"), p.num("model.P0")};
    const double T = p.num("model.T");
    const std::size_t n = p.count("grid.n_steps"), cells = p.count("grid.n_cells");
    const double x0 = p.num("grid.x_min"), x1 = p.num("grid.x_max");
    const SignalModel base = linear_gaussian_signal(lg, SpatialGrid(x0, x1, cells));
    const SignalModel fine = linear_gaussian_signal(lg, SpatialGrid(x0, x1, 2 * cells));
    const ZakaiSolver zb(base), zf(fine);
    const TimeGrid tfine(0.0, T, 2 * n);
    const std::size_t n_obs = p.count("mc.n_obs_paths");

    std::ostringstream oc;
    oc << "path,n_steps,n_cells,zakai_mean,kalman_mean,abs_error\n";
    double err_base = 0.0, err_fine = 0.0, worst_grid = 0.0;
    ObservationPath obs0;
    std::vector<UnnormalizedDensity> y0;
    KalmanBucyPath kb0;
    for (std::size_t path = 0; path < n_obs; ++path) {
        const auto v = sample_bundle(tfine, {}, cfg.seed, path, 0);
        const auto w = sample_bundle(tfine, {}, cfg.seed, path, 1);
        const auto [sig, of] = simulate_signal_observation(fine, {}, 0.0, v, w);
        const ObservationPath ob = of.coarsened(2);
        const auto yb = zakai_solve(zb, {}, 0.0, ob);
        const auto yf = zakai_solve(zf, {}, 0.0, of);
        const auto kbb = kalman_bucy_oracle(lg, ob);
        const auto kbf = kalman_bucy_oracle(lg, of);
        const double mb = density_moments(base.state_grid, yb.back().values).first;
        const double mf = density_moments(fine.state_grid, yf.back().values).first;
        const double eb = std::abs(mb - kbb.mean.back()), ef = std::abs(mf - kbf.mean.back());
        oc << path << ',' << n << ',' << cells << ',' << fmt(mb) << ',' << fmt(kbb.mean.back()) << ',' << fmt(eb) << '\n';
        oc << path << ',' << 2 * n << ',' << 2 * cells << ',' << fmt(mf) << ',' << fmt(kbf.mean.back()) << ',' << fmt(ef) << '\n';
        err_base += eb / static_cast<double>(n_obs);
        err_fine += ef / static_cast<double>(n_obs);
        worst_grid = std::max(worst_grid, eb);
        if (path == 0) {
            obs0 = ob;
            y0 = yb;
            kb0 = kbb;
        }
    }
    ParticleFilterOptions po;
    po.n_particles = p.count("filter.n_particles");
    po.replicates = p.count("filter.replicates");
    po.substeps = p.count("filter.substeps");
    po.seed = cfg.seed + 1;
    po.threads = cfg.threads;
    const auto pf = particle_filter_oracle(base, {}, 0.0, obs0, po);

    std::ostringstream ob;
    ob << "t,zakai_mean,zakai_variance,kalman_mean,kalman_variance,particle_mean,particle_stderr,zakai_mass,particle_mass,"
          "particle_mass_stderr,boundary_mass\n";
    for (std::size_t k = 0; k < y0.size(); ++k) {
        const auto [m, var] = density_moments(base.state_grid, y0[k].values);
        ob << fmt(obs0.grid.time(k)) << ',' << fmt(m) << ',' << fmt(var) << ',' << fmt(kb0.mean[k]) << ',' << fmt(kb0.variance[k])
           << ',' << fmt(pf.mean[k]) << ',' << fmt(pf.mean_stderr[k]) << ',' << fmt(y0[k].mass()) << ',' << fmt(pf.mass[k]) << ','
           << fmt(pf.mass_stderr[k]) << ',' << fmt(y0[k].boundary_mass_fraction()) << '\n';
    }
    out.write("zakai_benchmark.csv", ob.str(), res);
    out.write("zakai_convergence.csv", oc.str(), res);
    std::ostringstream os;
    write_filter_csv(os, y0, p.count("output.snapshot_stride"));
    out.write("filter_snapshots.csv", os.str(), res);

    const double zm = density_moments(base.state_grid, y0.back().values).first;
    const double ks = p.num("tolerance.particle_sigmas");
    const double se = pf.mean_stderr.back();
    add_check(res, "grid_vs_kalman", worst_grid <= p.num("tolerance.grid_error"), worst_grid, p.num("tolerance.grid_error"));
    add_check(res, "particle_vs_kalman", std::abs(pf.mean.back() - kb0.mean.back()) <= ks * se,
              se > 0 ? std::abs(pf.mean.back() - kb0.mean.back()) / se : INFINITY, ks, "in standard errors");
    add_check(res, "particle_vs_grid", std::abs(pf.mean.back() - zm) <= ks * se + p.num("tolerance.grid_error"),
              std::abs(pf.mean.back() - zm), ks * se + p.num("tolerance.grid_error"));
    const double ratio = err_base / err_fine;
    add_check(res, "halving_ratio", ratio >= p.num("tolerance.ratio_lo") && ratio <= p.num("tolerance.ratio_hi"), ratio,
              p.num("tolerance.ratio_lo"), "bounds [" + brief(p.num("tolerance.ratio_lo")) + ", " + brief(p.num("tolerance.ratio_hi")) + "]");

    nlohmann::json j;
    j["terminal"] = {{"zakai_mean", zm},
                     {"kalman_mean", kb0.mean.back()},
                     {"particle_mean", pf.mean.back()},
                     {"particle_stderr", se},
                     {"min_ess", pf.min_ess},
                     {"boundary_mass", y0.back().boundary_mass_fraction()},
                     {"clamped_defect", y0.back().clamped_defect}};
    j["refinement"] = {{"mean_error_base", err_base}, {"mean_error_fine", err_fine}, {"ratio", ratio}};
    auto& cs = j["checks"] = nlohmann::json::array();
    for (const auto& c : res.checks) cs.push_back({{"name", c.name}, {"passed", c.passed}, {"value", c.value}});
    out.write("zakai_report.json", j.dump(2) + "\n", res);
}

void run_coercivity(const ExperimentConfig&, const Params& p, OutputDir& out, RunResult& res) {
    const double pi = p.num("model.pi"), beta = p.num("model.beta"), alpha = p.num("model.alpha");
    std::ostringstream os;
    os << "n_cells,dx,pi,lhs,rhs,ratio,fitted_C\n";
    std::vector<double> C;
    bool within = true, zero_ok = true;
    const double cmax = p.num("tolerance.C_max");
    for (long long nc : p.ints("grid.n_cells")) {
        const SpatialGrid g(0.0, 1.0, static_cast<std::size_t>(nc));
        std::vector<double> y(g.n_nodes());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = 1.0 - std::abs(2.0 * g.x(i) - 1.0);
        y.front() = y.back() = 0.0;
        const auto r = coercivity_check(y, g, pi, beta, alpha);
        const double c = (r.ratio() - 1.0) / g.dx();
        C.push_back(c);
        within = within && std::abs(r.ratio() - 1.0) <= cmax * g.dx();
        os << nc << ',' << fmt(g.dx()) << ',' << fmt(pi) << ',' << fmt(r.lhs) << ',' << fmt(r.rhs) << ',' << fmt(r.ratio()) << ','
           << fmt(c) << '\n';
        const auto r0 = coercivity_check(y, g, 0.0, beta, alpha);
        zero_ok = zero_ok && r0.lhs == 0.0 && r0.rhs == 0.0;
        os << nc << ',' << fmt(g.dx()) << ",0," << fmt(r0.lhs) << ',' << fmt(r0.rhs) << ",,\n";
    }
    out.write("coercivity.csv", os.str(), res);
    double spread = 0.0;
    for (double c : C) spread = std::max(spread, std::abs(c - C.back()) / std::max(std::abs(C.back()), 1e-300));
    add_check(res, "ratio_within_C_dx", within, C.back(), cmax);
    add_check(res, "fitted_C_stable", spread <= p.num("tolerance.C_spread"), spread, p.num("tolerance.C_spread"));
    add_check(res, "zero_at_pi0", zero_ok, 0.0, 0.0);
}

}  // namespace

// ---------------------------------------------------------------------------------------------

const std::vector<KindInfo>& experiment_kinds() {
    static const std::vector<KindInfo> kinds = build_kinds();
    return kinds;
}

const KindInfo* find_kind(const std::string& name) {
    for (const auto& k : experiment_kinds())
        if (k.name == name) return &k;
    return nullptr;
}

std::string suggest_kind(const std::string& name) {
    std::string best;
    std::size_t bd = std::string::npos;
    for (const auto& k : experiment_kinds()) {
        const std::size_t d = edit_distance(name, k.name);
        if (d < bd) {
            bd = d;
            best = k.name;
        }
    }
    return best;
}

std::string schema_text(const KindInfo& kind) {
    static const std::map<FieldType, std::string> names = {{FieldType::integer, "integer"},    {FieldType::number, "number"},
                                                           {FieldType::boolean, "boolean"},    {FieldType::string, "string"},
                                                           {FieldType::integer_list, "[integer]"}, {FieldType::number_list, "[number]"}};
    std::ostringstream os;
    os << kind.name << ": " << kind.summary << "\n  fields:\n";
    for (const auto& f : all_fields(kind)) {
        os << "    " << f.path << " (" << names.at(f.type) << ")";
        if (!f.default_value.empty()) os << " = " << f.default_value;
        if (!f.description.empty()) os << "  # " << f.description;
        os << '\n';
    }
    os << "  outputs:\n";
    for (const auto& o : kind.outputs) os << "    " << o.file << ": " << o.columns << '\n';
    os << "    manifest.json: config hash, seeds, version, per-check verdicts\n";
    return os.str();
}

std::string csv_help() {
    std::ostringstream os;
    os << "CSV columns per experiment kind:\n";
    for (const auto& k : experiment_kinds()) {
        os << "  " << k.name << ":\n";
        for (const auto& o : k.outputs) os << "    " << o.file << ": " << o.columns << '\n';
    }
    os << "Exit codes: 0 success, 2 config error, 3 numerical-check failure.\n";
    return os.str();
}

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    if (!root.IsMap()) throw ConfigError("config must be a mapping of sections");
    if (!root["kind"] || !root["kind"].IsScalar()) throw ConfigError("config needs a 'kind' field");
    ExperimentConfig cfg;
    cfg.kind = root["kind"].as<std::string>();
    const KindInfo* kind = find_kind(cfg.kind);
    if (!kind) throw ConfigError("unknown experiment kind '" + cfg.kind + "'; did you mean '" + suggest_kind(cfg.kind) + "'?");
    walk(root, "", all_fields(*kind), cfg.kind);
    cfg.root = root;
    const Params p(cfg);
    const long long seed = p.integer("seed");
    if (seed < 0) throw ConfigError("constraint violated: seed >= 0");
    cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.threads = p.count("threads");
    const fs::path o = p.str("output");
    cfg.output = o.is_absolute() ? o : base_dir / o;
    validate_physics(cfg);
    return cfg;
}

ExperimentConfig load_config(const fs::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw ConfigError("cannot read config file " + file.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), ".");
}

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string canonical_config(const ExperimentConfig& cfg) {
    const Params p(cfg);
    std::ostringstream os;
    auto list = [&os](const auto& v, auto conv) {
        os << '[';
        for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << conv(v[i]);
        os << ']';
    };
    for (const auto& f : p.fields()) {
        if (f.path == "output" || f.path == "threads") continue;  // do not affect results
        os << f.path << ": ";
        switch (f.type) {
            case FieldType::integer: os << (f.path == "seed" ? static_cast<long long>(cfg.seed) : p.integer(f.path)); break;
            case FieldType::number: os << fmt(p.num(f.path)); break;
            case FieldType::boolean: os << (p.flag(f.path) ? "true" : "false"); break;
            case FieldType::string: os << p.str(f.path); break;
            case FieldType::integer_list: list(p.ints(f.path), [](long long v) { return std::to_string(v); }); break;
            case FieldType::number_list: list(p.nums(f.path), [](double v) { return fmt(v); }); break;
        }
        os << '\n';
    }
    return os.str();
}

RunResult run_experiment(const ExperimentConfig& cfg) {
    const Params p(cfg);
    validate_physics(cfg);
    OutputDir out(cfg.output);
    RunResult res;
    if (cfg.kind == "donsker-table") run_donsker(cfg, p, out, res);
    else if (cfg.kind == "forward-convergence") run_forward(cfg, p, out, res);
    else if (cfg.kind == "portfolio") run_portfolio(cfg, p, out, res);
    else if (cfg.kind == "stationarity") run_stationarity(cfg, p, out, res);
    else if (cfg.kind == "zakai-benchmark") run_zakai(cfg, p, out, res);
    else if (cfg.kind == "coercivity") run_coercivity(cfg, p, out, res);
    else throw ConfigError("unknown experiment kind '" + cfg.kind + "'");

    nlohmann::json m;
    m["kind"] = cfg.kind;
    m["version"] = kVersion;
    const std::string canon = canonical_config(cfg);
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a64(canon)));
    m["config_hash"] = std::string("fnv1a64:") + hash;
    m["config"] = canon;
    m["seeds"] = {{"master", cfg.seed}};
    if (cfg.kind == "zakai-benchmark") m["seeds"]["particles"] = cfg.seed + 1;
    auto& files = m["files"] = nlohmann::json::array();
    for (const auto& f : res.files) {
        std::ifstream is(out.root() / f, std::ios::binary);
        std::ostringstream ss;
        ss << is.rdbuf();
        char h[32];
        std::snprintf(h, sizeof h, "%016llx", static_cast<unsigned long long>(fnv1a64(ss.str())));
        files.push_back({{"name", f.string()}, {"fnv1a64", h}, {"bytes", ss.str().size()}});
    }
    auto& checks = m["checks"] = nlohmann::json::array();
    for (const auto& c : res.checks)
        checks.push_back({{"name", c.name}, {"verdict", c.passed ? "pass" : "fail"}, {"value", c.value},
                          {"threshold", c.threshold}, {"detail", c.detail}});
    m["status"] = res.passed() ? "pass" : "fail";
    out.write("manifest.json", m.dump(2) + "\n", res);
    return res;
}

}  // namespace insider::cli
