#pragma once

// Flat key = value experiment configuration, run planning and the on-disk
// artifacts (results.json, histogram / population CSVs, config echo, sweep
// summary).  Times are in 1/gamma and rates in gamma throughout.

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fbqt/ensemble.hpp"
#include "fbqt/error.hpp"
#include "fbqt/interferometry.hpp"
#include "fbqt/oracle.hpp"
#include "fbqt/params.hpp"

namespace fbqt {

inline constexpr const char* kVersion = "0.1.0";

enum class RunMode { population, hbt, hom, oracle, sweep };
enum class FeedbackSetting { on, off, both };

inline const char* to_string(RunMode m) {
    switch (m) {
    case RunMode::population: return "population";
    case RunMode::hbt: return "hbt";
    case RunMode::hom: return "hom";
    case RunMode::oracle: return "oracle";
    case RunMode::sweep: return "sweep";
    }
    return "?";
}
inline const char* to_string(FeedbackSetting f) {
    return f == FeedbackSetting::on ? "on" : f == FeedbackSetting::off ? "off" : "both";
}

struct ExperimentConfig {
    SystemParams params;
    RunMode mode = RunMode::population;
    std::uint64_t M = 20000;
    std::uint64_t master_seed = 1;
    int parallelism = 0;
    std::filesystem::path output_dir = "out";
    FeedbackSetting feedback = FeedbackSetting::on;
    std::optional<double> window;     ///< peak half-width, default T/2
    std::optional<double> bin_width;  ///< default T/200
    std::optional<double> t_max;      ///< default 5T
    std::size_t spill_threshold = 50'000'000;
    std::string sweep_variable;
    std::vector<double> sweep_values;
};

class ConfigError : public ValidationError {
public:
    ConfigError(const std::string& key, int line, const std::string& why)
        : ValidationError((line > 0 ? "line " + std::to_string(line) + ": " : std::string()) + key + ": " + why),
          key_(key), line_(line) {}
    const std::string& key() const { return key_; }
    int line() const { return line_; }

private:
    std::string key_;
    int line_;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos)
        return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Accepts plain numbers and the forms pi, k*pi, pi/m, k*pi/m.
inline double parse_real(const std::string& key, int line, const std::string& v) {
    const std::string s = trim(v);
    const auto pos = s.find("pi");
    if (pos != std::string::npos) {
        double coef = 1.0, div = 1.0;
        std::string pre = trim(s.substr(0, pos)), post = trim(s.substr(pos + 2));
        if (!pre.empty()) {
            if (pre == "-")
                coef = -1.0;
            else {
                if (pre.back() != '*')
                    throw ConfigError(key, line, "cannot parse '" + v + "' as a number");
                coef = parse_real(key, line, pre.substr(0, pre.size() - 1));
            }
        }
        if (!post.empty()) {
            if (post.front() != '/')
                throw ConfigError(key, line, "cannot parse '" + v + "' as a number");
            div = parse_real(key, line, post.substr(1));
        }
        return coef * std::numbers::pi / div;
    }
    char* end = nullptr;
    const double d = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size())
        throw ConfigError(key, line, "cannot parse '" + v + "' as a number");
    return d;
}

inline long long parse_int(const std::string& key, int line, const std::string& v) {
    const std::string s = trim(v);
    char* end = nullptr;
    const long long n = std::strtoll(s.c_str(), &end, 10);
    if (s.empty() || end != s.c_str() + s.size())
        throw ConfigError(key, line, "cannot parse '" + v + "' as an integer");
    return n;
}

inline bool parse_bool(const std::string& key, int line, const std::string& v) {
    const std::string s = trim(v);
    if (s == "on" || s == "true" || s == "1" || s == "yes")
        return true;
    if (s == "off" || s == "false" || s == "0" || s == "no")
        return false;
    throw ConfigError(key, line, "expected on/off, got '" + v + "'");
}

// shortest text that reads back to the same double
inline std::string fmt(double x) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
}

struct Entry {
    std::string key;
    std::string value;
    int line = 0;
};

} // namespace config_detail

/// Keys accepted in a configuration document, in echo order.
inline const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "mode", "gamma", "gamma0", "gamma_prime", "delta", "tau", "N", "phi", "t_p", "area", "t0", "pulse_shape",
        "T", "n_max", "n_max_joint", "feedback", "settle_tolerance", "M", "master_seed", "parallelism",
        "output_dir", "window", "bin_width", "t_max", "spill_threshold", "sweep_variable", "sweep_values"};
    return keys;
}

inline bool is_sweep_variable(const std::string& v) {
    return v == "t_p" || v == "gamma0" || v == "gamma_prime" || v == "phi" || v == "tau";
}

inline void set_sweep_variable(SystemParams& p, const std::string& var, double value) {
    if (var == "t_p")
        p.pulse.t_p = value;
    else if (var == "gamma0")
        p.gamma0 = value;
    else if (var == "gamma_prime")
        p.gamma_prime = value;
    else if (var == "phi")
        p.phi = value;
    else if (var == "tau")
        p.tau = value;
    else
        throw ValidationError("sweep_variable: unknown variable '" + var + "'");
}

/// Parses a key = value document ('#' starts a comment).  `overrides` are
/// applied after the document, as from the command line; `base` is a document
/// (e.g. a preset) whose keys the main document may override.
inline ExperimentConfig parse_config(const std::string& text,
                                     const std::vector<std::pair<std::string, std::string>>& overrides = {},
                                     const std::string& base = {}) {
    using namespace config_detail;
    std::map<std::string, Entry> entries;
    if (!base.empty()) {
        std::istringstream bs(base);
        std::string raw;
        while (std::getline(bs, raw)) {
            const auto hash = raw.find('#');
            const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
            const auto eq = s.find('=');
            if (eq != std::string::npos)
                entries[trim(s.substr(0, eq))] = {trim(s.substr(0, eq)), trim(s.substr(eq + 1)), 0};
        }
    }
    std::map<std::string, int> seen;
    std::istringstream is(text);
    std::string raw;
    int line = 0;
    while (std::getline(is, raw)) {
        ++line;
        const auto hash = raw.find('#');
        const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (s.empty())
            continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError(s, line, "expected key = value");
        const std::string key = trim(s.substr(0, eq));
        if (std::find(config_keys().begin(), config_keys().end(), key) == config_keys().end())
            throw ConfigError(key, line, "unknown key");
        if (seen.contains(key))
            throw ConfigError(key, line, "duplicate key (first set on line " + std::to_string(seen[key]) + ")");
        seen[key] = line;
        entries[key] = {key, trim(s.substr(eq + 1)), line};
    }
    for (const auto& [key, value] : overrides) {
        if (std::find(config_keys().begin(), config_keys().end(), key) == config_keys().end())
            throw ConfigError(key, 0, "unknown key");
        entries[key] = {key, trim(value), 0};
    }
    if (!entries.contains("mode"))
        throw ConfigError("mode", 0, "missing required key");

    ExperimentConfig c;
    SystemParams& p = c.params;
    auto num = [&](const Entry& e) { return parse_real(e.key, e.line, e.value); };
    auto nonneg_int = [&](const Entry& e) {
        const long long n = parse_int(e.key, e.line, e.value);
        if (n < 0)
            throw ConfigError(e.key, e.line, "must be >= 0");
        return n;
    };
    for (const auto& [key, e] : entries) {
        if (key == "mode") {
            if (e.value == "population") c.mode = RunMode::population;
            else if (e.value == "hbt") c.mode = RunMode::hbt;
            else if (e.value == "hom") c.mode = RunMode::hom;
            else if (e.value == "oracle") c.mode = RunMode::oracle;
            else if (e.value == "sweep") c.mode = RunMode::sweep;
            else throw ConfigError(key, e.line, "expected population | hbt | hom | oracle | sweep");
        } else if (key == "gamma") p.gamma = num(e);
        else if (key == "gamma0") p.gamma0 = num(e);
        else if (key == "gamma_prime") p.gamma_prime = num(e);
        else if (key == "delta") p.delta = num(e);
        else if (key == "tau") p.tau = num(e);
        else if (key == "N") p.N = static_cast<int>(parse_int(key, e.line, e.value));
        else if (key == "phi") p.phi = num(e);
        else if (key == "t_p") p.pulse.t_p = num(e);
        else if (key == "area") p.pulse.area = num(e);
        else if (key == "t0") p.pulse.t0 = num(e);
        else if (key == "pulse_shape") {
            if (e.value == "gaussian") p.pulse.shape = PulseShape::gaussian;
            else if (e.value == "instantaneous") p.pulse.shape = PulseShape::instantaneous;
            else throw ConfigError(key, e.line, "expected gaussian | instantaneous");
        } else if (key == "T") p.T = num(e);
        else if (key == "n_max") p.n_max = static_cast<int>(parse_int(key, e.line, e.value));
        else if (key == "n_max_joint") p.n_max_joint = static_cast<int>(parse_int(key, e.line, e.value));
        else if (key == "feedback") {
            if (e.value == "both") c.feedback = FeedbackSetting::both;
            else c.feedback = parse_bool(key, e.line, e.value) ? FeedbackSetting::on : FeedbackSetting::off;
        } else if (key == "settle_tolerance") p.settle_tolerance = num(e);
        else if (key == "M") {
            c.M = static_cast<std::uint64_t>(nonneg_int(e));
            if (c.M < 1)
                throw ConfigError(key, e.line, "must be >= 1");
        } else if (key == "master_seed") c.master_seed = static_cast<std::uint64_t>(nonneg_int(e));
        else if (key == "parallelism") c.parallelism = static_cast<int>(nonneg_int(e));
        else if (key == "output_dir") {
            if (e.value.empty())
                throw ConfigError(key, e.line, "must not be empty");
            c.output_dir = e.value;
        } else if (key == "window") c.window = num(e);
        else if (key == "bin_width") c.bin_width = num(e);
        else if (key == "t_max") c.t_max = num(e);
        else if (key == "spill_threshold") c.spill_threshold = static_cast<std::size_t>(nonneg_int(e));
        else if (key == "sweep_variable") {
            if (!is_sweep_variable(e.value))
                throw ConfigError(key, e.line, "expected t_p | gamma0 | gamma_prime | phi | tau");
            c.sweep_variable = e.value;
        } else if (key == "sweep_values") {
            std::istringstream vs(e.value);
            std::string item;
            while (std::getline(vs, item, ','))
                if (!trim(item).empty())
                    c.sweep_values.push_back(parse_real(key, e.line, item));
        }
    }

    auto line_of = [&](const std::string& key) { return entries.contains(key) ? entries[key].line : 0; };
    if (c.mode == RunMode::sweep) {
        if (c.sweep_variable.empty())
            throw ConfigError("sweep_variable", 0, "missing required key for mode = sweep");
        if (c.sweep_values.empty())
            throw ConfigError("sweep_values", line_of("sweep_values"), "must list at least one value");
        for (double v : c.sweep_values) {
            const bool ok = (c.sweep_variable == "phi") ? std::isfinite(v)
                            : (c.sweep_variable == "gamma0" || c.sweep_variable == "gamma_prime") ? v >= 0.0
                                                                                                  : v > 0.0;
            if (!ok)
                throw ConfigError("sweep_values", line_of("sweep_values"), "value " + fmt(v) + " not physical");
        }
    } else if (!c.sweep_variable.empty() || !c.sweep_values.empty()) {
        throw ConfigError(entries.contains("sweep_values") ? "sweep_values" : "sweep_variable",
                          line_of(entries.contains("sweep_values") ? "sweep_values" : "sweep_variable"),
                          "only allowed with mode = sweep");
    }
    if (c.window && !(*c.window > 0.0 && *c.window <= 0.5 * p.T))
        throw ConfigError("window", line_of("window"), "must be in (0, T/2]");
    if (c.bin_width && !(*c.bin_width > 0.0))
        throw ConfigError("bin_width", line_of("bin_width"), "must be > 0");
    if (c.t_max && !(*c.t_max >= p.T + c.window.value_or(0.5 * p.T)))
        throw ConfigError("t_max", line_of("t_max"), "must cover the peaks at +-T");

    auto check = [&](SystemParams q) {
        try {
            q.feedback_enabled = true;
            validate(q);
            q.feedback_enabled = false;
            validate(q);
        } catch (const ValidationError& err) {
            const std::string msg = err.what();
            const std::string key = msg.substr(0, msg.find(':'));
            const std::string why = msg.find(": ") == std::string::npos ? msg : msg.substr(msg.find(": ") + 2);
            throw ConfigError(key, line_of(key == "tau/N" ? (entries.contains("N") ? "N" : "tau") : key), why);
        }
    };
    p.feedback_enabled = c.feedback != FeedbackSetting::off;
    if (c.mode == RunMode::sweep)
        for (double v : c.sweep_values) {
            SystemParams q = p;
            set_sweep_variable(q, c.sweep_variable, v);
            check(q);
        }
    else
        check(p);
    return c;
}

/// Canonical document that parses back to the same configuration.
inline std::string echo_config(const ExperimentConfig& c) {
    using config_detail::fmt;
    const SystemParams& p = c.params;
    std::ostringstream os;
    os << "# fbqt " << kVersion << " configuration echo\n";
    os << "mode = " << to_string(c.mode) << '\n';
    os << "gamma = " << fmt(p.gamma) << '\n';
    os << "gamma0 = " << fmt(p.gamma0) << '\n';
    os << "gamma_prime = " << fmt(p.gamma_prime) << '\n';
    os << "delta = " << fmt(p.delta) << '\n';
    os << "tau = " << fmt(p.tau) << '\n';
    os << "N = " << p.N << '\n';
    os << "phi = " << fmt(p.phi) << '\n';
    os << "t_p = " << fmt(p.pulse.t_p) << '\n';
    os << "area = " << fmt(p.pulse.area) << '\n';
    os << "t0 = " << fmt(p.pulse.center()) << '\n';
    os << "pulse_shape = " << (p.pulse.shape == PulseShape::gaussian ? "gaussian" : "instantaneous") << '\n';
    os << "T = " << fmt(p.T) << '\n';
    os << "n_max = " << p.n_max << '\n';
    os << "n_max_joint = " << p.n_max_joint << '\n';
    os << "feedback = " << to_string(c.feedback) << '\n';
    os << "settle_tolerance = " << fmt(p.settle_tolerance) << '\n';
    os << "M = " << c.M << '\n';
    os << "master_seed = " << c.master_seed << '\n';
    os << "parallelism = " << c.parallelism << '\n';
    os << "output_dir = " << c.output_dir.string() << '\n';
    os << "window = " << fmt(c.window.value_or(0.5 * p.T)) << '\n';
    os << "bin_width = " << fmt(c.bin_width.value_or(p.T / 200.0)) << '\n';
    os << "t_max = " << fmt(c.t_max.value_or(5.0 * p.T)) << '\n';
    os << "spill_threshold = " << c.spill_threshold << '\n';
    if (c.mode == RunMode::sweep) {
        os << "sweep_variable = " << c.sweep_variable << '\n';
        os << "sweep_values = ";
        for (std::size_t i = 0; i < c.sweep_values.size(); ++i)
            os << (i ? ", " : "") << fmt(c.sweep_values[i]);
        os << '\n';
    }
    return os.str();
}

inline ExperimentConfig load_config(const std::filesystem::path& path,
                                    const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
    std::ifstream is(path);
    if (!is)
        throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), overrides);
}

// ---------------------------------------------------------------------------
// Presets for the figure sweeps.  Returned as key = value documents so they
// can be echoed and overridden like any config.

/// n points per decade from lo, plus hi if not hit.
inline std::vector<double> log_grid(double lo, double hi, int per_decade) {
    std::vector<double> v;
    for (int k = 0;; ++k) {
        const double x = lo * std::pow(10.0, static_cast<double>(k) / per_decade);
        if (x > hi * (1.0 + 1e-9))
            break;
        v.push_back(std::round(x * 1e6) / 1e6);
    }
    if (std::abs(v.back() - hi) > 1e-9 * hi)
        v.push_back(hi);
    return v;
}

inline std::string preset_document(const std::string& name) {
    auto list = [](const std::vector<double>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i)
            s += (i ? ", " : "") + config_detail::fmt(v[i]);
        return s;
    };
    std::vector<double> with_zero = {0.0};
    if (name == "fig2a" || name == "fig2e")
        return "mode = sweep\nfeedback = both\nsweep_variable = t_p\nsweep_values = " + list(log_grid(0.01, 0.5, 6)) + "\n";
    if (name == "fig2b" || name == "fig2f")
        return "mode = sweep\nfeedback = both\ngamma0 = 0.1\ngamma_prime = 0.5\nsweep_variable = t_p\nsweep_values = " +
               list(log_grid(0.01, 0.5, 6)) + "\n";
    if (name == "fig2c" || name == "fig2g") {
        auto v = with_zero;
        for (double x : log_grid(0.01, 0.5, 6))
            v.push_back(x);
        return "mode = sweep\nfeedback = both\nt_p = 0.01\ngamma_prime = 0\nsweep_variable = gamma0\nsweep_values = " +
               list(v) + "\n";
    }
    if (name == "fig2d" || name == "fig2h") {
        auto v = with_zero;
        for (double x : log_grid(0.01, 1.0, 6))
            v.push_back(x);
        return "mode = sweep\nfeedback = both\nt_p = 0.01\ngamma0 = 0\nsweep_variable = gamma_prime\nsweep_values = " +
               list(v) + "\n";
    }
    if (name == "fig3")
        return "mode = hom\nfeedback = both\nt_p = 0.01\ngamma0 = 0.1\ngamma_prime = 0.5\n";
    throw ValidationError("preset: unknown preset '" + name + "' (fig2a..fig2h, fig3)");
}

inline std::vector<std::string> preset_names() {
    return {"fig2a", "fig2b", "fig2c", "fig2d", "fig2e", "fig2f", "fig2g", "fig2h", "fig3"};
}

// ---------------------------------------------------------------------------

struct RunSpec {
    std::string name;  ///< directory name relative to output_dir ("" = output_dir itself)
    SystemParams params;
    std::optional<double> value;  ///< sweep value
};

inline std::vector<RunSpec> plan_runs(const ExperimentConfig& c) {
    std::vector<bool> fb;
    if (c.feedback != FeedbackSetting::off)
        fb.push_back(true);
    if (c.feedback != FeedbackSetting::on)
        fb.push_back(false);
    std::vector<std::optional<double>> values;
    if (c.mode == RunMode::sweep)
        for (double v : c.sweep_values)
            values.emplace_back(v);
    else
        values.emplace_back(std::nullopt);
    std::vector<RunSpec> plan;
    for (const auto& v : values)
        for (bool f : fb) {
            RunSpec r;
            r.params = c.params;
            r.params.feedback_enabled = f;
            std::string name;
            if (v) {
                set_sweep_variable(r.params, c.sweep_variable, *v);
                name = c.sweep_variable + "=" + config_detail::fmt(*v) + "_";
            }
            r.value = v;
            if (values.size() > 1 || fb.size() > 1 || v)
                r.name = name + (f ? "feedback_on" : "feedback_off");
            plan.push_back(std::move(r));
        }
    return plan;
}

struct RunSummary {
    std::string name;
    std::optional<double> value;
    bool feedback = true;
    std::optional<CorrelationResult> hbt;
    std::optional<CorrelationResult> hom;
    double eta = std::nan("");
    double eta_err = std::nan("");
    bool skipped = false;
};

namespace experiment_detail {

using nlohmann::json;

inline json to_json(const CorrelationResult& r) {
    json j = {{"kind", to_string(r.kind)}, {"A0", r.A0}, {"AT", r.AT}, {"g2", r.g2}, {"g2_err", r.g2_err}};
    if (r.upper_bound)
        j["g2_upper_limit"] = r.upper_limit;
    if (r.indistinguishability)
        j["indistinguishability"] = *r.indistinguishability;
    return j;
}

inline std::optional<CorrelationResult> correlation_from_json(const json& j) {
    if (!j.is_object())
        return std::nullopt;
    CorrelationResult r;
    r.kind = j.at("kind") == "HOM" ? CorrelationKind::hom : CorrelationKind::hbt;
    r.A0 = j.at("A0");
    r.AT = j.at("AT");
    r.g2 = j.at("g2");
    r.g2_err = j.at("g2_err");
    if (j.contains("g2_upper_limit")) {
        r.upper_bound = true;
        r.upper_limit = j.at("g2_upper_limit");
    }
    if (j.contains("indistinguishability"))
        r.indistinguishability = j.at("indistinguishability").get<double>();
    return r;
}

inline json params_json(const SystemParams& p) {
    return {{"gamma", p.gamma},
            {"gamma0", p.gamma0},
            {"gamma_prime", p.gamma_prime},
            {"delta", p.delta},
            {"tau", p.tau},
            {"N", p.N},
            {"dt", p.dt()},
            {"phi", p.phi},
            {"t_p", p.pulse.t_p},
            {"area", p.pulse.area},
            {"t0", p.pulse.center()},
            {"pulse_shape", p.pulse.shape == PulseShape::gaussian ? "gaussian" : "instantaneous"},
            {"T", p.T},
            {"n_max", p.n_max},
            {"n_max_joint", p.n_max_joint},
            {"feedback", p.feedback_enabled}};
}

inline json ensemble_json(const EnsembleResult& r) {
    return {{"M", r.trajectories},
            {"master_seed", r.master_seed},
            {"emitters", r.emitters},
            {"efficiency", r.efficiency},
            {"efficiency_err", r.efficiency_err},
            {"mean_clicks", r.mean_clicks},
            {"truncated_weight", r.truncated_weight},
            {"runtime_seconds", r.runtime_seconds},
            {"audit",
             {{"steps", r.audit.steps},
              {"skipped_steps", r.audit.skipped_steps},
              {"substeps", r.audit.substeps},
              {"max_closure_error", r.audit.max_closure_error},
              {"max_norm_error", r.audit.max_norm_error},
              {"max_jump_probability", r.audit.max_jump_probability}}},
            {"warnings", r.warnings}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os)
        throw IoError("cannot open " + path.string() + " for writing");
    os << text;
    if (!os)
        throw IoError("write failed on " + path.string());
}

inline void write_population_csv(const std::filesystem::path& path, const EnsembleResult& r) {
    std::ostringstream os;
    os << "t_times_gamma,population,stderr\n" << std::setprecision(10);
    for (std::size_t k = 0; k < r.mean_population.size(); ++k)
        os << r.time_at(k) * r.params.gamma << ',' << r.mean_population[k] << ',' << r.population_stderr[k] << '\n';
    write_text(path, os.str());
}

// results.json is written last via rename, so its presence marks a finished run.
inline void commit_results(const std::filesystem::path& dir, const json& j) {
    const auto tmp = dir / "results.json.tmp";
    write_text(tmp, j.dump(2) + "\n");
    std::error_code ec;
    std::filesystem::rename(tmp, dir / "results.json", ec);
    if (ec)
        throw IoError("cannot finalise " + (dir / "results.json").string() + ": " + ec.message());
}

inline std::uint64_t derived_seed(std::uint64_t master, std::uint64_t tag) {
    return split_seed(master ^ 0x5bd1e9955bd1e995ULL, tag);
}

} // namespace experiment_detail

/// Executes one planned run and writes its artifacts into `dir`.
inline RunSummary execute_run(const ExperimentConfig& c, const RunSpec& run, const std::filesystem::path& dir,
                              std::ostream* log = nullptr) {
    using namespace experiment_detail;
    namespace fs = std::filesystem;
    RunSummary s;
    s.name = run.name;
    s.value = run.value;
    s.feedback = run.params.feedback_enabled;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw IoError("cannot create " + dir.string() + ": " + ec.message());

    if (fs::exists(dir / "results.json")) {
        std::ifstream is(dir / "results.json");
        json j;
        try {
            is >> j;
        } catch (const std::exception& e) {
            throw IoError((dir / "results.json").string() + ": " + e.what());
        }
        if (j.contains("hbt"))
            s.hbt = correlation_from_json(j["hbt"]);
        if (j.contains("hom"))
            s.hom = correlation_from_json(j["hom"]);
        if (j.contains("ensemble") && j["ensemble"].contains("efficiency")) {
            s.eta = j["ensemble"]["efficiency"];
            s.eta_err = j["ensemble"]["efficiency_err"];
        }
        s.skipped = true;
        if (log)
            *log << "skip " << dir.string() << " (complete)\n";
        return s;
    }

    ExperimentConfig echo = c;
    echo.params = run.params;
    echo.feedback = run.params.feedback_enabled ? FeedbackSetting::on : FeedbackSetting::off;
    if (c.mode == RunMode::sweep) {
        echo.mode = RunMode::sweep;
        echo.sweep_values = {*run.value};
    }
    write_text(dir / "config.txt", echo_config(echo));

    HistogramOptions hopt{c.bin_width, c.t_max};
    const double T = run.params.T;
    const double window = c.window.value_or(0.5 * T);
    json out = {{"version", kVersion}, {"mode", to_string(c.mode)}, {"params", params_json(run.params)}};
    if (run.value)
        out["sweep"] = {{"variable", c.sweep_variable}, {"value", *run.value}};
    const auto t0 = std::chrono::steady_clock::now();

    EnsembleOptions eo;
    eo.trajectories = c.M;
    eo.parallelism = c.parallelism;
    eo.spill_threshold = c.spill_threshold;

    auto log_line = [&](const std::string& what) {
        if (log)
            *log << (run.name.empty() ? std::string(".") : run.name) << ": " << what << std::endl;
    };

    if (c.mode == RunMode::oracle) {
        SystemParams q = run.params;
        q.feedback_enabled = false;
        const QrtCorrelations r = qrt_correlations(q);
        out["oracle"] = {{"mean_photons", r.mean_photons},
                         {"g2", r.g2},
                         {"g2_hom", r.g2_hom},
                         {"indistinguishability", r.indistinguishability},
                         {"wavepacket_overlap", r.wavepacket_overlap},
                         {"X2", r.X2},
                         {"J1", r.J1},
                         {"J2", r.J2},
                         {"K", r.K},
                         {"smalldelay_feedback_rate", smalldelay_feedback_rate(q.gamma, q.phi)}};
        std::vector<double> grid;
        const long S = q.steps_per_period();
        for (long k = 0; k < S; ++k)
            grid.push_back((static_cast<double>(k) + 1.0) * q.dt());
        const auto rho = lindblad_solve(q, grid);
        std::ostringstream os;
        os << "t_times_gamma,population\n" << std::setprecision(10);
        for (std::size_t k = 0; k < grid.size(); ++k)
            os << grid[k] * q.gamma << ',' << rho[k].ee << '\n';
        write_text(dir / "population.csv", os.str());
        log_line("oracle g2 = " + config_detail::fmt(r.g2) + ", I = " + config_detail::fmt(r.indistinguishability));
    }

    const bool want_hbt = c.mode == RunMode::hbt || c.mode == RunMode::sweep || c.mode == RunMode::population;
    const bool want_hom = c.mode == RunMode::hom || c.mode == RunMode::sweep;
    if (want_hbt) {
        eo.master_seed = c.master_seed;
        eo.emitters = 1;
        if (c.spill_threshold)
            eo.spill_path = dir / "records_hbt.bin";
        const EnsembleResult e = run_ensemble(run.params, eo);
        out["ensemble"] = ensemble_json(e);
        s.eta = e.efficiency;
        s.eta_err = e.efficiency_err;
        write_population_csv(dir / "population.csv", e);
        if (c.mode != RunMode::population) {
            Rng rng(derived_seed(c.master_seed, 1));
            const CoincidenceHistogram h = hbt_correlate(e, rng, hopt);
            write_histogram_csv(h, dir / (c.mode == RunMode::sweep ? "hbt_histogram.csv" : "histogram.csv"),
                                run.params.gamma);
            const PeakAreas a = peak_areas(h, T, window);
            s.hbt = g2_from_areas(a.A0, a.AT, CorrelationKind::hbt);
            out["hbt"] = to_json(*s.hbt);
            out["hbt"]["side_peak_spread"] = side_peak_spread(h, T, window);
            out["hbt"]["warnings"] = h.warnings;
            log_line("HBT g2 = " + config_detail::fmt(s.hbt->g2) + " +- " + config_detail::fmt(s.hbt->g2_err));
        } else {
            log_line("eta = " + config_detail::fmt(e.efficiency));
        }
        std::filesystem::remove(dir / "records_hbt.bin", ec);
    }
    if (want_hom) {
        eo.master_seed = derived_seed(c.master_seed, 2);
        eo.emitters = 2;
        if (c.spill_threshold)
            eo.spill_path = dir / "records_hom.bin";
        const EnsembleResult e = run_ensemble(run.params, eo);
        out["hom_ensemble"] = ensemble_json(e);
        if (!want_hbt) {
            s.eta = e.efficiency;
            s.eta_err = e.efficiency_err;
            write_population_csv(dir / "population.csv", e);
        }
        const CoincidenceHistogram h = hom_correlate(e, hopt);
        write_histogram_csv(h, dir / (c.mode == RunMode::sweep ? "hom_histogram.csv" : "histogram.csv"),
                            run.params.gamma);
        const PeakAreas a = peak_areas(h, T, window);
        s.hom = g2_from_areas(a.A0, a.AT, CorrelationKind::hom);
        out["hom"] = to_json(*s.hom);
        out["hom"]["side_peak_spread"] = side_peak_spread(h, T, window);
        out["hom"]["warnings"] = h.warnings;
        log_line("HOM I = " + config_detail::fmt(*s.hom->indistinguishability) + " +- " +
                 config_detail::fmt(s.hom->g2_err));
        std::filesystem::remove(dir / "records_hom.bin", ec);
    }
    out["runtime_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    commit_results(dir, out);
    return s;
}

inline void write_summary_csv(const std::filesystem::path& path, const std::string& variable,
                              const std::vector<RunSummary>& runs) {
    using config_detail::fmt;
    std::ostringstream os;
    os << variable << ",feedback,g2,g2_err,I,I_err,eta\n";
    auto val = [](const std::optional<double>& x) { return x ? fmt(*x) : std::string("nan"); };
    for (const auto& r : runs) {
        os << val(r.value) << ',' << (r.feedback ? "on" : "off") << ',';
        os << (r.hbt ? fmt(r.hbt->g2) : "nan") << ',' << (r.hbt ? fmt(r.hbt->g2_err) : "nan") << ',';
        os << (r.hom ? fmt(*r.hom->indistinguishability) : "nan") << ',' << (r.hom ? fmt(r.hom->g2_err) : "nan") << ',';
        os << fmt(r.eta) << '\n';
    }
    experiment_detail::write_text(path, os.str());
}

/// Runs every planned run (skipping finished ones) and writes the sweep summary.
inline std::vector<RunSummary> run_experiment(const ExperimentConfig& c, std::ostream* log = nullptr) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(c.output_dir, ec);
    if (ec)
        throw IoError("cannot create " + c.output_dir.string() + ": " + ec.message());
    experiment_detail::write_text(c.output_dir / "config.txt", echo_config(c));
    std::vector<RunSummary> out;
    for (const RunSpec& r : plan_runs(c))
        out.push_back(execute_run(c, r, r.name.empty() ? c.output_dir : c.output_dir / r.name, log));
    if (c.mode == RunMode::sweep)
        write_summary_csv(c.output_dir / "summary.csv", c.sweep_variable, out);
    return out;
}

} // namespace fbqt
