// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

// Config-driven experiment runner: single runs over seeds, parameter sweeps,
// grid search, and aggregation into JSON/CSV outputs.

#include "cbr/data.hpp"
#include "cbr/eval.hpp"
#include "cbr/models.hpp"
#include "cbr/objectives.hpp"
#include "cbr/synthgen.hpp"
#include "cbr/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cbr {

namespace fs = std::filesystem;

/// Invalid experiment configuration; maps to exit code 2.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/// A run diverged; maps to exit code 3.
class RunFailure : public std::runtime_error {
public:
    explicit RunFailure(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr int schema_version = 1;

struct TsvSource {
    std::string train;
    std::string validation;
    std::string test;
    bool has_propensity = false;
    std::string user_features;
    /// Rebuild the test split by inverse-item-frequency resampling.
    bool resample_test = false;
};

struct DataSource {
    std::optional<synth::SynthConfig> synth;
    std::optional<TsvSource> tsv;
};

enum class SweepParameter { alpha, beta, tau, K1, K2, gamma };

namespace detail {
inline constexpr EnumNames<SweepParameter, 6> sweep_names{{{SweepParameter::alpha, "alpha"},
                                                           {SweepParameter::beta, "beta"},
                                                           {SweepParameter::tau, "tau"},
                                                           {SweepParameter::K1, "K1"},
                                                           {SweepParameter::K2, "K2"},
                                                           {SweepParameter::gamma, "gamma"}}};
} // namespace detail

inline std::string sweep_name(SweepParameter p) { return detail::enum_to_string(detail::sweep_names, p); }

/// Default sweep grids.
inline std::vector<double> default_sweep_values(SweepParameter p)
{
    switch (p) {
    case SweepParameter::alpha: return {0.0, 0.1, 0.3, 0.5, 0.7, 1.0};
    case SweepParameter::beta: return {0.0, 0.3, 0.5, 0.7, 1.0};
    case SweepParameter::tau: return {0.1, 0.3, 0.5, 0.7, 1.0};
    case SweepParameter::K1:
    case SweepParameter::K2: return {5, 10, 15, 20, 25, 30};
    case SweepParameter::gamma: return {0.001, 0.01, 0.05, 0.1, 0.5};
    }
    return {};
}

struct SweepSpec {
    SweepParameter parameter = SweepParameter::alpha;
    std::vector<double> values;
};

struct ExperimentConfig {
    int schema_version = cbr::schema_version;
    DataSource data;
    std::vector<Method> methods{Method::base};
    ModelConfig model;
    LossConfig loss;
    TrainConfig train;
    std::vector<std::uint64_t> seeds{1};
    std::optional<SweepSpec> sweep;
    /// Hyperparameter name -> candidate values, for grid search.
    std::map<std::string, std::vector<double>> grid;
    std::size_t k = 10;
    /// Sub-sampling rate of the training log; 1 keeps everything.
    double tau = 1.0;
    std::uint64_t sweep_seed = 0;
    bool save_checkpoints = false;
};

// ---------------------------------------------------------------------------
// JSON parsing with field-level diagnostics

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const std::string& path, const char* key, T fallback)
{
    if (!j.contains(key))
        return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const std::exception& e) {
        throw ConfigError(path + "." + key + ": " + e.what());
    }
}

inline void reject_unknown(const nlohmann::json& j, const std::string& path, std::initializer_list<const char*> known)
{
    if (!j.is_object())
        throw ConfigError(path + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        const bool ok = std::any_of(known.begin(), known.end(), [&](const char* k) { return key == k; });
        if (!ok)
            throw ConfigError(path + "." + key + ": unknown field");
    }
}

template <typename T>
T parse_struct(const nlohmann::json& j, const std::string& path, const T& defaults)
{
    try {
        nlohmann::json merged = defaults;
        if (!j.is_object())
            throw ConfigError(path + ": expected an object");
        for (const auto& [key, value] : j.items()) {
            if (!merged.contains(key))
                throw ConfigError(path + "." + key + ": unknown field");
            merged[key] = value;
        }
        return merged.get<T>();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

template <typename F>
void validate_as(const std::string& path, F&& f)
{
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

} // namespace detail

inline nlohmann::json to_json_value(const ExperimentConfig& c)
{
    nlohmann::json j;
    j["schema_version"] = c.schema_version;
    if (c.data.synth)
        j["data"]["synth"] = *c.data.synth;
    if (c.data.tsv) {
        const auto& t = *c.data.tsv;
        j["data"]["tsv"] = {{"train", t.train},
                            {"validation", t.validation},
                            {"test", t.test},
                            {"has_propensity", t.has_propensity},
                            {"user_features", t.user_features},
                            {"resample_test", t.resample_test}};
    }
    j["methods"] = c.methods;
    j["model"] = c.model;
    j["loss"] = c.loss;
    j["train"] = c.train;
    j["seeds"] = c.seeds;
    if (c.sweep)
        j["sweep"] = {{"parameter", sweep_name(c.sweep->parameter)}, {"values", c.sweep->values}};
    if (!c.grid.empty())
        j["grid"] = c.grid;
    j["k"] = c.k;
    j["tau"] = c.tau;
    j["sweep_seed"] = c.sweep_seed;
    j["save_checkpoints"] = c.save_checkpoints;
    return j;
}

inline void validate(const ExperimentConfig& c)
{
    if (c.schema_version != cbr::schema_version)
        throw ConfigError("schema_version: expected " + std::to_string(cbr::schema_version) + ", got " +
                          std::to_string(c.schema_version));
    if (c.data.synth.has_value() == c.data.tsv.has_value())
        throw ConfigError("data: exactly one of 'synth' or 'tsv' is required");
    if (c.data.synth)
        detail::validate_as("data.synth", [&] { c.data.synth->validate(); });
    if (c.methods.empty())
        throw ConfigError("methods: at least one method is required");
    if (c.seeds.empty())
        throw ConfigError("seeds: at least one seed is required");
    detail::validate_as("loss", [&] { c.loss.validate(); });
    detail::validate_as("train", [&] { c.train.validate(); });
    if (!(c.tau > 0.0 && c.tau <= 1.0))
        throw ConfigError("tau: must lie in (0, 1]");
    if (c.k == 0)
        throw ConfigError("k: must be positive");
    if (c.sweep) {
        const auto p = c.sweep->parameter;
        if (c.sweep->values.empty())
            throw ConfigError("sweep.values: must be nonempty");
        for (double v : c.sweep->values) {
            const std::string at = "sweep.values: " + detail::format_double(v) + " ";
            switch (p) {
            case SweepParameter::alpha:
            case SweepParameter::beta:
                if (!(v >= 0.0 && v <= 1.0))
                    throw ConfigError(at + "outside [0, 1]");
                if (!c.data.synth)
                    throw ConfigError("sweep.parameter: " + sweep_name(p) + " needs synthetic data");
                break;
            case SweepParameter::tau:
                if (!(v > 0.0 && v <= 1.0))
                    throw ConfigError(at + "outside (0, 1]");
                break;
            case SweepParameter::K1:
            case SweepParameter::K2:
                if (!(v >= 1.0) || v != std::floor(v))
                    throw ConfigError(at + "must be a positive integer");
                break;
            case SweepParameter::gamma:
                if (!(v >= 0.0))
                    throw ConfigError(at + "must be >= 0");
                break;
            }
        }
    }
    static const std::set<std::string> grid_keys{"lr", "lr_gen", "lr_disc", "batch_size", "gamma",
                                                 "reg_lambda", "K1", "K2"};
    for (const auto& [key, values] : c.grid) {
        if (!grid_keys.contains(key))
            throw ConfigError("grid." + key + ": unknown hyperparameter");
        if (values.empty())
            throw ConfigError("grid." + key + ": must be nonempty");
    }
}

inline ExperimentConfig parse_experiment(const nlohmann::json& j)
{
    using detail::field;
    detail::reject_unknown(j, "config",
                           {"schema_version", "data", "method", "methods", "model", "base_model", "loss", "train",
                            "seeds", "sweep", "grid", "k", "tau", "sweep_seed", "save_checkpoints"});
    ExperimentConfig c;
    c.schema_version = field<int>(j, "config", "schema_version", 0);
    if (!j.contains("data"))
        throw ConfigError("data: required");
    const auto& d = j.at("data");
    detail::reject_unknown(d, "data", {"synth", "tsv"});
    if (d.contains("synth")) {
        detail::reject_unknown(d.at("synth"), "data.synth",
                               {"num_users", "num_items", "feature_dim", "alpha", "beta", "list_len", "noise_std",
                                "bias_b", "test_per_user", "uniform_validation", "val_per_user", "val_fraction",
                                "seed"});
        c.data.synth = d.at("synth").get<synth::SynthConfig>();
    }
    if (d.contains("tsv")) {
        const auto& t = d.at("tsv");
        detail::reject_unknown(t, "data.tsv",
                               {"train", "validation", "test", "has_propensity", "user_features", "resample_test"});
        TsvSource s;
        s.train = field<std::string>(t, "data.tsv", "train", "");
        s.validation = field<std::string>(t, "data.tsv", "validation", "");
        s.test = field<std::string>(t, "data.tsv", "test", "");
        s.has_propensity = field<bool>(t, "data.tsv", "has_propensity", false);
        s.user_features = field<std::string>(t, "data.tsv", "user_features", "");
        s.resample_test = field<bool>(t, "data.tsv", "resample_test", false);
        if (s.train.empty() || s.validation.empty() || s.test.empty())
            throw ConfigError("data.tsv: train, validation and test paths are required");
        c.data.tsv = s;
    }
    if (j.contains("method") && j.contains("methods"))
        throw ConfigError("config: give either 'method' or 'methods', not both");
    if (j.contains("method"))
        c.methods = {field<Method>(j, "config", "method", Method::base)};
    if (j.contains("methods"))
        c.methods = field<std::vector<Method>>(j, "config", "methods", {});
    if (j.contains("model"))
        c.model = detail::parse_struct(j.at("model"), "model", c.model);
    if (j.contains("base_model"))
        c.model.base = field<BaseModel>(j, "config", "base_model", BaseModel::gmf);
    if (j.contains("loss"))
        c.loss = detail::parse_struct(j.at("loss"), "loss", c.loss);
    if (j.contains("train"))
        c.train = detail::parse_struct(j.at("train"), "train", c.train);
    c.seeds = field<std::vector<std::uint64_t>>(j, "config", "seeds", c.seeds);
    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        detail::reject_unknown(s, "sweep", {"parameter", "values"});
        SweepSpec spec;
        const auto name = field<std::string>(s, "sweep", "parameter", "");
        const auto p = detail::enum_from_string(detail::sweep_names, name);
        if (!p)
            throw ConfigError("sweep.parameter: unknown parameter '" + name + "'");
        spec.parameter = *p;
        spec.values = field<std::vector<double>>(s, "sweep", "values", default_sweep_values(*p));
        c.sweep = spec;
    }
    c.grid = field<std::map<std::string, std::vector<double>>>(j, "config", "grid", {});
    c.k = field<std::size_t>(j, "config", "k", c.k);
    c.tau = field<double>(j, "config", "tau", c.tau);
    c.sweep_seed = field<std::uint64_t>(j, "config", "sweep_seed", c.sweep_seed);
    c.save_checkpoints = field<bool>(j, "config", "save_checkpoints", c.save_checkpoints);
    validate(c);
    return c;
}

inline ExperimentConfig load_experiment(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return parse_experiment(j);
}

/// FNV-1a over the canonical JSON dump.
inline std::string config_hash(const nlohmann::json& j)
{
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Running

/// The dataset one seed trains on. Synthetic data is regenerated per seed.
inline DatasetBundle materialize(const ExperimentConfig& c, std::uint64_t seed)
{
    DatasetBundle b;
    if (c.data.synth) {
        synth::SynthConfig sc = *c.data.synth;
        sc.seed = derive_seed(sc.seed, seed);
        b = synth::generate(sc).bundle;
    } else {
        const auto& t = *c.data.tsv;
        auto train = load_tsv(t.train, t.has_propensity);
        auto val = load_tsv(t.validation, t.has_propensity, train.users, train.items);
        auto test = load_tsv(t.test, t.has_propensity, val.users, val.items);
        train.users = val.users = test.users;
        train.items = val.items = test.items;
        b.num_users = test.users.size();
        b.num_items = test.items.size();
        if (!t.user_features.empty())
            b.user_features = load_features(t.user_features, test.users);
        if (t.resample_test)
            test = resample_uniform_test(test, seed);
        b.train = std::move(train);
        b.validation = std::move(val);
        b.test = std::move(test);
    }
    if (c.tau < 1.0)
        b.train = subsample(b.train, c.tau, derive_seed(c.sweep_seed, seed));
    return b;
}

inline ModelConfig model_for(const ExperimentConfig& c, const DatasetBundle& b)
{
    ModelConfig m = c.model;
    m.num_users = b.num_users;
    m.num_items = b.num_items;
    if (b.user_features)
        m.user_feature_dim = b.user_features->cols();
    return m;
}

struct RunOutcome {
    Method method = Method::base;
    std::uint64_t seed = 0;
    MetricsReport test;
    double validation = 0.0;
    std::size_t best_epoch = 0;
    bool diverged = false;
    std::string diagnostic;
    double jsd_initial = std::numeric_limits<double>::quiet_NaN();
    double jsd_best = std::numeric_limits<double>::quiet_NaN();
};

/// Trains one (method, seed) and writes its log, metrics and optional
/// checkpoint under `dir`.
inline RunOutcome run_single(const ExperimentConfig& c, Method method, std::uint64_t seed, const fs::path& dir,
                             const std::string& hash)
{
    const DatasetBundle data = materialize(c, seed);
    LossConfig loss = c.loss;
    loss.method = method;
    if (!c.data.synth && loss.propensity_source == PropensitySource::truth && !c.data.tsv->has_propensity)
        loss.propensity_source = PropensitySource::item_marginal;
    TrainConfig train = c.train;
    train.seed = seed;
    const ModelConfig mc = model_for(c, data);
    FitResult fr = fit(data, ModelBundle(mc, seed), loss, train);
    const Tensor* uf = data.user_features ? &*data.user_features : nullptr;

    RunOutcome out;
    out.method = method;
    out.seed = seed;
    out.test = evaluate(fr.model, data.test, data.train, {.k = c.k, .use_confounder = uses_confounder(method)}, uf);
    out.test.seed = seed;
    out.test.config_hash = hash;
    out.validation = fr.best_validation;
    out.best_epoch = fr.best_epoch;
    out.diverged = fr.diverged;
    out.diagnostic = fr.diagnostic;
    out.jsd_initial = fr.jsd_initial;
    out.jsd_best = fr.jsd_best;

    fs::create_directories(dir);
    {
        std::ofstream log(dir / "train_log.csv", std::ios::binary);
        write_training_log(log, fr.log);
    }
    {
        auto j = to_ordered_json(out.test);
        j["best_epoch"] = out.best_epoch;
        j["validation"] = out.validation;
        j["diverged"] = out.diverged;
        if (out.diverged)
            j["diagnostic"] = out.diagnostic;
        std::ofstream(dir / "metrics.json", std::ios::binary) << j.dump(2) << '\n';
    }
    if (c.save_checkpoints)
        save_checkpoint((dir / "checkpoint.json").string(), fr.model);
    return out;
}

/// Runs `jobs` tasks over at most `parallelism` threads; results keep task order.
template <typename T>
std::vector<T> run_parallel(const std::vector<std::function<T()>>& tasks, std::size_t parallelism)
{
    std::vector<std::optional<T>> results(tasks.size());
    std::vector<std::exception_ptr> errors(tasks.size());
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) {
            try {
                results[i] = tasks[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(parallelism, tasks.size()));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n; ++t)
            pool.emplace_back(worker);
    }
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
    std::vector<T> out;
    for (auto& r : results)
        out.push_back(std::move(*r));
    return out;
}

struct Summary {
    double mean = 0.0;
    double stderr_ = 0.0;
    std::size_t n = 0;
};

/// Mean and standard error (sample standard deviation over sqrt(n)); zero
/// spread for a single value.
inline Summary summarize(const std::vector<double>& v)
{
    Summary s;
    s.n = v.size();
    if (v.empty())
        return s;
    double sum = 0.0;
    for (double x : v)
        sum += x;
    s.mean = sum / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v)
            ss += (x - s.mean) * (x - s.mean);
        s.stderr_ = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
    }
    return s;
}

inline const std::vector<std::string>& metric_names()
{
    static const std::vector<std::string> names{"acc", "auc", "ndcg_at_k", "recall_at_k"};
    return names;
}

inline double metric_value(const MetricsReport& r, const std::string& name)
{
    if (name == "acc") return r.acc;
    if (name == "auc") return r.auc;
    if (name == "ndcg_at_k") return r.ndcg_at_k;
    if (name == "recall_at_k") return r.recall_at_k;
    throw std::invalid_argument("unknown metric " + name);
}

/// {method: {metric: {mean, stderr, n}}} with methods in config order.
inline nlohmann::ordered_json aggregate_json(const std::vector<Method>& methods, const std::vector<RunOutcome>& runs)
{
    nlohmann::ordered_json j;
    for (Method m : methods) {
        nlohmann::ordered_json mj;
        std::vector<std::uint64_t> seeds;
        for (const auto& r : runs)
            if (r.method == m)
                seeds.push_back(r.seed);
        mj["seeds"] = seeds;
        for (const auto& name : metric_names()) {
            std::vector<double> v;
            for (const auto& r : runs)
                if (r.method == m)
                    v.push_back(metric_value(r.test, name));
            const Summary s = summarize(v);
            mj[name] = {{"mean", s.mean}, {"stderr", s.stderr_}, {"n", s.n}};
        }
        j[method_name(m)] = mj;
    }
    return j;
}

inline std::string dump_json(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

inline void write_text(const fs::path& path, const std::string& text)
{
    fs::create_directories(path.parent_path());
    std::ofstream(path, std::ios::binary) << text;
}

inline void check_divergence(const std::vector<RunOutcome>& runs)
{
    for (const auto& r : runs)
        if (r.diverged)
            throw RunFailure(method_name(r.method) + " seed " + std::to_string(r.seed) + ": " + r.diagnostic);
}

struct RunResult {
    std::vector<RunOutcome> runs;
    nlohmann::ordered_json aggregate;
};

/// Every method x seed, written as <out>/<method>/seed_<s>/ plus
/// <out>/config.json and <out>/aggregate.json.
inline RunResult run_experiment(const ExperimentConfig& c, const fs::path& out, std::size_t jobs = 1)
{
    const nlohmann::json echo = to_json_value(c);
    const std::string hash = config_hash(echo);
    write_text(out / "config.json", echo.dump(2) + "\n");
    std::vector<std::function<RunOutcome()>> tasks;
    for (Method m : c.methods)
        for (std::uint64_t s : c.seeds)
            tasks.emplace_back([&c, m, s, &out, &hash] {
                return run_single(c, m, s, out / method_name(m) / ("seed_" + std::to_string(s)), hash);
            });
    RunResult res;
    res.runs = run_parallel(tasks, jobs);
    res.aggregate = aggregate_json(c.methods, res.runs);
    write_text(out / "aggregate.json", dump_json(res.aggregate));
    return res;
}

/// The config with one sweep value applied.
inline ExperimentConfig apply_sweep_value(ExperimentConfig c, SweepParameter p, double v)
{
    switch (p) {
    case SweepParameter::alpha: c.data.synth->alpha = v; break;
    case SweepParameter::beta: c.data.synth->beta = v; break;
    case SweepParameter::tau: c.tau = v; break;
    case SweepParameter::K1: c.loss.K1 = static_cast<std::size_t>(v); break;
    case SweepParameter::K2: c.loss.K2 = static_cast<std::size_t>(v); break;
    case SweepParameter::gamma: c.loss.gamma = v; break;
    }
    c.sweep.reset();
    return c;
}

struct CurveRow {
    double param_value = 0.0;
    std::string method;
    std::string metric;
    double mean = 0.0;
    double stderr_ = 0.0;
};

inline void write_curves(std::ostream& out, std::vector<CurveRow> rows)
{
    std::sort(rows.begin(), rows.end(), [](const CurveRow& a, const CurveRow& b) {
        return std::tie(a.param_value, a.method, a.metric) < std::tie(b.param_value, b.method, b.metric);
    });
    out << "param_value,method,metric,mean,stderr\n";
    for (const auto& r : rows)
        out << detail::format_double(r.param_value) << ',' << r.method << ',' << r.metric << ','
            << detail::format_double(r.mean) << ',' << detail::format_double(r.stderr_) << '\n';
}

struct SweepResult {
    std::vector<CurveRow> rows;
    std::map<double, RunResult> points;
};

/// One run_experiment per sweep value under <out>/<parameter>=<value>/, plus
/// <out>/curves.csv.
inline SweepResult run_sweep(const ExperimentConfig& c, const fs::path& out, std::size_t jobs = 1)
{
    if (!c.sweep)
        throw ConfigError("sweep: the config has no sweep block");
    write_text(out / "config.json", to_json_value(c).dump(2) + "\n");
    const SweepSpec spec = *c.sweep;
    SweepResult res;
    for (double v : spec.values) {
        const ExperimentConfig point = apply_sweep_value(c, spec.parameter, v);
        const fs::path dir = out / (sweep_name(spec.parameter) + "=" + detail::format_double(v));
        RunResult rr = run_experiment(point, dir, jobs);
        for (Method m : c.methods)
            for (const auto& name : metric_names()) {
                const auto& s = rr.aggregate[method_name(m)][name];
                res.rows.push_back({v, method_name(m), name, s["mean"].get<double>(), s["stderr"].get<double>()});
            }
        res.points.emplace(v, std::move(rr));
    }
    std::ostringstream csv;
    write_curves(csv, res.rows);
    write_text(out / "curves.csv", csv.str());
    return res;
}

inline ExperimentConfig apply_grid_value(ExperimentConfig c, const std::string& key, double v)
{
    if (key == "lr") {
        c.train.lr_gen = v;
        c.train.lr_disc = v;
    } else if (key == "lr_gen") {
        c.train.lr_gen = v;
    } else if (key == "lr_disc") {
        c.train.lr_disc = v;
    } else if (key == "batch_size") {
        c.train.batch_size = static_cast<std::size_t>(v);
    } else if (key == "gamma") {
        c.loss.gamma = v;
    } else if (key == "reg_lambda") {
        c.loss.reg_lambdas = {v, v, v, v, v};
    } else if (key == "K1") {
        c.loss.K1 = static_cast<std::size_t>(v);
    } else if (key == "K2") {
        c.loss.K2 = static_cast<std::size_t>(v);
    } else {
        throw ConfigError("grid." + key + ": unknown hyperparameter");
    }
    return c;
}

struct GridPoint {
    std::map<std::string, double> values;
    double validation = 0.0;
};

struct GridResult {
    nlohmann::ordered_json best;
    std::map<std::string, std::vector<GridPoint>> points;
};

/// Exhaustive grid per method. Each point trains every seed and is scored by
/// mean best validation metric; the first point in grid order wins ties.
/// Test metrics are reported for the winner only.
inline GridResult run_grid(const ExperimentConfig& c, const fs::path& out, std::size_t jobs = 1)
{
    if (c.grid.empty())
        throw ConfigError("grid: the config has no grid block");
    write_text(out / "config.json", to_json_value(c).dump(2) + "\n");
    std::vector<std::map<std::string, double>> combos{{}};
    for (const auto& [key, values] : c.grid) {
        std::vector<std::map<std::string, double>> next;
        for (const auto& base : combos)
            for (double v : values) {
                auto m = base;
                m[key] = v;
                next.push_back(std::move(m));
            }
        combos = std::move(next);
    }
    GridResult res;
    for (Method method : c.methods) {
        const std::string mname = method_name(method);
        std::vector<std::function<RunOutcome()>> tasks;
        std::vector<ExperimentConfig> configs;
        for (const auto& combo : combos) {
            ExperimentConfig point = c;
            for (const auto& [k, v] : combo)
                point = apply_grid_value(point, k, v);
            point.grid.clear();
            point.methods = {method};
            configs.push_back(point);
        }
        for (std::size_t g = 0; g < configs.size(); ++g)
            for (std::uint64_t s : c.seeds)
                tasks.emplace_back([&configs, g, s, method, &out, &mname] {
                    const auto& cfg = configs[g];
                    return run_single(cfg, method, s,
                                      out / mname / ("point_" + std::to_string(g)) / ("seed_" + std::to_string(s)),
                                      config_hash(to_json_value(cfg)));
                });
        const auto runs = run_parallel(tasks, jobs);
        std::size_t best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t g = 0; g < configs.size(); ++g) {
            std::vector<double> v;
            for (std::size_t s = 0; s < c.seeds.size(); ++s)
                v.push_back(runs[g * c.seeds.size() + s].validation);
            const double score = summarize(v).mean;
            res.points[mname].push_back({combos[g], score});
            if (score > best_score) {
                best_score = score;
                best = g;
            }
        }
        std::vector<RunOutcome> winner(runs.begin() + static_cast<std::ptrdiff_t>(best * c.seeds.size()),
                                       runs.begin() + static_cast<std::ptrdiff_t>((best + 1) * c.seeds.size()));
        nlohmann::ordered_json entry;
        entry["point"] = best;
        entry["hyperparameters"] = combos[best];
        entry["validation"] = best_score;
        entry["config"] = to_json_value(configs[best]);
        entry["test"] = aggregate_json({method}, winner)[mname];
        res.best[mname] = entry;
    }
    write_text(out / "best.json", dump_json(res.best));
    return res;
}

} // namespace cbr
