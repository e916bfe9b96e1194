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

// Command-line front end for the experiment harness.

#include "cbr/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

namespace {

constexpr int exit_ok = 0;
constexpr int exit_config = 2;
constexpr int exit_runtime = 3;

std::vector<std::uint64_t> parse_seeds(const std::string& text)
{
    std::vector<std::uint64_t> seeds;
    for (auto part : cbr::detail::split_on(text, ',')) {
        std::string s(part);
        if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
            throw cbr::ConfigError("--seeds: '" + s + "' is not a nonnegative integer");
        seeds.push_back(std::stoull(s));
    }
    if (seeds.empty())
        throw cbr::ConfigError("--seeds: empty list");
    return seeds;
}

cbr::ExperimentConfig load(const std::string& path, const std::string& seeds)
{
    cbr::ExperimentConfig cfg = cbr::load_experiment(path);
    if (!seeds.empty())
        cfg.seeds = parse_seeds(seeds);
    return cfg;
}

/// Accepts a bare synth config or an experiment config with data.synth.
cbr::synth::SynthConfig load_synth(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw cbr::ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw cbr::ConfigError(path + ": " + e.what());
    }
    if (j.contains("data")) {
        const auto cfg = cbr::parse_experiment(j);
        if (!cfg.data.synth)
            throw cbr::ConfigError("data.synth: required for the synth subcommand");
        return *cfg.data.synth;
    }
    cbr::synth::SynthConfig sc;
    try {
        sc = j.get<cbr::synth::SynthConfig>();
        sc.validate();
    } catch (const std::exception& e) {
        throw cbr::ConfigError(std::string("synth: ") + e.what());
    }
    return sc;
}

/// True when the first row of a TSV carries a fourth (propensity) column.
bool has_propensity_column(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    std::string line;
    while (std::getline(in, line))
        if (!cbr::detail::strip_cr(line).empty())
            return cbr::detail::split_on(cbr::detail::strip_cr(line), '\t').size() == 4;
    return false;
}

void print_aggregate(const nlohmann::ordered_json& agg)
{
    for (const auto& [method, body] : agg.items()) {
        std::cout << method;
        for (const auto& name : cbr::metric_names())
            std::cout << "  " << name << '=' << std::fixed << std::setprecision(4)
                      << body[name]["mean"].get<double>() << " +- " << body[name]["stderr"].get<double>();
        std::cout << '\n';
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Confounder-balanced debiased recommendation experiments"};
    app.require_subcommand(1);

    std::string config;
    std::string out = "out";
    std::string seeds;
    std::size_t jobs = 1;

    const auto common = [&](CLI::App* sub, bool with_runs) {
        sub->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out, "output directory");
        if (with_runs) {
            sub->add_option("--seeds", seeds, "comma-separated seeds overriding the config");
            sub->add_option("--jobs", jobs, "parallel training jobs")->check(CLI::PositiveNumber);
        }
    };

    auto* synth_cmd = app.add_subcommand("synth", "emit a synthetic dataset");
    common(synth_cmd, false);
    auto* train_cmd = app.add_subcommand("train", "train every method over every seed");
    common(train_cmd, true);
    auto* sweep_cmd = app.add_subcommand("sweep", "run the config's sweep block");
    common(sweep_cmd, true);
    auto* grid_cmd = app.add_subcommand("grid", "grid search over the config's grid block");
    common(grid_cmd, true);

    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint");
    common(eval_cmd, false);
    std::string checkpoint;
    std::string test_path;
    std::uint64_t eval_seed = 1;
    bool use_conf = false;
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint JSON")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--test", test_path, "test TSV (default: the config's test split)");
    eval_cmd->add_option("--seed", eval_seed, "seed used to materialize the config's data");
    eval_cmd->add_flag("--use-confounder", use_conf, "score with the inferred confounder");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth_cmd) {
            const auto sc = load_synth(config);
            const auto ds = cbr::synth::generate(sc);
            cbr::synth::write_dataset(out, ds, sc);
            std::cout << "wrote " << out << ": " << ds.bundle.train.size() << " train, "
                      << ds.bundle.validation.size() << " validation, " << ds.bundle.test.size() << " test\n";
        } else if (*train_cmd) {
            const auto cfg = load(config, seeds);
            const auto res = cbr::run_experiment(cfg, out, jobs);
            cbr::check_divergence(res.runs);
            print_aggregate(res.aggregate);
        } else if (*sweep_cmd) {
            const auto cfg = load(config, seeds);
            const auto res = cbr::run_sweep(cfg, out, jobs);
            for (const auto& [v, point] : res.points)
                cbr::check_divergence(point.runs);
            std::cout << "wrote " << (std::filesystem::path(out) / "curves.csv").string() << " ("
                      << res.rows.size() << " rows)\n";
        } else if (*grid_cmd) {
            const auto cfg = load(config, seeds);
            const auto res = cbr::run_grid(cfg, out, jobs);
            std::cout << res.best.dump(2) << '\n';
        } else if (*eval_cmd) {
            const auto cfg = load(config, "");
            const auto data = cbr::materialize(cfg, eval_seed);
            const auto model = cbr::load_checkpoint(checkpoint);
            if (model.config().num_users != data.num_users || model.config().num_items != data.num_items)
                throw cbr::ConfigError("--checkpoint: shape does not match the config's data");
            cbr::InteractionLog test = data.test;
            if (!test_path.empty()) {
                const bool with_prop = has_propensity_column(test_path);
                test = cbr::load_tsv(test_path, with_prop, data.train.users, data.train.items);
                if (test.num_users() != data.num_users || test.num_items() != data.num_items)
                    throw cbr::ConfigError("--test: contains ids outside the training vocabulary");
            }
            const cbr::Tensor* uf = data.user_features ? &*data.user_features : nullptr;
            auto report = cbr::evaluate(model, test, data.train, {.k = cfg.k, .use_confounder = use_conf}, uf);
            report.seed = eval_seed;
            report.config_hash = cbr::config_hash(cbr::to_json_value(cfg));
            const auto text = cbr::to_ordered_json(report).dump(2) + "\n";
            if (app.get_subcommand("eval")->count("--out"))
                cbr::write_text(std::filesystem::path(out) / "metrics.json", text);
            std::cout << text;
        }
    } catch (const cbr::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const cbr::ParseError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return exit_config;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << '\n';
        return exit_runtime;
    }
    return exit_ok;
}
