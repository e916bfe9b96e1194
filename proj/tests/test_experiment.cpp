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

#include "cbr/experiment.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace cbr;
using nlohmann::json;

namespace {

json tiny_config()
{
    return json::parse(R"({
        "schema_version": 1,
        "data": {"synth": {"num_users": 40, "num_items": 12, "feature_dim": 4, "alpha": 0.5, "beta": 0.5,
                           "list_len": 3, "test_per_user": 3, "val_per_user": 3, "seed": 11}},
        "methods": ["base", "cbr_adv"],
        "model": {"embedding_dim": 4, "confounder_dim": 2, "hidden1": 4, "hidden2": 3, "disc_hidden": 4},
        "loss": {"gamma": 0.01, "K1": 3, "K2": 3},
        "train": {"epochs": 2, "batch_size": 32, "lr_gen": 0.01, "lr_disc": 0.01},
        "seeds": [1]
    })");
}

class TempDir {
public:
    TempDir()
    {
        static int counter = 0;
        path_ = fs::temp_directory_path() /
                ("cbr_experiment_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    [[nodiscard]] const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string config_error(const json& j)
{
    try {
        parse_experiment(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(ParseExperiment, DefaultsAndAliases)
{
    const auto c = parse_experiment(tiny_config());
    EXPECT_EQ(c.methods, (std::vector<Method>{Method::base, Method::cbr_adv}));
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1}));
    EXPECT_EQ(c.k, 10u);
    EXPECT_EQ(c.data.synth->num_users, 40u);
    EXPECT_EQ(c.train.epochs, 2u);
    EXPECT_EQ(c.train.early_stop_patience, TrainConfig{}.early_stop_patience);

    json alias = tiny_config();
    alias.erase("methods");
    alias["method"] = "cbr_conf";
    alias["base_model"] = "mlp";
    const auto a = parse_experiment(alias);
    EXPECT_EQ(a.methods, (std::vector<Method>{Method::cbr_conf}));
    EXPECT_EQ(a.model.base, BaseModel::mlp);

    json sweep = tiny_config();
    sweep["sweep"] = {{"parameter", "K1"}};
    EXPECT_EQ(parse_experiment(sweep).sweep->values, default_sweep_values(SweepParameter::K1));
    EXPECT_EQ(default_sweep_values(SweepParameter::alpha), (std::vector<double>{0, 0.1, 0.3, 0.5, 0.7, 1}));
}

TEST(ParseExperiment, RejectsBadConfigs)
{
    auto with = [](auto edit) {
        json j = tiny_config();
        edit(j);
        return config_error(j);
    };
    EXPECT_NE(with([](json& j) { j["epochs"] = 3; }).find("config.epochs"), std::string::npos);
    EXPECT_NE(with([](json& j) { j["loss"]["gama"] = 0.1; }).find("loss.gama"), std::string::npos);
    EXPECT_NE(with([](json& j) { j["data"]["synth"]["alpha"] = 1.5; }), "");
    EXPECT_NE(with([](json& j) { j["data"]["synth"]["alfa"] = 0.5; }).find("data.synth.alfa"), std::string::npos);
    EXPECT_NE(with([](json& j) { j["method"] = "base"; }), "");
    EXPECT_NE(with([](json& j) { j["methods"] = {"cbr"}; }), "");
    EXPECT_NE(with([](json& j) { j["sweep"] = {{"parameter", "lr"}}; }).find("sweep.parameter"), std::string::npos);
    EXPECT_NE(with([](json& j) { j["grid"] = {{"momentum", {0.9}}}; }), "");
    EXPECT_NE(with([](json& j) { j["train"]["epochs"] = 0; }), "");
    EXPECT_NE(with([](json& j) { j["train"]["lr_gen"] = "fast"; }), "");
    EXPECT_NE(with([](json& j) { j["loss"]["gamma"] = -1; }), "");
    EXPECT_NE(with([](json& j) { j["tau"] = 0.0; }), "");
    EXPECT_NE(with([](json& j) { j["seeds"] = json::array(); }), "");
    EXPECT_NE(with([](json& j) { j.erase("data"); }), "");
    EXPECT_NE(with([](json& j) { j["schema_version"] = 2; }), "");
}

TEST(ConfigHash, StableAndSensitive)
{
    const auto c = parse_experiment(tiny_config());
    const std::string h = config_hash(to_json_value(c));
    EXPECT_EQ(h.size(), 16u);
    EXPECT_EQ(h, config_hash(to_json_value(parse_experiment(tiny_config()))));
    auto d = c;
    d.loss.gamma = 0.02;
    EXPECT_NE(h, config_hash(to_json_value(d)));
    EXPECT_EQ(parse_experiment(to_json_value(c)).loss.gamma, c.loss.gamma);
}

TEST(Summarize, MeanAndStandardError)
{
    const auto s = summarize({1.0, 2.0, 3.0, 6.0});
    EXPECT_DOUBLE_EQ(s.mean, 3.0);
    EXPECT_NEAR(s.stderr_, std::sqrt(14.0 / 3.0) / 2.0, 1e-15);
    EXPECT_EQ(s.n, 4u);
    EXPECT_DOUBLE_EQ(summarize({5.0}).stderr_, 0.0);
}

TEST(RunParallel, KeepsTaskOrder)
{
    std::vector<std::function<int()>> tasks;
    for (int i = 0; i < 9; ++i)
        tasks.emplace_back([i] { return i * i; });
    for (std::size_t jobs : {1u, 2u, 4u, 20u}) {
        const auto out = run_parallel(tasks, jobs);
        ASSERT_EQ(out.size(), 9u);
        for (int i = 0; i < 9; ++i)
            EXPECT_EQ(out[i], i * i);
    }
    std::vector<std::function<int()>> failing{[] { return 1; }, []() -> int { throw std::runtime_error("boom"); }};
    EXPECT_THROW(run_parallel(failing, 2), std::runtime_error);
}

TEST(RunExperiment, WritesLogsReportsAndAggregate)
{
    TempDir dir;
    const auto c = parse_experiment(tiny_config());
    const auto res = run_experiment(c, dir.path());
    ASSERT_EQ(res.runs.size(), 2u);
    for (const char* m : {"base", "cbr_adv"}) {
        const fs::path run = dir.path() / m / "seed_1";
        std::ifstream log(run / "train_log.csv");
        std::string header;
        std::getline(log, header);
        EXPECT_EQ(header, training_log_header);
        std::size_t rows = 0;
        for (std::string line; std::getline(log, line);)
            ++rows;
        EXPECT_EQ(rows, 2u);
        const auto report = json::parse(slurp(run / "metrics.json"));
        EXPECT_EQ(report.at("config_hash"), config_hash(to_json_value(c)));
        EXPECT_EQ(report.at("seed"), 1);
        EXPECT_EQ(res.aggregate[m]["auc"]["n"], 1);
        EXPECT_DOUBLE_EQ(res.aggregate[m]["auc"]["mean"].get<double>(), report.at("auc").get<double>());
    }
    EXPECT_EQ(json::parse(slurp(dir.path() / "config.json")), to_json_value(c));
    EXPECT_EQ(json::parse(slurp(dir.path() / "aggregate.json")), json(res.aggregate));
}

TEST(RunExperiment, AggregatesSeedsAndRepeatsExactly)
{
    json j = tiny_config();
    j["seeds"] = {1, 2, 3};
    j["methods"] = {"cbr_clip"};
    const auto c = parse_experiment(j);
    TempDir a, b;
    const auto ra = run_experiment(c, a.path(), 2);
    run_experiment(c, b.path(), 1);
    EXPECT_EQ(slurp(a.path() / "aggregate.json"), slurp(b.path() / "aggregate.json"));
    for (std::uint64_t s : {1, 2, 3}) {
        const fs::path rel = fs::path("cbr_clip") / ("seed_" + std::to_string(s));
        EXPECT_EQ(slurp(a.path() / rel / "metrics.json"), slurp(b.path() / rel / "metrics.json"));
    }
    for (const auto& name : metric_names()) {
        std::vector<double> v;
        for (std::uint64_t s : {1, 2, 3})
            v.push_back(json::parse(slurp(a.path() / "cbr_clip" / ("seed_" + std::to_string(s)) / "metrics.json"))
                            .at(name)
                            .get<double>());
        const auto sum = summarize(v);
        EXPECT_DOUBLE_EQ(ra.aggregate["cbr_clip"][name]["mean"].get<double>(), sum.mean);
        EXPECT_DOUBLE_EQ(ra.aggregate["cbr_clip"][name]["stderr"].get<double>(), sum.stderr_);
        EXPECT_EQ(ra.aggregate["cbr_clip"][name]["n"], 3);
    }
    EXPECT_EQ(ra.aggregate["cbr_clip"]["seeds"], json({1, 2, 3}));
}

TEST(RunExperiment, TsvSource)
{
    TempDir dir;
    const auto c = parse_experiment(tiny_config());
    const auto bundle = materialize(c, 1);
    export_tsv((dir.path() / "train.tsv").string(), bundle.train);
    export_tsv((dir.path() / "val.tsv").string(), bundle.validation);
    export_tsv((dir.path() / "test.tsv").string(), bundle.test);
    json j = tiny_config();
    j["data"] = {{"tsv",
                  {{"train", (dir.path() / "train.tsv").string()},
                   {"validation", (dir.path() / "val.tsv").string()},
                   {"test", (dir.path() / "test.tsv").string()},
                   {"has_propensity", true}}}};
    j["methods"] = {"ips"};
    const auto res = run_experiment(parse_experiment(j), dir.path() / "out");
    EXPECT_TRUE(std::isfinite(res.aggregate["ips"]["auc"]["mean"].get<double>()));
}

TEST(RunSweep, TauOneMatchesPlainRun)
{
    json j = tiny_config();
    j["methods"] = {"base"};
    j["sweep"] = {{"parameter", "tau"}, {"values", {1.0}}};
    const auto c = parse_experiment(j);
    TempDir s, r;
    const auto sweep = run_sweep(c, s.path());
    json plain = j;
    plain.erase("sweep");
    const auto run = run_experiment(parse_experiment(plain), r.path());
    EXPECT_EQ(sweep.points.at(1.0).aggregate, run.aggregate);
    EXPECT_TRUE(fs::exists(s.path() / "tau=1" / "aggregate.json"));
}

TEST(RunSweep, CurveRowsAreCompleteAndSorted)
{
    json j = tiny_config();
    j["methods"] = {"cbr_clip"};
    j["train"]["epochs"] = 1;
    j["sweep"] = {{"parameter", "K1"}, {"values", {30, 5, 20, 10, 25, 15}}};
    TempDir dir;
    const auto res = run_sweep(parse_experiment(j), dir.path());
    EXPECT_EQ(res.rows.size(), 6u * metric_names().size());
    std::ifstream csv(dir.path() / "curves.csv");
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "param_value,method,metric,mean,stderr");
    std::vector<std::pair<double, std::string>> keys;
    std::map<std::string, int> per_metric;
    while (std::getline(csv, line)) {
        std::stringstream ss(line);
        std::string v, method, metric;
        std::getline(ss, v, ',');
        std::getline(ss, method, ',');
        std::getline(ss, metric, ',');
        keys.emplace_back(std::stod(v), metric);
        ++per_metric[metric];
    }
    EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
    for (const auto& name : metric_names())
        EXPECT_EQ(per_metric[name], 6) << name;
}

TEST(RunSweep, AlphaRowsPerMethod)
{
    json j = tiny_config();
    j["train"]["epochs"] = 1;
    j["sweep"] = {{"parameter", "alpha"}, {"values", {0.0, 1.0}}};
    TempDir dir;
    const auto res = run_sweep(parse_experiment(j), dir.path());
    EXPECT_EQ(res.rows.size(), 2u * 2u * metric_names().size());
    EXPECT_TRUE(fs::exists(dir.path() / "alpha=0" / "cbr_adv" / "seed_1" / "metrics.json"));
    EXPECT_NE(res.points.at(0.0).aggregate, res.points.at(1.0).aggregate);
}

TEST(RunGrid, SinglePointEqualsRun)
{
    json j = tiny_config();
    j["methods"] = {"base"};
    j["grid"] = {{"lr_gen", {0.01}}};
    TempDir g, r;
    const auto grid = run_grid(parse_experiment(j), g.path());
    json plain = j;
    plain.erase("grid");
    const auto run = run_experiment(parse_experiment(plain), r.path());
    EXPECT_EQ(grid.best["base"]["test"], run.aggregate["base"]);
    EXPECT_EQ(grid.best["base"]["point"], 0);
    EXPECT_DOUBLE_EQ(grid.best["base"]["validation"].get<double>(), run.runs[0].validation);
}

TEST(RunGrid, WinnerHasHighestValidation)
{
    json j = tiny_config();
    j["methods"] = {"base"};
    j["seeds"] = {1, 2};
    j["grid"] = {{"lr", {0.1, 0.01, 0.001, 0.0001}}};
    TempDir dir;
    const auto grid = run_grid(parse_experiment(j), dir.path());
    const auto& pts = grid.points.at("base");
    ASSERT_EQ(pts.size(), 4u);
    double top = -1.0;
    for (std::size_t g = 0; g < pts.size(); ++g) {
        // The point score is the mean over seeds of the best logged validation AUC.
        double sum = 0.0;
        for (int s : {1, 2}) {
            std::ifstream log(dir.path() / "base" / ("point_" + std::to_string(g)) / ("seed_" + std::to_string(s)) /
                              "train_log.csv");
            std::string line;
            std::getline(log, line);
            double best = -1.0;
            while (std::getline(log, line)) {
                std::vector<std::string> cells;
                std::stringstream ss(line);
                for (std::string cell; std::getline(ss, cell, ',');)
                    cells.push_back(cell);
                best = std::max(best, std::stod(cells.at(5)));
            }
            sum += best;
        }
        EXPECT_NEAR(pts[g].validation, sum / 2.0, 1e-12);
        top = std::max(top, pts[g].validation);
    }
    EXPECT_DOUBLE_EQ(grid.best["base"]["validation"].get<double>(), top);
    const auto winner = grid.best["base"]["point"].get<std::size_t>();
    EXPECT_DOUBLE_EQ(pts[winner].validation, top);
    EXPECT_EQ(json::parse(slurp(dir.path() / "best.json")), json(grid.best));
}

#ifdef CBR_CLI_PATH
namespace {

int cli(const std::string& args)
{
    const std::string cmd = std::string("\"") + CBR_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

} // namespace

TEST(Cli, ExitCodes)
{
    TempDir dir;
    const auto write = [&](const std::string& name, const json& j) {
        const fs::path p = dir.path() / name;
        write_text(p, j.dump());
        return p.string();
    };
    json ok = tiny_config();
    ok["methods"] = {"base"};
    ok["train"]["epochs"] = 1;
    EXPECT_EQ(cli("train --config " + write("ok.json", ok) + " --out " + (dir.path() / "out").string()), 0);
    EXPECT_TRUE(fs::exists(dir.path() / "out" / "aggregate.json"));

    json bad = ok;
    bad["data"]["synth"]["alpha"] = 2.0;
    EXPECT_EQ(cli("train --config " + write("bad.json", bad) + " --out " + (dir.path() / "bad").string()), 2);
    json typo = ok;
    typo["loss"]["gama"] = 0.1;
    EXPECT_EQ(cli("train --config " + write("typo.json", typo) + " --out " + (dir.path() / "typo").string()), 2);
    write_text(dir.path() / "broken.json", "{ not json");
    EXPECT_EQ(cli("train --config " + (dir.path() / "broken.json").string()), 2);
    EXPECT_EQ(cli("sweep --config " + write("nosweep.json", ok) + " --out " + (dir.path() / "s").string()), 2);

    json diverging = ok;
    diverging["train"]["lr_gen"] = 1e300;
    diverging["train"]["optimizer"] = "sgd";
    diverging["train"]["grad_clip"] = 0.0;
    diverging["loss"]["reg_lambdas"] = {{"f", 1e300}};
    EXPECT_EQ(cli("train --config " + write("div.json", diverging) + " --out " + (dir.path() / "d").string()), 3);

    EXPECT_NE(cli("train"), 0);
    EXPECT_NE(cli("frobnicate"), 0);
}
#endif

#ifdef CBR_CONFIG_DIR
TEST(ShippedConfigs, AllParse)
{
    std::size_t seen = 0;
    for (const auto& entry : fs::directory_iterator(CBR_CONFIG_DIR)) {
        if (entry.path().extension() != ".json")
            continue;
        ++seen;
        EXPECT_NO_THROW(load_experiment(entry.path().string())) << entry.path();
    }
    EXPECT_GE(seen, 5u);
}
#endif
