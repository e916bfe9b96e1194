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

// Biased-feedback simulator: Gaussian user/item features, exposure confounded
// by features and a per-user latent draw z, a piecewise feedback rule, and a
// uniformly exposed test set.

#include "cbr/data.hpp"
#include "cbr/rng.hpp"
#include "cbr/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbr::synth {

struct SynthConfig {
    std::size_t num_users = 10000;
    std::size_t num_items = 32;
    std::size_t feature_dim = 8;
    double alpha = 0.5;
    double beta = 0.5;
    std::size_t list_len = 5;
    double noise_std = 0.141421; // variance 0.02
    double bias_b = 0.0;
    std::size_t test_per_user = 5;
    /// uniform: validation is a second uniformly exposed slice per user and
    /// every exposure trains. exposed: validation is split off the exposures.
    bool uniform_validation = true;
    std::size_t val_per_user = 5;
    double val_fraction = 0.2;
    std::uint64_t seed = 0;

    [[nodiscard]] std::size_t uniform_per_user() const noexcept
    {
        return test_per_user + (uniform_validation ? val_per_user : 0);
    }

    void validate() const
    {
        auto fail = [](const std::string& what) { throw std::invalid_argument("SynthConfig." + what); };
        if (num_users == 0) fail("num_users must be positive");
        if (num_items < 2) fail("num_items must be at least 2");
        if (feature_dim == 0) fail("feature_dim must be positive");
        if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha must lie in [0, 1]");
        if (!(beta >= 0.0 && beta <= 1.0)) fail("beta must lie in [0, 1]");
        if (list_len == 0 || list_len > num_items) fail("list_len must lie in [1, num_items]");
        if (list_len + uniform_per_user() > num_items)
            fail("list_len plus the uniform slices per user must not exceed num_items");
        if (uniform_validation && val_per_user == 0) fail("val_per_user must be positive");
        if (!(noise_std >= 0.0)) fail("noise_std must be nonnegative");
        if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction must lie in [0, 1)");
    }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c)
{
    j = nlohmann::json{{"num_users", c.num_users},   {"num_items", c.num_items},
                               {"feature_dim", c.feature_dim}, {"alpha", c.alpha},
                               {"beta", c.beta},               {"list_len", c.list_len},
                               {"noise_std", c.noise_std},     {"bias_b", c.bias_b},
                               {"test_per_user", c.test_per_user},
                               {"uniform_validation", c.uniform_validation},
                               {"val_per_user", c.val_per_user},
                               {"val_fraction", c.val_fraction}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c)
{
    SynthConfig d;
    c.num_users = j.value("num_users", d.num_users);
    c.num_items = j.value("num_items", d.num_items);
    c.feature_dim = j.value("feature_dim", d.feature_dim);
    c.alpha = j.value("alpha", d.alpha);
    c.beta = j.value("beta", d.beta);
    c.list_len = j.value("list_len", d.list_len);
    c.noise_std = j.value("noise_std", d.noise_std);
    c.bias_b = j.value("bias_b", d.bias_b);
    c.test_per_user = j.value("test_per_user", c.list_len);
    c.uniform_validation = j.value("uniform_validation", d.uniform_validation);
    c.val_per_user = j.value("val_per_user", c.test_per_user);
    c.val_fraction = j.value("val_fraction", d.val_fraction);
    c.seed = j.value("seed", d.seed);
}

enum class Piece { k1, k2, k3 };

inline double piecewise(Piece kind, double x)
{
    switch (kind) {
    case Piece::k1: return x > 0.0 ? x - 0.5 : 0.0;
    case Piece::k2: return x > 0.0 ? x : 0.0;
    case Piece::k3: return x < 0.0 ? x + 0.5 : 0.0;
    }
    return 0.0;
}

inline std::vector<double> piecewise(Piece kind, std::span<const double> x)
{
    std::vector<double> out(x.size());
    std::transform(x.begin(), x.end(), out.begin(), [kind](double v) { return piecewise(kind, v); });
    return out;
}

namespace detail {

// sum over [sign*p, sign*q] of outer(inner(v)); the all-ones `a` makes the
// dot product a plain sum.
inline double composed_sum(std::span<const double> p, std::span<const double> q, double sign,
                           Piece outer, Piece inner)
{
    double s = 0.0;
    for (double v : p)
        s += piecewise(outer, piecewise(inner, sign * v));
    for (double v : q)
        s += piecewise(outer, piecewise(inner, sign * v));
    return s;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void check_dims(std::span<const double> p, std::span<const double> q, const SynthConfig& cfg)
{
    if (p.size() != cfg.feature_dim || q.size() != cfg.feature_dim)
        throw std::invalid_argument("feature vectors must have length feature_dim");
}

} // namespace detail

/// a^T k1(k2([p, q])), the preference signal shared by exposure and feedback.
inline double preference_signal(std::span<const double> p, std::span<const double> q)
{
    return detail::composed_sum(p, q, 1.0, Piece::k1, Piece::k2);
}

/// r_ij = 1 - sigma[(1-alpha)(1-beta) a^T k1(k2([p,q])) + alpha + beta z + eps].
inline double exposure_score(std::span<const double> p, std::span<const double> q, double z,
                             double eps, const SynthConfig& cfg)
{
    detail::check_dims(p, q, cfg);
    const double x = (1.0 - cfg.alpha) * (1.0 - cfg.beta) * preference_signal(p, q) + cfg.alpha +
                     cfg.beta * z + eps;
    return 1.0 - detail::logistic(x);
}

inline int feedback(std::span<const double> p, std::span<const double> q, double z, const SynthConfig& cfg)
{
    detail::check_dims(p, q, cfg);
    const double x1 = preference_signal(p, q) + cfg.bias_b;
    const double x2 = detail::composed_sum(p, q, -1.0, Piece::k3, Piece::k2) + cfg.bias_b;
    const double s = detail::logistic(x1 + x1 * x2) + cfg.beta * z - 0.5;
    return s > 0.0 ? 1 : 0;
}

inline constexpr std::size_t max_exposure_sweeps = 50;

/// Bernoulli(r) sweeps over a fresh random item order until list_len distinct
/// items are accepted. After the sweep cap, the highest-r unexposed items fill
/// the remaining slots (ties by item id). Items are returned in acceptance order.
inline std::vector<std::size_t> expose_items(std::span<const double> r_row, std::size_t list_len, Rng& rng)
{
    const std::size_t n = r_row.size();
    if (list_len > n)
        throw std::invalid_argument("expose_items: list_len exceeds the number of items");
    std::vector<std::size_t> chosen;
    std::vector<char> taken(n, 0);
    std::vector<std::size_t> order(n);
    for (std::size_t sweep = 0; sweep < max_exposure_sweeps && chosen.size() < list_len; ++sweep) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t item : order) {
            if (chosen.size() == list_len)
                break;
            if (taken[item])
                continue;
            if (uniform01(rng) < r_row[item]) {
                taken[item] = 1;
                chosen.push_back(item);
            }
        }
    }
    if (chosen.size() < list_len) {
        std::vector<std::size_t> rest;
        for (std::size_t i = 0; i < n; ++i)
            if (!taken[i])
                rest.push_back(i);
        std::stable_sort(rest.begin(), rest.end(),
                         [&](std::size_t a, std::size_t b) { return r_row[a] > r_row[b]; });
        for (std::size_t i = 0; chosen.size() < list_len; ++i)
            chosen.push_back(rest[i]);
    }
    return chosen;
}

struct SynthDataset {
    DatasetBundle bundle;
    Tensor true_propensities; // users x items
    std::vector<double> confounders;
    InteractionLog exposures;  // train + validation before splitting
};

/// Draws one user's features, confounder, propensity row and labels from
/// that user's own stream, so users can be generated in any order.
struct UserDraw {
    std::vector<double> features;
    double z = 0.0;
    std::vector<double> r_row;
    std::vector<std::size_t> exposed;
    std::vector<std::size_t> uniform_items;
};

inline Tensor draw_item_features(const SynthConfig& cfg)
{
    Rng rng = make_rng(cfg.seed, streams::synth_items);
    Tensor q(Shape{cfg.num_items, cfg.feature_dim});
    for (double& v : q.values())
        v = standard_normal(rng);
    return q;
}

inline UserDraw draw_user(std::size_t user, const Tensor& item_features, const SynthConfig& cfg)
{
    Rng rng = make_rng(cfg.seed, streams::synth_users + user);
    UserDraw d;
    d.features.resize(cfg.feature_dim);
    for (double& v : d.features)
        v = standard_normal(rng);
    d.z = standard_normal(rng);
    d.r_row.resize(cfg.num_items);
    for (std::size_t j = 0; j < cfg.num_items; ++j) {
        const double eps = cfg.noise_std * standard_normal(rng);
        d.r_row[j] = exposure_score(d.features, item_features.row(j), d.z, eps, cfg);
    }
    d.exposed = expose_items(d.r_row, cfg.list_len, rng);
    std::vector<std::size_t> unexposed;
    for (std::size_t j = 0; j < cfg.num_items; ++j)
        if (std::find(d.exposed.begin(), d.exposed.end(), j) == d.exposed.end())
            unexposed.push_back(j);
    std::shuffle(unexposed.begin(), unexposed.end(), rng);
    d.uniform_items.assign(unexposed.begin(),
                           unexposed.begin() + static_cast<std::ptrdiff_t>(cfg.uniform_per_user()));
    return d;
}

inline SynthDataset generate(const SynthConfig& cfg)
{
    cfg.validate();
    SynthDataset ds;
    const Tensor q = draw_item_features(cfg);
    Tensor p(Shape{cfg.num_users, cfg.feature_dim});
    ds.true_propensities = Tensor(Shape{cfg.num_users, cfg.num_items});
    ds.confounders.resize(cfg.num_users);

    InteractionLog exposures;
    exposures.users = IdMap::identity(cfg.num_users);
    exposures.items = IdMap::identity(cfg.num_items);
    InteractionLog test = exposures.empty_like();
    InteractionLog uniform_val = exposures.empty_like();

    for (std::size_t u = 0; u < cfg.num_users; ++u) {
        const UserDraw d = draw_user(u, q, cfg);
        std::copy(d.features.begin(), d.features.end(), p.row(u).begin());
        std::copy(d.r_row.begin(), d.r_row.end(), ds.true_propensities.row(u).begin());
        ds.confounders[u] = d.z;
        for (std::size_t j : d.exposed)
            exposures.records.push_back(
                {u, j, feedback(d.features, q.row(j), d.z, cfg), d.r_row[j]});
        for (std::size_t k = 0; k < d.uniform_items.size(); ++k) {
            const std::size_t j = d.uniform_items[k];
            (k < cfg.test_per_user ? test : uniform_val)
                .records.push_back({u, j, feedback(d.features, q.row(j), d.z, cfg),
                                    1.0 / static_cast<double>(cfg.num_items)});
        }
    }

    if (cfg.uniform_validation) {
        ds.bundle.train = exposures;
        ds.bundle.validation = std::move(uniform_val);
    } else {
        DatasetBundle split = split_by_user(exposures, {1.0 - cfg.val_fraction, cfg.val_fraction, 0.0},
                                            cfg.seed);
        ds.bundle.train = std::move(split.train);
        ds.bundle.validation = std::move(split.validation);
    }
    ds.bundle.test = std::move(test);
    ds.bundle.user_features = std::move(p);
    ds.bundle.item_features = q;
    ds.bundle.num_users = cfg.num_users;
    ds.bundle.num_items = cfg.num_items;
    ds.exposures = std::move(exposures);
    return ds;
}

/// Independent Bernoulli(r_ij) exposure of every pair; used to check that
/// inverse-propensity estimates are unbiased for the uniform-exposure risk.
inline std::vector<std::pair<std::size_t, std::size_t>> draw_bernoulli_exposures(const Tensor& r, Rng& rng)
{
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t u = 0; u < r.rows(); ++u)
        for (std::size_t j = 0; j < r.cols(); ++j)
            if (uniform01(rng) < r.at(u, j))
                out.emplace_back(u, j);
    return out;
}

/// Writes the split TSVs, propensities.tsv, feature files and config.json.
inline void write_dataset(const std::filesystem::path& dir, const SynthDataset& ds, const SynthConfig& cfg)
{
    std::filesystem::create_directories(dir);
    export_splits((dir / "synth").string(), ds.bundle);
    {
        std::ofstream out(dir / "propensities.tsv", std::ios::binary);
        for (std::size_t u = 0; u < ds.true_propensities.rows(); ++u)
            for (std::size_t j = 0; j < ds.true_propensities.cols(); ++j)
                out << u << '\t' << j << '\t' << cbr::detail::format_double(ds.true_propensities.at(u, j))
                    << '\n';
    }
    export_features((dir / "user_features.tsv").string(), *ds.bundle.user_features, ds.bundle.train.users);
    export_features((dir / "item_features.tsv").string(), *ds.bundle.item_features, ds.bundle.train.items);
    nlohmann::json j = cfg;
    std::ofstream(dir / "config.json", std::ios::binary) << j.dump(2) << '\n';
}

} // namespace cbr::synth
