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

// Training objectives: the plain cross-entropy base loss, the IPS, SNIPS,
// Direct and DR baselines, and the balancing objectives (IPM with clipped or
// sampled pairs, adversarial, adversarial with latent confounders).

#include "cbr/autodiff.hpp"
#include "cbr/balancing.hpp"
#include "cbr/data.hpp"
#include "cbr/enum_names.hpp"
#include "cbr/models.hpp"
#include "cbr/rng.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <optional>
#include <string_view>
#include <utility>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbr {

enum class Method { base, ips, snips, direct, dr, cbr_clip, cbr_sample, cbr_adv, cbr_conf };
enum class PropensitySource { truth, estimated, item_marginal };
enum class ExposureLikelihood { observed_sigmoid, softmax };

namespace detail {

inline constexpr EnumNames<Method, 9> method_names{{{Method::base, "base"},
                                                    {Method::ips, "ips"},
                                                    {Method::snips, "snips"},
                                                    {Method::direct, "direct"},
                                                    {Method::dr, "dr"},
                                                    {Method::cbr_clip, "cbr_clip"},
                                                    {Method::cbr_sample, "cbr_sample"},
                                                    {Method::cbr_adv, "cbr_adv"},
                                                    {Method::cbr_conf, "cbr_conf"}}};
inline constexpr EnumNames<PropensitySource, 3> propensity_names{{{PropensitySource::truth, "true"},
                                                                  {PropensitySource::estimated, "estimated"},
                                                                  {PropensitySource::item_marginal, "item_marginal"}}};
inline constexpr EnumNames<ExposureLikelihood, 2> exposure_names{
    {{ExposureLikelihood::observed_sigmoid, "observed_sigmoid"}, {ExposureLikelihood::softmax, "softmax"}}};
inline constexpr EnumNames<IPMType, 2> ipm_names{{{IPMType::mmd_linear, "mmd_linear"}, {IPMType::mmd_rbf, "mmd_rbf"}}};
inline constexpr EnumNames<AdversarialAveraging, 2> averaging_names{
    {{AdversarialAveraging::per_pair, "per_pair"}, {AdversarialAveraging::per_item, "per_item"}}};

} // namespace detail

inline std::string method_name(Method m) { return detail::enum_to_string(detail::method_names, m); }
inline std::optional<Method> parse_method(std::string_view s) { return detail::enum_from_string(detail::method_names, s); }

inline void to_json(nlohmann::json& j, Method v) { j = method_name(v); }
inline void from_json(const nlohmann::json& j, Method& v) { v = detail::enum_from_json(detail::method_names, j, "method"); }
inline void to_json(nlohmann::json& j, PropensitySource v) { j = detail::enum_to_string(detail::propensity_names, v); }
inline void from_json(const nlohmann::json& j, PropensitySource& v)
{
    v = detail::enum_from_json(detail::propensity_names, j, "propensity_source");
}
inline void to_json(nlohmann::json& j, ExposureLikelihood v) { j = detail::enum_to_string(detail::exposure_names, v); }
inline void from_json(const nlohmann::json& j, ExposureLikelihood& v)
{
    v = detail::enum_from_json(detail::exposure_names, j, "exposure_likelihood");
}
inline void to_json(nlohmann::json& j, IPMType v) { j = detail::enum_to_string(detail::ipm_names, v); }
inline void from_json(const nlohmann::json& j, IPMType& v) { v = detail::enum_from_json(detail::ipm_names, j, "ipm"); }
inline void to_json(nlohmann::json& j, AdversarialAveraging v) { j = detail::enum_to_string(detail::averaging_names, v); }
inline void from_json(const nlohmann::json& j, AdversarialAveraging& v)
{
    v = detail::enum_from_json(detail::averaging_names, j, "adversarial_averaging");
}

inline bool is_adversarial(Method m) { return m == Method::cbr_adv || m == Method::cbr_conf; }
inline bool uses_confounder(Method m) { return m == Method::cbr_conf; }
inline bool uses_imputation(Method m) { return m == Method::direct || m == Method::dr; }
inline bool uses_pairs(Method m) { return m == Method::cbr_clip || m == Method::cbr_sample; }

struct RegLambdas {
    double f = 0.0;
    double phi = 0.0;
    double D = 0.0;
    double c = 0.0;
    double s = 0.0;

    [[nodiscard]] double of(Group g) const
    {
        switch (g) {
        case Group::f: return f;
        case Group::phi: return phi;
        case Group::D: return D;
        case Group::c: return c;
        case Group::s: return s;
        }
        return 0.0;
    }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RegLambdas, f, phi, D, c, s)

struct LossConfig {
    Method method = Method::base;
    double gamma = 0.01;
    RegLambdas reg_lambdas;
    std::size_t K1 = 20;
    std::size_t K2 = 20;
    IPMType ipm = IPMType::mmd_linear;
    double ipm_bandwidth = 0.0;
    PropensitySource propensity_source = PropensitySource::truth;
    AdversarialAveraging adversarial_averaging = AdversarialAveraging::per_pair;
    ExposureLikelihood exposure_likelihood = ExposureLikelihood::observed_sigmoid;
    bool exposure_term = true;

    void validate() const
    {
        if (!(gamma >= 0.0))
            throw std::invalid_argument("LossConfig.gamma must be >= 0");
        for (double l : {reg_lambdas.f, reg_lambdas.phi, reg_lambdas.D, reg_lambdas.c, reg_lambdas.s})
            if (!(l >= 0.0))
                throw std::invalid_argument("LossConfig.reg_lambdas must be >= 0");
        if (K1 == 0 || K2 == 0)
            throw std::invalid_argument("LossConfig.K1 and K2 must be >= 1");
    }

    [[nodiscard]] IPMKind ipm_kind() const { return IPMKind{ipm, ipm_bandwidth}; }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossConfig, method, gamma, reg_lambdas, K1, K2, ipm, ipm_bandwidth,
                                                propensity_source, adversarial_averaging, exposure_likelihood,
                                                exposure_term)

/// One minibatch of observed records. Labels are doubles so that soft targets
/// share the cross-entropy path; propensities are resolved per record.
struct Batch {
    std::vector<std::size_t> users;
    std::vector<std::size_t> items;
    std::vector<double> labels;
    std::vector<double> propensities;

    [[nodiscard]] std::size_t size() const noexcept { return users.size(); }
};

/// delta(y, y_hat) = -[y log y_hat + (1-y) log(1-y_hat)], y_hat clamped to [1e-12, 1-1e-12].
inline double delta(double y, double y_hat)
{
    const double p = std::clamp(y_hat, probability_floor, 1.0 - probability_floor);
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

/// Per-record cross-entropy vector against constant targets.
inline NodeId cross_entropy_node(Graph& g, NodeId y_hat, const std::vector<double>& targets)
{
    const NodeId p = g.clamp(y_hat, probability_floor, 1.0 - probability_floor);
    const NodeId y = g.constant(Tensor::vector(targets));
    std::vector<double> comp(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i)
        comp[i] = 1.0 - targets[i];
    const NodeId one_minus_y = g.constant(Tensor::vector(std::move(comp)));
    const NodeId pos = g.mul(y, g.log(p));
    const NodeId neg = g.mul(one_minus_y, g.log(g.affine(p, -1.0, 1.0)));
    return g.scale(g.add(pos, neg), -1.0);
}

/// Cross-entropy against soft targets that are themselves graph nodes.
inline NodeId soft_cross_entropy_node(Graph& g, NodeId y_hat, NodeId targets)
{
    const NodeId p = g.clamp(y_hat, probability_floor, 1.0 - probability_floor);
    const NodeId pos = g.mul(targets, g.log(p));
    const NodeId neg = g.mul(g.affine(targets, -1.0, 1.0), g.log(g.affine(p, -1.0, 1.0)));
    return g.scale(g.add(pos, neg), -1.0);
}

/// (1/denominator) * sum_t weights_t * values_t.
inline NodeId weighted_sum_node(Graph& g, NodeId values, std::vector<double> weights, double denominator)
{
    const NodeId w = g.constant(Tensor::vector(std::move(weights)));
    return g.scale(g.reduce_sum(g.mul(values, w)), 1.0 / denominator);
}

/// Loss value nodes, plus components for logging.
struct LossNodes {
    NodeId generator;
    std::optional<NodeId> discriminator = {};
    std::optional<NodeId> fit = {};
    std::optional<NodeId> balance = {};
    std::optional<NodeId> exposure = {};
};

/// Inputs that some objectives need besides the batch.
struct LossContext {
    const ItemMarginals* marginals = nullptr;
    const BalanceSet* balance = nullptr;
    const ModelBundle* imputation = nullptr;
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    Rng* grid_rng = nullptr;
};

namespace detail {

inline NodeId add_regularizers(BoundModel& m, NodeId total, const RegLambdas& lambdas, std::initializer_list<Group> groups)
{
    Graph& g = m.graph();
    for (Group grp : groups) {
        const double lam = lambdas.of(grp);
        if (lam == 0.0)
            continue;
        if (auto sq = m.squared_norm(grp))
            total = g.add(total, g.scale(*sq, lam));
    }
    return total;
}

struct Forward {
    NodeId user_rep;
    NodeId item_rep;
    NodeId z;
    NodeId phi;
    NodeId y_hat;
};

inline Forward forward(BoundModel& m, const std::vector<std::size_t>& users, const std::vector<std::size_t>& items,
                       bool with_confounder)
{
    Forward f{};
    f.user_rep = m.user_rep(users);
    f.item_rep = m.item_rep(items);
    f.z = with_confounder ? m.infer_confounder(f.user_rep, f.item_rep) : m.zero_confounder(users.size());
    f.phi = m.phi(f.user_rep, f.z);
    f.y_hat = m.score(f.phi, f.item_rep);
    return f;
}

inline void check_propensities(const Batch& b)
{
    if (b.propensities.size() != b.size())
        throw std::invalid_argument("batch is missing propensities");
    for (double p : b.propensities)
        if (!(p > 0.0))
            throw std::invalid_argument("propensity must be positive, got " + std::to_string(p));
}

inline std::vector<double> inverse(const std::vector<double>& v)
{
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = 1.0 / v[i];
    return out;
}

inline std::vector<double> inverse_item_marginals(const Batch& b, const ItemMarginals& marginals)
{
    std::vector<double> w(b.size());
    for (std::size_t t = 0; t < b.size(); ++t) {
        const double p = marginals.p.at(b.items[t]);
        if (!(p > 0.0))
            throw std::invalid_argument("item " + std::to_string(b.items[t]) + " has zero training marginal");
        w[t] = 1.0 / p;
    }
    return w;
}

struct GridSample {
    std::vector<std::size_t> users;
    std::vector<std::size_t> items;
};

inline GridSample sample_grid(std::size_t count, const LossContext& ctx)
{
    if (ctx.grid_rng == nullptr || ctx.num_users == 0 || ctx.num_items == 0)
        throw std::invalid_argument("grid sampling needs an rng and the grid size");
    GridSample s;
    std::uniform_int_distribution<std::size_t> du(0, ctx.num_users - 1), di(0, ctx.num_items - 1);
    for (std::size_t k = 0; k < count; ++k) {
        s.users.push_back(du(*ctx.grid_rng));
        s.items.push_back(di(*ctx.grid_rng));
    }
    return s;
}

inline const ModelBundle& require_imputation(const LossContext& ctx)
{
    if (ctx.imputation == nullptr)
        throw std::invalid_argument("Direct and DR objectives need an imputation model");
    return *ctx.imputation;
}

} // namespace detail

inline LossNodes loss_base(BoundModel& m, const Batch& b, const LossConfig& cfg)
{
    Graph& g = m.graph();
    const auto fw = detail::forward(m, b.users, b.items, false);
    const NodeId fit = g.reduce_mean(cross_entropy_node(g, fw.y_hat, b.labels));
    const NodeId total = detail::add_regularizers(m, fit, cfg.reg_lambdas, {Group::f, Group::phi});
    return {.generator = total, .fit = fit};
}

inline LossNodes loss_ips(BoundModel& m, const Batch& b, const LossConfig& cfg)
{
    detail::check_propensities(b);
    Graph& g = m.graph();
    const auto fw = detail::forward(m, b.users, b.items, false);
    const NodeId ce = cross_entropy_node(g, fw.y_hat, b.labels);
    const NodeId fit = weighted_sum_node(g, ce, detail::inverse(b.propensities), static_cast<double>(b.size()));
    const NodeId total = detail::add_regularizers(m, fit, cfg.reg_lambdas, {Group::f, Group::phi});
    return {.generator = total, .fit = fit};
}

inline LossNodes loss_snips(BoundModel& m, const Batch& b, const LossConfig& cfg)
{
    detail::check_propensities(b);
    Graph& g = m.graph();
    const auto fw = detail::forward(m, b.users, b.items, false);
    const NodeId ce = cross_entropy_node(g, fw.y_hat, b.labels);
    auto w = detail::inverse(b.propensities);
    double wsum = 0.0;
    for (double v : w)
        wsum += v;
    const NodeId fit = weighted_sum_node(g, ce, std::move(w), wsum);
    const NodeId total = detail::add_regularizers(m, fit, cfg.reg_lambdas, {Group::f, Group::phi});
    return {.generator = total, .fit = fit};
}

/// Imputed-label risk on a uniform sample of the user x item grid plus the
/// observed cross-entropy.
inline LossNodes loss_direct(BoundModel& m, const Batch& b, const LossConfig& cfg, const LossContext& ctx,
                             const Tensor* user_features = nullptr)
{
    const ModelBundle& imp = detail::require_imputation(ctx);
    Graph& g = m.graph();
    const auto fw = detail::forward(m, b.users, b.items, false);
    const NodeId observed = g.reduce_mean(cross_entropy_node(g, fw.y_hat, b.labels));
    const auto grid = detail::sample_grid(b.size(), ctx);
    const auto imputed = predict(imp, grid.users, grid.items, false, user_features);
    const auto gfw = detail::forward(m, grid.users, grid.items, false);
    const NodeId grid_term = g.reduce_mean(cross_entropy_node(g, gfw.y_hat, imputed));
    const NodeId fit = g.add(observed, grid_term);
    const NodeId total = detail::add_regularizers(m, fit, cfg.reg_lambdas, {Group::f, Group::phi});
    return {.generator = total, .fit = fit};
}

/// Imputed grid risk plus the inverse-propensity correction
/// (1/T) sum (delta_t - delta_imputed_t) / prop_t on observed records.
inline LossNodes loss_dr(BoundModel& m, const Batch& b, const LossConfig& cfg, const LossContext& ctx,
                         const Tensor* user_features = nullptr)
{
    detail::check_propensities(b);
    const ModelBundle& imp = detail::require_imputation(ctx);
    Graph& g = m.graph();
    const auto fw = detail::forward(m, b.users, b.items, false);
    const auto grid = detail::sample_grid(b.size(), ctx);
    const auto imputed_grid = predict(imp, grid.users, grid.items, false, user_features);
    const auto gfw = detail::forward(m, grid.users, grid.items, false);
    const NodeId grid_term = g.reduce_mean(cross_entropy_node(g, gfw.y_hat, imputed_grid));

    const auto imputed_obs = predict(imp, b.users, b.items, false, user_features);
    const NodeId observed = cross_entropy_node(g, fw.y_hat, b.labels);
    const NodeId imputed = cross_entropy_node(g, fw.y_hat, imputed_obs);
    const NodeId correction = weighted_sum_node(g, g.sub(observed, imputed), detail::inverse(b.propensities),
                                                static_cast<double>(b.size()));
    const NodeId fit = g.add(grid_term, correction);
    const NodeId total = detail::add_regularizers(m, fit, cfg.reg_lambdas, {Group::f, Group::phi});
    return {.generator = total, .fit = fit};
}

/// (1/T) sum delta_t / p(i_t) + gamma * sum_{pairs} w * IPM + L2(f, phi).
inline LossNodes loss_cbr_ipm(BoundModel& m, const Batch& b, const LossConfig& cfg, const LossContext& ctx)
{
    if (ctx.marginals == nullptr)
        throw std::invalid_argument("loss_cbr_ipm needs item marginals");
    Graph& g = m.graph();
    const auto fw = detail::forward(m, b.users, b.items, false);
    const NodeId ce = cross_entropy_node(g, fw.y_hat, b.labels);
    const NodeId fit = weighted_sum_node(g, ce, detail::inverse_item_marginals(b, *ctx.marginals),
                                         static_cast<double>(b.size()));
    NodeId total = fit;
    std::optional<NodeId> balance = {};
    if (cfg.gamma > 0.0 && ctx.balance != nullptr && !ctx.balance->empty()) {
        balance = balance_penalty_node(g, fw.phi, b.items, *ctx.balance, cfg.ipm_kind());
        if (balance)
            total = g.add(total, g.scale(*balance, cfg.gamma));
    }
    total = detail::add_regularizers(m, total, cfg.reg_lambdas, {Group::f, Group::phi});
    return {.generator = total, .fit = fit, .balance = balance};
}

namespace detail {

inline LossNodes adversarial_loss(BoundModel& m, const Batch& b, const LossConfig& cfg, const LossContext& ctx,
                                  bool with_confounder)
{
    if (ctx.marginals == nullptr)
        throw std::invalid_argument("adversarial objectives need item marginals");
    Graph& g = m.graph();
    const auto fw = forward(m, b.users, b.items, with_confounder);
    const NodeId ce = cross_entropy_node(g, fw.y_hat, b.labels);
    const NodeId fit = weighted_sum_node(g, ce, inverse_item_marginals(b, *ctx.marginals),
                                         static_cast<double>(b.size()));
    const NodeId adv = adversarial_balance_node(g, m.discriminate(fw.phi), b.items, cfg.adversarial_averaging);

    NodeId total = fit;
    if (cfg.gamma > 0.0)
        total = g.add(total, g.scale(adv, cfg.gamma));

    std::optional<NodeId> exposure = {};
    if (with_confounder && cfg.exposure_term) {
        NodeId logp{};
        if (cfg.exposure_likelihood == ExposureLikelihood::observed_sigmoid) {
            const NodeId ps = m.exposure_prob(fw.user_rep, fw.item_rep, fw.z);
            logp = g.log(g.clamp(ps, probability_floor, 1.0));
        } else {
            // Score every item under each record's (u, z), normalize over items.
            const std::size_t n = m.config().num_items, bs = b.size();
            std::vector<std::size_t> rep_rows, all_items;
            for (std::size_t t = 0; t < bs; ++t)
                for (std::size_t j = 0; j < n; ++j) {
                    rep_rows.push_back(t);
                    all_items.push_back(j);
                }
            const NodeId u = g.embed_lookup(fw.user_rep, rep_rows);
            const NodeId z = g.embed_lookup(fw.z, rep_rows);
            const NodeId logits = m.exposure_logit(u, m.item_rep(all_items), z);
            const NodeId probs = g.softmax(g.reshape(logits, {bs, n}));
            logp = g.log(g.clamp(g.pick_cols(probs, b.items), probability_floor, 1.0));
        }
        exposure = g.scale(g.reduce_mean(logp), -1.0);
        total = g.add(total, *exposure);
    }

    if (with_confounder)
        total = add_regularizers(m, total, cfg.reg_lambdas, {Group::f, Group::phi, Group::D, Group::c, Group::s});
    else
        total = add_regularizers(m, total, cfg.reg_lambdas, {Group::f, Group::phi, Group::D});

    NodeId disc = adv;
    if (cfg.reg_lambdas.D != 0.0)
        if (auto sq = m.squared_norm(Group::D))
            disc = g.sub(disc, g.scale(*sq, cfg.reg_lambdas.D));
    return {.generator = total, .discriminator = disc, .fit = fit, .balance = adv, .exposure = exposure};
}

} // namespace detail

/// Generator: weighted CE + gamma * adversarial term + L2(f, phi, D).
/// Discriminator (ascended): adversarial term - lambda_D ||theta_D||^2.
inline LossNodes loss_cbr_adv(BoundModel& m, const Batch& b, const LossConfig& cfg, const LossContext& ctx)
{
    return detail::adversarial_loss(m, b, cfg, ctx, false);
}

/// As loss_cbr_adv on phi(u, c(u, i)), plus -(1/T) sum log p_s and L2(c, s).
inline LossNodes loss_cbr_conf(BoundModel& m, const Batch& b, const LossConfig& cfg, const LossContext& ctx)
{
    return detail::adversarial_loss(m, b, cfg, ctx, true);
}

/// The ascent objective alone: only D's parameters need to be trainable.
inline NodeId discriminator_objective(BoundModel& m, const Batch& b, const LossConfig& cfg)
{
    Graph& g = m.graph();
    const auto ur = m.user_rep(b.users);
    NodeId z{};
    if (uses_confounder(cfg.method))
        z = m.infer_confounder(ur, m.item_rep(b.items));
    else
        z = m.zero_confounder(b.size());
    const NodeId adv = adversarial_balance_node(g, m.discriminate(m.phi(ur, z)), b.items, cfg.adversarial_averaging);
    if (cfg.reg_lambdas.D == 0.0)
        return adv;
    return g.sub(adv, g.scale(*m.squared_norm(Group::D), cfg.reg_lambdas.D));
}

inline LossNodes build_loss(BoundModel& m, const Batch& b, const LossConfig& cfg, const LossContext& ctx,
                            const Tensor* user_features = nullptr)
{
    switch (cfg.method) {
    case Method::base: return loss_base(m, b, cfg);
    case Method::ips: return loss_ips(m, b, cfg);
    case Method::snips: return loss_snips(m, b, cfg);
    case Method::direct: return loss_direct(m, b, cfg, ctx, user_features);
    case Method::dr: return loss_dr(m, b, cfg, ctx, user_features);
    case Method::cbr_clip:
    case Method::cbr_sample: return loss_cbr_ipm(m, b, cfg, ctx);
    case Method::cbr_adv: return loss_cbr_adv(m, b, cfg, ctx);
    case Method::cbr_conf: return loss_cbr_conf(m, b, cfg, ctx);
    }
    throw std::invalid_argument("unknown method");
}

/// Inverse-propensity estimate of the uniform-exposure risk:
/// (1 / total_pairs) sum over observed pairs of loss / propensity.
inline double ips_risk_estimate(const std::vector<double>& losses, const std::vector<double>& propensities,
                                std::size_t total_pairs)
{
    if (losses.size() != propensities.size())
        throw std::invalid_argument("ips_risk_estimate: lengths differ");
    double s = 0.0;
    for (std::size_t t = 0; t < losses.size(); ++t) {
        if (!(propensities[t] > 0.0))
            throw std::invalid_argument("ips_risk_estimate: zero propensity");
        s += losses[t] / propensities[t];
    }
    return s / static_cast<double>(total_pairs);
}

} // namespace cbr
