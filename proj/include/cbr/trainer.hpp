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

// Alternating minimax training loop with early stopping on a validation metric.

#include "cbr/balancing.hpp"
#include "cbr/data.hpp"
#include "cbr/eval.hpp"
#include "cbr/models.hpp"
#include "cbr/objectives.hpp"
#include "cbr/optim.hpp"
#include "cbr/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace cbr {

enum class ValidationMetric { auc, ndcg };
/// epoch: each phase is a full pass over the minibatches.
/// batch: both phases run on each minibatch before moving to the next.
enum class Alternation { epoch, batch };

namespace detail {
inline constexpr EnumNames<ValidationMetric, 2> validation_names{
    {{ValidationMetric::auc, "auc"}, {ValidationMetric::ndcg, "ndcg"}}};
inline constexpr EnumNames<Alternation, 2> alternation_names{
    {{Alternation::epoch, "epoch"}, {Alternation::batch, "batch"}}};
} // namespace detail

inline void to_json(nlohmann::json& j, ValidationMetric v) { j = detail::enum_to_string(detail::validation_names, v); }
inline void from_json(const nlohmann::json& j, ValidationMetric& v)
{
    v = detail::enum_from_json(detail::validation_names, j, "validation_metric");
}
inline void to_json(nlohmann::json& j, Alternation v) { j = detail::enum_to_string(detail::alternation_names, v); }
inline void from_json(const nlohmann::json& j, Alternation& v)
{
    v = detail::enum_from_json(detail::alternation_names, j, "alternation");
}

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t disc_steps = 1;
    std::size_t gen_steps = 1;
    double lr_disc = 1e-3;
    double lr_gen = 1e-3;
    std::size_t batch_size = 256;
    OptimizerKind optimizer = OptimizerKind::adam;
    std::uint64_t seed = 0;
    std::size_t early_stop_patience = 10;
    ValidationMetric validation_metric = ValidationMetric::auc;
    Alternation alternation = Alternation::epoch;
    double grad_clip = 10.0;
    std::size_t imputation_epochs = 20;

    void validate() const
    {
        if (epochs == 0 || disc_steps == 0 || gen_steps == 0)
            throw std::invalid_argument("TrainConfig: epochs, disc_steps and gen_steps must be >= 1");
        if (!(lr_disc > 0.0) || !(lr_gen > 0.0))
            throw std::invalid_argument("TrainConfig: learning rates must be > 0");
        if (batch_size == 0)
            throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (early_stop_patience == 0)
            throw std::invalid_argument("TrainConfig: early_stop_patience must be >= 1");
    }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, disc_steps, gen_steps, lr_disc, lr_gen,
                                                batch_size, optimizer, seed, early_stop_patience, validation_metric,
                                                alternation, grad_clip, imputation_epochs)

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double disc_objective = std::numeric_limits<double>::quiet_NaN();
    double balance_penalty = std::numeric_limits<double>::quiet_NaN();
    double jsd_diagnostic = std::numeric_limits<double>::quiet_NaN();
    double val_auc = 0.0;
    double val_ndcg = 0.0;
    double wall_ms = 0.0;
};

inline const char* training_log_header = "epoch,train_loss,disc_objective,balance_penalty,jsd_diagnostic,val_auc,val_ndcg,wall_ms";

inline void write_training_log(std::ostream& out, const std::vector<EpochLog>& log, bool with_wall = true)
{
    out << training_log_header << '\n';
    const auto num = [](double v) { return std::isnan(v) ? std::string("nan") : detail::format_double(v); };
    for (const auto& e : log)
        out << e.epoch << ',' << num(e.train_loss) << ',' << num(e.disc_objective) << ',' << num(e.balance_penalty)
            << ',' << num(e.jsd_diagnostic) << ',' << num(e.val_auc) << ',' << num(e.val_ndcg) << ','
            << (with_wall ? num(e.wall_ms) : std::string("0")) << '\n';
}

struct FitResult {
    ModelBundle model;
    std::vector<EpochLog> log = {};
    std::size_t best_epoch = 0;
    double best_validation = -std::numeric_limits<double>::infinity();
    bool diverged = false;
    std::string diagnostic = {};
    double jsd_initial = std::numeric_limits<double>::quiet_NaN();
    double jsd_best = std::numeric_limits<double>::quiet_NaN();
};

struct FitOptions {
    const ModelBundle* imputation = nullptr;
    /// Computes the representation JSD diagnostic each epoch. Defaults to on
    /// for adversarial methods.
    std::optional<bool> track_jsd = {};
    std::function<void(const EpochLog&)> on_epoch = {};
};

/// Per-item groups of phi rows over the records of `log`.
inline std::vector<Tensor> representation_groups(const ModelBundle& model, const InteractionLog& log,
                                                 bool use_confounder, const Tensor* user_features = nullptr)
{
    std::map<std::size_t, std::vector<std::size_t>> rows_of;
    std::vector<std::size_t> users, items;
    for (std::size_t t = 0; t < log.size(); ++t) {
        users.push_back(log.records[t].user);
        items.push_back(log.records[t].item);
        rows_of[log.records[t].item].push_back(t);
    }
    Graph g;
    BoundModel m(g, model, {}, user_features);
    const NodeId ur = m.user_rep(users);
    const NodeId z = use_confounder ? m.infer_confounder(ur, m.item_rep(items)) : m.zero_confounder(users.size());
    const Tensor& phi = g.value(m.phi(ur, z));
    std::vector<Tensor> groups;
    for (const auto& [item, rows] : rows_of) {
        Tensor grp(Shape{rows.size(), phi.cols()});
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto src = phi.row(rows[r]);
            std::copy(src.begin(), src.end(), grp.row(r).begin());
        }
        groups.push_back(std::move(grp));
    }
    return groups;
}

inline double representation_jsd(const ModelBundle& model, const InteractionLog& log, bool use_confounder,
                                 const Tensor* user_features = nullptr)
{
    return jsd_diagnostic(representation_groups(model, log, use_confounder, user_features));
}

/// Propensity of each training record under the configured source.
inline std::vector<double> resolve_propensities(const InteractionLog& train, const ItemMarginals& marginals,
                                                PropensitySource source)
{
    std::vector<double> out(train.size());
    if (source == PropensitySource::truth) {
        for (std::size_t t = 0; t < train.size(); ++t) {
            const auto& p = train.records[t].propensity;
            if (!p)
                throw std::invalid_argument("propensity_source=true but record " + std::to_string(t) +
                                            " has no propensity");
            out[t] = *p;
        }
        return out;
    }
    if (source == PropensitySource::item_marginal) {
        for (std::size_t t = 0; t < train.size(); ++t)
            out[t] = marginals.p.at(train.records[t].item);
        return out;
    }
    // estimated: user activity times item popularity, n_u * n_i / T, capped at 1.
    std::map<std::size_t, std::size_t> activity;
    for (const auto& r : train.records)
        ++activity[r.user];
    for (std::size_t t = 0; t < train.size(); ++t) {
        const auto& r = train.records[t];
        out[t] = std::min(1.0, static_cast<double>(activity[r.user]) * marginals.p.at(r.item));
    }
    return out;
}

namespace detail {

inline bool needs_propensities(Method m) { return m == Method::ips || m == Method::snips || m == Method::dr; }

class Trainer {
public:
    Trainer(const DatasetBundle& data, ModelBundle model, const LossConfig& loss, const TrainConfig& train,
            const FitOptions& opt)
        : data_(data), model_(std::move(model)), loss_(loss), train_(train), opt_(opt),
          features_(data.user_features ? &*data.user_features : nullptr),
          marginals_(item_marginals(data.train, model_.config().num_items)),
          pairs_(pair_importance(marginals_)),
          gen_shuffle_(make_rng(train.seed, streams::shuffle)),
          disc_shuffle_(make_rng(derive_seed(train.seed, streams::shuffle), streams::shuffle)),
          pair_rng_(make_rng(train.seed, streams::pair_sampling)),
          grid_rng_(make_rng(train.seed, streams::grid_sampling))
    {
        if (needs_propensities(loss.method))
            propensities_ = resolve_propensities(data.train, marginals_, loss.propensity_source);
        if (loss.method == Method::cbr_clip)
            balance_ = select_clip(pairs_, loss.K1);
        track_jsd_ = opt.track_jsd.value_or(is_adversarial(loss.method));
    }

    FitResult run()
    {
        FitResult res{.model = model_};
        const bool conf = uses_confounder(loss_.method);
        if (track_jsd_)
            res.jsd_initial = representation_jsd(model_, data_.train, conf, features_);

        std::size_t stale = 0;
        for (std::size_t epoch = 1; epoch <= train_.epochs; ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            EpochLog row;
            row.epoch = epoch;
            const ModelBundle before = model_;
            try {
                run_epoch(row);
            } catch (const NonFiniteError& e) {
                model_ = before;
                res.diverged = true;
                res.diagnostic = "non-finite value in epoch " + std::to_string(epoch) + ": " + e.what();
                break;
            }
            if (!model_.all_finite() || !std::isfinite(row.train_loss)) {
                model_ = before;
                res.diverged = true;
                res.diagnostic = "non-finite parameters or loss after epoch " + std::to_string(epoch);
                break;
            }
            const auto val = evaluate(model_, data_.validation, data_.train, EvalOptions{.use_confounder = conf},
                                      features_);
            row.val_auc = val.auc;
            row.val_ndcg = val.ndcg_at_k;
            if (track_jsd_)
                row.jsd_diagnostic = representation_jsd(model_, data_.train, conf, features_);
            row.wall_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            res.log.push_back(row);
            if (opt_.on_epoch)
                opt_.on_epoch(row);

            const double score = train_.validation_metric == ValidationMetric::auc ? val.auc : val.ndcg_at_k;
            if (score > res.best_validation) {
                res.best_validation = score;
                res.best_epoch = epoch;
                res.model = model_;
                res.jsd_best = row.jsd_diagnostic;
                stale = 0;
            } else if (++stale >= train_.early_stop_patience) {
                break;
            }
        }
        if (res.best_epoch == 0)
            res.model = model_;
        return res;
    }

private:
    std::vector<std::vector<std::size_t>> minibatches(Rng& rng) const
    {
        std::vector<std::size_t> order(data_.train.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<std::vector<std::size_t>> out;
        for (std::size_t s = 0; s < order.size(); s += train_.batch_size)
            out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + train_.batch_size)));
        return out;
    }

    Batch make_batch(const std::vector<std::size_t>& rows) const
    {
        Batch b;
        for (std::size_t t : rows) {
            const auto& r = data_.train.records[t];
            b.users.push_back(r.user);
            b.items.push_back(r.item);
            b.labels.push_back(static_cast<double>(r.label));
            if (!propensities_.empty())
                b.propensities.push_back(propensities_[t]);
        }
        return b;
    }

    void apply(const Graph& g, NodeId objective, BoundModel& bound, std::map<std::string, SlotState>& slots,
               double lr, Direction dir)
    {
        const auto grads = g.backward(objective);
        std::map<std::string, Tensor> named;
        for (const auto& [name, id] : bound.trainable_nodes())
            named.emplace(name, grads.at(id));
        clip_global_norm(named, train_.grad_clip);
        for (auto& [name, grad] : named)
            optimizer_step(model_.at(name), grad, slots[name], train_.optimizer, lr, dir);
    }

    double discriminator_step(const Batch& b)
    {
        Graph g;
        BoundModel bound(g, model_, {Group::D}, features_);
        const NodeId obj = discriminator_objective(bound, b, loss_);
        const double value = g.value(obj).item();
        apply(g, obj, bound, disc_slots_, train_.lr_disc, Direction::ascend);
        return value;
    }

    struct GenStats {
        double loss = 0.0;
        std::optional<double> balance = {};
    };

    GenStats generator_step(const Batch& b)
    {
        Graph g;
        BoundModel bound(g, model_, {Group::f, Group::phi, Group::c, Group::s}, features_);
        LossContext ctx{.marginals = &marginals_,
                        .balance = balance_ ? &*balance_ : nullptr,
                        .imputation = opt_.imputation,
                        .num_users = model_.config().num_users,
                        .num_items = model_.config().num_items,
                        .grid_rng = &grid_rng_};
        const LossNodes nodes = build_loss(bound, b, loss_, ctx, features_);
        GenStats st{.loss = g.value(nodes.generator).item()};
        if (uses_pairs(loss_.method) && nodes.balance)
            st.balance = g.value(*nodes.balance).item();
        apply(g, nodes.generator, bound, gen_slots_, train_.lr_gen, Direction::descend);
        return st;
    }

    void run_epoch(EpochLog& row)
    {
        if (loss_.method == Method::cbr_sample)
            balance_ = select_sample(pairs_, loss_.K2, pair_rng_);
        const bool adversarial = is_adversarial(loss_.method);

        double disc_sum = 0.0, gen_sum = 0.0, bal_sum = 0.0;
        std::size_t disc_n = 0, gen_n = 0, bal_n = 0;
        const auto gen_pass_stats = [&](const GenStats& s, bool last_pass) {
            if (!last_pass)
                return;
            gen_sum += s.loss;
            ++gen_n;
            if (s.balance) {
                bal_sum += *s.balance;
                ++bal_n;
            }
        };

        if (train_.alternation == Alternation::epoch || !adversarial) {
            if (adversarial)
                for (std::size_t k = 0; k < train_.disc_steps; ++k)
                    for (const auto& rows : minibatches(disc_shuffle_)) {
                        disc_sum += discriminator_step(make_batch(rows));
                        ++disc_n;
                    }
            for (std::size_t k = 0; k < train_.gen_steps; ++k)
                for (const auto& rows : minibatches(gen_shuffle_))
                    gen_pass_stats(generator_step(make_batch(rows)), k + 1 == train_.gen_steps);
        } else {
            for (const auto& rows : minibatches(gen_shuffle_)) {
                const Batch b = make_batch(rows);
                for (std::size_t k = 0; k < train_.disc_steps; ++k) {
                    disc_sum += discriminator_step(b);
                    ++disc_n;
                }
                for (std::size_t k = 0; k < train_.gen_steps; ++k)
                    gen_pass_stats(generator_step(b), k + 1 == train_.gen_steps);
            }
        }
        row.train_loss = gen_sum / static_cast<double>(std::max<std::size_t>(gen_n, 1));
        if (disc_n > 0)
            row.disc_objective = disc_sum / static_cast<double>(disc_n);
        if (bal_n > 0)
            row.balance_penalty = bal_sum / static_cast<double>(bal_n);
    }

    const DatasetBundle& data_;
    ModelBundle model_;
    LossConfig loss_;
    TrainConfig train_;
    FitOptions opt_;
    const Tensor* features_;
    ItemMarginals marginals_;
    PairList pairs_;
    std::optional<BalanceSet> balance_;
    std::vector<double> propensities_;
    bool track_jsd_ = false;
    Rng gen_shuffle_;
    Rng disc_shuffle_;
    Rng pair_rng_;
    Rng grid_rng_;
    std::map<std::string, SlotState> gen_slots_;
    std::map<std::string, SlotState> disc_slots_;
};

} // namespace detail

/// Trains `model` on `data.train`, selecting the epoch with the best
/// validation metric. Direct and DR first pretrain an imputation model with
/// the base objective unless one is supplied.
inline FitResult fit(const DatasetBundle& data, ModelBundle model, const LossConfig& loss_cfg,
                     const TrainConfig& train_cfg, FitOptions opt = {})
{
    loss_cfg.validate();
    train_cfg.validate();
    if (data.train.empty())
        throw std::invalid_argument("fit: empty training log");
    if (data.validation.empty())
        throw std::invalid_argument("fit: empty validation log");
    const auto& mc = model.config();
    if (mc.num_users < data.num_users || mc.num_items < data.num_items)
        throw std::invalid_argument("fit: model is smaller than the dataset");

    std::optional<ModelBundle> imputation;
    if (uses_imputation(loss_cfg.method) && opt.imputation == nullptr) {
        LossConfig base = loss_cfg;
        base.method = Method::base;
        TrainConfig pre = train_cfg;
        pre.epochs = train_cfg.imputation_epochs;
        pre.early_stop_patience = std::max<std::size_t>(pre.epochs, 1);
        imputation = fit(data, model, base, pre).model;
        opt.imputation = &*imputation;
    }
    detail::Trainer t(data, std::move(model), loss_cfg, train_cfg, opt);
    return t.run();
}

} // namespace cbr
