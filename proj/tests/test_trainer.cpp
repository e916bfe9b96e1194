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

#include "cbr/trainer.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace cbr;

namespace {

constexpr std::size_t n_users = 5, n_items = 4;

DatasetBundle dense_bundle(std::uint64_t seed, double keep = 1.0)
{
    Rng rng(seed);
    DatasetBundle d;
    d.train = test::dense_log(n_users, n_items, rng, keep);
    d.validation = test::dense_log(n_users, n_items, rng);
    d.test = test::dense_log(n_users, n_items, rng);
    d.num_users = n_users;
    d.num_items = n_items;
    return d;
}

TrainConfig quick(std::size_t epochs = 3)
{
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 8;
    t.lr_gen = 0.05;
    t.lr_disc = 0.05;
    t.seed = 7;
    t.early_stop_patience = epochs;
    return t;
}

LossConfig loss_for(Method m, double gamma = 0.1)
{
    LossConfig l;
    l.method = m;
    l.gamma = gamma;
    l.K1 = 3;
    l.K2 = 3;
    if (m == Method::ips || m == Method::snips || m == Method::dr)
        l.propensity_source = PropensitySource::item_marginal;
    return l;
}

ModelBundle start_model(std::uint64_t seed = 3)
{
    return ModelBundle(test::tiny_model(BaseModel::gmf, n_users, n_items), seed);
}

std::string log_text(const FitResult& r)
{
    std::ostringstream s;
    write_training_log(s, r.log, false);
    return s.str();
}

bool same_group(const ModelBundle& a, const ModelBundle& b, Group g)
{
    for (const auto& name : a.names_in(g))
        if (a.at(name).values().size() != b.at(name).values().size() ||
            !std::equal(a.at(name).values().begin(), a.at(name).values().end(), b.at(name).values().begin()))
            return false;
    return true;
}

Batch whole_train(const DatasetBundle& d)
{
    Batch b;
    for (const auto& r : d.train.records) {
        b.users.push_back(r.user);
        b.items.push_back(r.item);
        b.labels.push_back(r.label);
    }
    return b;
}

double generator_value(const ModelBundle& m, const Batch& b, const LossConfig& cfg, const ItemMarginals& marg)
{
    Graph g;
    BoundModel bm(g, m, {});
    return g.value(build_loss(bm, b, cfg, LossContext{.marginals = &marg}).generator).item();
}

double disc_value(const ModelBundle& m, const Batch& b, const LossConfig& cfg)
{
    Graph g;
    BoundModel bm(g, m, {});
    return g.value(discriminator_objective(bm, b, cfg)).item();
}

// Central differences over every entry of the given groups.
template <class F>
std::map<std::string, Tensor> numeric_gradient(const ModelBundle& m, std::initializer_list<Group> groups, F value)
{
    std::map<std::string, Tensor> out;
    const double h = 1e-6;
    for (Group grp : groups)
        for (const auto& name : m.names_in(grp)) {
            Tensor grad(m.at(name).shape());
            ModelBundle probe = m;
            for (std::size_t k = 0; k < grad.size(); ++k) {
                const double x = m.at(name).values()[k];
                probe.at(name).values()[k] = x + h;
                const double up = value(probe);
                probe.at(name).values()[k] = x - h;
                const double down = value(probe);
                probe.at(name).values()[k] = x;
                grad.values()[k] = (up - down) / (2.0 * h);
            }
            out.emplace(name, std::move(grad));
        }
    return out;
}

} // namespace

TEST(Fit, BaseSkipsDiscriminator)
{
    const auto data = dense_bundle(1);
    const ModelBundle m0 = start_model();
    const auto res = fit(data, m0, loss_for(Method::base), quick());
    ASSERT_EQ(res.log.size(), 3u);
    for (const auto& e : res.log) {
        EXPECT_TRUE(std::isnan(e.disc_objective));
        EXPECT_TRUE(std::isnan(e.jsd_diagnostic));
        EXPECT_TRUE(std::isfinite(e.train_loss));
    }
    EXPECT_TRUE(same_group(res.model, m0, Group::D));
    EXPECT_TRUE(same_group(res.model, m0, Group::c));
    EXPECT_FALSE(same_group(res.model, m0, Group::f));
}

TEST(Fit, SingleStepMatchesHandTrace)
{
    const auto data = dense_bundle(2, 0.7);
    for (Method method : {Method::cbr_adv, Method::cbr_conf}) {
        ModelBundle m0 = start_model(5);
        Rng rng(5);
        test::randomize(m0, rng, -0.8, 0.8);
        LossConfig loss = loss_for(method, 0.3);
        loss.reg_lambdas = {.f = 0.01, .phi = 0.01, .D = 0.02, .c = 0.01, .s = 0.01};
        TrainConfig t = quick(1);
        t.optimizer = OptimizerKind::sgd;
        t.batch_size = 1000;
        t.grad_clip = 0.0;
        t.lr_disc = 0.2;
        t.lr_gen = 0.1;

        const Batch b = whole_train(data);
        const auto marg = item_marginals(data.train, n_items);
        // Ascent on D with everything else at its starting value.
        ModelBundle want = m0;
        const auto gd = numeric_gradient(m0, {Group::D}, [&](const ModelBundle& m) { return disc_value(m, b, loss); });
        for (const auto& [name, g] : gd)
            for (std::size_t k = 0; k < g.size(); ++k)
                want.at(name).values()[k] += t.lr_disc * g.values()[k];
        // Descent on the rest with the updated D.
        const ModelBundle mid = want;
        const auto gg = numeric_gradient(mid, {Group::f, Group::phi, Group::c, Group::s},
                                         [&](const ModelBundle& m) { return generator_value(m, b, loss, marg); });
        for (const auto& [name, g] : gg)
            for (std::size_t k = 0; k < g.size(); ++k)
                want.at(name).values()[k] -= t.lr_gen * g.values()[k];

        const auto res = fit(data, m0, loss, t);
        ASSERT_EQ(res.log.size(), 1u);
        EXPECT_NEAR(res.log[0].disc_objective, disc_value(m0, b, loss), 1e-12);
        EXPECT_NEAR(res.log[0].train_loss, generator_value(mid, b, loss, marg), 1e-10);
        for (const auto& [name, value] : want.parameters()) {
            const auto got = res.model.at(name).values();
            bool changed = false;
            for (std::size_t k = 0; k < value.size(); ++k) {
                EXPECT_NEAR(got[k], value.values()[k], 1e-8) << method_name(method) << " " << name << "[" << k << "]";
                changed = changed || got[k] != m0.at(name).values()[k];
            }
            if (method == Method::cbr_adv && (name.starts_with("c.") || name.starts_with("s."))) {
                EXPECT_FALSE(changed) << name;
            }
        }
    }
}

TEST(Fit, RepeatRunsAreBitwiseIdentical)
{
    const auto data = dense_bundle(3, 0.8);
    for (Method method : {Method::base, Method::ips, Method::snips, Method::direct, Method::dr, Method::cbr_clip,
                          Method::cbr_sample, Method::cbr_adv, Method::cbr_conf}) {
        for (Alternation alt : {Alternation::epoch, Alternation::batch}) {
            TrainConfig t = quick(3);
            t.alternation = alt;
            t.imputation_epochs = 2;
            const auto a = fit(data, start_model(), loss_for(method), t);
            const auto b = fit(data, start_model(), loss_for(method), t);
            EXPECT_EQ(log_text(a), log_text(b)) << method_name(method);
            EXPECT_EQ(checkpoint_json(a.model).dump(), checkpoint_json(b.model).dump()) << method_name(method);
            EXPECT_FALSE(a.diverged) << a.diagnostic;
        }
    }
}

TEST(Fit, AdversaryDecoupledAtZeroGamma)
{
    const auto data = dense_bundle(4, 0.8);
    const auto adv = fit(data, start_model(), loss_for(Method::cbr_adv, 0.0), quick(4));
    const auto clip = fit(data, start_model(), loss_for(Method::cbr_clip, 0.0), quick(4));
    EXPECT_TRUE(same_group(adv.model, clip.model, Group::f));
    EXPECT_TRUE(same_group(adv.model, clip.model, Group::phi));
    EXPECT_FALSE(same_group(adv.model, clip.model, Group::D));
    ASSERT_EQ(adv.log.size(), clip.log.size());
    for (std::size_t e = 0; e < adv.log.size(); ++e)
        EXPECT_EQ(adv.log[e].train_loss, clip.log[e].train_loss);
}

TEST(Fit, GeneratorPhaseLeavesDiscriminatorUntouched)
{
    // A vanishing D step leaves the generator phase as the only way D could move.
    const auto data = dense_bundle(5);
    TrainConfig t = quick(2);
    t.optimizer = OptimizerKind::sgd;
    t.lr_disc = 1e-300;
    const ModelBundle m0 = start_model();
    const auto res = fit(data, m0, loss_for(Method::cbr_conf, 0.5), t);
    EXPECT_TRUE(same_group(res.model, m0, Group::D));
    EXPECT_FALSE(same_group(res.model, m0, Group::phi));
    EXPECT_FALSE(same_group(res.model, m0, Group::c));
}

TEST(Fit, SgdLossDecreasesOnSeparableToy)
{
    DatasetBundle d;
    d.num_users = n_users;
    d.num_items = n_items;
    d.train.users = IdMap::identity(n_users);
    d.train.items = IdMap::identity(n_items);
    for (std::size_t u = 0; u < n_users; ++u)
        for (std::size_t i = 0; i < n_items; ++i)
            d.train.records.push_back({u, i, i < 2 ? 1 : 0, std::nullopt});
    d.validation = d.train;
    d.test = d.train;
    TrainConfig t = quick(50);
    t.optimizer = OptimizerKind::sgd;
    t.lr_gen = 0.01;
    t.batch_size = 1000;
    const auto res = fit(d, start_model(), loss_for(Method::base), t);
    ASSERT_EQ(res.log.size(), 50u);
    for (std::size_t e = 1; e < res.log.size(); ++e)
        EXPECT_LT(res.log[e].train_loss, res.log[e - 1].train_loss) << "epoch " << e + 1;
}

TEST(Fit, EarlyStoppingKeepsBestEpoch)
{
    const auto data = dense_bundle(6);
    TrainConfig t = quick(20);
    t.optimizer = OptimizerKind::sgd;
    t.lr_gen = 1e-300;
    t.early_stop_patience = 2;
    const auto res = fit(data, start_model(), loss_for(Method::base), t);
    EXPECT_EQ(res.log.size(), 3u);
    EXPECT_EQ(res.best_epoch, 1u);
    EXPECT_DOUBLE_EQ(res.best_validation, res.log[0].val_auc);

    TrainConfig by_ndcg = quick(4);
    by_ndcg.validation_metric = ValidationMetric::ndcg;
    const auto r2 = fit(data, start_model(), loss_for(Method::base), by_ndcg);
    double best = -1.0;
    for (const auto& e : r2.log)
        best = std::max(best, e.val_ndcg);
    EXPECT_DOUBLE_EQ(r2.best_validation, best);
    EXPECT_DOUBLE_EQ(r2.log[r2.best_epoch - 1].val_ndcg, best);
}

TEST(Fit, DivergenceReturnsLastFiniteModel)
{
    const auto data = dense_bundle(7);
    ModelBundle m0 = start_model();
    for (double& v : m0.at("phi.user_embedding").values())
        v = 1e308;
    for (double& v : m0.at("phi.weight").values())
        v = 1.0;
    const auto res = fit(data, m0, loss_for(Method::base), quick());
    EXPECT_TRUE(res.diverged);
    EXPECT_FALSE(res.diagnostic.empty());
    EXPECT_TRUE(res.log.empty());
    EXPECT_EQ(checkpoint_json(res.model).dump(), checkpoint_json(m0).dump());
}

TEST(Fit, AdversarialMethodsTrackRepresentationJsd)
{
    const auto data = dense_bundle(8);
    const auto res = fit(data, start_model(), loss_for(Method::cbr_adv), quick(2));
    EXPECT_TRUE(std::isfinite(res.jsd_initial));
    EXPECT_TRUE(std::isfinite(res.jsd_best));
    for (const auto& e : res.log) {
        EXPECT_GE(e.jsd_diagnostic, 0.0);
        EXPECT_LE(e.jsd_diagnostic, std::log(static_cast<double>(n_items)) + 1e-12);
    }
    std::vector<EpochLog> seen;
    const auto res2 = fit(data, start_model(), loss_for(Method::cbr_clip), quick(2),
                          FitOptions{.track_jsd = true, .on_epoch = [&](const EpochLog& e) { seen.push_back(e); }});
    EXPECT_EQ(seen.size(), 2u);
    EXPECT_TRUE(std::isfinite(res2.log[0].jsd_diagnostic));
    EXPECT_TRUE(std::isfinite(res2.log[0].balance_penalty));
}

TEST(Fit, RejectsBadInputs)
{
    auto data = dense_bundle(9);
    TrainConfig t = quick();
    t.gen_steps = 0;
    EXPECT_THROW(fit(data, start_model(), loss_for(Method::base), t), std::invalid_argument);
    EXPECT_THROW(fit(data, ModelBundle(test::tiny_model(BaseModel::gmf, 2, n_items), 1), loss_for(Method::base), quick()),
                 std::invalid_argument);
    LossConfig truth = loss_for(Method::ips);
    truth.propensity_source = PropensitySource::truth;
    EXPECT_THROW(fit(data, start_model(), truth, quick()), std::invalid_argument);
    data.validation.records.clear();
    EXPECT_THROW(fit(data, start_model(), loss_for(Method::base), quick()), std::invalid_argument);
}

TEST(Propensities, Sources)
{
    InteractionLog log;
    log.users = IdMap::identity(2);
    log.items = IdMap::identity(2);
    log.records = {{0, 0, 1, 0.3}, {0, 1, 0, 0.6}, {1, 0, 1, 0.9}};
    const auto marg = item_marginals(log, 2);
    EXPECT_EQ(resolve_propensities(log, marg, PropensitySource::truth), (std::vector<double>{0.3, 0.6, 0.9}));
    const auto im = resolve_propensities(log, marg, PropensitySource::item_marginal);
    EXPECT_NEAR(im[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(im[1], 1.0 / 3.0, 1e-15);
    const auto est = resolve_propensities(log, marg, PropensitySource::estimated);
    EXPECT_DOUBLE_EQ(est[0], 1.0);
    EXPECT_NEAR(est[1], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(est[2], 2.0 / 3.0, 1e-15);
    log.records[1].propensity.reset();
    EXPECT_THROW(resolve_propensities(log, marg, PropensitySource::truth), std::invalid_argument);
}

TEST(TrainLog, CsvLayout)
{
    EpochLog e;
    e.epoch = 2;
    e.train_loss = 0.5;
    e.val_auc = 0.75;
    e.wall_ms = 12.0;
    std::ostringstream s;
    write_training_log(s, {e});
    EXPECT_EQ(s.str(), std::string(training_log_header) + "\n2,0.5,nan,nan,nan,0.75,0,12\n");
}
