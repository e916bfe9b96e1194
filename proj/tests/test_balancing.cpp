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

#include "cbr/balancing.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <optional>
#include <set>

using namespace cbr;
using test::random_tensor;

namespace {

double rbf_mmd_oracle(const Tensor& a, const Tensor& b, double h)
{
    const auto k = [&](const Tensor& x, std::size_t i, const Tensor& y, std::size_t j) {
        double s = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c)
            s += (x.at(i, c) - y.at(j, c)) * (x.at(i, c) - y.at(j, c));
        return std::exp(-s / (2.0 * h * h));
    };
    const auto mean_k = [&](const Tensor& x, const Tensor& y) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < y.rows(); ++j)
                s += k(x, i, y, j);
        return s / static_cast<double>(x.rows() * y.rows());
    };
    return std::sqrt(std::max(0.0, mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b)));
}

double linear_mmd_oracle(const Tensor& a, const Tensor& b)
{
    double s = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) {
        double ma = 0.0, mb = 0.0;
        for (std::size_t r = 0; r < a.rows(); ++r)
            ma += a.at(r, c);
        for (std::size_t r = 0; r < b.rows(); ++r)
            mb += b.at(r, c);
        const double d = ma / a.rows() - mb / b.rows();
        s += d * d;
    }
    return std::sqrt(s);
}

std::optional<Tensor> rows_of(const Tensor& all, const std::vector<std::size_t>& items, std::size_t item)
{
    std::vector<double> v;
    std::size_t n = 0;
    for (std::size_t r = 0; r < items.size(); ++r)
        if (items[r] == item) {
            v.insert(v.end(), all.row(r).begin(), all.row(r).end());
            ++n;
        }
    if (n == 0)
        return std::nullopt;
    return Tensor(Shape{n, all.cols()}, std::move(v));
}

ItemMarginals marginals_of(std::vector<double> p)
{
    ItemMarginals m;
    m.p = std::move(p);
    return m;
}

} // namespace

TEST(Ipm, IdenticalSetsGiveZero)
{
    Rng rng(1);
    const Tensor a = random_tensor({6, 3}, rng);
    Tensor shuffled(Shape{6, 3});
    for (std::size_t r = 0; r < 6; ++r)
        std::copy(a.row(5 - r).begin(), a.row(5 - r).end(), shuffled.row(r).begin());
    EXPECT_NEAR(ipm_distance(a, shuffled, {IPMType::mmd_linear}), 0.0, 1e-12);
    EXPECT_NEAR(ipm_distance(a, shuffled, {IPMType::mmd_rbf}), 0.0, 1e-12);
}

TEST(Ipm, LinearUnitVectors)
{
    EXPECT_NEAR(ipm_distance(Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(1, 2, {0, 1}), {IPMType::mmd_linear}),
                std::sqrt(2.0), 1e-15);
}

TEST(Ipm, RbfMatchesDoubleLoop)
{
    Rng rng(2);
    for (int t = 0; t < 10; ++t) {
        Tensor a(Shape{20, 3}), b(Shape{20, 3});
        for (double& v : a.values())
            v = standard_normal(rng);
        for (double& v : b.values())
            v = 0.5 + standard_normal(rng);
        for (double h : {0.5, 1.0, 3.0})
            EXPECT_NEAR(ipm_distance(a, b, {IPMType::mmd_rbf, h}), rbf_mmd_oracle(a, b, h), 1e-10);
    }
}

TEST(Ipm, SymmetricAndNonnegative)
{
    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        const Tensor a = random_tensor({1 + test::random_index(5, rng), 4}, rng);
        const Tensor b = random_tensor({1 + test::random_index(5, rng), 4}, rng);
        for (IPMType type : {IPMType::mmd_linear, IPMType::mmd_rbf}) {
            const double ab = ipm_distance(a, b, {type, 0.8});
            EXPECT_GE(ab, 0.0);
            EXPECT_NEAR(ab, ipm_distance(b, a, {type, 0.8}), 1e-12);
        }
        EXPECT_NEAR(ipm_distance(a, b, {IPMType::mmd_linear}), linear_mmd_oracle(a, b), 1e-12);
    }
    EXPECT_THROW(ipm_distance(Tensor(Shape{0, 2}), Tensor(Shape{1, 2}), {}), std::invalid_argument);
    EXPECT_THROW(ipm_distance(Tensor(Shape{1, 2}), Tensor(Shape{1, 3}), {}), ShapeError);
}

TEST(Ipm, MedianHeuristic)
{
    const Tensor pts = Tensor::matrix(3, 1, {0, 1, 3});
    // Distances 1, 2, 3.
    EXPECT_DOUBLE_EQ(median_pairwise_distance(pts), 2.0);
    EXPECT_DOUBLE_EQ(median_pairwise_distance(Tensor::matrix(2, 1, {4, 4})), 1.0);
}

TEST(PairImportance, Examples)
{
    const auto pairs = pair_importance(marginals_of({0.5, 0.3, 0.2}));
    ASSERT_EQ(pairs.size(), 3u);
    EXPECT_EQ(pairs[0].i, 0u);
    EXPECT_EQ(pairs[0].i_prime, 1u);
    EXPECT_NEAR(pairs[0].weight, 0.8, 1e-15);
    EXPECT_NEAR(pairs[1].weight, 0.7, 1e-15);
    EXPECT_NEAR(pairs[2].weight, 0.5, 1e-15);
    const auto two = pair_importance(marginals_of({0.4, 0.6}));
    ASSERT_EQ(two.size(), 1u);
    EXPECT_DOUBLE_EQ(two[0].weight, 1.0);
}

TEST(PairImportance, WeightsSumToItemsMinusOne)
{
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 2 + test::random_index(12, rng);
        auto p = test::random_vector(n, rng, 0.01, 1.0);
        double s = 0.0;
        for (double v : p)
            s += v;
        for (double& v : p)
            v /= s;
        const auto pairs = pair_importance(marginals_of(p));
        EXPECT_EQ(pairs.size(), n * (n - 1) / 2);
        double total = 0.0;
        for (const auto& pr : pairs)
            total += pr.weight;
        EXPECT_NEAR(total, static_cast<double>(n - 1), 1e-12);
    }
}

TEST(SelectClip, TopKSaturationAndTies)
{
    const auto pairs = pair_importance(marginals_of({0.5, 0.3, 0.2}));
    const auto top = select_clip(pairs, 2);
    ASSERT_EQ(top.size(), 2u);
    EXPECT_NEAR(top.pairs[0].weight, 0.8, 1e-15);
    EXPECT_NEAR(top.pairs[1].weight, 0.7, 1e-15);
    EXPECT_EQ(select_clip(pairs, 10).size(), 3u);

    const auto flat = pair_importance(marginals_of({0.25, 0.25, 0.25, 0.25}));
    PairList reversed(flat.rbegin(), flat.rend());
    const auto a = select_clip(reversed, 3);
    ASSERT_EQ(a.size(), 3u);
    EXPECT_EQ(a.pairs[0], (ItemPair{0, 1, 0.5}));
    EXPECT_EQ(a.pairs[1], (ItemPair{0, 2, 0.5}));
    EXPECT_EQ(a.pairs[2], (ItemPair{0, 3, 0.5}));
    EXPECT_EQ(select_clip(flat, 3).pairs, a.pairs);
    EXPECT_THROW(select_clip(pairs, 0), std::invalid_argument);
}

TEST(SelectClip, NoExcludedPairOutweighsAnIncludedOne)
{
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        auto p = test::random_vector(8, rng, 0.0, 1.0);
        for (double& v : p)
            v = std::round(v * 4) / 4; // ties are common
        const auto pairs = pair_importance(marginals_of(p));
        if (pairs.empty())
            continue;
        const std::size_t k = 1 + test::random_index(pairs.size(), rng);
        const auto set = select_clip(pairs, k);
        EXPECT_EQ(select_clip(pairs, k).pairs, set.pairs);
        double min_in = 1e9;
        for (const auto& pr : set.pairs)
            min_in = std::min(min_in, pr.weight);
        for (const auto& pr : pairs)
            if (std::find(set.pairs.begin(), set.pairs.end(), pr) == set.pairs.end()) {
                EXPECT_LE(pr.weight, min_in);
            }
    }
}

TEST(SelectSample, SinglePairAndDeterminism)
{
    const PairList one{{0, 1, 0.3}};
    Rng rng(6);
    EXPECT_EQ(select_sample(one, 1, rng).pairs, one);
    const auto pairs = pair_importance(marginals_of({0.1, 0.2, 0.3, 0.4}));
    Rng a(9), b(9);
    EXPECT_EQ(select_sample(pairs, 3, a).pairs, select_sample(pairs, 3, b).pairs);
    Rng c(10);
    const auto drawn = select_sample(pairs, 4, c);
    std::set<std::pair<std::size_t, std::size_t>> distinct;
    for (const auto& pr : drawn.pairs)
        distinct.insert({pr.i, pr.i_prime});
    EXPECT_EQ(distinct.size(), 4u);
    EXPECT_THROW(select_sample(pairs, 0, c), std::invalid_argument);
}

TEST(SelectSample, FrequenciesWithinThreeSigma)
{
    const PairList pairs{{0, 1, 0.9}, {0, 2, 0.1}};
    Rng rng(7);
    const int trials = 10000;
    int first = 0;
    for (int t = 0; t < trials; ++t)
        first += select_sample(pairs, 1, rng).pairs[0].i_prime == 1 ? 1 : 0;
    const double sd = std::sqrt(trials * 0.9 * 0.1);
    EXPECT_NEAR(first, 9000.0, 3.0 * sd);
}

TEST(BalancePenalty, Examples)
{
    const BalanceSet one{{{0, 1, 0.5}}};
    const Tensor phi = Tensor::matrix(2, 2, {1, 0, 0, 1});
    EXPECT_NEAR(balance_penalty(phi, {0, 1}, one, {}), 0.5 * std::sqrt(2.0), 1e-15);

    // Both items see the same users.
    const Tensor same = Tensor::matrix(4, 2, {1, 2, 3, 4, 3, 4, 1, 2});
    EXPECT_NEAR(balance_penalty(same, {0, 0, 1, 1}, one, {}), 0.0, 1e-12);
    EXPECT_NEAR(balance_penalty(same, {0, 0, 1, 1}, one, {IPMType::mmd_rbf}), 0.0, 1e-12);
    // A pair with a missing group contributes nothing.
    EXPECT_DOUBLE_EQ(balance_penalty(phi, {0, 0}, one, {}), 0.0);
}

TEST(BalancePenalty, MatchesPerPairSum)
{
    Rng rng(8);
    for (int t = 0; t < 30; ++t) {
        const std::size_t n_items = 4, b = 12;
        std::vector<std::size_t> items(b);
        for (auto& i : items)
            i = test::random_index(n_items, rng);
        const Tensor phi = random_tensor({b, 3}, rng);
        auto p = test::random_vector(n_items, rng, 0.05, 1.0);
        const auto set = select_clip(pair_importance(marginals_of(p)), 4);
        for (IPMType type : {IPMType::mmd_linear, IPMType::mmd_rbf}) {
            const IPMKind kind{type, 0.7};
            double want = 0.0;
            for (const auto& pr : set.pairs) {
                const auto a = rows_of(phi, items, pr.i), c = rows_of(phi, items, pr.i_prime);
                if (!a || !c)
                    continue;
                want += pr.weight * (type == IPMType::mmd_linear ? linear_mmd_oracle(*a, *c) : rbf_mmd_oracle(*a, *c, 0.7));
            }
            EXPECT_NEAR(balance_penalty(phi, items, set, kind), want, 1e-10);
        }
    }
}

TEST(BalancePenalty, GradientCheck)
{
    Rng rng(9);
    for (IPMType type : {IPMType::mmd_linear, IPMType::mmd_rbf}) {
        Graph g;
        const NodeId phi = g.parameter("phi", random_tensor({10, 3}, rng));
        const std::vector<std::size_t> items{0, 1, 2, 0, 1, 2, 0, 1, 3, 3};
        const BalanceSet set{{{0, 1, 0.6}, {1, 2, 0.4}, {0, 3, 0.3}}};
        const auto node = balance_penalty_node(g, phi, items, set, {type, 0});
        ASSERT_TRUE(node.has_value());
        EXPECT_TRUE(check_gradients(g, *node).passed());
    }
}

TEST(Adversarial, UniformDiscriminatorGivesLogOneOverN)
{
    const std::size_t n = 5;
    const Tensor uniform(Shape{4, n}, 1.0 / n);
    for (auto avg : {AdversarialAveraging::per_pair, AdversarialAveraging::per_item}) {
        const auto terms = adversarial_balance_terms(uniform, {0, 3, 3, 1}, avg);
        EXPECT_NEAR(terms.discriminator_objective, std::log(1.0 / n), 1e-15);
        EXPECT_EQ(terms.discriminator_objective, terms.generator_penalty);
    }
}

TEST(Adversarial, IdentifyingDiscriminatorApproachesZero)
{
    double prev = -1e9;
    for (double conf : {0.9, 0.99, 0.999999}) {
        const Tensor d = Tensor::matrix(2, 2, {conf, 1 - conf, 1 - conf, conf});
        const double v = adversarial_balance_terms(d, {0, 1}).discriminator_objective;
        EXPECT_LT(v, 0.0);
        EXPECT_GT(v, prev);
        prev = v;
    }
    EXPECT_GT(prev, -1e-5);
}

TEST(Adversarial, TwoItemHandSum)
{
    const Tensor d = Tensor::matrix(3, 2, {0.7, 0.3, 0.2, 0.8, 0.6, 0.4});
    const std::vector<std::size_t> items{0, 1, 1};
    const double per_pair = (std::log(0.7) + std::log(0.8) + std::log(0.4)) / 3.0;
    EXPECT_NEAR(adversarial_balance_terms(d, items).discriminator_objective, per_pair, 1e-12);
    const double per_item = (std::log(0.7) + (std::log(0.8) + std::log(0.4)) / 2.0) / 2.0;
    EXPECT_NEAR(adversarial_balance_terms(d, items, AdversarialAveraging::per_item).discriminator_objective, per_item,
                1e-12);
}

TEST(Jsd, IdentityDisjointAndEntropyOracle)
{
    EXPECT_DOUBLE_EQ(jensen_shannon({{0.2, 0.8}, {0.2, 0.8}}), 0.0);
    EXPECT_NEAR(jensen_shannon({{1.0, 0.0}, {0.0, 1.0}}), std::log(2.0), 1e-15);
    const std::vector<std::vector<double>> three{{0.5, 0.3, 0.2}, {0.1, 0.1, 0.8}, {0.25, 0.5, 0.25}};
    std::vector<double> mix(3, 0.0);
    double mean_h = 0.0;
    for (const auto& d : three)
        for (std::size_t t = 0; t < 3; ++t) {
            mix[t] += d[t] / 3.0;
            mean_h -= d[t] * std::log(d[t]) / 3.0;
        }
    double h_mix = 0.0;
    for (double m : mix)
        h_mix -= m * std::log(m);
    EXPECT_NEAR(jensen_shannon(three), h_mix - mean_h, 1e-12);
}

TEST(Jsd, DiagnosticOnGroups)
{
    Rng rng(11);
    const Tensor a = random_tensor({30, 2}, rng);
    EXPECT_NEAR(jsd_diagnostic({a, a, a}), 0.0, 1e-15);
    // Two point masses at different places in both coordinates.
    EXPECT_NEAR(jsd_diagnostic({Tensor(Shape{5, 2}, -1.0), Tensor(Shape{7, 2}, 1.0)}), std::log(2.0), 1e-15);
    EXPECT_THROW(jsd_diagnostic({}), std::invalid_argument);
    EXPECT_THROW(jsd_diagnostic({a}, {0}), std::invalid_argument);
}

TEST(OptimalDiscriminator, ClosedFormBeatsPerturbations)
{
    Rng rng(12);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 2 + test::random_index(3, rng), support = 2 + test::random_index(5, rng);
        std::vector<std::vector<double>> dists(n, std::vector<double>(support));
        for (auto& d : dists) {
            double s = 0.0;
            for (double& v : d)
                s += (v = uniform01(rng) + 0.01);
            for (double& v : d)
                v /= s;
        }
        const auto best = optimal_discriminator(dists);
        for (std::size_t s = 0; s < support; ++s) {
            double col = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                col += best[i][s];
            EXPECT_NEAR(col, 1.0, 1e-12);
        }
        const double v = adversarial_value(dists, best);
        EXPECT_GE(v, -static_cast<double>(n) * std::log(static_cast<double>(n)) - 1e-12);
        for (int k = 0; k < 20; ++k) {
            auto other = best;
            for (std::size_t s = 0; s < support; ++s) {
                double z = 0.0;
                for (std::size_t i = 0; i < n; ++i)
                    z += (other[i][s] *= std::exp(0.3 * standard_normal(rng)));
                for (std::size_t i = 0; i < n; ++i)
                    other[i][s] /= z;
            }
            EXPECT_LE(adversarial_value(dists, other), v + 1e-12);
        }
    }
}

TEST(AdversarialPenalty, MinimizedWhenGroupsAgree)
{
    // Generator's view: the value at the optimal discriminator is smallest for
    // identical groups, where it equals -N log N.
    const std::vector<std::vector<double>> same{{0.3, 0.7}, {0.3, 0.7}, {0.3, 0.7}};
    const std::vector<std::vector<double>> apart{{0.3, 0.7}, {0.6, 0.4}, {0.9, 0.1}};
    const double v_same = adversarial_value(same, optimal_discriminator(same));
    const double v_apart = adversarial_value(apart, optimal_discriminator(apart));
    EXPECT_NEAR(v_same, -3.0 * std::log(3.0), 1e-12);
    EXPECT_GT(v_apart, v_same);
    // The gap is N times the JSD.
    EXPECT_NEAR(v_apart - v_same, 3.0 * jensen_shannon(apart), 1e-12);
}
