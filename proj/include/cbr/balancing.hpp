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

// Distribution-balancing terms: empirical IPMs (MMD), item-pair importance
// with clipping and sampling selection, the adversarial balance term, and a
// histogram JSD diagnostic.

#include "cbr/autodiff.hpp"
#include "cbr/data.hpp"
#include "cbr/rng.hpp"
#include "cbr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

namespace cbr {

enum class IPMType { mmd_linear, mmd_rbf };

struct IPMKind {
    IPMType type = IPMType::mmd_linear;
    /// RBF bandwidth; values <= 0 select the median heuristic.
    double bandwidth = 0.0;
};

struct ItemPair {
    std::size_t i = 0;
    std::size_t i_prime = 0;
    double weight = 0.0;

    friend bool operator==(const ItemPair&, const ItemPair&) = default;
};

using PairList = std::vector<ItemPair>;

struct BalanceSet {
    PairList pairs;

    [[nodiscard]] std::size_t size() const noexcept { return pairs.size(); }
    [[nodiscard]] bool empty() const noexcept { return pairs.empty(); }
};

/// Median of pairwise Euclidean distances between distinct rows; falls back to
/// 1 when every row coincides.
inline double median_pairwise_distance(const Tensor& rows)
{
    const std::size_t n = rows.rows(), w = rows.cols();
    std::vector<double> d;
    d.reserve(n * (n - 1) / 2);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) {
            double s = 0.0;
            for (std::size_t k = 0; k < w; ++k) {
                const double diff = rows.at(a, k) - rows.at(b, k);
                s += diff * diff;
            }
            d.push_back(std::sqrt(s));
        }
    if (d.empty())
        return 1.0;
    const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    double med = *mid;
    if (d.size() % 2 == 0) {
        const double lower = *std::max_element(d.begin(), mid);
        med = 0.5 * (med + lower);
    }
    return med > 0.0 ? med : 1.0;
}

/// IPM between two row sets recorded in a graph. For RBF, `bandwidth` must
/// already be resolved to a positive value; it is a constant of the graph.
inline NodeId ipm_node(Graph& g, NodeId a, NodeId b, IPMType type, double bandwidth)
{
    if (type == IPMType::mmd_linear) {
        const NodeId diff = g.sub(g.mean_rows(a), g.mean_rows(b));
        return g.sqrt(g.reduce_sum(g.square(diff)));
    }
    if (!(bandwidth > 0.0))
        throw std::invalid_argument("ipm_node: RBF bandwidth must be positive");
    const double c = -1.0 / (2.0 * bandwidth * bandwidth);
    auto kernel_mean = [&](NodeId x, NodeId y) { return g.reduce_mean(g.exp(g.scale(g.pairwise_sqdist(x, y), c))); };
    const NodeId kaa = kernel_mean(a, a);
    const NodeId kbb = kernel_mean(b, b);
    const NodeId kab = kernel_mean(a, b);
    const NodeId mmd2 = g.add(g.add(kaa, kbb), g.scale(kab, -2.0));
    return g.sqrt(g.clamp(mmd2, 0.0, std::numeric_limits<double>::max()));
}

/// Empirical IPM between two nonempty sets of row vectors.
inline double ipm_distance(const Tensor& a, const Tensor& b, IPMKind kind)
{
    if (a.size() == 0 || b.size() == 0)
        throw std::invalid_argument("ipm_distance: both sets must be nonempty");
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
        throw ShapeError("ipm_distance: sets must be matrices of equal width, got " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
    double h = kind.bandwidth;
    if (kind.type == IPMType::mmd_rbf && !(h > 0.0)) {
        Tensor pooled(Shape{a.rows() + b.rows(), a.cols()});
        std::copy(a.data().begin(), a.data().end(), pooled.data().begin());
        std::copy(b.data().begin(), b.data().end(),
                  pooled.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
        h = median_pairwise_distance(pooled);
    }
    Graph g;
    return g.value(ipm_node(g, g.constant(a), g.constant(b), kind.type, h)).item();
}

/// Every unordered pair of items observed in train, weighted p(i) + p(i').
inline PairList pair_importance(const ItemMarginals& marginals)
{
    PairList out;
    const auto& p = marginals.p;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!(p[i] > 0.0))
            continue;
        for (std::size_t j = i + 1; j < p.size(); ++j)
            if (p[j] > 0.0)
                out.push_back({i, j, p[i] + p[j]});
    }
    return out;
}

/// The K1 heaviest pairs; equal weights resolve to the lexicographically smaller pair.
inline BalanceSet select_clip(const PairList& pairs, std::size_t k1)
{
    if (k1 == 0)
        throw std::invalid_argument("select_clip: K1 must be at least 1");
    PairList sorted = pairs;
    std::stable_sort(sorted.begin(), sorted.end(), [](const ItemPair& a, const ItemPair& b) {
        if (a.weight != b.weight)
            return a.weight > b.weight;
        return std::pair(a.i, a.i_prime) < std::pair(b.i, b.i_prime);
    });
    sorted.resize(std::min(k1, sorted.size()));
    return BalanceSet{std::move(sorted)};
}

/// K2 draws without replacement, each proportional to weight among the pairs
/// still available. Asking for at least as many pairs as exist returns all.
inline BalanceSet select_sample(const PairList& pairs, std::size_t k2, Rng& rng)
{
    if (k2 == 0)
        throw std::invalid_argument("select_sample: K2 must be at least 1");
    if (k2 >= pairs.size())
        return BalanceSet{pairs};
    std::vector<char> used(pairs.size(), 0);
    double remaining = 0.0;
    for (const auto& p : pairs)
        remaining += p.weight;
    BalanceSet out;
    while (out.pairs.size() < k2) {
        double target = uniform01(rng) * remaining;
        std::size_t pick = pairs.size();
        std::size_t last_free = pairs.size();
        for (std::size_t k = 0; k < pairs.size(); ++k) {
            if (used[k])
                continue;
            last_free = k;
            target -= pairs[k].weight;
            if (target < 0.0) {
                pick = k;
                break;
            }
        }
        if (pick == pairs.size())
            pick = last_free; // round-off at the upper end
        used[pick] = 1;
        remaining -= pairs[pick].weight;
        out.pairs.push_back(pairs[pick]);
    }
    return out;
}

/// Row indices of a batch grouped by item.
inline std::map<std::size_t, std::vector<std::size_t>> group_rows_by_item(const std::vector<std::size_t>& items)
{
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t r = 0; r < items.size(); ++r)
        groups[items[r]].push_back(r);
    return groups;
}

/// Sum over selected pairs of weight x IPM between the two items' phi(u)
/// groups in this batch. Pairs missing a group in the batch contribute nothing.
/// Returns nullopt when no pair contributes.
inline std::optional<NodeId> balance_penalty_node(Graph& g, NodeId phi_rows, const std::vector<std::size_t>& items,
                                                  const BalanceSet& set, IPMKind kind)
{
    const auto groups = group_rows_by_item(items);
    double h = kind.bandwidth;
    if (kind.type == IPMType::mmd_rbf && !(h > 0.0))
        h = median_pairwise_distance(g.value(phi_rows));
    std::map<std::size_t, NodeId> gathered;
    auto rows_of = [&](std::size_t item) {
        auto it = gathered.find(item);
        if (it != gathered.end())
            return it->second;
        const NodeId n = g.embed_lookup(phi_rows, groups.at(item));
        gathered.emplace(item, n);
        return n;
    };
    std::optional<NodeId> total;
    for (const auto& pair : set.pairs) {
        if (!groups.contains(pair.i) || !groups.contains(pair.i_prime))
            continue;
        const NodeId term = g.scale(ipm_node(g, rows_of(pair.i), rows_of(pair.i_prime), kind.type, h), pair.weight);
        total = total ? g.add(*total, term) : term;
    }
    return total;
}

inline double balance_penalty(const Tensor& phi_rows, const std::vector<std::size_t>& items, const BalanceSet& set,
                              IPMKind kind)
{
    if (phi_rows.rows() != items.size())
        throw std::invalid_argument("balance_penalty: one item per representation row is required");
    Graph g;
    const auto node = balance_penalty_node(g, g.constant(phi_rows), items, set, kind);
    return node ? g.value(*node).item() : 0.0;
}

inline constexpr double probability_floor = 1e-12;

enum class AdversarialAveraging {
    per_pair, ///< mean over observed (u, i) records
    per_item, ///< mean over items of the per-item mean
};

/// Empirical sum_i E_{u ~ p(u|i)}[log D^i(phi(u))] from batch rows. The
/// discriminator ascends this value and the representation descends it.
inline NodeId adversarial_balance_node(Graph& g, NodeId disc_probs, const std::vector<std::size_t>& items,
                                       AdversarialAveraging averaging = AdversarialAveraging::per_pair)
{
    const NodeId logp = g.log(g.clamp(g.pick_cols(disc_probs, items), probability_floor, 1.0));
    if (averaging == AdversarialAveraging::per_pair)
        return g.reduce_mean(logp);
    const auto groups = group_rows_by_item(items);
    const NodeId col = g.reshape(logp, {items.size(), 1});
    std::optional<NodeId> total;
    for (const auto& [item, rows] : groups) {
        const NodeId m = g.reduce_mean(g.embed_lookup(col, rows));
        total = total ? g.add(*total, m) : m;
    }
    return g.scale(*total, 1.0 / static_cast<double>(groups.size()));
}

struct AdversarialTerms {
    double discriminator_objective = 0.0;
    double generator_penalty = 0.0;
};

inline AdversarialTerms adversarial_balance_terms(const Tensor& disc_probs, const std::vector<std::size_t>& items,
                                                  AdversarialAveraging averaging = AdversarialAveraging::per_pair)
{
    Graph g;
    const double v = g.value(adversarial_balance_node(g, g.constant(disc_probs), items, averaging)).item();
    return {v, v};
}

/// Shannon entropy in nats.
inline double entropy(const std::vector<double>& p)
{
    double h = 0.0;
    for (double v : p)
        if (v > 0.0)
            h -= v * std::log(v);
    return h;
}

/// Multivariate JSD with equal weights: H(mean_i P_i) - mean_i H(P_i).
inline double jensen_shannon(const std::vector<std::vector<double>>& dists)
{
    if (dists.empty())
        throw std::invalid_argument("jensen_shannon: no distributions");
    const std::size_t support = dists.front().size();
    std::vector<double> mix(support, 0.0);
    double mean_h = 0.0;
    const double w = 1.0 / static_cast<double>(dists.size());
    for (const auto& d : dists) {
        if (d.size() != support)
            throw std::invalid_argument("jensen_shannon: supports differ");
        for (std::size_t t = 0; t < support; ++t)
            mix[t] += w * d[t];
        mean_h += w * entropy(d);
    }
    return std::max(0.0, entropy(mix) - mean_h);
}

struct HistogramSpec {
    std::size_t bins = 10;
};

/// Histograms every coordinate of every group on bins spanning the pooled
/// range of that coordinate, and averages the per-coordinate JSD.
inline double jsd_diagnostic(const std::vector<Tensor>& groups, HistogramSpec spec = {})
{
    if (groups.empty())
        throw std::invalid_argument("jsd_diagnostic: no groups");
    if (spec.bins == 0)
        throw std::invalid_argument("jsd_diagnostic: bins must be positive");
    const std::size_t w = groups.front().cols();
    for (const auto& grp : groups)
        if (grp.size() == 0 || grp.cols() != w)
            throw std::invalid_argument("jsd_diagnostic: groups must be nonempty with equal width");
    double total = 0.0;
    for (std::size_t k = 0; k < w; ++k) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (const auto& grp : groups)
            for (std::size_t r = 0; r < grp.rows(); ++r) {
                lo = std::min(lo, grp.at(r, k));
                hi = std::max(hi, grp.at(r, k));
            }
        const double span = hi - lo;
        std::vector<std::vector<double>> hists;
        for (const auto& grp : groups) {
            std::vector<double> h(spec.bins, 0.0);
            for (std::size_t r = 0; r < grp.rows(); ++r) {
                std::size_t bin = 0;
                if (span > 0.0) {
                    const double pos = (grp.at(r, k) - lo) / span * static_cast<double>(spec.bins);
                    bin = std::min(spec.bins - 1, static_cast<std::size_t>(std::max(0.0, pos)));
                }
                h[bin] += 1.0;
            }
            for (double& v : h)
                v /= static_cast<double>(grp.rows());
            hists.push_back(std::move(h));
        }
        total += jensen_shannon(hists);
    }
    return total / static_cast<double>(w);
}

/// Closed-form maximizer of sum_i sum_t p_i(t) log D_i(t) subject to
/// sum_i D_i(t) = 1: D_i(t) = p_i(t) / sum_k p_k(t). Support points with no
/// mass get the uniform split.
inline std::vector<std::vector<double>> optimal_discriminator(const std::vector<std::vector<double>>& dists)
{
    const std::size_t n = dists.size();
    const std::size_t support = dists.front().size();
    std::vector<std::vector<double>> d(n, std::vector<double>(support, 0.0));
    for (std::size_t t = 0; t < support; ++t) {
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            z += dists[i][t];
        for (std::size_t i = 0; i < n; ++i)
            d[i][t] = z > 0.0 ? dists[i][t] / z : 1.0 / static_cast<double>(n);
    }
    return d;
}

/// sum_i sum_t p_i(t) log D_i(t).
inline double adversarial_value(const std::vector<std::vector<double>>& dists,
                                const std::vector<std::vector<double>>& disc)
{
    double v = 0.0;
    for (std::size_t i = 0; i < dists.size(); ++i)
        for (std::size_t t = 0; t < dists[i].size(); ++t)
            if (dists[i][t] > 0.0)
                v += dists[i][t] * std::log(std::max(disc[i][t], probability_floor));
    return v;
}

} // namespace cbr
