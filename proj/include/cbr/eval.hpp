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

// Top-K recommendation and the evaluation metrics: NDCG@k, Recall@k,
// per-user AUC and thresholded accuracy.

#include "cbr/data.hpp"
#include "cbr/models.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbr {

/// The k highest-scoring candidates; ties go to the smaller item id.
inline std::vector<std::size_t> topk(std::span<const double> scores, std::vector<std::size_t> candidates,
                                     std::size_t k)
{
    if (k > candidates.size())
        throw std::invalid_argument("topk: k=" + std::to_string(k) + " exceeds " +
                                    std::to_string(candidates.size()) + " candidates");
    const auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b])
            return scores[a] > scores[b];
        return a < b;
    };
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                      better);
    candidates.resize(k);
    return candidates;
}

/// All item ids 0..n-1 as candidates.
inline std::vector<std::size_t> topk(std::span<const double> scores, std::size_t k)
{
    std::vector<std::size_t> all(scores.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return topk(scores, std::move(all), k);
}

/// DCG over the first k ranks divided by the ideal DCG of |relevant| hits.
inline double ndcg_at_k(const std::vector<std::size_t>& ranked, const std::set<std::size_t>& relevant, std::size_t k)
{
    if (relevant.empty())
        throw std::invalid_argument("ndcg_at_k: empty relevant set");
    double dcg = 0.0;
    const std::size_t depth = std::min(k, ranked.size());
    for (std::size_t r = 0; r < depth; ++r)
        if (relevant.contains(ranked[r]))
            dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    double ideal = 0.0;
    for (std::size_t r = 0; r < std::min(k, relevant.size()); ++r)
        ideal += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    return dcg / ideal;
}

inline double recall_at_k(const std::vector<std::size_t>& ranked, const std::set<std::size_t>& relevant, std::size_t k)
{
    if (relevant.empty())
        throw std::invalid_argument("recall_at_k: empty relevant set");
    std::size_t hits = 0;
    for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r)
        hits += relevant.contains(ranked[r]) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

/// Fraction of (positive, negative) pairs ordered correctly, ties 0.5.
/// Empty when either class is missing.
inline std::optional<double> auc_pairs(std::span<const double> scores, std::span<const int> labels)
{
    if (scores.size() != labels.size())
        throw std::invalid_argument("auc: scores and labels differ in length");
    double num = 0.0;
    std::size_t pos = 0, neg = 0;
    for (std::size_t a = 0; a < scores.size(); ++a) {
        if (labels[a] != 1)
            continue;
        ++pos;
        for (std::size_t b = 0; b < scores.size(); ++b) {
            if (labels[b] != 0)
                continue;
            num += scores[a] > scores[b] ? 1.0 : (scores[a] == scores[b] ? 0.5 : 0.0);
        }
    }
    neg = scores.size() - pos;
    if (pos == 0 || neg == 0)
        return std::nullopt;
    return num / (static_cast<double>(pos) * static_cast<double>(neg));
}

/// Mann-Whitney form with midranks; agrees with auc_pairs.
inline std::optional<double> auc_rank_sum(std::span<const double> scores, std::span<const int> labels)
{
    if (scores.size() != labels.size())
        throw std::invalid_argument("auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(n);
    for (std::size_t s = 0; s < n;) {
        std::size_t e = s;
        while (e + 1 < n && scores[order[e + 1]] == scores[order[s]])
            ++e;
        const double mid = (static_cast<double>(s) + static_cast<double>(e)) / 2.0 + 1.0;
        for (std::size_t t = s; t <= e; ++t)
            rank[order[t]] = mid;
        s = e + 1;
    }
    double pos_rank = 0.0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (labels[i] == 1) {
            pos_rank += rank[i];
            ++pos;
        }
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0)
        return std::nullopt;
    const double p = static_cast<double>(pos);
    return (pos_rank - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

/// Fraction of records where (score >= 0.5) equals the label.
inline double acc(std::span<const double> scores, std::span<const int> labels)
{
    if (scores.empty() || scores.size() != labels.size())
        throw std::invalid_argument("acc: need equal, nonempty scores and labels");
    std::size_t right = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        right += ((scores[i] >= 0.5 ? 1 : 0) == labels[i]) ? 1 : 0;
    return static_cast<double>(right) / static_cast<double>(scores.size());
}

struct MetricsReport {
    std::size_t k = 10;
    double ndcg_at_k = 0.0;
    double recall_at_k = 0.0;
    double auc = 0.0;
    double acc = 0.0;
    std::size_t num_users_evaluated = 0;
    std::size_t num_users_auc = 0;
    std::uint64_t seed = 0;
    std::string config_hash;
};

inline nlohmann::ordered_json to_ordered_json(const MetricsReport& r)
{
    nlohmann::ordered_json j;
    j["k"] = r.k;
    j["ndcg_at_k"] = r.ndcg_at_k;
    j["recall_at_k"] = r.recall_at_k;
    j["auc"] = r.auc;
    j["acc"] = r.acc;
    j["num_users_evaluated"] = r.num_users_evaluated;
    j["num_users_auc"] = r.num_users_auc;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    return j;
}

inline MetricsReport metrics_from_json(const nlohmann::json& j)
{
    MetricsReport r;
    r.k = j.at("k").get<std::size_t>();
    r.ndcg_at_k = j.at("ndcg_at_k").get<double>();
    r.recall_at_k = j.at("recall_at_k").get<double>();
    r.auc = j.at("auc").get<double>();
    r.acc = j.at("acc").get<double>();
    r.num_users_evaluated = j.value("num_users_evaluated", std::size_t{0});
    r.num_users_auc = j.value("num_users_auc", std::size_t{0});
    r.seed = j.value("seed", std::uint64_t{0});
    r.config_hash = j.value("config_hash", std::string{});
    return r;
}

struct EvalOptions {
    std::size_t k = 10;
    bool use_confounder = false;
    bool rank = true;
};

/// Scores `split` under `model`. Ranking metrics use the full candidate set of
/// items not seen in the user's train records. AUC is averaged over users with
/// both classes; when no user qualifies it falls back to the pooled AUC over
/// all records.
inline MetricsReport evaluate(const ModelBundle& model, const InteractionLog& split, const InteractionLog& train,
                              const EvalOptions& opt = {}, const Tensor* user_features = nullptr)
{
    if (split.empty())
        throw std::invalid_argument("evaluate: empty split");
    const std::size_t n_items = model.config().num_items;

    std::vector<std::size_t> users, items;
    std::vector<int> labels;
    users.reserve(split.size());
    for (const auto& r : split.records) {
        users.push_back(r.user);
        items.push_back(r.item);
        labels.push_back(r.label);
    }
    const auto scores = predict(model, users, items, opt.use_confounder, user_features);

    MetricsReport rep;
    rep.k = opt.k;
    rep.acc = acc(scores, labels);

    std::map<std::size_t, std::vector<std::size_t>> by_user;
    for (std::size_t t = 0; t < split.size(); ++t)
        by_user[users[t]].push_back(t);

    double auc_sum = 0.0;
    for (const auto& [u, rows] : by_user) {
        std::vector<double> s;
        std::vector<int> l;
        for (std::size_t t : rows) {
            s.push_back(scores[t]);
            l.push_back(labels[t]);
        }
        if (auto a = auc_pairs(s, l)) {
            auc_sum += *a;
            ++rep.num_users_auc;
        }
    }
    if (rep.num_users_auc > 0)
        rep.auc = auc_sum / static_cast<double>(rep.num_users_auc);
    else
        rep.auc = auc_rank_sum(scores, labels).value_or(0.5);

    if (!opt.rank)
        return rep;

    std::map<std::size_t, std::set<std::size_t>> seen;
    for (const auto& r : train.records)
        seen[r.user].insert(r.item);

    std::vector<std::size_t> rank_users;
    std::vector<std::set<std::size_t>> relevant;
    for (const auto& [u, rows] : by_user) {
        std::set<std::size_t> pos;
        for (std::size_t t : rows)
            if (labels[t] == 1)
                pos.insert(items[t]);
        if (pos.empty())
            continue;
        rank_users.push_back(u);
        relevant.push_back(std::move(pos));
    }
    if (rank_users.empty())
        return rep;

    std::vector<std::size_t> grid_u, grid_i;
    grid_u.reserve(rank_users.size() * n_items);
    for (std::size_t u : rank_users)
        for (std::size_t i = 0; i < n_items; ++i) {
            grid_u.push_back(u);
            grid_i.push_back(i);
        }
    const auto grid = predict(model, grid_u, grid_i, opt.use_confounder, user_features);

    double ndcg_sum = 0.0, recall_sum = 0.0;
    static const std::set<std::size_t> none;
    for (std::size_t k = 0; k < rank_users.size(); ++k) {
        const auto it = seen.find(rank_users[k]);
        const auto& train_items = it == seen.end() ? none : it->second;
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < n_items; ++i)
            if (!train_items.contains(i) || relevant[k].contains(i))
                candidates.push_back(i);
        const std::span<const double> row(grid.data() + k * n_items, n_items);
        const auto ranked = topk(row, candidates, std::min(opt.k, candidates.size()));
        ndcg_sum += ndcg_at_k(ranked, relevant[k], opt.k);
        recall_sum += recall_at_k(ranked, relevant[k], opt.k);
    }
    rep.num_users_evaluated = rank_users.size();
    rep.ndcg_at_k = ndcg_sum / static_cast<double>(rank_users.size());
    rep.recall_at_k = recall_sum / static_cast<double>(rank_users.size());
    return rep;
}

} // namespace cbr
