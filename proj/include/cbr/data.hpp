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

// Interaction logs, their TSV representation, per-user splits and item
// marginals.

#include "cbr/rng.hpp"
#include "cbr/tensor.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cbr {

/// Raised for malformed input files; carries the offending line number.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& why)
        : std::runtime_error(path + ":" + std::to_string(line) + ": " + why), line_(line)
    {
    }
    [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Dense re-indexing of external ids, in order of first appearance.
class IdMap {
public:
    std::size_t intern(const std::string& name)
    {
        auto [it, inserted] = index_.try_emplace(name, names_.size());
        if (inserted)
            names_.push_back(name);
        return it->second;
    }

    [[nodiscard]] std::optional<std::size_t> find(const std::string& name) const
    {
        auto it = index_.find(name);
        if (it == index_.end())
            return std::nullopt;
        return it->second;
    }

    [[nodiscard]] const std::string& name(std::size_t id) const { return names_.at(id); }
    [[nodiscard]] std::size_t size() const noexcept { return names_.size(); }

    static IdMap identity(std::size_t n)
    {
        IdMap m;
        for (std::size_t i = 0; i < n; ++i)
            m.intern(std::to_string(i));
        return m;
    }

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Interaction {
    std::size_t user = 0;
    std::size_t item = 0;
    int label = 0;
    std::optional<double> propensity;

    friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct InteractionLog {
    std::vector<Interaction> records;
    IdMap users;
    IdMap items;

    [[nodiscard]] std::size_t size() const noexcept { return records.size(); }
    [[nodiscard]] bool empty() const noexcept { return records.empty(); }
    [[nodiscard]] std::size_t num_users() const noexcept { return users.size(); }
    [[nodiscard]] std::size_t num_items() const noexcept { return items.size(); }

    /// Same id space, no records.
    [[nodiscard]] InteractionLog empty_like() const
    {
        InteractionLog out;
        out.users = users;
        out.items = items;
        return out;
    }
};

struct DatasetBundle {
    InteractionLog train;
    InteractionLog validation;
    InteractionLog test;
    std::optional<Tensor> user_features;
    std::optional<Tensor> item_features;
    std::size_t num_users = 0;
    std::size_t num_items = 0;
};

/// Item observation frequencies p_i = T_i / T over a training log.
struct ItemMarginals {
    std::vector<double> p;
    std::vector<std::size_t> counts;
    std::size_t total = 0;

    [[nodiscard]] std::size_t num_items() const noexcept { return p.size(); }
};

namespace detail {

inline std::vector<std::string_view> split_on(std::string_view s, char sep)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

inline std::optional<double> parse_double(std::string_view s)
{
    if (s.empty())
        return std::nullopt;
    std::string tmp(s);
    char* end = nullptr;
    const double v = std::strtod(tmp.c_str(), &end);
    if (end != tmp.c_str() + tmp.size())
        return std::nullopt;
    return v;
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v)
{
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{})
        throw std::runtime_error("format_double: conversion failed");
    return std::string(buf, ptr);
}

inline std::string_view strip_cr(std::string_view line)
{
    if (!line.empty() && line.back() == '\r')
        line.remove_suffix(1);
    return line;
}

} // namespace detail

/// Parses `user<TAB>item<TAB>label[<TAB>propensity]` from a stream. Ids are
/// interned into the given maps, so several files can share one id space.
inline InteractionLog parse_tsv(std::istream& in, bool has_propensity, IdMap users = {},
                                IdMap items = {}, const std::string& source = "<stream>")
{
    InteractionLog log;
    log.users = std::move(users);
    log.items = std::move(items);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view row = detail::strip_cr(line);
        if (row.empty())
            continue;
        const auto fields = detail::split_on(row, '\t');
        const std::size_t expected = has_propensity ? 4 : 3;
        if (fields.size() != expected)
            throw ParseError(source, lineno,
                             "expected " + std::to_string(expected) + " tab-separated fields, got " +
                                 std::to_string(fields.size()));
        if (fields[0].empty() || fields[1].empty())
            throw ParseError(source, lineno, "empty id");
        Interaction rec;
        if (fields[2] == "0")
            rec.label = 0;
        else if (fields[2] == "1")
            rec.label = 1;
        else
            throw ParseError(source, lineno, "label must be 0 or 1, got '" + std::string(fields[2]) + "'");
        if (has_propensity) {
            const auto p = detail::parse_double(fields[3]);
            if (!p || !(*p > 0.0) || *p > 1.0)
                throw ParseError(source, lineno, "propensity must be a real in (0, 1]");
            rec.propensity = *p;
        }
        rec.user = log.users.intern(std::string(fields[0]));
        rec.item = log.items.intern(std::string(fields[1]));
        log.records.push_back(rec);
    }
    return log;
}

inline InteractionLog load_tsv(const std::string& path, bool has_propensity, IdMap users = {},
                               IdMap items = {})
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("load_tsv: cannot open " + path);
    return parse_tsv(in, has_propensity, std::move(users), std::move(items), path);
}

/// Writes records with their original ids. Propensities are written only when
/// every record carries one.
inline void write_tsv(std::ostream& out, const InteractionLog& log)
{
    const bool with_prop = !log.empty() && std::all_of(log.records.begin(), log.records.end(),
                                                       [](const auto& r) { return r.propensity.has_value(); });
    for (const auto& r : log.records) {
        out << log.users.name(r.user) << '\t' << log.items.name(r.item) << '\t' << r.label;
        if (with_prop)
            out << '\t' << detail::format_double(*r.propensity);
        out << '\n';
    }
}

inline void export_tsv(const std::string& path, const InteractionLog& log)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("export_tsv: cannot open " + path);
    write_tsv(out, log);
}

/// Writes `<prefix>.train`, `<prefix>.val` and `<prefix>.test`.
inline void export_splits(const std::string& prefix, const DatasetBundle& bundle)
{
    export_tsv(prefix + ".train", bundle.train);
    export_tsv(prefix + ".val", bundle.validation);
    export_tsv(prefix + ".test", bundle.test);
}

/// Reads `id<TAB>v1,v2,...,vd` rows; every id in `ids` must appear once.
inline Tensor load_features(const std::string& path, const IdMap& ids)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("load_features: cannot open " + path);
    std::vector<std::optional<std::vector<double>>> rows(ids.size());
    std::size_t dim = 0;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view row = detail::strip_cr(line);
        if (row.empty())
            continue;
        const auto fields = detail::split_on(row, '\t');
        if (fields.size() != 2)
            throw ParseError(path, lineno, "expected id<TAB>comma-separated values");
        std::vector<double> values;
        for (auto v : detail::split_on(fields[1], ',')) {
            const auto d = detail::parse_double(v);
            if (!d || !std::isfinite(*d))
                throw ParseError(path, lineno, "bad feature value '" + std::string(v) + "'");
            values.push_back(*d);
        }
        if (dim == 0)
            dim = values.size();
        else if (values.size() != dim)
            throw ParseError(path, lineno, "feature width changed");
        const auto id = ids.find(std::string(fields[0]));
        if (!id)
            continue;
        if (rows[*id])
            throw ParseError(path, lineno, "duplicate id '" + std::string(fields[0]) + "'");
        rows[*id] = std::move(values);
    }
    if (ids.size() == 0)
        throw std::runtime_error("load_features: no ids to match");
    Tensor out(Shape{ids.size(), std::max<std::size_t>(dim, 1)});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!rows[i])
            throw std::runtime_error("load_features: " + path + " has no row for id '" + ids.name(i) + "'");
        std::copy(rows[i]->begin(), rows[i]->end(), out.row(i).begin());
    }
    return out;
}

inline void export_features(const std::string& path, const Tensor& features, const IdMap& ids)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("export_features: cannot open " + path);
    for (std::size_t i = 0; i < features.rows(); ++i) {
        out << ids.name(i) << '\t';
        const auto r = features.row(i);
        for (std::size_t j = 0; j < r.size(); ++j)
            out << (j ? "," : "") << detail::format_double(r[j]);
        out << '\n';
    }
}

struct SplitRatios {
    double train = 0.7;
    double validation = 0.1;
    double test = 0.2;
};

/// Per-user seeded shuffle and partition. Users with fewer than three distinct
/// items keep everything in train. Repeated (user, item) records stay together.
inline DatasetBundle split_by_user(const InteractionLog& log, SplitRatios ratios, std::uint64_t seed)
{
    if (!(ratios.train > 0.0) || ratios.validation < 0.0 || ratios.test < 0.0 ||
        std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9)
        throw std::invalid_argument("split_by_user: ratios must be nonnegative (train positive) and sum to 1");

    // Distinct items per user, in first-appearance order.
    std::vector<std::vector<std::size_t>> user_items(log.num_users());
    std::map<std::pair<std::size_t, std::size_t>, int> assignment;
    for (const auto& r : log.records)
        if (assignment.try_emplace({r.user, r.item}, 0).second)
            user_items[r.user].push_back(r.item);

    for (std::size_t u = 0; u < user_items.size(); ++u) {
        auto& items = user_items[u];
        const std::size_t n = items.size();
        if (n < 3)
            continue;
        Rng rng = make_rng(derive_seed(seed, streams::split), u);
        std::shuffle(items.begin(), items.end(), rng);
        const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.train));
        auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.validation));
        const std::size_t keep_train = std::min(n_train, n);
        n_val = std::min(n_val, n - keep_train);
        for (std::size_t k = 0; k < n; ++k) {
            const int split = k < keep_train ? 0 : (k < keep_train + n_val ? 1 : 2);
            assignment[{u, items[k]}] = split;
        }
    }

    DatasetBundle out;
    out.train = log.empty_like();
    out.validation = log.empty_like();
    out.test = log.empty_like();
    for (const auto& r : log.records) {
        switch (assignment[{r.user, r.item}]) {
        case 0: out.train.records.push_back(r); break;
        case 1: out.validation.records.push_back(r); break;
        default: out.test.records.push_back(r); break;
        }
    }
    out.num_users = log.num_users();
    out.num_items = log.num_items();
    return out;
}

inline ItemMarginals item_marginals(const InteractionLog& train, std::size_t num_items)
{
    if (train.empty())
        throw std::invalid_argument("item_marginals: training log is empty");
    ItemMarginals m;
    m.counts.assign(num_items, 0);
    for (const auto& r : train.records) {
        if (r.item >= num_items)
            throw std::out_of_range("item_marginals: item id " + std::to_string(r.item) + " >= num_items");
        ++m.counts[r.item];
    }
    m.total = train.size();
    m.p.resize(num_items);
    for (std::size_t i = 0; i < num_items; ++i)
        m.p[i] = static_cast<double>(m.counts[i]) / static_cast<double>(m.total);
    return m;
}

/// Keeps each record with probability f_min / f(item), which equalizes the
/// expected per-item counts at the rarest item's frequency.
inline std::vector<double> uniform_keep_probabilities(const InteractionLog& test)
{
    std::vector<std::size_t> freq(test.num_items(), 0);
    for (const auto& r : test.records)
        ++freq[r.item];
    std::size_t f_min = 0;
    for (std::size_t f : freq)
        if (f > 0 && (f_min == 0 || f < f_min))
            f_min = f;
    std::vector<double> keep(freq.size(), 0.0);
    for (std::size_t i = 0; i < freq.size(); ++i)
        if (freq[i] > 0)
            keep[i] = static_cast<double>(f_min) / static_cast<double>(freq[i]);
    return keep;
}

inline InteractionLog resample_uniform_test(const InteractionLog& test, std::uint64_t seed)
{
    if (test.empty())
        throw std::invalid_argument("resample_uniform_test: test log is empty");
    const auto keep = uniform_keep_probabilities(test);
    Rng rng = make_rng(seed, streams::resample);
    InteractionLog out = test.empty_like();
    for (const auto& r : test.records)
        if (uniform01(rng) < keep[r.item])
            out.records.push_back(r);
    return out;
}

/// Keeps each record independently with probability tau.
inline InteractionLog subsample(const InteractionLog& log, double tau, std::uint64_t seed)
{
    if (!(tau > 0.0) || tau > 1.0)
        throw std::invalid_argument("subsample: tau must be in (0, 1]");
    if (tau == 1.0)
        return log;
    Rng rng = make_rng(seed, streams::subsample);
    InteractionLog out = log.empty_like();
    for (const auto& r : log.records)
        if (uniform01(rng) < tau)
            out.records.push_back(r);
    return out;
}

} // namespace cbr
