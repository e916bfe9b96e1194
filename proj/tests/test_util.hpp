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

#include "cbr/data.hpp"
#include "cbr/models.hpp"
#include "cbr/rng.hpp"
#include "cbr/tensor.hpp"

#include <cstddef>
#include <random>
#include <vector>

namespace cbr::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& v : t.values())
        v = d(rng);
    return t;
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double lo = 0.0, double hi = 1.0)
{
    std::vector<double> v(n);
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& x : v)
        x = d(rng);
    return v;
}

inline std::size_t random_index(std::size_t n, Rng& rng)
{
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

/// Small widths so finite differences stay cheap.
inline ModelConfig tiny_model(BaseModel base, std::size_t users, std::size_t items,
                              UserInput input = UserInput::embedding, std::size_t feature_dim = 0)
{
    ModelConfig c;
    c.base = base;
    c.user_input = input;
    c.num_users = users;
    c.num_items = items;
    c.user_feature_dim = feature_dim;
    c.embedding_dim = 3;
    c.confounder_dim = 2;
    c.hidden1 = 4;
    c.hidden2 = 3;
    c.disc_hidden = 4;
    c.init_std = 0.5;
    return c;
}

/// Overwrites every parameter with uniform draws in [lo, hi].
inline void randomize(ModelBundle& model, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    for (const auto& [name, t] : model.parameters())
        model.set(name, random_tensor(t.shape(), rng, lo, hi));
}

inline void zero_group(ModelBundle& model, Group g)
{
    for (const auto& name : model.names_in(g))
        model.set(name, Tensor(model.at(name).shape()));
}

/// Log with every user x item pair present once, labels drawn at random.
inline InteractionLog dense_log(std::size_t users, std::size_t items, Rng& rng, double keep = 1.0)
{
    InteractionLog log;
    log.users = IdMap::identity(users);
    log.items = IdMap::identity(items);
    std::bernoulli_distribution label(0.5), kept(keep);
    for (std::size_t u = 0; u < users; ++u)
        for (std::size_t i = 0; i < items; ++i)
            if (kept(rng))
                log.records.push_back({u, i, label(rng) ? 1 : 0, std::nullopt});
    return log;
}

} // namespace cbr::test
