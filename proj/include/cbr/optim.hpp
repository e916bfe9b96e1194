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

// First-order optimizers and global-norm gradient clipping.

#include "cbr/enum_names.hpp"
#include "cbr/tensor.hpp"

#include <json.hpp>

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace cbr {

enum class OptimizerKind { sgd, adam };
enum class Direction { descend, ascend };

namespace detail {
inline constexpr EnumNames<OptimizerKind, 2> optimizer_names{{{OptimizerKind::sgd, "sgd"}, {OptimizerKind::adam, "adam"}}};
} // namespace detail

inline void to_json(nlohmann::json& j, OptimizerKind v) { j = detail::enum_to_string(detail::optimizer_names, v); }
inline void from_json(const nlohmann::json& j, OptimizerKind& v)
{
    v = detail::enum_from_json(detail::optimizer_names, j, "optimizer");
}

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Per-parameter optimizer memory. Moments are allocated on the first Adam step.
struct SlotState {
    Tensor m;
    Tensor v;
    std::size_t t = 0;
};

/// One update of `param` in place. Ascent negates the gradient.
inline void optimizer_step(Tensor& param, const Tensor& grad, SlotState& state, OptimizerKind kind, double lr,
                           Direction dir = Direction::descend, const AdamHyper& hyper = {})
{
    if (param.shape() != grad.shape())
        throw ShapeError("optimizer_step: parameter " + shape_string(param.shape()) + " vs gradient " +
                         shape_string(grad.shape()));
    const double sign = dir == Direction::descend ? 1.0 : -1.0;
    auto p = param.values();
    const auto g = grad.values();
    if (kind == OptimizerKind::sgd) {
        for (std::size_t k = 0; k < p.size(); ++k)
            p[k] -= sign * lr * g[k];
        ++state.t;
        return;
    }
    if (state.t == 0) {
        state.m = Tensor(param.shape());
        state.v = Tensor(param.shape());
    }
    ++state.t;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);
    auto m = state.m.values();
    auto v = state.v.values();
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = sign * g[k];
        m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * gk;
        v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * gk * gk;
        p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + hyper.eps);
    }
}

/// L2 norm over every gradient tensor together.
inline double global_norm(const std::map<std::string, Tensor>& grads)
{
    double s = 0.0;
    for (const auto& [name, g] : grads)
        s += g.squared_norm();
    return std::sqrt(s);
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm)
{
    const double norm = global_norm(grads);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& [name, g] : grads)
            for (double& x : g.values())
                x *= f;
    }
    return norm;
}

} // namespace cbr
