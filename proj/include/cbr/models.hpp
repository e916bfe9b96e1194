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

// Parameterized functions of the balancing recommender: the user
// representation and projection phi, base scorers (GMF, MLP), the item
// discriminator D, the confounder network c and the exposure network p_s.
// All networks take row-major batches: inputs are [batch, features] and weight
// matrices are [in, out].

#include "cbr/autodiff.hpp"
#include "cbr/enum_names.hpp"
#include "cbr/rng.hpp"
#include "cbr/tensor.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbr {

enum class BaseModel { gmf, mlp };
enum class UserInput { embedding, features, both };
enum class Group { f, phi, D, c, s };

namespace detail {
inline constexpr EnumNames<BaseModel, 2> base_model_names{{{BaseModel::gmf, "gmf"}, {BaseModel::mlp, "mlp"}}};
inline constexpr EnumNames<UserInput, 3> user_input_names{
    {{UserInput::embedding, "embedding"}, {UserInput::features, "features"}, {UserInput::both, "both"}}};
} // namespace detail

inline void to_json(nlohmann::json& j, BaseModel v) { j = detail::enum_to_string(detail::base_model_names, v); }
inline void from_json(const nlohmann::json& j, BaseModel& v)
{
    v = detail::enum_from_json(detail::base_model_names, j, "base model");
}
inline void to_json(nlohmann::json& j, UserInput v) { j = detail::enum_to_string(detail::user_input_names, v); }
inline void from_json(const nlohmann::json& j, UserInput& v)
{
    v = detail::enum_from_json(detail::user_input_names, j, "user_input");
}

inline std::string group_name(Group g)
{
    switch (g) {
    case Group::f: return "f";
    case Group::phi: return "phi";
    case Group::D: return "D";
    case Group::c: return "c";
    case Group::s: return "s";
    }
    return "?";
}

struct ModelConfig {
    BaseModel base = BaseModel::gmf;
    UserInput user_input = UserInput::embedding;
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::size_t user_feature_dim = 0;
    std::size_t embedding_dim = 32;
    std::size_t confounder_dim = 8;
    std::size_t hidden1 = 64;
    std::size_t hidden2 = 32;
    std::size_t disc_hidden = 64;
    double init_std = 0.01;
    /// Dense weights use Glorot-normal scaling; embedding tables always use init_std.
    bool glorot_dense = true;

    [[nodiscard]] std::size_t rep_dim() const noexcept { return embedding_dim; }

    void validate() const
    {
        if (num_users == 0 || num_items < 2)
            throw std::invalid_argument("ModelConfig: need users and at least two items");
        if (embedding_dim == 0 || confounder_dim == 0 || hidden1 == 0 || hidden2 == 0 || disc_hidden == 0)
            throw std::invalid_argument("ModelConfig: widths must be positive");
        if (user_input != UserInput::embedding && user_feature_dim == 0)
            throw std::invalid_argument("ModelConfig: feature-based user input needs user_feature_dim");
        if (!(init_std >= 0.0))
            throw std::invalid_argument("ModelConfig: init_std must be nonnegative");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, base, user_input, num_users, num_items,
                                                user_feature_dim, embedding_dim, confounder_dim, hidden1,
                                                hidden2, disc_hidden, init_std, glorot_dense)

/// Named parameter tensors plus the group each one belongs to.
class ModelBundle {
public:
    ModelBundle() = default;

    /// Allocates every parameter (all groups, regardless of the training
    /// method) and draws normal values in name order.
    ModelBundle(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg)
    {
        cfg_.validate();
        const std::size_t e = cfg.embedding_dim, r = cfg.rep_dim(), cz = cfg.confounder_dim;
        const std::size_t h1 = cfg.hidden1, h2 = cfg.hidden2;
        if (cfg.user_input != UserInput::features)
            declare("phi.user_embedding", Group::phi, {cfg.num_users, e});
        if (cfg.user_input != UserInput::embedding)
            declare("phi.user_feature_weight", Group::phi, {cfg.user_feature_dim, e});
        declare("phi.weight", Group::phi, {e + cz, r});
        declare("f.item_embedding", Group::f, {cfg.num_items, e});
        if (cfg.base == BaseModel::gmf) {
            declare("f.gmf_out", Group::f, {r, 1});
        } else {
            declare("f.mlp_w1", Group::f, {r + e, h1});
            declare("f.mlp_w2", Group::f, {h1, h2});
            declare("f.mlp_out", Group::f, {h2, 1});
        }
        declare("D.w2", Group::D, {r, cfg.disc_hidden});
        declare("D.w1", Group::D, {cfg.disc_hidden, cfg.num_items});
        declare("c.v3", Group::c, {2 * e, h1});
        declare("c.v2", Group::c, {h1, h2});
        declare("c.v1", Group::c, {h2, cz});
        declare("s.q3", Group::s, {2 * e + cz, h1});
        declare("s.q2", Group::s, {h1, h2});
        declare("s.q1", Group::s, {h2, 1});

        Rng rng = make_rng(seed, streams::init);
        for (auto& [name, t] : params_) {
            double sd = cfg.init_std;
            if (cfg.glorot_dense && !name.ends_with("_embedding"))
                sd = std::sqrt(2.0 / static_cast<double>(t.rows() + t.cols()));
            for (double& v : t.values())
                v = sd * standard_normal(rng);
        }
    }

    [[nodiscard]] const ModelConfig& config() const noexcept { return cfg_; }
    [[nodiscard]] const std::map<std::string, Tensor>& parameters() const noexcept { return params_; }

    [[nodiscard]] bool contains(const std::string& name) const { return params_.contains(name); }
    [[nodiscard]] const Tensor& at(const std::string& name) const
    {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::out_of_range("ModelBundle has no parameter '" + name + "'");
        return it->second;
    }
    [[nodiscard]] Tensor& at(const std::string& name) { return const_cast<Tensor&>(std::as_const(*this).at(name)); }

    [[nodiscard]] Group group(const std::string& name) const { return groups_.at(name); }

    [[nodiscard]] std::vector<std::string> names_in(Group g) const
    {
        std::vector<std::string> out;
        for (const auto& [name, grp] : groups_)
            if (grp == g)
                out.push_back(name);
        return out;
    }

    void set(const std::string& name, Tensor value)
    {
        Tensor& slot = at(name);
        if (slot.shape() != value.shape())
            throw ShapeError("parameter '" + name + "' expects shape " + shape_string(slot.shape()) +
                             ", got " + shape_string(value.shape()));
        slot = std::move(value);
    }

    [[nodiscard]] bool all_finite() const
    {
        for (const auto& [n, t] : params_)
            if (!t.all_finite())
                return false;
        return true;
    }

    friend bool operator==(const ModelBundle& a, const ModelBundle& b) { return a.params_ == b.params_; }

private:
    void declare(const std::string& name, Group g, Shape shape)
    {
        params_.emplace(name, Tensor(std::move(shape)));
        groups_.emplace(name, g);
    }

    ModelConfig cfg_;
    std::map<std::string, Tensor> params_;
    std::map<std::string, Group> groups_;
};

/// Binds model parameters into one graph on first use. Parameters of groups in
/// `trainable` become trainable leaves, everything else enters as constants.
class BoundModel {
public:
    BoundModel(Graph& graph, const ModelBundle& model, std::set<Group> trainable,
               const Tensor* user_features = nullptr)
        : graph_(graph), model_(model), trainable_(std::move(trainable)), user_features_(user_features)
    {
    }

    Graph& graph() noexcept { return graph_; }
    [[nodiscard]] const ModelBundle& model() const noexcept { return model_; }
    [[nodiscard]] const ModelConfig& config() const noexcept { return model_.config(); }

    NodeId param(const std::string& name)
    {
        if (auto it = bound_.find(name); it != bound_.end())
            return it->second;
        const Tensor& value = model_.at(name);
        const NodeId id = trainable_.contains(model_.group(name)) ? graph_.parameter(name, value)
                                                                 : graph_.constant(value);
        bound_.emplace(name, id);
        return id;
    }

    /// Graph nodes of every bound trainable parameter, by name.
    [[nodiscard]] std::map<std::string, NodeId> trainable_nodes() const
    {
        std::map<std::string, NodeId> out;
        for (const auto& [name, id] : bound_)
            if (graph_.is_parameter(id))
                out.emplace(name, id);
        return out;
    }

    /// Sum of squared entries over the bound parameters of one group.
    std::optional<NodeId> squared_norm(Group g)
    {
        std::optional<NodeId> total;
        for (const auto& name : model_.names_in(g)) {
            if (!bound_.contains(name))
                continue;
            const NodeId sq = graph_.reduce_sum(graph_.square(bound_.at(name)));
            total = total ? graph_.add(*total, sq) : sq;
        }
        return total;
    }

    /// User representation [batch, embedding_dim].
    NodeId user_rep(const std::vector<std::size_t>& users)
    {
        const UserInput mode = config().user_input;
        std::optional<NodeId> rep;
        if (mode != UserInput::features)
            rep = graph_.embed_lookup(param("phi.user_embedding"), users);
        if (mode != UserInput::embedding) {
            if (user_features_ == nullptr)
                throw std::invalid_argument("user_rep: model uses user features but none were supplied");
            const std::size_t w = user_features_->cols();
            Tensor rows(Shape{users.size(), w});
            for (std::size_t r = 0; r < users.size(); ++r) {
                const auto src = user_features_->row(users[r]);
                std::copy(src.begin(), src.end(), rows.row(r).begin());
            }
            const NodeId projected = graph_.matmul(graph_.constant(std::move(rows)), param("phi.user_feature_weight"));
            rep = rep ? graph_.add(*rep, projected) : projected;
        }
        return *rep;
    }

    NodeId item_rep(const std::vector<std::size_t>& items)
    {
        return graph_.embed_lookup(param("f.item_embedding"), items);
    }

    /// Zero confounder block for a batch, used when confounder modeling is off.
    NodeId zero_confounder(std::size_t batch)
    {
        return graph_.constant(Tensor(Shape{batch, config().confounder_dim}));
    }

    /// phi([user_rep; z]) -> [batch, rep_dim].
    NodeId phi(NodeId user_rep, NodeId z)
    {
        return graph_.matmul(graph_.concat({user_rep, z}), param("phi.weight"));
    }

    /// sigma(w^T (phi_u * v_i)) -> [batch].
    NodeId score_gmf(NodeId phi_u, NodeId item_rep)
    {
        const std::size_t b = graph_.value(phi_u).rows();
        const NodeId logit = graph_.matmul(graph_.mul(phi_u, item_rep), param("f.gmf_out"));
        return graph_.sigmoid(graph_.reshape(logit, {b}));
    }

    /// sigma(out(ReLU(W2 ReLU(W1 [phi_u; v_i])))) -> [batch].
    NodeId score_mlp(NodeId phi_u, NodeId item_rep)
    {
        const std::size_t b = graph_.value(phi_u).rows();
        NodeId h = graph_.relu(graph_.matmul(graph_.concat({phi_u, item_rep}), param("f.mlp_w1")));
        h = graph_.relu(graph_.matmul(h, param("f.mlp_w2")));
        return graph_.sigmoid(graph_.reshape(graph_.matmul(h, param("f.mlp_out")), {b}));
    }

    NodeId score(NodeId phi_u, NodeId item_rep)
    {
        return config().base == BaseModel::gmf ? score_gmf(phi_u, item_rep) : score_mlp(phi_u, item_rep);
    }

    /// softmax(W1 ReLU(W2 phi_u)) -> [batch, num_items].
    NodeId discriminate(NodeId phi_u)
    {
        const NodeId h = graph_.relu(graph_.matmul(phi_u, param("D.w2")));
        return graph_.softmax(graph_.matmul(h, param("D.w1")));
    }

    /// V1 ReLU(V2 ReLU(V3 [u; i])) -> [batch, confounder_dim].
    NodeId infer_confounder(NodeId user_rep, NodeId item_rep)
    {
        NodeId h = graph_.relu(graph_.matmul(graph_.concat({user_rep, item_rep}), param("c.v3")));
        h = graph_.relu(graph_.matmul(h, param("c.v2")));
        return graph_.matmul(h, param("c.v1"));
    }

    /// Q1 ReLU(Q2 ReLU(Q3 [u; i; z])) -> [batch].
    NodeId exposure_logit(NodeId user_rep, NodeId item_rep, NodeId z)
    {
        const std::size_t b = graph_.value(user_rep).rows();
        NodeId h = graph_.relu(graph_.matmul(graph_.concat({user_rep, item_rep, z}), param("s.q3")));
        h = graph_.relu(graph_.matmul(h, param("s.q2")));
        return graph_.reshape(graph_.matmul(h, param("s.q1")), {b});
    }

    NodeId exposure_prob(NodeId user_rep, NodeId item_rep, NodeId z)
    {
        return graph_.sigmoid(exposure_logit(user_rep, item_rep, z));
    }

private:
    Graph& graph_;
    const ModelBundle& model_;
    std::set<Group> trainable_;
    const Tensor* user_features_;
    std::map<std::string, NodeId> bound_;
};

/// Predicted click probabilities for (user, item) pairs, evaluated in chunks.
inline std::vector<double> predict(const ModelBundle& model, const std::vector<std::size_t>& users,
                                   const std::vector<std::size_t>& items, bool use_confounder,
                                   const Tensor* user_features = nullptr, std::size_t chunk = 4096)
{
    if (users.size() != items.size())
        throw std::invalid_argument("predict: users and items differ in length");
    std::vector<double> out;
    out.reserve(users.size());
    for (std::size_t start = 0; start < users.size(); start += chunk) {
        const std::size_t end = std::min(users.size(), start + chunk);
        std::vector<std::size_t> u(users.begin() + static_cast<std::ptrdiff_t>(start),
                                   users.begin() + static_cast<std::ptrdiff_t>(end));
        std::vector<std::size_t> i(items.begin() + static_cast<std::ptrdiff_t>(start),
                                   items.begin() + static_cast<std::ptrdiff_t>(end));
        Graph g;
        BoundModel m(g, model, {}, user_features);
        const NodeId urep = m.user_rep(u);
        const NodeId irep = m.item_rep(i);
        const NodeId z = use_confounder ? m.infer_confounder(urep, irep) : m.zero_confounder(u.size());
        const NodeId s = m.score(m.phi(urep, z), irep);
        const auto v = g.value(s).values();
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

/// Parameter map as JSON: {"config": ..., "parameters": {name: {shape, values}}}.
inline nlohmann::json checkpoint_json(const ModelBundle& model)
{
    nlohmann::json j;
    j["format"] = "cbr-checkpoint";
    j["version"] = 1;
    j["config"] = model.config();
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [name, t] : model.parameters())
        params[name] = {{"shape", t.shape()}, {"values", t.data()}};
    j["parameters"] = std::move(params);
    return j;
}

inline ModelBundle model_from_checkpoint(const nlohmann::json& j)
{
    if (j.value("format", "") != "cbr-checkpoint")
        throw std::invalid_argument("not a cbr checkpoint");
    const ModelConfig cfg = j.at("config").get<ModelConfig>();
    ModelBundle model(cfg, 0);
    for (const auto& [name, t] : model.parameters()) {
        const auto& entry = j.at("parameters").at(name);
        model.set(name, Tensor(entry.at("shape").get<Shape>(), entry.at("values").get<std::vector<double>>()));
    }
    return model;
}

inline void save_checkpoint(const std::string& path, const ModelBundle& model)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << checkpoint_json(model).dump() << '\n';
}

inline ModelBundle load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("load_checkpoint: cannot open " + path);
    return model_from_checkpoint(nlohmann::json::parse(in));
}

} // namespace cbr
