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

// Define-by-run reverse-mode differentiation over dense double tensors.
// A Graph records every kernel application in creation order, which is a
// topological order by construction. Leaves are either constants or trainable
// parameters; backward() returns gradients for the trainable ones only.

#include "cbr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cbr {

struct NodeId {
    std::size_t index = 0;
    friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

enum class Kernel {
    leaf,
    matmul,
    add,
    sub,
    elementwise_mul,
    affine,
    concat,
    relu,
    sigmoid,
    softmax,
    embed_lookup,
    pick_cols,
    reduce_mean,
    reduce_sum,
    mean_rows,
    log,
    exp,
    sqrt,
    square,
    clamp,
    pairwise_sqdist,
    reshape,
};

inline std::string_view kernel_name(Kernel k)
{
    switch (k) {
    case Kernel::leaf: return "leaf";
    case Kernel::matmul: return "matmul";
    case Kernel::add: return "add";
    case Kernel::sub: return "sub";
    case Kernel::elementwise_mul: return "elementwise_mul";
    case Kernel::affine: return "affine";
    case Kernel::concat: return "concat";
    case Kernel::relu: return "relu";
    case Kernel::sigmoid: return "sigmoid";
    case Kernel::softmax: return "softmax";
    case Kernel::embed_lookup: return "embed_lookup";
    case Kernel::pick_cols: return "pick_cols";
    case Kernel::reduce_mean: return "reduce_mean";
    case Kernel::reduce_sum: return "reduce_sum";
    case Kernel::mean_rows: return "mean_rows";
    case Kernel::log: return "log";
    case Kernel::exp: return "exp";
    case Kernel::sqrt: return "sqrt";
    case Kernel::square: return "square";
    case Kernel::clamp: return "clamp";
    case Kernel::pairwise_sqdist: return "pairwise_sqdist";
    case Kernel::reshape: return "reshape";
    }
    return "unknown";
}

/// Non-differentiable kernel arguments, frozen at graph construction.
struct KernelArgs {
    std::vector<std::size_t> indices = {}; // embed_lookup rows, pick_cols columns
    double a = 0.0;                        // affine scale, clamp low
    double b = 0.0;                        // affine offset, clamp high
    Shape shape = {};                      // reshape target
};

namespace kernels {

inline double sigmoid(double x)
{
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace detail {

[[noreturn]] inline void reject(Kernel k, const std::string& why,
                                const std::vector<const Tensor*>& in)
{
    std::string msg(kernel_name(k));
    msg += ": " + why + " (operand shapes";
    for (const Tensor* t : in)
        msg += " " + shape_string(t->shape());
    msg += ")";
    throw ShapeError(msg);
}

inline void require_arity(Kernel k, const std::vector<const Tensor*>& in, std::size_t n)
{
    if (in.size() != n)
        reject(k, "expects " + std::to_string(n) + " operand(s), got " +
                      std::to_string(in.size()),
               in);
}

inline bool is_bias_broadcast(const Tensor& m, const Tensor& v)
{
    return m.rank() == 2 && v.rank() == 1 && m.shape()[1] == v.shape()[0];
}

template <typename F>
Tensor map_unary(const Tensor& x, F&& f)
{
    Tensor out(x.shape());
    const auto src = x.values();
    auto dst = out.values();
    for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] = f(src[i]);
    return out;
}

} // namespace detail

/// Evaluates one kernel on concrete operands. Pure function of its inputs.
inline Tensor evaluate(Kernel k, const std::vector<const Tensor*>& in, const KernelArgs& args)
{
    using detail::reject;
    using detail::require_arity;
    switch (k) {
    case Kernel::leaf:
        reject(k, "leaves are not evaluated", in);

    case Kernel::matmul: {
        require_arity(k, in, 2);
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
            reject(k, "inner dimensions do not match", in);
        const std::size_t m = a.shape()[0], n = b.shape()[1], inner = a.shape()[1];
        Tensor out(Shape{m, n});
        const double* ap = a.data().data();
        const double* bp = b.data().data();
        double* op = out.data().data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < inner; ++p) {
                const double av = ap[i * inner + p];
                if (av == 0.0)
                    continue;
                const double* brow = bp + p * n;
                double* orow = op + i * n;
                for (std::size_t j = 0; j < n; ++j)
                    orow[j] += av * brow[j];
            }
        return out;
    }

    case Kernel::add:
    case Kernel::sub:
    case Kernel::elementwise_mul: {
        require_arity(k, in, 2);
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        if (a.shape() == b.shape()) {
            Tensor out(a.shape());
            auto o = out.values();
            const auto av = a.values();
            const auto bv = b.values();
            for (std::size_t i = 0; i < o.size(); ++i)
                o[i] = k == Kernel::add   ? av[i] + bv[i]
                       : k == Kernel::sub ? av[i] - bv[i]
                                          : av[i] * bv[i];
            return out;
        }
        if (k == Kernel::add && detail::is_bias_broadcast(a, b)) {
            Tensor out(a);
            const std::size_t w = b.size();
            auto o = out.values();
            for (std::size_t i = 0; i < o.size(); ++i)
                o[i] += b[i % w];
            return out;
        }
        reject(k, "shapes must match (only bias-vector addition broadcasts)", in);
    }

    case Kernel::affine:
        require_arity(k, in, 1);
        return detail::map_unary(*in[0], [&](double x) { return args.a * x + args.b; });

    case Kernel::concat: {
        if (in.empty())
            reject(k, "needs at least one operand", in);
        const std::size_t r = in[0]->rank();
        if (r != 1 && r != 2)
            reject(k, "operands must be vectors or matrices", in);
        std::size_t width = 0;
        for (const Tensor* t : in) {
            if (t->rank() != r || (r == 2 && t->shape()[0] != in[0]->shape()[0]))
                reject(k, "operands disagree on rank or row count", in);
            width += t->shape().back();
        }
        const std::size_t rows = r == 2 ? in[0]->shape()[0] : 1;
        Tensor out(r == 2 ? Shape{rows, width} : Shape{width});
        auto o = out.values();
        for (std::size_t row = 0; row < rows; ++row) {
            std::size_t off = row * width;
            for (const Tensor* t : in) {
                const std::size_t w = t->shape().back();
                const auto src = t->values().subspan(row * w, w);
                std::copy(src.begin(), src.end(), o.begin() + static_cast<std::ptrdiff_t>(off));
                off += w;
            }
        }
        return out;
    }

    case Kernel::relu:
        require_arity(k, in, 1);
        return detail::map_unary(*in[0], [](double x) { return x > 0.0 ? x : 0.0; });

    case Kernel::sigmoid:
        require_arity(k, in, 1);
        return detail::map_unary(*in[0], [](double x) { return sigmoid(x); });

    case Kernel::softmax: {
        require_arity(k, in, 1);
        const Tensor& x = *in[0];
        if (x.rank() != 1 && x.rank() != 2)
            reject(k, "input must be a vector or a batch of vectors", in);
        Tensor out(x.shape());
        const std::size_t w = x.shape().back();
        const std::size_t rows = x.size() / w;
        for (std::size_t r = 0; r < rows; ++r) {
            const auto src = x.values().subspan(r * w, w);
            auto dst = out.values().subspan(r * w, w);
            const double mx = *std::max_element(src.begin(), src.end());
            double z = 0.0;
            for (std::size_t j = 0; j < w; ++j) {
                dst[j] = std::exp(src[j] - mx);
                z += dst[j];
            }
            for (std::size_t j = 0; j < w; ++j)
                dst[j] /= z;
        }
        return out;
    }

    case Kernel::embed_lookup: {
        require_arity(k, in, 1);
        const Tensor& table = *in[0];
        if (table.rank() != 2)
            reject(k, "table must be a matrix", in);
        if (args.indices.empty())
            reject(k, "needs at least one id", in);
        const std::size_t w = table.shape()[1];
        Tensor out(Shape{args.indices.size(), w});
        for (std::size_t r = 0; r < args.indices.size(); ++r) {
            const std::size_t id = args.indices[r];
            if (id >= table.shape()[0])
                reject(k, "id " + std::to_string(id) + " out of range", in);
            const auto src = table.row(id);
            std::copy(src.begin(), src.end(), out.row(r).begin());
        }
        return out;
    }

    case Kernel::pick_cols: {
        require_arity(k, in, 1);
        const Tensor& m = *in[0];
        if (m.rank() != 2 || args.indices.size() != m.shape()[0])
            reject(k, "needs a matrix and one column index per row", in);
        Tensor out(Shape{m.shape()[0]});
        for (std::size_t r = 0; r < args.indices.size(); ++r) {
            if (args.indices[r] >= m.shape()[1])
                reject(k, "column " + std::to_string(args.indices[r]) + " out of range", in);
            out[r] = m.at(r, args.indices[r]);
        }
        return out;
    }

    case Kernel::reduce_mean:
    case Kernel::reduce_sum: {
        require_arity(k, in, 1);
        double s = 0.0;
        for (double v : in[0]->values())
            s += v;
        if (k == Kernel::reduce_mean)
            s /= static_cast<double>(in[0]->size());
        return Tensor::scalar(s);
    }

    case Kernel::mean_rows: {
        require_arity(k, in, 1);
        const Tensor& m = *in[0];
        if (m.rank() != 2)
            reject(k, "input must be a matrix", in);
        const std::size_t rows = m.shape()[0], w = m.shape()[1];
        Tensor out(Shape{w});
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j)
                out[j] += m.at(r, j);
        for (std::size_t j = 0; j < w; ++j)
            out[j] /= static_cast<double>(rows);
        return out;
    }

    case Kernel::log:
        require_arity(k, in, 1);
        return detail::map_unary(*in[0], [](double x) { return std::log(x); });

    case Kernel::exp:
        require_arity(k, in, 1);
        return detail::map_unary(*in[0], [](double x) { return std::exp(x); });

    case Kernel::sqrt:
        require_arity(k, in, 1);
        for (double v : in[0]->values())
            if (v < 0.0)
                throw NonFiniteError("sqrt: negative operand");
        return detail::map_unary(*in[0], [](double x) { return std::sqrt(x); });

    case Kernel::square:
        require_arity(k, in, 1);
        return detail::map_unary(*in[0], [](double x) { return x * x; });

    case Kernel::clamp:
        require_arity(k, in, 1);
        if (!(args.a <= args.b))
            reject(k, "clamp bounds out of order", in);
        return detail::map_unary(*in[0], [&](double x) { return std::clamp(x, args.a, args.b); });

    case Kernel::pairwise_sqdist: {
        require_arity(k, in, 2);
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
            reject(k, "operands must be matrices of equal width", in);
        const std::size_t m = a.shape()[0], n = b.shape()[0], w = a.shape()[1];
        Tensor out(Shape{m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t p = 0; p < w; ++p) {
                    const double d = a.at(i, p) - b.at(j, p);
                    s += d * d;
                }
                out.at(i, j) = s;
            }
        return out;
    }

    case Kernel::reshape: {
        require_arity(k, in, 1);
        if (shape_size(args.shape) != in[0]->size())
            reject(k, "target " + shape_string(args.shape) + " changes the element count", in);
        return Tensor(args.shape, in[0]->data());
    }
    }
    reject(k, "unknown kernel", in);
}

/// Accumulates d(loss)/d(input) for every operand given d(loss)/d(output).
/// grads[i] is null when input i does not need a gradient.
inline void backpropagate(Kernel k, const std::vector<const Tensor*>& in, const Tensor& out,
                          const Tensor& g, const KernelArgs& args, const std::vector<Tensor*>& grads)
{
    auto want = [&](std::size_t i) { return grads[i] != nullptr; };
    switch (k) {
    case Kernel::leaf:
        return;

    case Kernel::matmul: {
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        const std::size_t m = a.shape()[0], n = b.shape()[1], inner = a.shape()[1];
        const double* gp = g.data().data();
        if (want(0)) {
            double* da = grads[0]->data().data();
            const double* bp = b.data().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < inner; ++p) {
                    double s = 0.0;
                    const double* grow = gp + i * n;
                    const double* brow = bp + p * n;
                    for (std::size_t j = 0; j < n; ++j)
                        s += grow[j] * brow[j];
                    da[i * inner + p] += s;
                }
        }
        if (want(1)) {
            double* db = grads[1]->data().data();
            const double* ap = a.data().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < inner; ++p) {
                    const double av = ap[i * inner + p];
                    if (av == 0.0)
                        continue;
                    const double* grow = gp + i * n;
                    double* drow = db + p * n;
                    for (std::size_t j = 0; j < n; ++j)
                        drow[j] += av * grow[j];
                }
        }
        return;
    }

    case Kernel::add:
    case Kernel::sub: {
        const auto gv = g.values();
        if (want(0)) {
            auto d = grads[0]->values();
            for (std::size_t i = 0; i < gv.size(); ++i)
                d[i] += gv[i];
        }
        if (want(1)) {
            auto d = grads[1]->values();
            const double sign = k == Kernel::sub ? -1.0 : 1.0;
            const std::size_t w = d.size();
            for (std::size_t i = 0; i < gv.size(); ++i)
                d[i % w] += sign * gv[i];
        }
        return;
    }

    case Kernel::elementwise_mul: {
        const auto gv = g.values();
        for (std::size_t s = 0; s < 2; ++s) {
            if (!want(s))
                continue;
            auto d = grads[s]->values();
            const auto other = in[1 - s]->values();
            for (std::size_t i = 0; i < gv.size(); ++i)
                d[i] += gv[i] * other[i];
        }
        return;
    }

    case Kernel::affine: {
        if (!want(0))
            return;
        auto d = grads[0]->values();
        const auto gv = g.values();
        for (std::size_t i = 0; i < gv.size(); ++i)
            d[i] += args.a * gv[i];
        return;
    }

    case Kernel::concat: {
        const std::size_t width = out.shape().back();
        const std::size_t rows = out.size() / width;
        const auto gv = g.values();
        for (std::size_t row = 0; row < rows; ++row) {
            std::size_t off = row * width;
            for (std::size_t s = 0; s < in.size(); ++s) {
                const std::size_t w = in[s]->shape().back();
                if (want(s)) {
                    auto d = grads[s]->values().subspan(row * w, w);
                    for (std::size_t j = 0; j < w; ++j)
                        d[j] += gv[off + j];
                }
                off += w;
            }
        }
        return;
    }

    case Kernel::relu:
    case Kernel::sigmoid:
    case Kernel::log:
    case Kernel::exp:
    case Kernel::sqrt:
    case Kernel::square:
    case Kernel::clamp: {
        if (!want(0))
            return;
        auto d = grads[0]->values();
        const auto x = in[0]->values();
        const auto y = out.values();
        const auto gv = g.values();
        for (std::size_t i = 0; i < gv.size(); ++i) {
            double local = 0.0;
            switch (k) {
            case Kernel::relu: local = x[i] > 0.0 ? 1.0 : 0.0; break;
            case Kernel::sigmoid: local = y[i] * (1.0 - y[i]); break;
            case Kernel::log: local = 1.0 / x[i]; break;
            case Kernel::exp: local = y[i]; break;
            case Kernel::sqrt: local = y[i] > 0.0 ? 0.5 / y[i] : 0.0; break;
            case Kernel::square: local = 2.0 * x[i]; break;
            case Kernel::clamp: local = (x[i] >= args.a && x[i] <= args.b) ? 1.0 : 0.0; break;
            default: break;
            }
            d[i] += gv[i] * local;
        }
        return;
    }

    case Kernel::softmax: {
        if (!want(0))
            return;
        const std::size_t w = out.shape().back();
        const std::size_t rows = out.size() / w;
        auto d = grads[0]->values();
        for (std::size_t r = 0; r < rows; ++r) {
            const auto y = out.values().subspan(r * w, w);
            const auto gv = g.values().subspan(r * w, w);
            double dot = 0.0;
            for (std::size_t j = 0; j < w; ++j)
                dot += gv[j] * y[j];
            for (std::size_t j = 0; j < w; ++j)
                d[r * w + j] += y[j] * (gv[j] - dot);
        }
        return;
    }

    case Kernel::embed_lookup: {
        if (!want(0))
            return;
        Tensor& d = *grads[0];
        const std::size_t w = d.shape()[1];
        for (std::size_t r = 0; r < args.indices.size(); ++r) {
            auto drow = d.row(args.indices[r]);
            const auto grow = g.values().subspan(r * w, w);
            for (std::size_t j = 0; j < w; ++j)
                drow[j] += grow[j];
        }
        return;
    }

    case Kernel::pick_cols: {
        if (!want(0))
            return;
        Tensor& d = *grads[0];
        for (std::size_t r = 0; r < args.indices.size(); ++r)
            d.at(r, args.indices[r]) += g[r];
        return;
    }

    case Kernel::reduce_mean:
    case Kernel::reduce_sum: {
        if (!want(0))
            return;
        const double scale = k == Kernel::reduce_mean ? 1.0 / static_cast<double>(in[0]->size()) : 1.0;
        const double gs = g.item() * scale;
        for (double& v : grads[0]->values())
            v += gs;
        return;
    }

    case Kernel::mean_rows: {
        if (!want(0))
            return;
        Tensor& d = *grads[0];
        const std::size_t rows = d.shape()[0], w = d.shape()[1];
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j)
                d.at(r, j) += g[j] * inv;
        return;
    }

    case Kernel::pairwise_sqdist: {
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        const std::size_t m = a.shape()[0], n = b.shape()[0], w = a.shape()[1];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double gij = 2.0 * g.at(i, j);
                if (gij == 0.0)
                    continue;
                for (std::size_t p = 0; p < w; ++p) {
                    const double diff = a.at(i, p) - b.at(j, p);
                    if (want(0))
                        grads[0]->at(i, p) += gij * diff;
                    if (want(1))
                        grads[1]->at(j, p) -= gij * diff;
                }
            }
        return;
    }

    case Kernel::reshape: {
        if (!want(0))
            return;
        auto d = grads[0]->values();
        const auto gv = g.values();
        for (std::size_t i = 0; i < gv.size(); ++i)
            d[i] += gv[i];
        return;
    }
    }
}

} // namespace kernels

/// Gradients keyed by trainable leaf, in node order.
class Gradients {
public:
    void set(NodeId id, Tensor g) { grads_[id] = std::move(g); }

    [[nodiscard]] const Tensor& at(NodeId id) const
    {
        auto it = grads_.find(id);
        if (it == grads_.end())
            throw std::out_of_range("no gradient recorded for node " + std::to_string(id.index));
        return it->second;
    }
    [[nodiscard]] Tensor& at(NodeId id) { return const_cast<Tensor&>(std::as_const(*this).at(id)); }
    [[nodiscard]] bool contains(NodeId id) const { return grads_.contains(id); }
    [[nodiscard]] std::size_t size() const { return grads_.size(); }

    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }

private:
    std::map<NodeId, Tensor> grads_;
};

class Graph {
public:
    NodeId constant(Tensor value) { return add_leaf(std::move(value), false, {}); }

    NodeId parameter(std::string name, Tensor value)
    {
        return add_leaf(std::move(value), true, std::move(name));
    }

    /// Records a kernel application and returns the new node.
    NodeId apply(Kernel kind, const std::vector<NodeId>& inputs, KernelArgs args = {})
    {
        if (kind == Kernel::leaf)
            throw std::invalid_argument("apply: use constant() or parameter() for leaves");
        std::vector<const Tensor*> operands;
        operands.reserve(inputs.size());
        for (NodeId id : inputs)
            operands.push_back(&node(id).value);
        Tensor value = kernels::evaluate(kind, operands, args);
        if (!value.all_finite())
            throw NonFiniteError(std::string(kernel_name(kind)) + ": produced a non-finite value");
        Node n;
        n.kind = kind;
        n.inputs = inputs;
        n.args = std::move(args);
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return NodeId{nodes_.size() - 1};
    }

    NodeId matmul(NodeId a, NodeId b) { return apply(Kernel::matmul, {a, b}); }
    NodeId add(NodeId a, NodeId b) { return apply(Kernel::add, {a, b}); }
    NodeId sub(NodeId a, NodeId b) { return apply(Kernel::sub, {a, b}); }
    NodeId mul(NodeId a, NodeId b) { return apply(Kernel::elementwise_mul, {a, b}); }
    NodeId affine(NodeId x, double scale, double offset)
    {
        return apply(Kernel::affine, {x}, KernelArgs{.a = scale, .b = offset});
    }
    NodeId scale(NodeId x, double s) { return affine(x, s, 0.0); }
    NodeId concat(const std::vector<NodeId>& parts) { return apply(Kernel::concat, parts); }
    NodeId relu(NodeId x) { return apply(Kernel::relu, {x}); }
    NodeId sigmoid(NodeId x) { return apply(Kernel::sigmoid, {x}); }
    NodeId softmax(NodeId x) { return apply(Kernel::softmax, {x}); }
    NodeId embed_lookup(NodeId table, std::vector<std::size_t> ids)
    {
        return apply(Kernel::embed_lookup, {table}, KernelArgs{.indices = std::move(ids)});
    }
    NodeId pick_cols(NodeId m, std::vector<std::size_t> cols)
    {
        return apply(Kernel::pick_cols, {m}, KernelArgs{.indices = std::move(cols)});
    }
    NodeId reduce_mean(NodeId x) { return apply(Kernel::reduce_mean, {x}); }
    NodeId reduce_sum(NodeId x) { return apply(Kernel::reduce_sum, {x}); }
    NodeId mean_rows(NodeId x) { return apply(Kernel::mean_rows, {x}); }
    NodeId log(NodeId x) { return apply(Kernel::log, {x}); }
    NodeId exp(NodeId x) { return apply(Kernel::exp, {x}); }
    NodeId sqrt(NodeId x) { return apply(Kernel::sqrt, {x}); }
    NodeId square(NodeId x) { return apply(Kernel::square, {x}); }
    NodeId clamp(NodeId x, double lo, double hi)
    {
        return apply(Kernel::clamp, {x}, KernelArgs{.a = lo, .b = hi});
    }
    NodeId pairwise_sqdist(NodeId a, NodeId b) { return apply(Kernel::pairwise_sqdist, {a, b}); }
    NodeId reshape(NodeId x, Shape shape)
    {
        return apply(Kernel::reshape, {x}, KernelArgs{.shape = std::move(shape)});
    }

    [[nodiscard]] const Tensor& value(NodeId id) const { return node(id).value; }
    [[nodiscard]] Kernel kind(NodeId id) const { return node(id).kind; }
    [[nodiscard]] bool is_parameter(NodeId id) const { return node(id).trainable; }
    [[nodiscard]] const std::string& name(NodeId id) const { return node(id).name; }
    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

    [[nodiscard]] std::vector<NodeId> parameters() const
    {
        std::vector<NodeId> out;
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (nodes_[i].trainable)
                out.push_back(NodeId{i});
        return out;
    }

    [[nodiscard]] std::optional<NodeId> find_parameter(std::string_view name) const
    {
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (nodes_[i].trainable && nodes_[i].name == name)
                return NodeId{i};
        return std::nullopt;
    }

    /// Reverse sweep from a scalar node. Does not mutate the graph.
    [[nodiscard]] Gradients backward(NodeId loss) const
    {
        const Node& root = node(loss);
        if (root.value.size() != 1)
            throw ShapeError("backward: loss must be a scalar, got shape " +
                             shape_string(root.value.shape()));

        // Only nodes that lie on a path from a trainable leaf need gradients.
        std::vector<char> needs(nodes_.size(), 0);
        for (std::size_t i = 0; i <= loss.index; ++i) {
            const Node& n = nodes_[i];
            if (n.trainable) {
                needs[i] = 1;
                continue;
            }
            for (NodeId in : n.inputs)
                if (needs[in.index]) {
                    needs[i] = 1;
                    break;
                }
        }

        std::vector<std::optional<Tensor>> adj(loss.index + 1);
        adj[loss.index] = Tensor(root.value.shape(), 1.0);
        for (std::size_t i = loss.index + 1; i-- > 0;) {
            if (!adj[i] || nodes_[i].kind == Kernel::leaf)
                continue;
            const Node& n = nodes_[i];
            std::vector<const Tensor*> operands;
            std::vector<Tensor*> targets;
            for (NodeId in : n.inputs) {
                operands.push_back(&nodes_[in.index].value);
                if (needs[in.index]) {
                    if (!adj[in.index])
                        adj[in.index] = Tensor(nodes_[in.index].value.shape(), 0.0);
                    targets.push_back(&*adj[in.index]);
                } else {
                    targets.push_back(nullptr);
                }
            }
            kernels::backpropagate(n.kind, operands, n.value, *adj[i], n.args, targets);
            adj[i].reset();
        }

        Gradients out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (!nodes_[i].trainable)
                continue;
            if (i < adj.size() && adj[i])
                out.set(NodeId{i}, std::move(*adj[i]));
            else
                out.set(NodeId{i}, Tensor(nodes_[i].value.shape(), 0.0));
        }
        return out;
    }

    /// Replaces a leaf value and re-evaluates every later node.
    void set_leaf(NodeId id, Tensor value)
    {
        Node& n = nodes_.at(id.index);
        if (n.kind != Kernel::leaf)
            throw std::invalid_argument("set_leaf: node is not a leaf");
        if (value.shape() != n.value.shape())
            throw ShapeError("set_leaf: shape " + shape_string(value.shape()) + " != " +
                             shape_string(n.value.shape()));
        n.value = std::move(value);
        replay_from(id.index + 1);
    }

    /// Overwrites one element of a leaf and re-evaluates later nodes.
    void set_leaf_element(NodeId id, std::size_t element, double v)
    {
        Node& n = nodes_.at(id.index);
        if (n.kind != Kernel::leaf)
            throw std::invalid_argument("set_leaf_element: node is not a leaf");
        n.value[element] = v;
        replay_from(id.index + 1);
    }

private:
    struct Node {
        Kernel kind = Kernel::leaf;
        std::vector<NodeId> inputs;
        KernelArgs args;
        Tensor value;
        bool trainable = false;
        std::string name;
    };

    NodeId add_leaf(Tensor value, bool trainable, std::string name)
    {
        if (value.size() == 0)
            throw ShapeError("leaf tensors must be nonempty");
        if (!value.all_finite())
            throw NonFiniteError("leaf '" + name + "' holds a non-finite value");
        Node n;
        n.value = std::move(value);
        n.trainable = trainable;
        n.name = std::move(name);
        nodes_.push_back(std::move(n));
        return NodeId{nodes_.size() - 1};
    }

    [[nodiscard]] const Node& node(NodeId id) const
    {
        if (id.index >= nodes_.size())
            throw std::out_of_range("node " + std::to_string(id.index) + " does not exist");
        return nodes_[id.index];
    }

    void replay_from(std::size_t first)
    {
        for (std::size_t i = first; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (n.kind == Kernel::leaf)
                continue;
            std::vector<const Tensor*> operands;
            for (NodeId in : n.inputs)
                operands.push_back(&nodes_[in.index].value);
            n.value = kernels::evaluate(n.kind, operands, n.args);
        }
    }

    std::vector<Node> nodes_;
};

struct GradCheckEntry {
    NodeId parameter;
    std::string name;
    double max_relative_error = 0.0;
    std::size_t worst_element = 0;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    [[nodiscard]] bool passed() const
    {
        return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
    }
    [[nodiscard]] double max_relative_error() const
    {
        double m = 0.0;
        for (const auto& e : entries)
            m = std::max(m, e.max_relative_error);
        return m;
    }
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps vanishing gradients from
/// turning round-off into huge ratios.
inline double gradient_relative_error(double analytic, double numeric, double floor = 1e-6)
{
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

/// Compares supplied gradients against central differences of the recorded graph.
inline GradCheckReport check_gradients(Graph& graph, NodeId loss, const Gradients& analytic,
                                       double step, double tol)
{
    if (!(step > 0.0) || !(tol > 0.0))
        throw std::invalid_argument("check_gradients: step and tol must be positive");
    GradCheckReport report;
    for (NodeId p : graph.parameters()) {
        GradCheckEntry entry{.parameter = p, .name = graph.name(p)};
        const Tensor& g = analytic.at(p);
        const std::size_t n = graph.value(p).size();
        for (std::size_t e = 0; e < n; ++e) {
            const double orig = graph.value(p)[e];
            graph.set_leaf_element(p, e, orig + step);
            const double up = graph.value(loss).item();
            graph.set_leaf_element(p, e, orig - step);
            const double down = graph.value(loss).item();
            graph.set_leaf_element(p, e, orig);
            const double numeric = (up - down) / (2.0 * step);
            const double err = gradient_relative_error(g[e], numeric);
            if (err > entry.max_relative_error) {
                entry.max_relative_error = err;
                entry.worst_element = e;
            }
        }
        entry.passed = entry.max_relative_error <= tol;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

inline GradCheckReport check_gradients(Graph& graph, NodeId loss, double step = 1e-5,
                                       double tol = 1e-4)
{
    const Gradients analytic = graph.backward(loss);
    return check_gradients(graph, loss, analytic, step, tol);
}

} // namespace cbr
