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

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cbr {

using Shape = std::vector<std::size_t>;

/// Raised when kernel operands do not conform to the kernel's shape rules.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a kernel receives NaN or infinite values.
class NonFiniteError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

inline std::string shape_string(const Shape& shape)
{
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0)
            out << ',';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

inline std::size_t shape_size(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>{});
}

/// Dense row-major array of doubles. Rank 0 denotes a scalar.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), values_(shape_size(shape_), fill)
    {
        validate_shape();
    }

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values))
    {
        validate_shape();
        if (values_.size() != shape_size(shape_))
            throw ShapeError("tensor of shape " + shape_string(shape_) +
                             " cannot hold " + std::to_string(values_.size()) +
                             " values");
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor vector(std::vector<double> v)
    {
        const std::size_t n = v.size();
        return Tensor(Shape{n}, std::move(v));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols,
                         std::initializer_list<double> v)
    {
        return Tensor(Shape{rows, cols}, std::vector<double>(v));
    }

    static Tensor identity(std::size_t n)
    {
        Tensor t(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i)
            t.values_[i * n + i] = 1.0;
        return t;
    }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
    [[nodiscard]] bool is_scalar() const noexcept { return values_.size() == 1 && shape_.empty(); }

    [[nodiscard]] std::size_t rows() const
    {
        if (shape_.size() != 2)
            throw ShapeError("rows() requires a matrix, got " + shape_string(shape_));
        return shape_[0];
    }
    [[nodiscard]] std::size_t cols() const
    {
        if (shape_.size() != 2)
            throw ShapeError("cols() requires a matrix, got " + shape_string(shape_));
        return shape_[1];
    }

    [[nodiscard]] std::span<double> values() noexcept { return values_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
    [[nodiscard]] std::vector<double>& data() noexcept { return values_; }
    [[nodiscard]] const std::vector<double>& data() const noexcept { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    double& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
    [[nodiscard]] double at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

    [[nodiscard]] double item() const
    {
        if (values_.size() != 1)
            throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        return values_[0];
    }

    [[nodiscard]] std::span<const double> row(std::size_t r) const
    {
        const std::size_t w = cols();
        return std::span<const double>(values_).subspan(r * w, w);
    }
    [[nodiscard]] std::span<double> row(std::size_t r)
    {
        const std::size_t w = cols();
        return std::span<double>(values_).subspan(r * w, w);
    }

    [[nodiscard]] bool all_finite() const noexcept
    {
        for (double v : values_)
            if (!std::isfinite(v))
                return false;
        return true;
    }

    [[nodiscard]] double squared_norm() const noexcept
    {
        double s = 0.0;
        for (double v : values_)
            s += v * v;
        return s;
    }

    void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    void validate_shape() const
    {
        for (std::size_t d : shape_)
            if (d == 0)
                throw ShapeError("tensor dimensions must be positive, got " +
                                 shape_string(shape_));
    }

    Shape shape_;
    std::vector<double> values_;
};

} // namespace cbr
