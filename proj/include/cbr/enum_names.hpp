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

#include <json.hpp>

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace cbr::detail {

template <typename E, std::size_t N>
using EnumNames = std::array<std::pair<E, const char*>, N>;

template <typename E, std::size_t N>
std::string enum_to_string(const EnumNames<E, N>& names, E value)
{
    for (const auto& [v, s] : names)
        if (v == value)
            return s;
    throw std::invalid_argument("unnamed enum value");
}

template <typename E, std::size_t N>
std::optional<E> enum_from_string(const EnumNames<E, N>& names, std::string_view text)
{
    for (const auto& [v, s] : names)
        if (text == s)
            return v;
    return std::nullopt;
}

template <typename E, std::size_t N>
E enum_from_json(const EnumNames<E, N>& names, const nlohmann::json& j, const char* what)
{
    const auto text = j.get<std::string>();
    if (auto v = enum_from_string(names, text))
        return *v;
    std::string allowed;
    for (const auto& [v, s] : names)
        allowed += (allowed.empty() ? "" : ", ") + std::string(s);
    throw std::invalid_argument(std::string("unknown ") + what + " '" + text + "' (expected one of: " + allowed + ")");
}

} // namespace cbr::detail
