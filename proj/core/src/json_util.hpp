#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include <json.hpp>

namespace bttt::detail {

/// Runs a JSON parse/extract block, rethrowing library exceptions as
/// std::runtime_error so callers see one error type for malformed input.
template <typename F>
auto with_json_errors(const char* context, F&& f) -> decltype(std::forward<F>(f)()) {
    try {
        return std::forward<F>(f)();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string(context) + ": " + e.what());
    }
}

}  // namespace bttt::detail
