#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

namespace docqa {

/// Removes a surrounding ```lang ... ``` fence if present, otherwise returns
/// the trimmed input.
std::string strip_code_fences(std::string_view text);

/// First balanced JSON value opening with `open` ('{' or '[') that parses.
/// Bracket matching is string- and escape-aware.
std::optional<nlohmann::json> extract_first_json(std::string_view text, char open);

std::string trim(std::string_view s);

/// Maps full-width ASCII (U+FF01..U+FF5E) to ASCII, leaving other text alone.
std::string fold_fullwidth(std::string_view s);

}  // namespace docqa
