#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace omniflux {

// Ordered key=value pairs; '#' starts a comment, blank lines are skipped.
using KeyValues = std::map<std::string, std::string>;

// Throws ConfigError (with context and line number) on malformed lines
// or duplicate keys.
KeyValues parse_key_values(std::string_view text, const std::string& context);
std::string format_key_values(const KeyValues& values);

std::uint64_t parse_u64(const std::string& text, const std::string& what);
double parse_double(const std::string& text, const std::string& what);
bool parse_bool(const std::string& text, const std::string& what);

}  // namespace omniflux
