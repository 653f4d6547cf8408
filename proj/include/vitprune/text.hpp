#pragma once

// Locale-independent numeric text helpers shared by the report and config
// serializers: shortest round-trip formatting and strict parsing.

#include <charconv>
#include <string>

#include "vitprune/errors.hpp"

namespace vitprune::detail {

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& text, const std::string& what) {
    double v = 0;
    const char* b = text.data();
    auto res = std::from_chars(b, b + text.size(), v);
    require(res.ec == std::errc() && res.ptr == b + text.size(), ErrorKind::format,
            "expected a number for " + what + ", got '" + text + "'");
    return v;
}

} // namespace vitprune::detail
