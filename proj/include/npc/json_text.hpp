#pragma once

#include <string>
#include <string_view>

#include "json.hpp"

namespace npc {

// Insertion-ordered so that rendered schemas and calls keep their source order.
using Json = nlohmann::ordered_json;

namespace detail {

inline void dump_inline_to(const Json& value, std::string& out) {
    switch (value.type()) {
        case Json::value_t::object: {
            out += '{';
            bool first = true;
            for (const auto& [key, item] : value.items()) {
                if (!first) out += ", ";
                first = false;
                out += Json(key).dump();
                out += ": ";
                dump_inline_to(item, out);
            }
            out += '}';
            break;
        }
        case Json::value_t::array: {
            out += '[';
            bool first = true;
            for (const auto& item : value) {
                if (!first) out += ", ";
                first = false;
                dump_inline_to(item, out);
            }
            out += ']';
            break;
        }
        default:
            out += value.dump();
    }
}

}  // namespace detail

/// Single-line JSON with ", " and ": " separators. This is the layout the
/// decision prefill `{"name": "` assumes, so every tool block uses it.
inline std::string dump_inline(const Json& value) {
    std::string out;
    detail::dump_inline_to(value, out);
    return out;
}

/// Structural equality with object key order ignored (ordered_json's own
/// operator== compares objects in insertion order).
inline bool json_equivalent(const Json& a, const Json& b) {
    if (a.is_object() && b.is_object()) {
        if (a.size() != b.size()) return false;
        for (const auto& [key, value] : a.items()) {
            auto it = b.find(key);
            if (it == b.end() || !json_equivalent(value, *it)) return false;
        }
        return true;
    }
    if (a.is_array() && b.is_array()) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (!json_equivalent(a[i], b[i])) return false;
        return true;
    }
    return a == b;
}

inline bool starts_with(std::string_view text, std::string_view prefix) {
    return text.substr(0, prefix.size()) == prefix;
}

inline bool ends_with(std::string_view text, std::string_view suffix) {
    return text.size() >= suffix.size() && text.substr(text.size() - suffix.size()) == suffix;
}

inline std::string_view trim_view(std::string_view text) {
    constexpr std::string_view ws = " \t\r\n\f\v";
    auto begin = text.find_first_not_of(ws);
    if (begin == std::string_view::npos) return {};
    auto end = text.find_last_not_of(ws);
    return text.substr(begin, end - begin + 1);
}

inline std::string trim(std::string_view text) { return std::string(trim_view(text)); }

}  // namespace npc
