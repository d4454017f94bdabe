#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "npc/error.hpp"
#include "npc/json_text.hpp"

namespace npc {

enum class ValueType { String, Number, Integer, Boolean, Object, Array };

inline std::string_view to_string(ValueType type) {
    switch (type) {
        case ValueType::String: return "string";
        case ValueType::Number: return "number";
        case ValueType::Integer: return "integer";
        case ValueType::Boolean: return "boolean";
        case ValueType::Object: return "object";
        case ValueType::Array: return "array";
    }
    return "string";
}

inline std::optional<ValueType> parse_value_type(std::string_view tag) {
    if (tag == "string") return ValueType::String;
    if (tag == "number") return ValueType::Number;
    if (tag == "integer") return ValueType::Integer;
    if (tag == "boolean") return ValueType::Boolean;
    if (tag == "object") return ValueType::Object;
    if (tag == "array") return ValueType::Array;
    return std::nullopt;
}

/// Top-level type check only; nested array/object structure is not inspected.
inline bool matches_type(const Json& value, ValueType type) {
    switch (type) {
        case ValueType::String: return value.is_string();
        case ValueType::Number: return value.is_number();
        case ValueType::Integer: return value.is_number_integer();
        case ValueType::Boolean: return value.is_boolean();
        case ValueType::Object: return value.is_object();
        case ValueType::Array: return value.is_array();
    }
    return false;
}

struct PropertySchema {
    std::string name;
    ValueType type = ValueType::String;
    std::string description;
    // Keys other than type/description (enum, default, ...) kept verbatim.
    Json extra = Json::object();

    bool operator==(const PropertySchema&) const = default;
};

/// A declared function signature in the converted `{name, description,
/// parameters: {type: "object", properties, required}}` form.
struct ToolSchema {
    std::string name;
    std::string description;
    std::vector<PropertySchema> properties;
    std::vector<std::string> required;

    bool operator==(const ToolSchema&) const = default;

    const PropertySchema* find_property(std::string_view property) const {
        auto it = std::find_if(properties.begin(), properties.end(),
                               [&](const PropertySchema& p) { return p.name == property; });
        return it == properties.end() ? nullptr : &*it;
    }

    bool is_required(std::string_view property) const {
        return std::find(required.begin(), required.end(), property) != required.end();
    }

    Json to_json() const {
        Json props = Json::object();
        for (const auto& p : properties) {
            Json prop = {{"type", std::string(to_string(p.type))}, {"description", p.description}};
            for (const auto& [key, value] : p.extra.items()) prop[key] = value;
            props[p.name] = std::move(prop);
        }
        Json params = {{"type", "object"}, {"properties", std::move(props)}};
        if (!required.empty()) params["required"] = required;
        return {{"name", name}, {"description", description}, {"parameters", std::move(params)}};
    }

    static ToolSchema from_json(const Json& j) {
        auto fail = [&](const std::string& why) -> ToolSchema {
            throw Error(ErrorCode::ManifestError, "tool schema: " + why);
        };
        if (!j.is_object()) return fail("not an object");
        if (!j.contains("name") || !j["name"].is_string() || j["name"].get<std::string>().empty())
            return fail("missing name");
        ToolSchema schema;
        schema.name = j["name"].get<std::string>();
        if (!j.contains("description") || !j["description"].is_string())
            return fail(schema.name + ": missing description");
        schema.description = j["description"].get<std::string>();
        if (!j.contains("parameters") || !j["parameters"].is_object())
            return fail(schema.name + ": missing parameters");
        const Json& params = j["parameters"];
        if (params.contains("properties")) {
            if (!params["properties"].is_object()) return fail(schema.name + ": properties must be an object");
            for (const auto& [key, prop] : params["properties"].items()) {
                PropertySchema p;
                p.name = key;
                if (!prop.is_object()) return fail(schema.name + "." + key + ": property must be an object");
                auto tag = prop.value("type", std::string("string"));
                auto type = parse_value_type(tag);
                if (!type) return fail(schema.name + "." + key + ": unknown type '" + tag + "'");
                p.type = *type;
                p.description = prop.value("description", std::string());
                for (const auto& [pk, pv] : prop.items())
                    if (pk != "type" && pk != "description") p.extra[pk] = pv;
                schema.properties.push_back(std::move(p));
            }
        }
        if (params.contains("required")) {
            if (!params["required"].is_array()) return fail(schema.name + ": required must be an array");
            for (const auto& r : params["required"]) {
                if (!r.is_string()) return fail(schema.name + ": required entries must be strings");
                auto name = r.get<std::string>();
                if (!schema.find_property(name))
                    return fail(schema.name + ": required '" + name + "' is not a declared property");
                schema.required.push_back(std::move(name));
            }
        }
        return schema;
    }
};

}  // namespace npc
