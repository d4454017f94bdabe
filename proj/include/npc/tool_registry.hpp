#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "npc/core_model.hpp"
#include "npc/error.hpp"
#include "npc/json_text.hpp"
#include "npc/tool_schema.hpp"

namespace npc {

inline constexpr std::string_view kReplyToolName = "reply";
inline constexpr std::string_view kReplyToolDescription = "Reply directly to the player without using any tool.";

inline ToolSchema reply_tool_schema() {
    return {std::string(kReplyToolName), std::string(kReplyToolDescription), {}, {}};
}

/// Appends the dummy `reply` tool the decision expert selects when no real
/// tool is needed. A pre-existing `reply` would make the sentinel ambiguous.
inline std::vector<ToolSchema> inject_reply_tool(std::vector<ToolSchema> tools) {
    for (const auto& t : tools)
        if (t.name == kReplyToolName)
            throw Error(ErrorCode::NameCollision, "a tool named 'reply' is already declared");
    tools.push_back(reply_tool_schema());
    return tools;
}

enum class IssueKind { Missing, Unknown, TypeMismatch };

inline std::string_view to_string(IssueKind kind) {
    switch (kind) {
        case IssueKind::Missing: return "missing";
        case IssueKind::Unknown: return "unknown";
        case IssueKind::TypeMismatch: return "type-mismatch";
    }
    return "missing";
}

struct ArgumentIssue {
    std::string call_name;
    std::string argument_name;
    IssueKind kind = IssueKind::Missing;
    std::string detail;
};

inline std::string_view json_type_name(const Json& v) {
    if (v.is_string()) return "string";
    if (v.is_boolean()) return "boolean";
    if (v.is_number_integer()) return "integer";
    if (v.is_number()) return "number";
    if (v.is_object()) return "object";
    if (v.is_array()) return "array";
    return "null";
}

inline std::vector<ArgumentIssue> validate_arguments(const ToolCall& call, const ToolSchema& schema) {
    if (call.name != schema.name)
        throw Error(ErrorCode::NameMismatch, "call '" + call.name + "' checked against schema '" + schema.name + "'");
    std::vector<ArgumentIssue> issues;
    for (const auto& req : schema.required)
        if (!call.arguments.is_object() || !call.arguments.contains(req))
            issues.push_back({call.name, req, IssueKind::Missing, "required argument '" + req + "' is absent"});
    if (!call.arguments.is_object()) return issues;
    for (const auto& [key, value] : call.arguments.items()) {
        const auto* prop = schema.find_property(key);
        if (!prop) {
            issues.push_back({call.name, key, IssueKind::Unknown, "argument '" + key + "' is not declared"});
        } else if (!matches_type(value, prop->type)) {
            issues.push_back({call.name, key, IssueKind::TypeMismatch,
                              "argument '" + key + "' expects " + std::string(to_string(prop->type)) + ", got " +
                                  std::string(json_type_name(value))});
        }
    }
    return issues;
}

/// Handlers may be invoked concurrently from several sessions.
using ToolHandler = std::function<Json(const Json& arguments, const ScenarioContext& context)>;

/// Immutable after construction.
class ToolSet {
public:
    ToolSet() = default;

    explicit ToolSet(std::vector<ToolSchema> schemas, std::map<std::string, ToolHandler, std::less<>> handlers = {})
        : schemas_(std::move(schemas)), handlers_(std::move(handlers)) {
        for (std::size_t i = 0; i < schemas_.size(); ++i)
            for (std::size_t j = i + 1; j < schemas_.size(); ++j)
                if (schemas_[i].name == schemas_[j].name)
                    throw Error(ErrorCode::NameCollision, "duplicate tool '" + schemas_[i].name + "'");
        for (const auto& s : schemas_)
            if (s.name == kReplyToolName) {
                if (!s.properties.empty())
                    throw Error(ErrorCode::NameCollision, "'reply' must declare no properties");
                reply_injected_ = true;
            }
    }

    const std::vector<ToolSchema>& schemas() const { return schemas_; }
    bool reply_injected() const { return reply_injected_; }

    const ToolSchema* find(std::string_view name) const {
        for (const auto& s : schemas_)
            if (s.name == name) return &s;
        return nullptr;
    }

    const ToolHandler* handler(std::string_view name) const {
        auto it = handlers_.find(name);
        return it == handlers_.end() ? nullptr : &it->second;
    }

    ToolSet with_reply_tool() const {
        ToolSet out = *this;
        out.schemas_ = inject_reply_tool(schemas_);
        out.reply_injected_ = true;
        return out;
    }

private:
    std::vector<ToolSchema> schemas_;
    std::map<std::string, ToolHandler, std::less<>> handlers_;
    bool reply_injected_ = false;
};

struct ExecutionIssue {
    std::size_t index = 0;
    ErrorCode code = ErrorCode::UnknownTool;
    std::string name;
    std::string detail;
};

struct ExecutionOutcome {
    std::vector<ToolResult> results;  // one per call, in call order
    std::vector<ExecutionIssue> issues;
};

inline Json error_object(const std::string& text) { return {{"error", text}}; }

/// Runs every call in order. Failures never abort the batch: an unknown tool,
/// invalid arguments or a throwing handler each produce an `{error: ...}`
/// result plus an issue entry.
inline ExecutionOutcome execute_calls(std::span<const ToolCall> calls, const ToolSet& toolset,
                                      const ScenarioContext& context) {
    if (calls.empty()) throw Error(ErrorCode::InvalidArgument, "execute_calls needs at least one call");
    for (const auto& c : calls)
        if (c.name == kReplyToolName)
            throw Error(ErrorCode::InvalidArgument, "the reply sentinel is not an executable tool");

    ExecutionOutcome out;
    out.results.reserve(calls.size());
    for (std::size_t i = 0; i < calls.size(); ++i) {
        const auto& call = calls[i];
        ToolResult result{call.name, call.arguments, Json()};
        const auto* handler = toolset.handler(call.name);
        if (!handler) {
            result.return_value = error_object("unknown tool");
            out.issues.push_back({i, ErrorCode::UnknownTool, call.name, "no handler registered for '" + call.name + "'"});
            out.results.push_back(std::move(result));
            continue;
        }
        if (const auto* schema = toolset.find(call.name)) {
            auto problems = validate_arguments(call, *schema);
            if (!problems.empty()) {
                std::string detail = "invalid arguments:";
                for (const auto& p : problems) detail += " " + std::string(to_string(p.kind)) + "(" + p.argument_name + ")";
                result.return_value = error_object(detail);
                out.issues.push_back({i, ErrorCode::InvalidArgument, call.name, detail});
                out.results.push_back(std::move(result));
                continue;
            }
        }
        try {
            result.return_value = (*handler)(call.arguments, context);
        } catch (const std::exception& e) {
            result.return_value = error_object(e.what());
            out.issues.push_back({i, ErrorCode::ToolFailed, call.name, std::string("handler failed: ") + e.what()});
        }
        out.results.push_back(std::move(result));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest: {function_list_id: [schema, ...]}

using ToolManifest = std::map<std::string, std::vector<ToolSchema>, std::less<>>;

inline ToolManifest manifest_from_json(const Json& doc) {
    if (!doc.is_object()) throw Error(ErrorCode::ManifestError, "manifest must be an object keyed by function_list_id");
    ToolManifest manifest;
    for (const auto& [id, list] : doc.items()) {
        if (!list.is_array()) throw Error(ErrorCode::ManifestError, id + ": expected a list of tool schemas");
        std::vector<ToolSchema> schemas;
        for (const auto& s : list) {
            auto schema = ToolSchema::from_json(s);
            for (const auto& prev : schemas)
                if (prev.name == schema.name)
                    throw Error(ErrorCode::ManifestError, id + ": duplicate tool '" + schema.name + "'");
            schemas.push_back(std::move(schema));
        }
        manifest.emplace(id, std::move(schemas));
    }
    return manifest;
}

inline ToolManifest load_manifest(std::string_view text) {
    Json doc = Json::parse(text.begin(), text.end(), nullptr, false);
    if (doc.is_discarded()) throw Error(ErrorCode::ManifestError, "manifest is not valid JSON");
    return manifest_from_json(doc);
}

inline Json manifest_to_json(const ToolManifest& manifest) {
    Json doc = Json::object();
    for (const auto& [id, schemas] : manifest) {
        Json list = Json::array();
        for (const auto& s : schemas) list.push_back(s.to_json());
        doc[id] = std::move(list);
    }
    return doc;
}

}  // namespace npc
