#pragma once

// Quality gate for conversation datasets: structural, schema and semantic
// checks, plus the flow-correspondence check between an original
// conversation and its augmented rewrite.

#include <algorithm>
#include <cctype>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "npc/core_model.hpp"
#include "npc/error.hpp"
#include "npc/json_text.hpp"
#include "npc/tool_registry.hpp"

namespace npc {

enum class Severity { Error, Warning };
enum class Category { Structural, Schema, Semantic, Flow };

inline std::string_view to_string(Severity s) { return s == Severity::Error ? "error" : "warning"; }

inline std::string_view to_string(Category c) {
    switch (c) {
        case Category::Structural: return "structural";
        case Category::Schema: return "schema";
        case Category::Semantic: return "semantic";
        case Category::Flow: return "flow";
    }
    return "structural";
}

struct ValidationIssue {
    Severity severity = Severity::Error;
    Category category = Category::Structural;
    std::string location;  // "{conversation id}#{message index}" or "{id}/tools/{k}"
    std::string rule;
    std::string message;

    Json to_json() const {
        return {{"severity", std::string(to_string(severity))},
                {"category", std::string(to_string(category))},
                {"location", location},
                {"rule", rule},
                {"message", message}};
    }
};

/// Role/content view of a conversation, as found in augmented datasets. Raw
/// content may be malformed; that is what the validators look for.
struct RawMessage {
    std::string role;  // user | assistant | tool
    std::string content;
};

struct RawConversation {
    std::string id;
    std::vector<RawMessage> messages;
    Json tools = Json::array();  // declared schemas, unvalidated
};

inline RawConversation to_raw(std::string id, std::span<const Message> messages, std::span<const ToolSchema> tools) {
    RawConversation out;
    out.id = std::move(id);
    for (const auto& m : messages) out.messages.push_back({std::string(to_string(role_of(m))), message_content(m)});
    for (const auto& t : tools) out.tools.push_back(t.to_json());
    return out;
}

inline Json raw_conversation_to_json(const RawConversation& conv) {
    Json msgs = Json::array();
    for (const auto& m : conv.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    return {{"id", conv.id}, {"messages", std::move(msgs)}, {"tools", conv.tools}};
}

/// Conversation JSONL: `{"id"?, "messages": [{role, content}], "tools"?: [...]}`
/// per line. System messages are skipped.
inline std::vector<RawConversation> load_conversations_jsonl(std::string_view text) {
    std::vector<RawConversation> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() : nl + 1;
        ++line_no;
        if (trim_view(line).empty()) continue;
        auto where = "line " + std::to_string(line_no);
        Json j = Json::parse(line.begin(), line.end(), nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw ParseError(where, "not a JSON object");
        if (!j.contains("messages") || !j["messages"].is_array()) throw ParseError(where + "/messages", "expected an array");
        RawConversation conv;
        conv.id = j.contains("id") && j["id"].is_string() ? j["id"].get<std::string>() : where;
        for (const auto& m : j["messages"]) {
            if (!m.is_object() || !m.contains("role") || !m["role"].is_string())
                throw ParseError(where + "/messages", "message needs a string role");
            auto role = m["role"].get<std::string>();
            if (role == "system") continue;
            std::string content;
            if (m.contains("content") && m["content"].is_string()) content = m["content"].get<std::string>();
            conv.messages.push_back({role, content});
        }
        if (j.contains("tools")) conv.tools = j["tools"];
        out.push_back(std::move(conv));
    }
    return out;
}

namespace detail {

inline std::string loc(const RawConversation& c, std::size_t i) { return c.id + "#" + std::to_string(i); }

inline std::string normalized_text(const RawConversation& conv) {
    std::string out;
    for (const auto& m : conv.messages) {
        out += m.role;
        out += '\x1f';
        bool space = false;
        for (char ch : m.content) {
            if (std::isspace(static_cast<unsigned char>(ch))) {
                space = true;
                continue;
            }
            if (space && !out.empty() && out.back() != '\x1f') out += ' ';
            space = false;
            out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        }
        out += '\x1e';
    }
    return out;
}

inline bool has_unicode_remnant(std::string_view text) {
    for (std::size_t i = 0; i + 6 <= text.size(); ++i) {
        if (text[i] != '\\' || (text[i + 1] != 'u' && text[i + 1] != 'U')) continue;
        bool hex = true;
        for (std::size_t k = 2; k < 6; ++k)
            if (!std::isxdigit(static_cast<unsigned char>(text[i + k]))) hex = false;
        if (hex) return true;
    }
    return false;
}

inline bool json_has_unicode_remnant(const Json& value) {
    if (value.is_string()) return has_unicode_remnant(value.get_ref<const std::string&>());
    if (value.is_object())
        for (const auto& [key, item] : value.items())
            if (has_unicode_remnant(key) || json_has_unicode_remnant(item)) return true;
    if (value.is_array())
        for (const auto& item : value)
            if (json_has_unicode_remnant(item)) return true;
    return false;
}

// JSON bodies inside control blocks are checked after decoding, since backslash-u
// escapes are legitimate JSON there.
inline bool content_has_unicode_remnant(std::string_view content) {
    std::string outside(content);
    for (auto [open, close] : {std::pair{kToolCallOpen, kToolCallClose}, std::pair{kToolResponseOpen, kToolResponseClose}}) {
        auto scan = scan_blocks(outside, open, close);
        for (auto body : scan.bodies) {
            Json j = Json::parse(body.begin(), body.end(), nullptr, false);
            if (j.is_discarded() ? has_unicode_remnant(body) : json_has_unicode_remnant(j)) return true;
        }
        outside = scan.outside;
    }
    return has_unicode_remnant(outside);
}

struct TagProblem {
    std::string rule;
    std::string message;
};

// The control tags never nest; every opening must close before the next one.
inline std::vector<TagProblem> tag_problems(std::string_view text) {
    static constexpr std::string_view names[] = {"tool_call", "tool_response", "think"};
    std::vector<TagProblem> out;
    std::optional<std::string_view> open;
    std::size_t pos = 0;
    while ((pos = text.find('<', pos)) != std::string_view::npos) {
        bool closing = pos + 1 < text.size() && text[pos + 1] == '/';
        auto name_begin = pos + (closing ? 2 : 1);
        std::optional<std::string_view> tag;
        for (auto n : names) {
            if (text.substr(name_begin, n.size()) == n && text.substr(name_begin + n.size(), 1) == ">") {
                tag = n;
                break;
            }
        }
        if (!tag) {
            ++pos;
            continue;
        }
        if (!closing) {
            if (open)
                out.push_back({"nested-tag", "<" + std::string(*tag) + "> opened inside <" + std::string(*open) + ">"});
            open = tag;
        } else {
            if (!open) out.push_back({"unmatched-close", "</" + std::string(*tag) + "> without an opening tag"});
            else if (*open != *tag)
                out.push_back({"mismatched-close", "</" + std::string(*tag) + "> closes <" + std::string(*open) + ">"});
            open.reset();
        }
        pos = name_begin + tag->size() + 1;
    }
    if (open) out.push_back({"unclosed-tag", "<" + std::string(*open) + "> is never closed"});
    return out;
}

}  // namespace detail

/// Per-conversation structural checks: speaker alternation, control-tag
/// nesting and closure, and literal `\uXXXX` escape remnants.
inline std::vector<ValidationIssue> validate_structure(const RawConversation& conv) {
    std::vector<ValidationIssue> issues;
    for (std::size_t i = 0; i < conv.messages.size(); ++i) {
        const auto& m = conv.messages[i];
        if (m.role != "user" && m.role != "assistant" && m.role != "tool")
            issues.push_back({Severity::Error, Category::Structural, detail::loc(conv, i), "unknown-role",
                              "unknown role '" + m.role + "'"});
        if (i > 0 && conv.messages[i - 1].role == m.role)
            issues.push_back({Severity::Error, Category::Structural, detail::loc(conv, i), "consecutive-speaker",
                              "consecutive messages from " + m.role});
        for (const auto& p : detail::tag_problems(m.content))
            issues.push_back({Severity::Error, Category::Structural, detail::loc(conv, i), p.rule, p.message});
        if (detail::content_has_unicode_remnant(m.content))
            issues.push_back({Severity::Error, Category::Structural, detail::loc(conv, i), "unicode-escape",
                              "undecoded unicode escape sequence in text"});
    }
    return issues;
}

/// Dataset-level structural checks: the per-conversation rules plus exact
/// duplicates (after lowercasing and whitespace collapsing); the second and
/// later copies are flagged.
inline std::vector<ValidationIssue> validate_structure(std::span<const RawConversation> dataset) {
    std::vector<ValidationIssue> issues;
    std::unordered_set<std::string> seen;
    for (const auto& conv : dataset) {
        auto own = validate_structure(conv);
        issues.insert(issues.end(), own.begin(), own.end());
        if (!seen.insert(detail::normalized_text(conv)).second)
            issues.push_back({Severity::Error, Category::Structural, conv.id, "duplicate",
                              "conversation duplicates an earlier one"});
    }
    return issues;
}

namespace detail {

inline std::set<std::string, std::less<>> declared_names(const Json& tools) {
    std::set<std::string, std::less<>> names;
    if (!tools.is_array()) return names;
    for (const auto& t : tools)
        if (t.is_object() && t.contains("name") && t["name"].is_string()) names.insert(t["name"].get<std::string>());
    return names;
}

}  // namespace detail

/// Declared schemas carry name/description/parameters; every block body is
/// valid JSON; every call names a declared function (`reply` is implicit).
inline std::vector<ValidationIssue> validate_schema(const RawConversation& conv) {
    std::vector<ValidationIssue> issues;
    auto schema_issue = [&](std::size_t k, const std::string& msg) {
        issues.push_back({Severity::Error, Category::Schema, conv.id + "/tools/" + std::to_string(k), "schema-field", msg});
    };
    if (!conv.tools.is_array()) {
        issues.push_back({Severity::Error, Category::Schema, conv.id + "/tools", "schema-field", "tools must be a list"});
    } else {
        for (std::size_t k = 0; k < conv.tools.size(); ++k) {
            const auto& t = conv.tools[k];
            if (!t.is_object()) {
                schema_issue(k, "schema is not an object");
                continue;
            }
            if (!t.contains("name") || !t["name"].is_string() || t["name"].get<std::string>().empty())
                schema_issue(k, "schema missing name");
            if (!t.contains("description") || !t["description"].is_string()) schema_issue(k, "schema missing description");
            if (!t.contains("parameters") || !t["parameters"].is_object()) schema_issue(k, "schema missing parameters");
            else if (t["parameters"].contains("properties") && !t["parameters"]["properties"].is_object())
                schema_issue(k, "parameters.properties must be an object");
        }
    }

    auto declared = detail::declared_names(conv.tools);
    for (std::size_t i = 0; i < conv.messages.size(); ++i) {
        const auto& m = conv.messages[i];
        auto calls = detail::scan_blocks(m.content, kToolCallOpen, kToolCallClose);
        for (auto body : calls.bodies) {
            Json j = Json::parse(body.begin(), body.end(), nullptr, false);
            if (j.is_discarded() || !j.is_object()) {
                issues.push_back({Severity::Error, Category::Schema, detail::loc(conv, i), "bad-json",
                                  "tool_call body is not a valid JSON object"});
                continue;
            }
            if (!j.contains("name") || !j["name"].is_string()) {
                issues.push_back({Severity::Error, Category::Schema, detail::loc(conv, i), "call-missing-name",
                                  "tool_call body has no name"});
                continue;
            }
            auto name = j["name"].get<std::string>();
            if (name != kReplyToolName && !declared.count(name))
                issues.push_back({Severity::Error, Category::Schema, detail::loc(conv, i), "undeclared-function",
                                  "call to undeclared function '" + name + "'"});
        }
        auto responses = detail::scan_blocks(m.content, kToolResponseOpen, kToolResponseClose);
        for (auto body : responses.bodies) {
            Json j = Json::parse(body.begin(), body.end(), nullptr, false);
            if (j.is_discarded() || !j.is_object())
                issues.push_back({Severity::Error, Category::Schema, detail::loc(conv, i), "bad-json",
                                  "tool_response body is not a valid JSON object"});
        }
    }
    return issues;
}

/// Argument presence and types against the declared schemas, and tool
/// responses that answer no call of the immediately preceding tool-call
/// message.
inline std::vector<ValidationIssue> validate_semantics(const RawConversation& conv) {
    std::vector<ValidationIssue> issues;
    std::vector<ToolSchema> schemas;
    if (conv.tools.is_array())
        for (const auto& t : conv.tools) {
            try {
                schemas.push_back(ToolSchema::from_json(t));
            } catch (const Error&) {
                // reported by validate_schema
            }
        }
    auto find_schema = [&](std::string_view name) -> const ToolSchema* {
        for (const auto& s : schemas)
            if (s.name == name) return &s;
        return nullptr;
    };

    std::vector<std::string> previous_calls;
    bool previous_was_call = false;
    for (std::size_t i = 0; i < conv.messages.size(); ++i) {
        const auto& m = conv.messages[i];
        if (m.role == "tool") {
            auto parsed = parse_tool_response(m.content);
            for (const auto& r : parsed.results) {
                bool matched = previous_was_call &&
                               std::find(previous_calls.begin(), previous_calls.end(), r.name) != previous_calls.end();
                if (!matched)
                    issues.push_back({Severity::Error, Category::Semantic, detail::loc(conv, i), "orphan-response",
                                      "response for '" + r.name + "' has no matching call in its tool block"});
            }
            previous_was_call = false;
            previous_calls.clear();
            continue;
        }
        previous_calls.clear();
        previous_was_call = false;
        if (m.role != "assistant") continue;
        auto parsed = parse_assistant_output(m.content);
        for (const auto& call : parsed.tool_calls) {
            previous_calls.push_back(call.name);
            previous_was_call = true;
            const auto* schema = find_schema(call.name);
            if (!schema) continue;
            for (const auto& issue : validate_arguments(call, *schema))
                issues.push_back({Severity::Error, Category::Semantic, detail::loc(conv, i),
                                  "argument-" + std::string(to_string(issue.kind)), issue.detail});
        }
    }
    return issues;
}

namespace detail {

inline bool is_tool_call_message(const RawMessage& m) {
    return m.role == "assistant" && m.content.find(kToolCallOpen) != std::string::npos;
}

inline bool has_tool_block(const RawMessage& m) { return m.role == "tool" || is_tool_call_message(m); }

}  // namespace detail

/// Augmentation must keep the skeleton: same length, same role sequence,
/// tool blocks at the same positions with the same number of calls.
/// Argument-count differences are warnings.
inline std::vector<ValidationIssue> check_flow_correspondence(const RawConversation& original,
                                                              const RawConversation& augmented) {
    std::vector<ValidationIssue> issues;
    const auto& a = original.messages;
    const auto& b = augmented.messages;
    if (a.size() != b.size())
        issues.push_back({Severity::Error, Category::Flow, augmented.id, "count-mismatch",
                          "message count " + std::to_string(b.size()) + " differs from original " +
                              std::to_string(a.size())});
    auto n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        auto where = detail::loc(augmented, i);
        if (a[i].role != b[i].role)
            issues.push_back({Severity::Error, Category::Flow, where, "role-mismatch",
                              "role '" + b[i].role + "' where original has '" + a[i].role + "'"});
        bool ta = detail::has_tool_block(a[i]), tb = detail::has_tool_block(b[i]);
        if (ta != tb) {
            issues.push_back({Severity::Error, Category::Flow, where, "position-mismatch",
                              ta ? "original has a tool block here, augmented does not"
                                 : "augmented has a tool block the original lacks"});
            continue;
        }
        if (!detail::is_tool_call_message(a[i]) || !detail::is_tool_call_message(b[i])) continue;
        auto pa = parse_assistant_output(a[i].content);
        auto pb = parse_assistant_output(b[i].content);
        auto ca = pa.tool_calls.size() + pa.malformed.size();
        auto cb = pb.tool_calls.size() + pb.malformed.size();
        if (ca != cb) {
            issues.push_back({Severity::Error, Category::Flow, where, "call-count-mismatch",
                              std::to_string(cb) + " calls where original has " + std::to_string(ca)});
            continue;
        }
        for (std::size_t k = 0; k < std::min(pa.tool_calls.size(), pb.tool_calls.size()); ++k)
            if (pa.tool_calls[k].arguments.size() != pb.tool_calls[k].arguments.size())
                issues.push_back({Severity::Warning, Category::Flow, where, "argument-count-mismatch",
                                  "call " + std::to_string(k) + " has " + std::to_string(pb.tool_calls[k].arguments.size()) +
                                      " arguments where original has " +
                                      std::to_string(pa.tool_calls[k].arguments.size())});
    }
    return issues;
}

/// All three layers over a dataset.
inline std::vector<ValidationIssue> validate_dataset(std::span<const RawConversation> dataset) {
    auto issues = validate_structure(dataset);
    for (const auto& conv : dataset) {
        auto s = validate_schema(conv);
        issues.insert(issues.end(), s.begin(), s.end());
        auto m = validate_semantics(conv);
        issues.insert(issues.end(), m.begin(), m.end());
    }
    return issues;
}

struct ValidationSummary {
    std::size_t errors = 0;
    std::size_t warnings = 0;
    std::size_t records_checked = 0;

    bool passed() const { return errors == 0; }
    Json to_json() const {
        return {{"summary", {{"errors", errors}, {"warnings", warnings}, {"records_checked", records_checked}}}};
    }
};

inline ValidationSummary summarize(std::span<const ValidationIssue> issues, std::size_t records_checked) {
    ValidationSummary s;
    s.records_checked = records_checked;
    for (const auto& i : issues) (i.severity == Severity::Error ? s.errors : s.warnings)++;
    return s;
}

/// Report: one issue per line, then the summary record.
inline std::string report_jsonl(std::span<const ValidationIssue> issues, std::size_t records_checked) {
    std::string out;
    for (const auto& i : issues) out += i.to_json().dump() + "\n";
    out += summarize(issues, records_checked).to_json().dump() + "\n";
    return out;
}

}  // namespace npc
