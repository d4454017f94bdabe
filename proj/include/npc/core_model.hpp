#pragma once

// Conversation data model and the canonical text format.
//
// Segments are `<|role|>\n{content}\n`. Assistant tool calls are
// `<tool_call>\n{json}\n</tool_call>` blocks, tool output is
// `<tool_response>\n{json}\n</tool_response>` blocks and reasoning is a
// leading `<think>\n{text}\n</think>` block.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "npc/error.hpp"
#include "npc/json_text.hpp"
#include "npc/tool_schema.hpp"

namespace npc {

inline constexpr std::string_view kToolCallOpen = "<tool_call>";
inline constexpr std::string_view kToolCallClose = "</tool_call>";
inline constexpr std::string_view kToolResponseOpen = "<tool_response>";
inline constexpr std::string_view kToolResponseClose = "</tool_response>";
inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";
inline constexpr std::string_view kToolsOpen = "<tools>";
inline constexpr std::string_view kToolsClose = "</tools>";

inline constexpr std::string_view kSystemMarker = "<|system|>\n";
inline constexpr std::string_view kUserMarker = "<|user|>\n";
inline constexpr std::string_view kAssistantMarker = "<|assistant|>\n";
inline constexpr std::string_view kToolMarker = "<|tool|>\n";

inline bool valid_tool_name(std::string_view name) {
    if (name.empty()) return false;
    return name.find_first_of(" \t\r\n\f\v") == std::string_view::npos;
}

struct ToolCall {
    std::string name;
    Json arguments = Json::object();

    bool operator==(const ToolCall&) const = default;

    Json to_json() const { return {{"name", name}, {"arguments", arguments}}; }
};

struct ToolResult {
    std::string name;
    Json arguments = Json::object();
    Json return_value;

    bool operator==(const ToolResult&) const = default;

    Json to_json() const {
        return {{"name", name}, {"arguments", arguments}, {"return_value", return_value}};
    }
};

inline std::string serialize_tool_call(const ToolCall& call) {
    return std::string(kToolCallOpen) + "\n" + dump_inline(call.to_json()) + "\n" +
           std::string(kToolCallClose);
}

inline std::string serialize_tool_calls(std::span<const ToolCall> calls) {
    std::string out;
    for (std::size_t i = 0; i < calls.size(); ++i) {
        if (i) out += '\n';
        out += serialize_tool_call(calls[i]);
    }
    return out;
}

/// One block per result, in order, newline separated.
inline std::string serialize_tool_response(std::span<const ToolResult> results) {
    if (results.empty()) throw Error(ErrorCode::EmptyResults, "no tool results to serialize");
    std::string out;
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (i) out += '\n';
        out += std::string(kToolResponseOpen) + "\n" + dump_inline(results[i].to_json()) + "\n" +
               std::string(kToolResponseClose);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Messages

struct UserText {
    std::string text;
    bool operator==(const UserText&) const = default;
};

struct AssistantText {
    std::string text;
    std::optional<std::string> think_text;
    bool operator==(const AssistantText&) const = default;
};

/// Equality ignores raw_text, which is a derived rendering of `calls`.
struct AssistantToolCalls {
    std::vector<ToolCall> calls;
    std::string raw_text;

    static AssistantToolCalls from_calls(std::vector<ToolCall> calls) {
        if (calls.empty())
            throw Error(ErrorCode::InvalidArgument, "assistant tool-call message needs at least one call");
        auto raw = serialize_tool_calls(calls);
        return {std::move(calls), std::move(raw)};
    }

    bool operator==(const AssistantToolCalls& other) const { return calls == other.calls; }
};

struct ToolResponse {
    std::vector<ToolResult> results;
    std::string raw_text;

    static ToolResponse from_results(std::vector<ToolResult> results) {
        auto raw = serialize_tool_response(results);
        return {std::move(results), std::move(raw)};
    }

    bool operator==(const ToolResponse& other) const { return results == other.results; }
};

using Message = std::variant<UserText, AssistantText, AssistantToolCalls, ToolResponse>;

enum class Role { User, Assistant, Tool };

inline std::string_view to_string(Role role) {
    switch (role) {
        case Role::User: return "user";
        case Role::Assistant: return "assistant";
        case Role::Tool: return "tool";
    }
    return "user";
}

inline Role role_of(const Message& m) {
    switch (m.index()) {
        case 0: return Role::User;
        case 1:
        case 2: return Role::Assistant;
        default: return Role::Tool;
    }
}

inline bool is_tool_message(const Message& m) {
    return std::holds_alternative<AssistantToolCalls>(m) || std::holds_alternative<ToolResponse>(m);
}

// ---------------------------------------------------------------------------
// Scenario

struct StateInfo {
    std::string datetime;
    std::string weather;
    std::string place;
    bool operator==(const StateInfo&) const = default;
};

struct ScenarioContext {
    std::string data_id;
    std::string worldview;
    Json player_persona = Json::object();
    std::string npc_role;
    Json npc_persona = Json::object();
    StateInfo state;
    std::vector<Json> knowledge_items;
    std::string general_info;

    bool operator==(const ScenarioContext&) const = default;

    std::string npc_name() const {
        if (npc_persona.contains("name") && npc_persona["name"].is_string())
            return npc_persona["name"].get<std::string>();
        return {};
    }
};

// ---------------------------------------------------------------------------
// Parsing expert output

struct MalformedToolCall {
    std::size_t index = 0;  // ordinal of the `<tool_call>` opening
    std::string reason;
    bool operator==(const MalformedToolCall&) const = default;
};

struct ParsedOutput {
    std::optional<std::string> think_text;
    std::vector<ToolCall> tool_calls;
    std::optional<std::string> reply_text;
    std::vector<MalformedToolCall> malformed;

    /// Both calls and free text present; accepted, but the caller decides policy.
    bool mixed() const { return !tool_calls.empty() && reply_text.has_value(); }

    bool operator==(const ParsedOutput&) const = default;
};

namespace detail {

// Parses `{name, arguments}` bodies. Returns the reason on failure.
inline std::variant<ToolCall, std::string> parse_call_body(std::string_view body) {
    Json j = Json::parse(body.begin(), body.end(), nullptr, false);
    if (j.is_discarded()) return std::string("invalid json");
    if (!j.is_object()) return std::string("body is not an object");
    if (!j.contains("name")) return std::string("missing name");
    if (!j["name"].is_string()) return std::string("name is not a string");
    ToolCall call;
    call.name = j["name"].get<std::string>();
    if (!valid_tool_name(call.name)) return std::string("invalid name");
    if (j.contains("arguments") && !j["arguments"].is_null()) {
        Json args = j["arguments"];
        // Some models emit the arguments object as an encoded string.
        if (args.is_string()) {
            auto decoded = Json::parse(args.get<std::string>(), nullptr, false);
            if (!decoded.is_discarded()) args = std::move(decoded);
        }
        if (!args.is_object()) return std::string("arguments is not an object");
        call.arguments = std::move(args);
    }
    return call;
}

struct BlockScan {
    std::vector<std::string_view> bodies;        // well-delimited bodies, in order
    std::vector<std::size_t> body_index;          // opening ordinal of each body
    std::vector<MalformedToolCall> unclosed;
    std::string outside;                          // text outside any block
    std::size_t openings = 0;
};

inline BlockScan scan_blocks(std::string_view text, std::string_view open, std::string_view close) {
    BlockScan scan;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto start = text.find(open, pos);
        if (start == std::string_view::npos) {
            scan.outside += text.substr(pos);
            break;
        }
        scan.outside += text.substr(pos, start - pos);
        std::size_t ordinal = scan.openings++;
        auto body_start = start + open.size();
        auto end = text.find(close, body_start);
        auto next_open = text.find(open, body_start);
        if (end == std::string_view::npos || (next_open != std::string_view::npos && next_open < end)) {
            scan.unclosed.push_back({ordinal, "unclosed block"});
            if (next_open == std::string_view::npos) break;
            pos = next_open;
            continue;
        }
        scan.bodies.push_back(trim_view(text.substr(body_start, end - body_start)));
        scan.body_index.push_back(ordinal);
        pos = end + close.size();
    }
    return scan;
}

}  // namespace detail

/// Accepts arbitrary text. A `<think>` block is only recognised at the very
/// start. Every `<tool_call>` opening yields either a ToolCall or a
/// MalformedToolCall entry; remaining text (trimmed) becomes the reply.
inline ParsedOutput parse_assistant_output(std::string_view text) {
    ParsedOutput out;
    std::string_view rest = text;
    auto lead = rest.find_first_not_of(" \t\r\n");
    if (lead != std::string_view::npos && starts_with(rest.substr(lead), kThinkOpen)) {
        auto body_start = lead + kThinkOpen.size();
        auto close = rest.find(kThinkClose, body_start);
        if (close != std::string_view::npos) {
            out.think_text = trim(rest.substr(body_start, close - body_start));
            rest = rest.substr(close + kThinkClose.size());
        }
    }

    auto scan = detail::scan_blocks(rest, kToolCallOpen, kToolCallClose);
    std::vector<MalformedToolCall> malformed = std::move(scan.unclosed);
    for (std::size_t i = 0; i < scan.bodies.size(); ++i) {
        auto parsed = detail::parse_call_body(scan.bodies[i]);
        if (auto* call = std::get_if<ToolCall>(&parsed))
            out.tool_calls.push_back(std::move(*call));
        else
            malformed.push_back({scan.body_index[i], std::get<std::string>(parsed)});
    }
    std::sort(malformed.begin(), malformed.end(),
              [](const auto& a, const auto& b) { return a.index < b.index; });
    out.malformed = std::move(malformed);

    auto reply = trim(scan.outside);
    if (!reply.empty()) out.reply_text = std::move(reply);
    return out;
}

/// Inverse of parse_assistant_output for well-formed values.
inline std::string render_assistant_output(const ParsedOutput& parsed) {
    std::string out;
    if (parsed.think_text)
        out += std::string(kThinkOpen) + "\n" + *parsed.think_text + "\n" + std::string(kThinkClose) + "\n";
    out += serialize_tool_calls(parsed.tool_calls);
    if (parsed.reply_text) {
        if (!parsed.tool_calls.empty()) out += '\n';
        out += *parsed.reply_text;
    }
    return out;
}

struct ParsedToolResponse {
    std::vector<ToolResult> results;
    std::vector<MalformedToolCall> malformed;
};

inline ParsedToolResponse parse_tool_response(std::string_view text) {
    ParsedToolResponse out;
    auto scan = detail::scan_blocks(text, kToolResponseOpen, kToolResponseClose);
    out.malformed = std::move(scan.unclosed);
    for (std::size_t i = 0; i < scan.bodies.size(); ++i) {
        auto body = scan.bodies[i];
        Json j = Json::parse(body.begin(), body.end(), nullptr, false);
        std::string reason;
        if (j.is_discarded()) reason = "invalid json";
        else if (!j.is_object()) reason = "body is not an object";
        else if (!j.contains("name") || !j["name"].is_string()) reason = "missing name";
        if (!reason.empty()) {
            out.malformed.push_back({scan.body_index[i], reason});
            continue;
        }
        ToolResult r;
        r.name = j["name"].get<std::string>();
        if (j.contains("arguments") && j["arguments"].is_object()) r.arguments = j["arguments"];
        if (j.contains("return_value")) r.return_value = j["return_value"];
        out.results.push_back(std::move(r));
    }
    std::sort(out.malformed.begin(), out.malformed.end(),
              [](const auto& a, const auto& b) { return a.index < b.index; });
    return out;
}

// ---------------------------------------------------------------------------
// History structure

struct StructuralProblem {
    std::size_t index = 0;
    std::string rule;
    std::string message;
};

/// Alternation rules shared by render_prompt and the structural validator.
inline std::vector<StructuralProblem> history_problems(std::span<const Message> history) {
    std::vector<StructuralProblem> problems;
    for (std::size_t i = 0; i < history.size(); ++i) {
        const auto& m = history[i];
        if (i > 0 && role_of(m) == role_of(history[i - 1]))
            problems.push_back({i, "consecutive-speaker",
                                "consecutive " + std::string(to_string(role_of(m))) + " messages"});
        if (const auto* calls = std::get_if<AssistantToolCalls>(&m)) {
            if (calls->calls.empty()) problems.push_back({i, "empty-tool-calls", "tool-call message without calls"});
            if (i + 1 < history.size() && !std::holds_alternative<ToolResponse>(history[i + 1]))
                problems.push_back({i, "dangling-tool-call", "tool call not followed by a tool response"});
        }
        if (std::holds_alternative<ToolResponse>(m) &&
            (i == 0 || !std::holds_alternative<AssistantToolCalls>(history[i - 1])))
            problems.push_back({i, "orphan-tool-response", "tool response without a preceding tool call"});
    }
    return problems;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline std::string scalar_text(const Json& v) {
    return v.is_string() ? v.get<std::string>() : dump_inline(v);
}

}  // namespace detail

/// Fixed section order: worldview, npc role, npc persona, state, knowledge
/// items, general info, then the tools block. Empty sections are omitted.
inline std::string render_system(const ScenarioContext& ctx, std::span<const ToolSchema> tools) {
    std::vector<std::string> sections;
    if (!ctx.worldview.empty()) sections.push_back("Worldview: " + ctx.worldview);
    if (!ctx.npc_role.empty()) sections.push_back("NPC role: " + ctx.npc_role);
    if (ctx.npc_persona.is_object() && !ctx.npc_persona.empty()) {
        std::string s = "NPC persona:";
        for (const auto& [key, value] : ctx.npc_persona.items()) s += "\n" + key + ": " + detail::scalar_text(value);
        sections.push_back(std::move(s));
    }
    const auto& st = ctx.state;
    if (!st.datetime.empty() || !st.weather.empty() || !st.place.empty()) {
        std::string s = "State:";
        if (!st.datetime.empty()) s += "\ndatetime: " + st.datetime;
        if (!st.weather.empty()) s += "\nweather: " + st.weather;
        if (!st.place.empty()) s += "\nplace: " + st.place;
        sections.push_back(std::move(s));
    }
    if (!ctx.knowledge_items.empty()) {
        std::string s = "Knowledge:";
        for (const auto& item : ctx.knowledge_items) s += "\n" + dump_inline(item);
        sections.push_back(std::move(s));
    }
    if (!ctx.general_info.empty()) sections.push_back("General info:\n" + ctx.general_info);
    if (!tools.empty()) {
        std::string s(kToolsOpen);
        for (const auto& t : tools) s += "\n" + dump_inline(t.to_json());
        s += "\n" + std::string(kToolsClose);
        sections.push_back(std::move(s));
    }
    std::string out;
    for (std::size_t i = 0; i < sections.size(); ++i) {
        if (i) out += '\n';
        out += sections[i];
    }
    return out;
}

inline std::string message_content(const Message& m) {
    return std::visit(
        [](const auto& msg) -> std::string {
            using T = std::decay_t<decltype(msg)>;
            if constexpr (std::is_same_v<T, UserText>) {
                return msg.text;
            } else if constexpr (std::is_same_v<T, AssistantText>) {
                std::string s;
                if (msg.think_text)
                    s += std::string(kThinkOpen) + "\n" + *msg.think_text + "\n" + std::string(kThinkClose) + "\n";
                return s + msg.text;
            } else if constexpr (std::is_same_v<T, AssistantToolCalls>) {
                return serialize_tool_calls(msg.calls);
            } else {
                return serialize_tool_response(msg.results);
            }
        },
        m);
}

inline std::string_view role_marker(Role role) {
    switch (role) {
        case Role::User: return kUserMarker;
        case Role::Assistant: return kAssistantMarker;
        case Role::Tool: return kToolMarker;
    }
    return kUserMarker;
}

inline std::string render_message(const Message& m) {
    return std::string(role_marker(role_of(m))) + message_content(m) + "\n";
}

/// Canonical prompt. An empty tools span means no `<tools>` block. With a
/// think prefix the output ends in an opened assistant segment holding the
/// forced think block, ready for continuation.
inline std::string render_prompt(const ScenarioContext& ctx, std::span<const Message> history,
                                 std::span<const ToolSchema> tools = {},
                                 std::optional<std::string_view> think_prefix = std::nullopt) {
    auto problems = history_problems(history);
    if (!problems.empty()) {
        const auto& p = problems.front();
        throw Error(ErrorCode::InvalidHistory,
                    "message " + std::to_string(p.index) + ": " + p.message + " (" + p.rule + ")");
    }
    std::string out(kSystemMarker);
    out += render_system(ctx, tools);
    out += '\n';
    for (const auto& m : history) out += render_message(m);
    if (think_prefix) {
        out += kAssistantMarker;
        out += std::string(kThinkOpen) + "\n" + std::string(*think_prefix) + "\n" + std::string(kThinkClose) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parsing rendered transcripts

struct Transcript {
    std::string system;
    std::vector<Message> messages;
};

/// Inverse of render_prompt (without a think prefix). Message text must not
/// contain a line consisting solely of a role marker.
inline Transcript parse_transcript(std::string_view text) {
    if (!starts_with(text, kSystemMarker))
        throw Error(ErrorCode::InvalidArgument, "transcript must start with a system segment");

    struct Segment {
        Role role;
        bool system;
        std::size_t content_begin;
        std::size_t marker_begin;
    };
    std::vector<Segment> segments;
    segments.push_back({Role::User, true, kSystemMarker.size(), 0});
    std::size_t pos = kSystemMarker.size();
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) break;
        auto line_start = nl + 1;
        auto rest = text.substr(line_start);
        for (Role role : {Role::User, Role::Assistant, Role::Tool}) {
            auto marker = role_marker(role);
            if (starts_with(rest, marker)) {
                segments.push_back({role, false, line_start + marker.size(), line_start});
                break;
            }
        }
        pos = line_start;
    }

    Transcript out;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        auto end = i + 1 < segments.size() ? segments[i + 1].marker_begin : text.size();
        if (end < segments[i].content_begin || text[end - 1] != '\n')
            throw Error(ErrorCode::InvalidArgument, "segment " + std::to_string(i) + " is not newline terminated");
        auto content = text.substr(segments[i].content_begin, end - 1 - segments[i].content_begin);
        if (segments[i].system) {
            out.system = std::string(content);
            continue;
        }
        switch (segments[i].role) {
            case Role::User:
                out.messages.push_back(UserText{std::string(content)});
                break;
            case Role::Assistant: {
                auto parsed = parse_assistant_output(content);
                if (!parsed.tool_calls.empty()) {
                    out.messages.push_back(AssistantToolCalls{std::move(parsed.tool_calls), std::string(content)});
                } else {
                    AssistantText msg;
                    msg.think_text = parsed.think_text;
                    if (parsed.think_text) {
                        auto close = content.find(kThinkClose);
                        auto after = content.substr(close + kThinkClose.size());
                        if (starts_with(after, "\n")) after.remove_prefix(1);
                        msg.text = std::string(after);
                    } else {
                        msg.text = std::string(content);
                    }
                    out.messages.push_back(std::move(msg));
                }
                break;
            }
            case Role::Tool: {
                auto parsed = parse_tool_response(content);
                out.messages.push_back(ToolResponse{std::move(parsed.results), std::string(content)});
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Role/content JSON form, shared by the HTTP history endpoint and the
// conversation JSONL format.

inline Json message_to_json(const Message& m) {
    Json j = {{"role", std::string(to_string(role_of(m)))}};
    if (const auto* a = std::get_if<AssistantText>(&m)) {
        j["content"] = a->text;
        if (a->think_text) j["think"] = *a->think_text;
    } else if (const auto* c = std::get_if<AssistantToolCalls>(&m)) {
        j["content"] = c->raw_text.empty() ? serialize_tool_calls(c->calls) : c->raw_text;
        Json calls = Json::array();
        for (const auto& call : c->calls) calls.push_back(call.to_json());
        j["tool_calls"] = std::move(calls);
    } else if (const auto* r = std::get_if<ToolResponse>(&m)) {
        j["content"] = r->raw_text.empty() ? serialize_tool_response(r->results) : r->raw_text;
        Json results = Json::array();
        for (const auto& res : r->results) results.push_back(res.to_json());
        j["tool_results"] = std::move(results);
    } else {
        j["content"] = std::get<UserText>(m).text;
    }
    return j;
}

inline Message message_from_json(const Json& j) {
    if (!j.is_object() || !j.contains("role") || !j["role"].is_string())
        throw Error(ErrorCode::InvalidArgument, "message needs a string role");
    auto role = j["role"].get<std::string>();
    std::string content = j.contains("content") && j["content"].is_string() ? j["content"].get<std::string>() : "";
    if (role == "user") return UserText{content};
    if (role == "assistant") {
        if (j.contains("tool_calls") && j["tool_calls"].is_array() && !j["tool_calls"].empty()) {
            std::vector<ToolCall> calls;
            for (const auto& c : j["tool_calls"]) {
                if (!c.contains("name") || !c["name"].is_string())
                    throw Error(ErrorCode::InvalidArgument, "tool call without name");
                calls.push_back({c["name"].get<std::string>(), c.value("arguments", Json::object())});
            }
            return AssistantToolCalls{std::move(calls), content};
        }
        auto parsed = parse_assistant_output(content);
        if (!parsed.tool_calls.empty()) return AssistantToolCalls{std::move(parsed.tool_calls), content};
        AssistantText msg{content, std::nullopt};
        if (j.contains("think") && j["think"].is_string()) msg.think_text = j["think"].get<std::string>();
        return msg;
    }
    if (role == "tool") {
        if (j.contains("tool_results") && j["tool_results"].is_array()) {
            std::vector<ToolResult> results;
            for (const auto& r : j["tool_results"]) {
                if (!r.contains("name") || !r["name"].is_string())
                    throw Error(ErrorCode::InvalidArgument, "tool result without name");
                results.push_back({r["name"].get<std::string>(), r.value("arguments", Json::object()),
                                   r.contains("return_value") ? r["return_value"] : Json()});
            }
            return ToolResponse{std::move(results), content};
        }
        return ToolResponse{parse_tool_response(content).results, content};
    }
    throw Error(ErrorCode::InvalidArgument, "unknown role '" + role + "'");
}

}  // namespace npc
