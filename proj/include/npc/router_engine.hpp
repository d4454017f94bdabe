#pragma once

// Per-turn pipeline: the tool expert decides (with a forced
// `<tool_call>\n{"name": "` prefill and early stop on the `reply"` sentinel),
// then either the direct expert answers with tools hidden, or the requested
// tools run and the persona expert folds their results into the reply.

#include <chrono>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "npc/backend_gateway.hpp"
#include "npc/core_model.hpp"
#include "npc/error.hpp"
#include "npc/tool_registry.hpp"

namespace npc {

inline constexpr std::string_view kDecisionPrefill = "<tool_call>\n{\"name\": \"";
inline constexpr std::string_view kReplySentinel = "reply\"";
inline constexpr std::string_view kDefaultDirectThink = "Respond in character, naturally and helpfully, without tools.";
inline constexpr std::string_view kDefaultPersonaThink =
    "Weave every piece of tool result information into a natural, complete reply.";

struct PipelineConfig {
    std::string prefill{kDecisionPrefill};
    std::string sentinel{kReplySentinel};
    std::string direct_think_prefix{kDefaultDirectThink};
    std::string persona_think_prefix{kDefaultPersonaThink};
    std::vector<std::string> banned_strings{std::string(kToolCallOpen), std::string(kToolCallClose)};
    int decision_max_tokens = 256;
    int reply_max_tokens = 512;
    double temperature = 0.7;
    std::optional<std::int64_t> seed;
};

enum class DecisionKind { Reply, Tools };

struct RouteDecision {
    DecisionKind kind = DecisionKind::Reply;
    std::vector<ToolCall> calls;  // nonempty iff kind == Tools, never `reply`

    static RouteDecision reply() { return {}; }
    static RouteDecision tools(std::vector<ToolCall> calls) {
        if (calls.empty()) throw Error(ErrorCode::InvalidArgument, "a tools decision needs at least one call");
        for (const auto& c : calls)
            if (c.name == kReplyToolName) throw Error(ErrorCode::InvalidArgument, "reply is not a tool decision");
        return {DecisionKind::Tools, std::move(calls)};
    }

    bool is_reply() const { return kind == DecisionKind::Reply; }
    bool operator==(const RouteDecision&) const = default;
};

struct Session {
    std::string session_id;
    ScenarioContext context;
    std::shared_ptr<const ToolSet> toolset = std::make_shared<ToolSet>();
    std::vector<Message> history;
    PipelineConfig config;
};

struct PhaseTimings {
    double decision_ms = 0;
    double tools_ms = 0;
    double reply_ms = 0;

    double sum() const { return decision_ms + tools_ms + reply_ms; }
};

struct TurnTrace {
    RouteDecision decision;
    std::optional<ExpertId> expert_used;  // unset only on a failed turn
    std::vector<ToolCall> tool_calls;
    std::vector<ToolResult> tool_results;
    std::string decision_completion;
    std::string reply_text;
    PhaseTimings timings;
    std::vector<std::string> warnings;

    Json to_json() const {
        Json calls = Json::array();
        for (const auto& c : tool_calls) calls.push_back(c.to_json());
        Json results = Json::array();
        for (const auto& r : tool_results) results.push_back(r.to_json());
        Json decision_calls = Json::array();
        for (const auto& c : decision.calls) decision_calls.push_back(c.to_json());
        return {
            {"decision", {{"kind", decision.is_reply() ? "reply" : "tools"}, {"calls", std::move(decision_calls)}}},
            {"expert_used", expert_used ? Json(std::string(to_string(*expert_used))) : Json()},
            {"tool_calls", std::move(calls)},
            {"tool_results", std::move(results)},
            {"decision_completion", decision_completion},
            {"reply_text", reply_text},
            {"timings",
             {{"decision_ms", timings.decision_ms}, {"tools_ms", timings.tools_ms}, {"reply_ms", timings.reply_ms}}},
            {"warnings", warnings},
        };
    }

    static TurnTrace from_json(const Json& j) {
        TurnTrace t;
        const auto& d = j.at("decision");
        std::vector<ToolCall> dcalls;
        for (const auto& c : d.at("calls")) dcalls.push_back({c.at("name").get<std::string>(), c.value("arguments", Json::object())});
        t.decision = d.at("kind") == "reply" ? RouteDecision::reply() : RouteDecision::tools(std::move(dcalls));
        if (!j.at("expert_used").is_null()) t.expert_used = parse_expert(j.at("expert_used").get<std::string>());
        for (const auto& c : j.at("tool_calls")) t.tool_calls.push_back({c.at("name").get<std::string>(), c.value("arguments", Json::object())});
        for (const auto& r : j.at("tool_results"))
            t.tool_results.push_back({r.at("name").get<std::string>(), r.value("arguments", Json::object()), r.at("return_value")});
        t.decision_completion = j.at("decision_completion").get<std::string>();
        t.reply_text = j.at("reply_text").get<std::string>();
        t.timings.decision_ms = j.at("timings").at("decision_ms").get<double>();
        t.timings.tools_ms = j.at("timings").at("tools_ms").get<double>();
        t.timings.reply_ms = j.at("timings").at("reply_ms").get<double>();
        t.warnings = j.at("warnings").get<std::vector<std::string>>();
        return t;
    }
};

/// Thrown by run_turn; carries the trace accumulated before the failure.
class TurnAborted : public Error {
public:
    TurnAborted(ErrorCode code, const std::string& detail, TurnTrace partial)
        : Error(code, detail), partial_(std::move(partial)) {}

    const TurnTrace& partial_trace() const noexcept { return partial_; }

private:
    TurnTrace partial_;
};

// ---------------------------------------------------------------------------
// History pruning

/// Keeps only the trailing tool block: the last contiguous run of tool-call /
/// tool-response messages, and only if no assistant text follows it. Every
/// other tool message is dropped; survivors keep their order.
inline std::vector<Message> prune_history(std::span<const Message> messages) {
    std::optional<std::size_t> last_tool;
    for (std::size_t i = messages.size(); i-- > 0;) {
        if (is_tool_message(messages[i])) {
            last_tool = i;
            break;
        }
    }
    std::size_t keep_begin = messages.size(), keep_end = messages.size();
    if (last_tool) {
        bool text_after = false;
        for (std::size_t i = *last_tool + 1; i < messages.size(); ++i)
            if (std::holds_alternative<AssistantText>(messages[i])) text_after = true;
        if (!text_after) {
            keep_end = *last_tool + 1;
            keep_begin = *last_tool;
            while (keep_begin > 0 && is_tool_message(messages[keep_begin - 1])) --keep_begin;
        }
    }
    std::vector<Message> out;
    out.reserve(messages.size());
    for (std::size_t i = 0; i < messages.size(); ++i)
        if (!is_tool_message(messages[i]) || (i >= keep_begin && i < keep_end)) out.push_back(messages[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Prompts

/// Decision prompt: reply tool injected and visible, assistant segment open.
/// The prefill is sent separately in the request.
inline std::string build_decision_prompt(const Session& session, std::span<const Message> working) {
    auto tools = inject_reply_tool(session.toolset->schemas());
    return render_prompt(session.context, working, tools) + std::string(kAssistantMarker);
}

/// Direct-reply prompt: no tool list, forced think block.
inline std::string build_direct_prompt(const Session& session, std::span<const Message> working) {
    return render_prompt(session.context, working, {}, std::string_view(session.config.direct_think_prefix));
}

/// Persona prompt: the real tool list (no reply tool) and the tool block in
/// history, forced think block.
inline std::string build_persona_prompt(const Session& session, std::span<const Message> working) {
    return render_prompt(session.context, working, session.toolset->schemas(),
                         std::string_view(session.config.persona_think_prefix));
}

inline GenerationRequest decision_request(const Session& session, std::span<const Message> working) {
    GenerationRequest req;
    req.prompt = build_decision_prompt(session, working);
    req.prefill = session.config.prefill;
    req.stop_sequences = {session.config.sentinel};
    req.max_new_tokens = session.config.decision_max_tokens;
    req.temperature = session.config.temperature;
    req.seed = session.config.seed;
    return req;
}

// ---------------------------------------------------------------------------
// Decision

struct DecisionOutcome {
    RouteDecision decision;
    std::string raw_completion;
    std::vector<std::string> warnings;
    bool unparseable = false;
};

/// Maps a decision completion (the text after the prefill) to a route.
/// Unparseable output fails open to Reply with a warning.
inline DecisionOutcome interpret_decision(const PipelineConfig& config, const GenerationResult& gen) {
    DecisionOutcome out;
    out.raw_completion = gen.completion;

    auto spurious = [&](const ToolCall& call) {
        out.warnings.push_back("reply called with spurious arguments " + dump_inline(call.arguments) +
                               "; arguments ignored");
    };

    if (gen.finish_reason == FinishReason::Stop && trim(gen.completion) == config.sentinel) {
        out.decision = RouteDecision::reply();
        // A backend without stop support may have run on past the sentinel.
        if (!gen.overflow.empty())
            for (const auto& call : parse_assistant_output(config.prefill + gen.completion + gen.overflow).tool_calls)
                if (call.name == kReplyToolName && !call.arguments.empty()) spurious(call);
        return out;
    }

    auto parsed = parse_assistant_output(config.prefill + gen.completion);
    std::vector<ToolCall> real;
    bool saw_reply = false;
    for (auto& call : parsed.tool_calls) {
        if (call.name == kReplyToolName) {
            saw_reply = true;
            if (!call.arguments.empty()) spurious(call);
        } else {
            real.push_back(std::move(call));
        }
    }
    for (const auto& m : parsed.malformed)
        out.warnings.push_back("malformed tool call #" + std::to_string(m.index) + ": " + m.reason);

    if (!real.empty()) {
        if (saw_reply) out.warnings.push_back("reply sentinel emitted alongside tool calls; sentinel ignored");
        if (parsed.reply_text) out.warnings.push_back("free text after tool calls ignored");
        out.decision = RouteDecision::tools(std::move(real));
        return out;
    }
    if (saw_reply) {
        out.decision = RouteDecision::reply();
        return out;
    }
    // Early stop on the sentinel with surrounding noise still counts as reply.
    if (gen.finish_reason == FinishReason::Stop && gen.matched_stop == config.sentinel &&
        starts_with(trim_view(gen.completion), config.sentinel)) {
        out.decision = RouteDecision::reply();
        return out;
    }
    out.unparseable = true;
    out.warnings.push_back(std::string(to_string(ErrorCode::DecisionUnparseable)) +
                           ": no reply sentinel or tool call in decision output; falling back to reply");
    out.decision = RouteDecision::reply();
    return out;
}

/// `user_message` is appended to the session history for the prompt only.
inline DecisionOutcome decide(const Session& session, const Gateway& gateway, std::string_view user_message,
                              std::optional<Clock::time_point> deadline = std::nullopt) {
    if (trim_view(user_message).empty()) throw Error(ErrorCode::InvalidArgument, "user message is empty");
    std::vector<Message> working = session.history;
    working.push_back(UserText{std::string(user_message)});
    auto gen = gateway.generate(ExpertId::ToolExpert, decision_request(session, working), deadline);
    auto out = interpret_decision(session.config, gen);
    out.warnings.insert(out.warnings.begin(), gen.warnings.begin(), gen.warnings.end());
    return out;
}

// ---------------------------------------------------------------------------
// Turn

struct TurnOptions {
    std::optional<Clock::time_point> deadline;  // wall-clock budget for the whole turn
};

struct TurnOutcome {
    std::string reply;
    TurnTrace trace;
};

namespace detail {

inline double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

inline std::string reply_from_completion(std::string_view completion, std::vector<std::string>& warnings) {
    if (completion.find(kToolCallOpen) == std::string_view::npos) return trim(completion);
    auto parsed = parse_assistant_output(completion);
    warnings.push_back("tool call markup in reply output removed");
    return parsed.reply_text.value_or("");
}

}  // namespace detail

/// Runs one full turn. On success the session history gains the user text and
/// the reply and is then pruned. On any failure the history is untouched.
inline TurnOutcome run_turn(Session& session, const Gateway& gateway, std::string_view user_message,
                            const TurnOptions& options = {}) {
    TurnTrace trace;
    auto fail = [&](ErrorCode code, const std::string& detail) -> TurnOutcome {
        throw TurnAborted(code, detail, trace);
    };
    auto check_budget = [&](const char* phase) {
        if (options.deadline && Clock::now() >= *options.deadline)
            fail(ErrorCode::BudgetExceeded, std::string("turn budget exhausted before ") + phase);
    };
    auto generation_failed = [&](const Error& e) -> TurnOutcome {
        if (options.deadline && Clock::now() >= *options.deadline)
            return fail(ErrorCode::BudgetExceeded, std::string("turn budget exhausted: ") + e.what());
        return fail(e.code(), e.what());
    };

    if (trim_view(user_message).empty()) throw Error(ErrorCode::InvalidArgument, "user message is empty");
    std::vector<Message> working = session.history;
    working.push_back(UserText{std::string(user_message)});

    check_budget("decision");
    auto phase = Clock::now();
    DecisionOutcome decision;
    try {
        auto gen = gateway.generate(ExpertId::ToolExpert, decision_request(session, working), options.deadline);
        decision = interpret_decision(session.config, gen);
        decision.warnings.insert(decision.warnings.begin(), gen.warnings.begin(), gen.warnings.end());
    } catch (const Error& e) {
        trace.timings.decision_ms = detail::elapsed_ms(phase);
        return generation_failed(e);
    }
    trace.timings.decision_ms = detail::elapsed_ms(phase);
    trace.decision = decision.decision;
    trace.decision_completion = decision.raw_completion;
    trace.warnings = decision.warnings;

    GenerationRequest reply_req;
    reply_req.max_new_tokens = session.config.reply_max_tokens;
    reply_req.temperature = session.config.temperature;
    reply_req.seed = session.config.seed;
    ExpertId expert = ExpertId::DirectExpert;

    if (decision.decision.is_reply()) {
        reply_req.prompt = build_direct_prompt(session, working);
    } else {
        check_budget("tool execution");
        phase = Clock::now();
        auto executed = execute_calls(decision.decision.calls, *session.toolset, session.context);
        trace.timings.tools_ms = detail::elapsed_ms(phase);
        for (const auto& issue : executed.issues)
            trace.warnings.push_back(std::string(to_string(issue.code)) + ": " + issue.detail);
        trace.tool_calls = decision.decision.calls;
        trace.tool_results = executed.results;
        working.push_back(AssistantToolCalls::from_calls(decision.decision.calls));
        working.push_back(ToolResponse::from_results(std::move(executed.results)));
        reply_req.prompt = build_persona_prompt(session, working);
        reply_req.banned_strings = session.config.banned_strings;
        expert = ExpertId::PersonaExpert;
    }

    check_budget("reply generation");
    phase = Clock::now();
    GenerationResult gen;
    try {
        gen = gateway.generate(expert, reply_req, options.deadline);
    } catch (const Error& e) {
        trace.timings.reply_ms = detail::elapsed_ms(phase);
        return generation_failed(e);
    }
    trace.timings.reply_ms = detail::elapsed_ms(phase);
    trace.warnings.insert(trace.warnings.end(), gen.warnings.begin(), gen.warnings.end());
    trace.expert_used = expert;
    trace.reply_text = detail::reply_from_completion(gen.completion, trace.warnings);
    check_budget("commit");

    working.push_back(AssistantText{trace.reply_text, std::nullopt});
    session.history = prune_history(working);
    return {trace.reply_text, std::move(trace)};
}

}  // namespace npc
