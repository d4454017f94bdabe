#pragma once

// Generation contract shared by every expert plus two backends: a
// deterministic scripted backend and an HTTP client for a completion server.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "httplib.h"
#include "npc/error.hpp"
#include "npc/json_text.hpp"

namespace npc {

using Clock = std::chrono::steady_clock;

enum class ExpertId { ToolExpert, DirectExpert, PersonaExpert };

inline std::string_view to_string(ExpertId id) {
    switch (id) {
        case ExpertId::ToolExpert: return "ToolExpert";
        case ExpertId::DirectExpert: return "DirectExpert";
        case ExpertId::PersonaExpert: return "PersonaExpert";
    }
    return "ToolExpert";
}

/// Short keys used by config and script files: tool / direct / persona.
inline std::string_view config_key(ExpertId id) {
    switch (id) {
        case ExpertId::ToolExpert: return "tool";
        case ExpertId::DirectExpert: return "direct";
        case ExpertId::PersonaExpert: return "persona";
    }
    return "tool";
}

inline std::optional<ExpertId> parse_expert(std::string_view s) {
    if (s == "tool" || s == "ToolExpert") return ExpertId::ToolExpert;
    if (s == "direct" || s == "DirectExpert") return ExpertId::DirectExpert;
    if (s == "persona" || s == "PersonaExpert") return ExpertId::PersonaExpert;
    return std::nullopt;
}

enum class FinishReason { Stop, Length, BannedFiltered };

inline std::string_view to_string(FinishReason r) {
    switch (r) {
        case FinishReason::Stop: return "stop";
        case FinishReason::Length: return "length";
        case FinishReason::BannedFiltered: return "banned-filtered";
    }
    return "stop";
}

struct GenerationRequest {
    std::string prompt;
    std::optional<std::string> prefill;
    std::vector<std::string> stop_sequences;
    std::vector<std::string> banned_strings;
    int max_new_tokens = 256;
    double temperature = 0.7;
    std::optional<std::int64_t> seed;

    void validate() const {
        if (max_new_tokens < 1) throw Error(ErrorCode::InvalidArgument, "max_new_tokens must be >= 1");
        if (temperature < 0.0) throw Error(ErrorCode::InvalidArgument, "temperature must be non-negative");
        for (const auto& s : stop_sequences)
            if (s.empty()) throw Error(ErrorCode::InvalidArgument, "stop sequences must be nonempty");
    }

    std::string full_prompt() const { return prefill ? prompt + *prefill : prompt; }
};

struct GenerationResult {
    std::string completion;  // continuation after the prefill
    FinishReason finish_reason = FinishReason::Stop;
    int prompt_tokens = 0;
    int completion_tokens = 0;
    std::optional<std::string> matched_stop;
    std::string overflow;  // text the backend produced past the matched stop, dropped from completion
    std::vector<std::string> warnings;
};

/// Removes every occurrence of each banned string, repeating until none is
/// left (a removal can splice a new occurrence together).
inline std::pair<std::string, bool> apply_ban_filter(std::string text, const std::vector<std::string>& banned) {
    bool filtered = false;
    bool changed = true;
    while (changed) {
        changed = false;
        for (const auto& b : banned) {
            if (b.empty()) continue;
            std::string out;
            std::size_t pos = 0;
            for (auto hit = text.find(b); hit != std::string::npos; hit = text.find(b, pos)) {
                out.append(text, pos, hit - pos);
                pos = hit + b.size();
                changed = true;
            }
            if (pos != 0) {
                out.append(text, pos, std::string::npos);
                text = std::move(out);
            }
        }
        filtered = filtered || changed;
    }
    return {std::move(text), filtered};
}

// ---------------------------------------------------------------------------
// Backends

/// Raw backend answer before gateway post-processing.
struct RawCompletion {
    std::string text;
    // Set when the server already applied stop/length limits itself.
    std::optional<FinishReason> server_finish;
    std::optional<std::string> stopping_word;
    int prompt_tokens = 0;
    int completion_tokens = 0;
};

class Backend {
public:
    virtual ~Backend() = default;
    /// Must give up (BackendUnavailable) once `deadline` has passed.
    virtual RawCompletion complete(ExpertId expert, const GenerationRequest& request, Clock::time_point deadline) = 0;
    virtual bool native_suppression() const { return false; }
};

namespace detail {

// Scripted-backend token model: a token is a run of non-whitespace plus the
// whitespace before it. Returns the end offset of each token.
inline std::vector<std::size_t> token_ends(std::string_view text) {
    std::vector<std::size_t> ends;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i >= text.size()) break;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        ends.push_back(i);
    }
    return ends;
}

inline int count_tokens(std::string_view text) { return static_cast<int>(token_ends(text).size()); }

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace detail

/// First-match rule list: `[{match: {expert, prompt_substring}, output}]`.
/// Optional per-rule `delay_ms` simulates a slow model and `fail`
/// ("unavailable" | "protocol") simulates a broken one.
class ScriptedBackend : public Backend {
public:
    struct Rule {
        std::optional<ExpertId> expert;  // nullopt matches any expert
        std::string prompt_substring;
        std::string output;
        int delay_ms = 0;
        std::string fail;
    };

    ScriptedBackend() = default;
    explicit ScriptedBackend(std::vector<Rule> rules) : rules_(std::move(rules)) {}

    static ScriptedBackend from_json(const Json& doc) {
        if (!doc.is_array()) throw Error(ErrorCode::ConfigError, "script must be a JSON list of rules");
        std::vector<Rule> rules;
        for (std::size_t i = 0; i < doc.size(); ++i) {
            const auto& r = doc[i];
            auto where = "script rule " + std::to_string(i);
            if (!r.is_object() || !r.contains("output") || !r["output"].is_string())
                throw Error(ErrorCode::ConfigError, where + ": needs a string output");
            Rule rule;
            rule.output = r["output"].get<std::string>();
            if (r.contains("match")) {
                const auto& m = r["match"];
                if (!m.is_object()) throw Error(ErrorCode::ConfigError, where + ": match must be an object");
                if (m.contains("expert") && m["expert"].is_string() && m["expert"] != "*") {
                    rule.expert = parse_expert(m["expert"].get<std::string>());
                    if (!rule.expert) throw Error(ErrorCode::ConfigError, where + ": unknown expert");
                }
                rule.prompt_substring = m.value("prompt_substring", std::string());
            }
            rule.delay_ms = r.value("delay_ms", 0);
            rule.fail = r.value("fail", std::string());
            rules.push_back(std::move(rule));
        }
        return ScriptedBackend(std::move(rules));
    }

    static ScriptedBackend from_file(const std::string& path) {
        auto text = detail::read_file(path);
        Json doc = Json::parse(text, nullptr, false);
        if (doc.is_discarded()) throw Error(ErrorCode::ConfigError, path + ": invalid JSON");
        return from_json(doc);
    }

    const std::vector<Rule>& rules() const { return rules_; }

    RawCompletion complete(ExpertId expert, const GenerationRequest& request, Clock::time_point deadline) override {
        auto text = request.full_prompt();
        for (const auto& rule : rules_) {
            if (rule.expert && *rule.expert != expert) continue;
            if (text.find(rule.prompt_substring) == std::string::npos) continue;
            if (rule.delay_ms > 0) {
                auto ready = Clock::now() + std::chrono::milliseconds(rule.delay_ms);
                std::this_thread::sleep_until(std::min(ready, deadline));
                if (ready > deadline) throw Error(ErrorCode::BackendUnavailable, "scripted backend timed out");
            }
            if (rule.fail == "unavailable") throw Error(ErrorCode::BackendUnavailable, "scripted backend unavailable");
            if (rule.fail == "protocol") throw Error(ErrorCode::BackendProtocol, "scripted backend malformed response");
            RawCompletion raw;
            raw.text = rule.output;
            raw.prompt_tokens = detail::count_tokens(text);
            return raw;
        }
        throw Error(ErrorCode::BackendProtocol,
                    "no script rule matches " + std::string(to_string(expert)) + " prompt");
    }

private:
    std::vector<Rule> rules_;
};

/// Client for `POST {endpoint}/completion`.
class HttpBackend : public Backend {
public:
    explicit HttpBackend(std::string endpoint, bool native_suppression = false)
        : native_suppression_(native_suppression) {
        auto scheme = endpoint.find("://");
        auto host_begin = scheme == std::string::npos ? 0 : scheme + 3;
        auto path_begin = endpoint.find('/', host_begin);
        if (path_begin == std::string::npos) {
            origin_ = endpoint;
        } else {
            origin_ = endpoint.substr(0, path_begin);
            base_path_ = endpoint.substr(path_begin);
        }
        while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
        if (origin_.empty()) throw Error(ErrorCode::ConfigError, "empty backend endpoint");
    }

    bool native_suppression() const override { return native_suppression_; }

    static Json request_body(const GenerationRequest& request, bool with_logit_bias) {
        Json body = {{"prompt", request.full_prompt()},
                     {"max_tokens", request.max_new_tokens},
                     {"stop", request.stop_sequences},
                     {"temperature", request.temperature}};
        if (request.seed) body["seed"] = *request.seed;
        if (with_logit_bias && !request.banned_strings.empty()) body["logit_bias_strings"] = request.banned_strings;
        return body;
    }

    static RawCompletion parse_response(std::string_view body) {
        Json j = Json::parse(body.begin(), body.end(), nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::BackendProtocol, "response is not a JSON object");
        if (!j.contains("text") || !j["text"].is_string())
            throw Error(ErrorCode::BackendProtocol, "response lacks a string 'text'");
        if (!j.contains("finish_reason") || !j["finish_reason"].is_string())
            throw Error(ErrorCode::BackendProtocol, "response lacks 'finish_reason'");
        RawCompletion raw;
        raw.text = j["text"].get<std::string>();
        auto finish = j["finish_reason"].get<std::string>();
        if (finish == "stop") raw.server_finish = FinishReason::Stop;
        else if (finish == "length") raw.server_finish = FinishReason::Length;
        else throw Error(ErrorCode::BackendProtocol, "unknown finish_reason '" + finish + "'");
        auto read_count = [&](const char* key) {
            if (!j.contains(key) || j[key].is_null()) return 0;
            if (!j[key].is_number_integer() || j[key].get<long long>() < 0)
                throw Error(ErrorCode::BackendProtocol, std::string(key) + " must be a non-negative integer");
            return j[key].get<int>();
        };
        raw.prompt_tokens = read_count("prompt_tokens");
        raw.completion_tokens = read_count("completion_tokens");
        if (j.contains("stopping_word") && j["stopping_word"].is_string() && !j["stopping_word"].get<std::string>().empty())
            raw.stopping_word = j["stopping_word"].get<std::string>();
        return raw;
    }

    RawCompletion complete(ExpertId, const GenerationRequest& request, Clock::time_point deadline) override {
        auto remaining = std::chrono::duration_cast<std::chrono::microseconds>(deadline - Clock::now());
        if (remaining.count() <= 0) throw Error(ErrorCode::BackendUnavailable, "deadline passed before request");
        httplib::Client client(origin_);
        auto sec = static_cast<time_t>(remaining.count() / 1000000);
        auto usec = static_cast<time_t>(remaining.count() % 1000000);
        client.set_connection_timeout(sec, usec);
        client.set_read_timeout(sec, usec);
        client.set_write_timeout(sec, usec);
        auto body = request_body(request, native_suppression_).dump();
        auto res = client.Post(base_path_ + "/completion", body, "application/json");
        if (!res) throw Error(ErrorCode::BackendUnavailable, "completion server: " + httplib::to_string(res.error()));
        if (res->status == 502 || res->status == 503 || res->status == 504)
            throw Error(ErrorCode::BackendUnavailable, "completion server status " + std::to_string(res->status));
        if (res->status != 200)
            throw Error(ErrorCode::BackendProtocol, "completion server status " + std::to_string(res->status));
        return parse_response(res->body);
    }

private:
    std::string origin_;
    std::string base_path_;
    bool native_suppression_ = false;
};

// ---------------------------------------------------------------------------
// Gateway

struct ExpertBinding {
    std::shared_ptr<Backend> backend;
    std::string model;  // adapter / model identifier, informational
};

/// Thread-safe: bindings are fixed at construction and backends must
/// tolerate concurrent calls.
class Gateway {
public:
    static constexpr int kDefaultTimeoutMs = 6000;

    Gateway() = default;
    explicit Gateway(std::map<ExpertId, ExpertBinding> bindings, int timeout_ms = kDefaultTimeoutMs)
        : bindings_(std::move(bindings)), timeout_ms_(timeout_ms) {
        if (timeout_ms_ <= 0) throw Error(ErrorCode::ConfigError, "backend timeout must be positive");
    }

    void set_warning_sink(std::function<void(const std::string&)> sink) { warn_ = std::move(sink); }
    int timeout_ms() const { return timeout_ms_; }
    bool configured(ExpertId expert) const { return bindings_.count(expert) > 0; }

    const ExpertBinding& binding(ExpertId expert) const {
        auto it = bindings_.find(expert);
        if (it == bindings_.end() || !it->second.backend)
            throw Error(ErrorCode::UnconfiguredExpert, std::string(to_string(expert)) + " has no backend");
        return it->second;
    }

    /// `turn_deadline`, when set, caps the per-call timeout.
    GenerationResult generate(ExpertId expert, const GenerationRequest& request,
                              std::optional<Clock::time_point> turn_deadline = std::nullopt) const {
        request.validate();
        const auto& bound = binding(expert);
        auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms_);
        if (turn_deadline && *turn_deadline < deadline) deadline = *turn_deadline;
        auto raw = bound.backend->complete(expert, request, deadline);
        return postprocess(request, std::move(raw), bound.backend->native_suppression());
    }

    /// Echo stripping, stop/length limits and the banned-string filter.
    GenerationResult postprocess(const GenerationRequest& request, RawCompletion raw, bool native_suppression) const {
        GenerationResult out;
        std::string text = std::move(raw.text);
        if (request.prefill) {
            auto full = request.full_prompt();
            if (starts_with(text, full)) text.erase(0, full.size());
            else if (starts_with(text, *request.prefill)) text.erase(0, request.prefill->size());
        }

        // Earliest stop occurrence; ties go to the longer sequence. The stop
        // text itself is kept and anything after it is dropped.
        std::optional<std::pair<std::size_t, std::size_t>> stop;  // (begin, end)
        std::string stop_text;
        for (const auto& s : request.stop_sequences) {
            auto at = text.find(s);
            if (at == std::string::npos) continue;
            if (!stop || at < stop->first || (at == stop->first && at + s.size() > stop->second)) {
                stop = std::make_pair(at, at + s.size());
                stop_text = s;
            }
        }

        if (raw.server_finish) {
            out.finish_reason = *raw.server_finish;
            if (stop) {
                out.overflow = text.substr(stop->second);
                text.resize(stop->second);
                out.finish_reason = FinishReason::Stop;
                out.matched_stop = stop_text;
            } else if (raw.stopping_word && out.finish_reason == FinishReason::Stop) {
                // Server trimmed the stop text; restore it so callers see it.
                text += *raw.stopping_word;
                out.matched_stop = raw.stopping_word;
            }
            out.completion_tokens = raw.completion_tokens;
        } else {
            auto ends = detail::token_ends(text);
            std::optional<std::size_t> cap;
            if (ends.size() > static_cast<std::size_t>(request.max_new_tokens))
                cap = ends[static_cast<std::size_t>(request.max_new_tokens) - 1];
            if (stop && (!cap || stop->second <= *cap)) {
                out.overflow = text.substr(stop->second);
                text.resize(stop->second);
                out.finish_reason = FinishReason::Stop;
                out.matched_stop = stop_text;
            } else if (cap) {
                text.resize(*cap);
                out.finish_reason = FinishReason::Length;
            } else {
                out.finish_reason = FinishReason::Stop;
            }
            out.completion_tokens = detail::count_tokens(text);
        }
        out.prompt_tokens = raw.prompt_tokens;
        if (out.finish_reason == FinishReason::Length)
            out.completion_tokens = std::min(out.completion_tokens, request.max_new_tokens);

        auto [filtered, removed] = apply_ban_filter(std::move(text), request.banned_strings);
        out.completion = std::move(filtered);
        if (removed) {
            out.finish_reason = FinishReason::BannedFiltered;
            std::string msg = native_suppression ? "banned string emitted despite native suppression; removed"
                                                 : "banned string removed from completion";
            out.warnings.push_back(msg);
            if (warn_) warn_(msg);
        }
        return out;
    }

private:
    std::map<ExpertId, ExpertBinding> bindings_;
    int timeout_ms_ = kDefaultTimeoutMs;
    std::function<void(const std::string&)> warn_;
};

}  // namespace npc
