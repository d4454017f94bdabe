#pragma once

// Session management and the turn service behind the HTTP API and the REPL.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "npc/backend_gateway.hpp"
#include "npc/core_model.hpp"
#include "npc/dataset_toolkit.hpp"
#include "npc/error.hpp"
#include "npc/router_engine.hpp"
#include "npc/tool_registry.hpp"

namespace npc {

inline constexpr int kDefaultBudgetMs = 7000;
inline constexpr std::chrono::minutes kDefaultIdleExpiry{30};

struct ExpertConfig {
    std::optional<std::string> endpoint;
    std::optional<std::string> script;
    std::string model;
    bool native_suppression = false;
};

struct ServiceConfig {
    std::map<ExpertId, ExpertConfig> experts;
    int budget_ms = kDefaultBudgetMs;
    int timeout_ms = Gateway::kDefaultTimeoutMs;
    PipelineConfig pipeline;
    std::optional<std::string> records;   // scenario source for serve/chat
    std::optional<std::string> manifest;
    std::string host = "127.0.0.1";
    int port = 8080;

    /// Relative script / records / manifest paths resolve against base_dir.
    static ServiceConfig from_json(const Json& doc, const std::filesystem::path& base_dir = {}) {
        if (!doc.is_object()) throw Error(ErrorCode::ConfigError, "config must be a JSON object");
        ServiceConfig cfg;
        auto resolve = [&](const std::string& p) {
            std::filesystem::path path(p);
            if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
            return path.string();
        };
        auto get_string = [&](const Json& obj, const char* key, std::string& out) {
            if (!obj.contains(key)) return;
            if (!obj[key].is_string()) throw Error(ErrorCode::ConfigError, std::string(key) + " must be a string");
            out = obj[key].get<std::string>();
        };
        auto get_int = [&](const char* key, int& out) {
            if (!doc.contains(key)) return;
            if (!doc[key].is_number_integer() || doc[key].get<int>() <= 0)
                throw Error(ErrorCode::ConfigError, std::string(key) + " must be a positive integer");
            out = doc[key].get<int>();
        };

        if (doc.contains("experts")) {
            const auto& experts = doc["experts"];
            if (!experts.is_object()) throw Error(ErrorCode::ConfigError, "experts must be an object");
            for (const auto& [key, e] : experts.items()) {
                auto id = parse_expert(key);
                if (!id) throw Error(ErrorCode::ConfigError, "unknown expert '" + key + "'");
                if (!e.is_object()) throw Error(ErrorCode::ConfigError, "expert '" + key + "' must be an object");
                ExpertConfig ec;
                if (e.contains("endpoint")) ec.endpoint = e["endpoint"].get<std::string>();
                if (e.contains("script")) ec.script = resolve(e["script"].get<std::string>());
                if (ec.endpoint.has_value() == ec.script.has_value())
                    throw Error(ErrorCode::ConfigError, "expert '" + key + "' needs exactly one of endpoint or script");
                get_string(e, "model", ec.model);
                ec.native_suppression = e.value("native_suppression", false);
                cfg.experts[*id] = std::move(ec);
            }
        }
        get_int("budget_ms", cfg.budget_ms);
        get_int("timeout_ms", cfg.timeout_ms);
        get_int("port", cfg.port);
        get_string(doc, "host", cfg.host);
        get_string(doc, "prefill", cfg.pipeline.prefill);
        get_string(doc, "sentinel", cfg.pipeline.sentinel);
        if (doc.contains("think_prefixes")) {
            const auto& t = doc["think_prefixes"];
            if (!t.is_object()) throw Error(ErrorCode::ConfigError, "think_prefixes must be an object");
            get_string(t, "direct", cfg.pipeline.direct_think_prefix);
            get_string(t, "persona", cfg.pipeline.persona_think_prefix);
        }
        if (doc.contains("banned_strings")) {
            const auto& b = doc["banned_strings"];
            if (!b.is_array()) throw Error(ErrorCode::ConfigError, "banned_strings must be a list");
            cfg.pipeline.banned_strings.clear();
            for (const auto& s : b) cfg.pipeline.banned_strings.push_back(s.get<std::string>());
        }
        if (doc.contains("temperature")) cfg.pipeline.temperature = doc["temperature"].get<double>();
        if (doc.contains("seed")) cfg.pipeline.seed = doc["seed"].get<std::int64_t>();
        if (doc.contains("records")) cfg.records = resolve(doc["records"].get<std::string>());
        if (doc.contains("manifest")) cfg.manifest = resolve(doc["manifest"].get<std::string>());
        if (cfg.pipeline.prefill.empty() || cfg.pipeline.sentinel.empty())
            throw Error(ErrorCode::ConfigError, "prefill and sentinel must be non-empty");
        return cfg;
    }

    static ServiceConfig load(const std::string& path) {
        Json doc = Json::parse(detail::read_file(path), nullptr, false);
        if (doc.is_discarded()) throw Error(ErrorCode::ConfigError, path + ": invalid JSON");
        try {
            return from_json(doc, std::filesystem::path(path).parent_path());
        } catch (const Json::exception& e) {
            throw Error(ErrorCode::ConfigError, path + ": " + e.what());
        }
    }
};

inline std::shared_ptr<Gateway> build_gateway(const ServiceConfig& cfg) {
    std::map<ExpertId, ExpertBinding> bindings;
    std::map<std::string, std::shared_ptr<Backend>> scripts;  // one backend per script file
    for (const auto& [id, ec] : cfg.experts) {
        std::shared_ptr<Backend> backend;
        if (ec.script) {
            auto& shared = scripts[*ec.script];
            if (!shared) shared = std::make_shared<ScriptedBackend>(ScriptedBackend::from_file(*ec.script));
            backend = shared;
        } else {
            backend = std::make_shared<HttpBackend>(*ec.endpoint, ec.native_suppression);
        }
        bindings[id] = {std::move(backend), ec.model};
    }
    return std::make_shared<Gateway>(std::move(bindings), cfg.timeout_ms);
}

// ---------------------------------------------------------------------------
// Scenarios

struct Scenario {
    ScenarioContext context;
    std::shared_ptr<const ToolSet> toolset;
};

/// One scenario per record; tools answer by replaying the record's gold data.
inline std::map<std::string, Scenario> scenarios_from_records(std::span<const ConversationRecord> records,
                                                              const ToolManifest& manifest) {
    std::map<std::string, Scenario> out;
    for (const auto& rec : records) {
        const auto& tools = resolve_tools(rec, manifest);
        auto toolset = std::make_shared<const ToolSet>(tools, make_record_handlers(rec, tools));
        out[rec.data_id] = {rec.context, std::move(toolset)};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sessions

class SessionStore {
public:
    using NowFn = std::function<Clock::time_point()>;

    struct Entry {
        std::mutex turn_mutex;  // held for the whole turn
        std::mutex state_mutex; // guards session
        Session session;
        Clock::time_point created;
    };

    explicit SessionStore(std::chrono::milliseconds idle_expiry = kDefaultIdleExpiry, NowFn now = &Clock::now)
        : idle_(idle_expiry), now_(std::move(now)), rng_(std::random_device{}()) {}

    std::string add(Session session) {
        std::lock_guard lock(mutex_);
        purge_locked();
        std::string id;
        do id = fresh_id(); while (slots_.count(id));
        session.session_id = id;
        auto entry = std::make_shared<Entry>();
        entry->session = std::move(session);
        entry->created = now_();
        slots_[id] = {entry, entry->created};
        return id;
    }

    /// Refreshes the idle timer. Expired or unknown ids raise UnknownSession.
    std::shared_ptr<Entry> get(const std::string& id) {
        std::lock_guard lock(mutex_);
        auto it = slots_.find(id);
        auto now = now_();
        if (it == slots_.end() || now - it->second.last_used > idle_) {
            if (it != slots_.end()) slots_.erase(it);
            throw Error(ErrorCode::UnknownSession, "no session '" + id + "'");
        }
        it->second.last_used = now;
        return it->second.entry;
    }

    std::size_t size() const {
        std::lock_guard lock(mutex_);
        return slots_.size();
    }

    void purge_expired() {
        std::lock_guard lock(mutex_);
        purge_locked();
    }

private:
    struct Slot {
        std::shared_ptr<Entry> entry;
        Clock::time_point last_used;
    };

    void purge_locked() {
        auto now = now_();
        std::erase_if(slots_, [&](const auto& kv) { return now - kv.second.last_used > idle_; });
    }

    std::string fresh_id() {
        static constexpr char hex[] = "0123456789abcdef";
        auto bits = rng_();
        std::string id;
        for (int i = 0; i < 16; ++i, bits >>= 4) id += hex[bits & 0xf];
        return id;
    }

    std::chrono::milliseconds idle_;
    NowFn now_;
    std::mt19937_64 rng_;
    mutable std::mutex mutex_;
    std::map<std::string, Slot> slots_;
};

// ---------------------------------------------------------------------------
// Service

struct TurnResponse {
    std::string reply;
    TurnTrace trace;
    double timing_total_ms = 0;

    Json to_json() const { return {{"reply", reply}, {"trace", trace.to_json()}, {"timing_total_ms", timing_total_ms}}; }
};

struct ScenarioSummary {
    std::string id;
    std::string npc_name;
    std::string place;

    Json to_json() const { return {{"id", id}, {"npc_name", npc_name}, {"place", place}}; }
};

class Service {
public:
    Service(std::shared_ptr<const Gateway> gateway, PipelineConfig pipeline, std::map<std::string, Scenario> scenarios,
            int budget_ms = kDefaultBudgetMs, std::chrono::milliseconds idle_expiry = kDefaultIdleExpiry,
            SessionStore::NowFn now = &Clock::now)
        : gateway_(std::move(gateway)),
          pipeline_(std::move(pipeline)),
          scenarios_(std::move(scenarios)),
          budget_(budget_ms),
          sessions_(idle_expiry, std::move(now)) {
        if (!gateway_) throw Error(ErrorCode::ConfigError, "service needs a gateway");
        if (budget_ms <= 0) throw Error(ErrorCode::ConfigError, "budget must be positive");
    }

    std::vector<ScenarioSummary> scenarios() const {
        std::vector<ScenarioSummary> out;
        for (const auto& [id, s] : scenarios_) out.push_back({id, s.context.npc_name(), s.context.state.place});
        return out;
    }

    std::string create_session(const std::string& scenario_id) {
        auto it = scenarios_.find(scenario_id);
        if (it == scenarios_.end()) throw Error(ErrorCode::UnknownScenario, "no scenario '" + scenario_id + "'");
        Session s;
        s.context = it->second.context;
        s.toolset = it->second.toolset;
        s.config = pipeline_;
        return sessions_.add(std::move(s));
    }

    /// One turn at a time per session. The stored history changes only when
    /// the whole turn succeeds within the budget.
    TurnResponse post_message(const std::string& session_id, const std::string& text) {
        auto entry = sessions_.get(session_id);
        std::unique_lock turn(entry->turn_mutex, std::try_to_lock);
        if (!turn.owns_lock()) throw Error(ErrorCode::TurnInProgress, "session '" + session_id + "' is mid-turn");

        auto start = Clock::now();
        Session working;
        {
            std::lock_guard lock(entry->state_mutex);
            working = entry->session;
        }
        TurnOptions options;
        options.deadline = start + budget_;
        auto outcome = run_turn(working, *gateway_, text, options);
        {
            std::lock_guard lock(entry->state_mutex);
            entry->session.history = std::move(working.history);
        }
        TurnResponse response;
        response.reply = std::move(outcome.reply);
        response.trace = std::move(outcome.trace);
        response.timing_total_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
        return response;
    }

    std::vector<Message> history(const std::string& session_id) {
        auto entry = sessions_.get(session_id);
        std::lock_guard lock(entry->state_mutex);
        return entry->session.history;
    }

    const SessionStore& sessions() const { return sessions_; }
    std::chrono::milliseconds budget() const { return budget_; }

private:
    std::shared_ptr<const Gateway> gateway_;
    PipelineConfig pipeline_;
    std::map<std::string, Scenario> scenarios_;
    std::chrono::milliseconds budget_;
    SessionStore sessions_;
};

}  // namespace npc
