#pragma once

#include <map>
#include <memory>
#include <random>
#include <regex>
#include <string>
#include <vector>

#include "npc/npc.hpp"

namespace fx {

using namespace npc;

inline std::string data_path(const std::string& name) { return std::string(NPC_DATA_DIR) + "/" + name; }

inline std::vector<ConversationRecord> data_records() { return load_records(detail::read_file(data_path("records.json"))); }

inline ToolManifest data_manifest() { return load_manifest(detail::read_file(data_path("manifest.json"))); }

/// The Luna weapon-shop record (task1_train_0001).
inline ConversationRecord luna_record() { return data_records().at(0); }

inline ScenarioContext luna_context() { return luna_record().context; }

inline ToolSchema check_price_schema() {
    return ToolSchema::from_json(Json::parse(R"({
        "name": "check_price",
        "description": "Check the price of a specified weapon (e.g. Avis Wind, Short Sword, etc.).",
        "parameters": {"type": "object",
                       "properties": {"item_name": {"type": "string", "description": "Specified weapon name"}},
                       "required": ["item_name"]}})"));
}

inline ToolSchema equip_schema() {
    return ToolSchema::from_json(Json::parse(R"({
        "name": "equip",
        "description": "Equip the specified weapon.",
        "parameters": {"type": "object",
                       "properties": {"item_name": {"type": "string", "description": "Specified weapon name"}},
                       "required": ["item_name"]}})"));
}

inline ToolCall call(std::string name, Json args = Json::object()) { return {std::move(name), std::move(args)}; }

inline ToolResult result(std::string name, Json args, Json ret) {
    if (args.is_null()) args = Json::object();
    return {std::move(name), std::move(args), std::move(ret)};
}

// ---------------------------------------------------------------------------
// Scripted gateways

using Rule = ScriptedBackend::Rule;

inline Rule rule(std::optional<ExpertId> expert, std::string substring, std::string output, int delay_ms = 0,
                 std::string fail = {}) {
    return {expert, std::move(substring), std::move(output), delay_ms, std::move(fail)};
}

/// Counts calls per expert and records every request.
class RecordingBackend : public Backend {
public:
    explicit RecordingBackend(std::shared_ptr<Backend> inner) : inner_(std::move(inner)) {}

    RawCompletion complete(ExpertId expert, const GenerationRequest& request, Clock::time_point deadline) override {
        {
            std::lock_guard lock(mutex_);
            calls.push_back({expert, request});
        }
        return inner_->complete(expert, request, deadline);
    }

    std::size_t count(ExpertId expert) const {
        std::lock_guard lock(mutex_);
        std::size_t n = 0;
        for (const auto& c : calls) n += c.first == expert;
        return n;
    }

    void clear() {
        std::lock_guard lock(mutex_);
        calls.clear();
    }

    std::vector<std::pair<ExpertId, GenerationRequest>> calls;

private:
    std::shared_ptr<Backend> inner_;
    mutable std::mutex mutex_;
};

inline std::map<ExpertId, ExpertBinding> bind_all(std::shared_ptr<Backend> backend) {
    std::map<ExpertId, ExpertBinding> b;
    for (auto id : {ExpertId::ToolExpert, ExpertId::DirectExpert, ExpertId::PersonaExpert}) b[id] = {backend, "test"};
    return b;
}

inline std::shared_ptr<Gateway> scripted_gateway(std::vector<Rule> rules, int timeout_ms = Gateway::kDefaultTimeoutMs) {
    return std::make_shared<Gateway>(bind_all(std::make_shared<ScriptedBackend>(std::move(rules))), timeout_ms);
}

inline std::string decision_output_for(const std::vector<ToolCall>& calls) {
    auto text = serialize_tool_calls(calls);
    return text.substr(kDecisionPrefill.size());
}

inline const std::string kReplyDecision = "reply\", \"arguments\": {}}\n</tool_call>";

// ---------------------------------------------------------------------------
// Generators

class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    std::mt19937_64& rng() { return rng_; }

    int range(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
    bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(rng_); }

    template <class T>
    const T& pick(const std::vector<T>& v) {
        return v[static_cast<std::size_t>(range(0, static_cast<int>(v.size()) - 1))];
    }

    std::string word() {
        static const std::vector<std::string> words = {
            "sword", "gold", "Luna", "bow", "night", "rain", "shop", "300", "15", "attack", "Avis", "Wind",
            "price", "guild", "dawn", "héros", "épée", "monster", "cheap", "heavy", "caf\xc3\xa9", "\"quoted\"",
            "back\\slash", "tab\there", "{brace}", "[list]", "colon:", "<angle>", "it's", "ok?"};
        return pick(words);
    }

    std::string sentence(int min_words = 1, int max_words = 8) {
        std::string out;
        int n = range(min_words, max_words);
        for (int i = 0; i < n; ++i) {
            if (i) out += coin(0.1) ? "\n" : " ";
            out += word();
        }
        return out;
    }

    std::string identifier() {
        static const std::vector<std::string> names = {"check_price", "search_item", "equip", "repair",
                                                       "lookup_pricing", "sell", "give_item"};
        return pick(names);
    }

    Json scalar() {
        switch (range(0, 4)) {
            case 0: return sentence(1, 3);
            case 1: return range(-1000, 1000);
            case 2: return coin();
            case 3: return range(0, 400) / 4.0;
            default: return nullptr;
        }
    }

    Json value(int depth = 0) {
        int kind = depth >= 2 ? 0 : range(0, 3);
        if (kind <= 1) return scalar();
        if (kind == 2) {
            Json arr = Json::array();
            for (int i = range(0, 3); i > 0; --i) arr.push_back(value(depth + 1));
            return arr;
        }
        return object(depth + 1);
    }

    Json object(int depth = 0) {
        Json obj = Json::object();
        for (int i = range(0, 3); i > 0; --i) obj["k" + std::to_string(range(0, 9))] = value(depth);
        return obj;
    }

    ToolCall tool_call() { return {identifier(), object(1)}; }

    std::vector<ToolCall> tool_calls() {
        std::vector<ToolCall> calls;
        for (int i = range(1, 3); i > 0; --i) calls.push_back(tool_call());
        return calls;
    }

    std::vector<ToolResult> results_for(const std::vector<ToolCall>& calls) {
        std::vector<ToolResult> out;
        for (const auto& c : calls) out.push_back({c.name, c.arguments, value()});
        return out;
    }

    /// Structurally valid history: user turns, each answered directly or
    /// through one tool block. Optionally stops right after a tool block.
    std::vector<Message> conversation(int max_turns = 4, bool allow_open_tool_block = true) {
        std::vector<Message> msgs;
        int turns = range(0, max_turns);
        for (int t = 0; t < turns; ++t) {
            msgs.push_back(UserText{sentence()});
            if (coin()) {
                auto calls = tool_calls();
                auto results = results_for(calls);
                msgs.push_back(AssistantToolCalls::from_calls(calls));
                msgs.push_back(ToolResponse::from_results(results));
                if (allow_open_tool_block && t + 1 == turns && coin(0.3)) break;
            }
            AssistantText a{sentence(), std::nullopt};
            if (coin(0.3)) a.think_text = sentence();
            msgs.push_back(std::move(a));
        }
        return msgs;
    }

    ScenarioContext context() {
        ScenarioContext c;
        c.data_id = "gen_" + std::to_string(range(0, 99999));
        if (coin(0.8)) c.worldview = sentence(3, 10);
        if (coin(0.8)) c.npc_role = sentence(3, 8);
        if (coin(0.8)) c.npc_persona = {{"name", word()}, {"age", std::to_string(range(18, 90))}};
        if (coin(0.7)) c.state = {"Summer, 5 PM", "Rainy", "Weapon shop"};
        for (int i = range(0, 2); i > 0; --i) c.knowledge_items.push_back({{"name", word()}, {"description", sentence()}});
        if (coin(0.5)) c.general_info = sentence(2, 6);
        return c;
    }

    ParsedOutput parsed_output() {
        ParsedOutput p;
        if (coin(0.4)) p.think_text = sentence();
        int shape = range(0, 2);
        if (shape != 1) p.tool_calls = tool_calls();
        if (shape != 0) p.reply_text = sentence();
        return p;
    }

private:
    std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Prune oracle, written independently of prune_history: encode the sequence
// as letters (U user, A assistant text, C tool call, R tool response) and
// keep only the tool run matched by the regex [CR]+ that has nothing but user
// messages after it.

inline char letter(const Message& m) {
    if (std::holds_alternative<UserText>(m)) return 'U';
    if (std::holds_alternative<AssistantText>(m)) return 'A';
    if (std::holds_alternative<AssistantToolCalls>(m)) return 'C';
    return 'R';
}

inline std::vector<Message> oracle_prune(const std::vector<Message>& msgs) {
    std::string code;
    for (const auto& m : msgs) code += letter(m);
    std::smatch match;
    static const std::regex trailing("[CR]+(?=U*$)");
    std::size_t keep_begin = code.size(), keep_end = code.size();
    if (std::regex_search(code, match, trailing)) {
        keep_begin = static_cast<std::size_t>(match.position(0));
        keep_end = keep_begin + static_cast<std::size_t>(match.length(0));
    }
    std::vector<Message> out;
    for (std::size_t i = 0; i < msgs.size(); ++i) {
        bool tool = code[i] == 'C' || code[i] == 'R';
        if (!tool || (i >= keep_begin && i < keep_end)) out.push_back(msgs[i]);
    }
    return out;
}

/// Arbitrary letter sequences, not necessarily structurally valid.
inline std::vector<Message> random_sequence(Gen& g, int max_len = 12) {
    std::vector<Message> msgs;
    for (int i = g.range(0, max_len); i > 0; --i) {
        switch (g.range(0, 3)) {
            case 0: msgs.push_back(UserText{g.word()}); break;
            case 1: msgs.push_back(AssistantText{g.word(), std::nullopt}); break;
            case 2: msgs.push_back(AssistantToolCalls::from_calls({g.tool_call()})); break;
            default: msgs.push_back(ToolResponse::from_results({{g.identifier(), Json::object(), g.word()}})); break;
        }
    }
    return msgs;
}

inline std::size_t tool_call_messages(const std::vector<Message>& msgs) {
    std::size_t n = 0;
    for (const auto& m : msgs) n += std::holds_alternative<AssistantToolCalls>(m);
    return n;
}

}  // namespace fx
