#pragma once

// Competition dataset handling: parse the per-record JSON (`turn_0` ...
// `turn_{n-1}` keys), restructure each record into sequential messages with
// its tool schemas, and cut input/label training examples from the result.

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "npc/core_model.hpp"
#include "npc/error.hpp"
#include "npc/json_text.hpp"
#include "npc/router_engine.hpp"
#include "npc/tool_registry.hpp"

namespace npc {

struct DialogueLine {
    std::string speaker;  // "player" | "npc"
    std::string text;
    Json target_item = Json::array();
    Json extra = Json::object();
    bool operator==(const DialogueLine&) const = default;
};

struct GoldFunction {
    std::string name;
    Json parameters = Json::object();
    Json return_value;  // the record's `return` field, verbatim
    bool operator==(const GoldFunction&) const = default;

    ToolCall call() const { return {name, parameters}; }
};

struct Turn {
    std::vector<DialogueLine> dialogue;
    std::string gold_response;
    std::vector<GoldFunction> gold_functions;
    Json extra = Json::object();
    bool operator==(const Turn&) const = default;
};

struct ConversationRecord {
    std::string data_id;
    int total_turn = 0;
    ScenarioContext context;
    std::string function_list_id;
    std::vector<Turn> turns;
    // Unknown fields, same shape as the source (top level and inside
    // player / npc / state / knowledge).
    Json extra = Json::object();
    bool operator==(const ConversationRecord&) const = default;
};

namespace detail {

inline bool is_turn_key(std::string_view key, int& index) {
    if (!starts_with(key, "turn_") || key.size() == 5) return false;
    int value = 0;
    for (char c : key.substr(5)) {
        if (!std::isdigit(static_cast<unsigned char>(c))) return false;
        value = value * 10 + (c - '0');
        if (value > 1000000) return false;
    }
    index = value;
    return true;
}

inline std::string get_string(const Json& obj, const std::string& key, const std::string& path, bool required) {
    if (!obj.contains(key)) {
        if (required) throw ParseError(path + "/" + key, "missing field");
        return {};
    }
    if (!obj[key].is_string()) throw ParseError(path + "/" + key, "expected a string");
    return obj[key].get<std::string>();
}

inline Json get_object(const Json& obj, const std::string& key, const std::string& path) {
    if (!obj.contains(key)) return Json::object();
    if (!obj[key].is_object()) throw ParseError(path + "/" + key, "expected an object");
    return obj[key];
}

inline Json unknown_keys(const Json& obj, std::initializer_list<std::string_view> known) {
    Json out = Json::object();
    for (const auto& [key, value] : obj.items())
        if (std::find(known.begin(), known.end(), key) == known.end()) out[key] = value;
    return out;
}

inline Turn parse_turn(const Json& j, const std::string& path) {
    if (!j.is_object()) throw ParseError(path, "turn must be an object");
    Turn turn;
    if (!j.contains("dialogue") || !j["dialogue"].is_array()) throw ParseError(path + "/dialogue", "expected an array");
    if (j["dialogue"].empty()) throw ParseError(path + "/dialogue", "dialogue is empty");
    for (std::size_t i = 0; i < j["dialogue"].size(); ++i) {
        const auto& d = j["dialogue"][i];
        auto dpath = path + "/dialogue/" + std::to_string(i);
        if (!d.is_object()) throw ParseError(dpath, "expected an object");
        DialogueLine line;
        line.speaker = get_string(d, "speaker", dpath, true);
        if (line.speaker != "player" && line.speaker != "npc")
            throw ParseError(dpath + "/speaker", "speaker must be 'player' or 'npc'");
        line.text = get_string(d, "text", dpath, true);
        if (d.contains("target_item")) line.target_item = d["target_item"];
        line.extra = unknown_keys(d, {"speaker", "text", "target_item"});
        turn.dialogue.push_back(std::move(line));
    }
    turn.gold_response = get_string(j, "gold_response", path, false);
    if (j.contains("gold_functions") && !j["gold_functions"].is_null()) {
        if (!j["gold_functions"].is_array()) throw ParseError(path + "/gold_functions", "expected an array");
        for (std::size_t i = 0; i < j["gold_functions"].size(); ++i) {
            const auto& g = j["gold_functions"][i];
            auto gpath = path + "/gold_functions/" + std::to_string(i);
            if (!g.is_object()) throw ParseError(gpath, "expected an object");
            GoldFunction fn;
            fn.name = get_string(g, "name", gpath, true);
            if (!valid_tool_name(fn.name)) throw ParseError(gpath + "/name", "invalid function name");
            if (g.contains("parameters") && !g["parameters"].is_null()) {
                if (!g["parameters"].is_object()) throw ParseError(gpath + "/parameters", "expected an object");
                fn.parameters = g["parameters"];
            }
            if (g.contains("return")) fn.return_value = g["return"];
            turn.gold_functions.push_back(std::move(fn));
        }
    }
    turn.extra = unknown_keys(j, {"dialogue", "gold_response", "gold_functions"});
    return turn;
}

inline ConversationRecord parse_record(const Json& j, const std::string& path) {
    if (!j.is_object()) throw ParseError(path, "record must be an object");
    ConversationRecord rec;
    rec.data_id = get_string(j, "data_id", path, true);
    if (rec.data_id.empty()) throw ParseError(path + "/data_id", "data_id is empty");
    if (!j.contains("total_turn") || !j["total_turn"].is_number_integer() || j["total_turn"].get<long long>() < 0)
        throw ParseError(path + "/total_turn", "expected a non-negative integer");
    rec.total_turn = j["total_turn"].get<int>();
    rec.function_list_id = get_string(j, "function_list_id", path, false);

    auto& ctx = rec.context;
    ctx.data_id = rec.data_id;
    ctx.worldview = get_string(j, "worldview", path, false);
    Json extra = unknown_keys(j, {"data_id", "total_turn", "worldview", "player", "npc", "function_list_id", "state",
                                  "knowledge"});

    auto player = get_object(j, "player", path);
    ctx.player_persona = get_object(player, "persona", path + "/player");
    if (auto e = unknown_keys(player, {"persona"}); !e.empty()) extra["player"] = e;

    auto npc = get_object(j, "npc", path);
    ctx.npc_role = get_string(npc, "role", path + "/npc", false);
    ctx.npc_persona = get_object(npc, "persona", path + "/npc");
    if (auto e = unknown_keys(npc, {"role", "persona"}); !e.empty()) extra["npc"] = e;

    auto state = get_object(j, "state", path);
    ctx.state.datetime = get_string(state, "datetime", path + "/state", false);
    ctx.state.weather = get_string(state, "weather", path + "/state", false);
    ctx.state.place = get_string(state, "place", path + "/state", false);
    if (auto e = unknown_keys(state, {"datetime", "weather", "place"}); !e.empty()) extra["state"] = e;

    auto knowledge = get_object(j, "knowledge", path);
    if (knowledge.contains("knowledge_info")) {
        if (!knowledge["knowledge_info"].is_array())
            throw ParseError(path + "/knowledge/knowledge_info", "expected an array");
        for (const auto& item : knowledge["knowledge_info"]) ctx.knowledge_items.push_back(item);
    }
    ctx.general_info = get_string(knowledge, "general_info", path + "/knowledge", false);
    if (auto e = unknown_keys(knowledge, {"knowledge_info", "general_info"}); !e.empty()) extra["knowledge"] = e;

    std::set<int> present;
    Json leftover = Json::object();
    for (const auto& [key, value] : extra.items()) {
        int index = 0;
        if (is_turn_key(key, index)) {
            if (index >= rec.total_turn)
                throw ParseError(path + "/" + key, "turn index exceeds total_turn " + std::to_string(rec.total_turn));
            present.insert(index);
        } else {
            leftover[key] = value;
        }
    }
    for (int k = 0; k < rec.total_turn; ++k) {
        if (!present.count(k)) throw MissingTurn(k);
        auto key = "turn_" + std::to_string(k);
        rec.turns.push_back(parse_turn(j[key], path + "/" + key));
    }
    rec.extra = std::move(leftover);
    return rec;
}

}  // namespace detail

/// Parses a JSON array of competition records. Unknown fields are kept in
/// `extra`. data_id must be unique.
inline std::vector<ConversationRecord> load_records(std::string_view document) {
    Json doc = Json::parse(document.begin(), document.end(), nullptr, false);
    if (doc.is_discarded()) throw ParseError("", "document is not valid JSON");
    if (!doc.is_array()) throw ParseError("", "expected a JSON array of records");
    std::vector<ConversationRecord> records;
    std::set<std::string> ids;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        auto rec = detail::parse_record(doc[i], "/" + std::to_string(i));
        if (!ids.insert(rec.data_id).second)
            throw ParseError("/" + std::to_string(i) + "/data_id", "duplicate data_id '" + rec.data_id + "'");
        records.push_back(std::move(rec));
    }
    return records;
}

inline Json record_to_json(const ConversationRecord& rec) {
    const auto& ctx = rec.context;
    auto section = [&](const char* key, Json base) {
        if (rec.extra.contains(key) && rec.extra[key].is_object())
            for (const auto& [k, v] : rec.extra[key].items()) base[k] = v;
        return base;
    };
    Json j = Json::object();
    j["data_id"] = rec.data_id;
    j["total_turn"] = rec.total_turn;
    j["worldview"] = ctx.worldview;
    j["player"] = section("player", {{"persona", ctx.player_persona}});
    j["npc"] = section("npc", {{"role", ctx.npc_role}, {"persona", ctx.npc_persona}});
    j["function_list_id"] = rec.function_list_id;
    j["state"] = section("state", {{"datetime", ctx.state.datetime}, {"weather", ctx.state.weather},
                                   {"place", ctx.state.place}});
    Json items = Json::array();
    for (const auto& item : ctx.knowledge_items) items.push_back(item);
    j["knowledge"] = section("knowledge", {{"knowledge_info", std::move(items)}, {"general_info", ctx.general_info}});
    for (std::size_t k = 0; k < rec.turns.size(); ++k) {
        const auto& t = rec.turns[k];
        Json dialogue = Json::array();
        for (const auto& d : t.dialogue) {
            Json line = {{"speaker", d.speaker}, {"text", d.text}, {"target_item", d.target_item}};
            for (const auto& [kk, v] : d.extra.items()) line[kk] = v;
            dialogue.push_back(std::move(line));
        }
        Json gold = Json::array();
        for (const auto& g : t.gold_functions)
            gold.push_back({{"name", g.name}, {"parameters", g.parameters}, {"return", g.return_value}});
        Json turn = {{"dialogue", std::move(dialogue)}, {"gold_response", t.gold_response}, {"gold_functions", std::move(gold)}};
        for (const auto& [kk, v] : t.extra.items()) turn[kk] = v;
        j["turn_" + std::to_string(k)] = std::move(turn);
    }
    for (const auto& [key, value] : rec.extra.items())
        if (key != "player" && key != "npc" && key != "state" && key != "knowledge") j[key] = value;
    return j;
}

inline Json records_to_json(std::span<const ConversationRecord> records) {
    Json doc = Json::array();
    for (const auto& r : records) doc.push_back(record_to_json(r));
    return doc;
}

// ---------------------------------------------------------------------------
// Restructuring

/// Message positions of one source turn inside the restructured conversation.
struct TurnSpan {
    std::size_t begin = 0;                   // first message of the turn
    std::optional<std::size_t> user_index;   // final player message, if the turn ends on one
    std::optional<std::size_t> tool_index;   // AssistantToolCalls, when gold functions exist
    std::size_t reply_index = 0;             // gold response
};

struct RestructuredConversation {
    std::vector<Message> messages;
    std::vector<ToolSchema> tools;
    std::vector<TurnSpan> turns;
};

inline const std::vector<ToolSchema>& resolve_tools(const ConversationRecord& record, const ToolManifest& manifest) {
    static const std::vector<ToolSchema> none;
    if (record.function_list_id.empty()) return none;
    auto it = manifest.find(record.function_list_id);
    if (it == manifest.end())
        throw Error(ErrorCode::UnknownFunctionList, "function list '" + record.function_list_id + "' not in manifest");
    return it->second;
}

/// Per turn: dialogue lines (player -> user, npc -> assistant; adjacent lines
/// of one speaker are joined with a newline), then one tool-call message and
/// one tool-response message when gold functions exist, then the gold reply.
inline RestructuredConversation restructure(const ConversationRecord& record, const ToolManifest& manifest) {
    RestructuredConversation out;
    out.tools = resolve_tools(record, manifest);
    auto& msgs = out.messages;

    auto push_text = [&](Role role, const std::string& text) {
        if (!msgs.empty() && role_of(msgs.back()) == role) {
            if (auto* u = std::get_if<UserText>(&msgs.back())) {
                u->text += "\n" + text;
                return;
            }
            if (auto* a = std::get_if<AssistantText>(&msgs.back())) {
                a->text += "\n" + text;
                return;
            }
        }
        if (role == Role::User) msgs.push_back(UserText{text});
        else msgs.push_back(AssistantText{text, std::nullopt});
    };

    for (const auto& turn : record.turns) {
        TurnSpan span;
        span.begin = msgs.size();
        for (const auto& line : turn.dialogue) push_text(line.speaker == "player" ? Role::User : Role::Assistant, line.text);
        if (!msgs.empty() && std::holds_alternative<UserText>(msgs.back())) span.user_index = msgs.size() - 1;

        if (!turn.gold_functions.empty()) {
            std::vector<ToolCall> calls;
            std::vector<ToolResult> results;
            for (const auto& g : turn.gold_functions) {
                auto known = std::any_of(out.tools.begin(), out.tools.end(), [&](const ToolSchema& s) { return s.name == g.name; });
                if (!known) throw Error(ErrorCode::GoldFunctionUnknown, "gold function '" + g.name + "' not declared for '" + record.function_list_id + "'");
                calls.push_back(g.call());
                results.push_back({g.name, g.parameters, g.return_value});
            }
            span.tool_index = msgs.size();
            msgs.push_back(AssistantToolCalls::from_calls(std::move(calls)));
            msgs.push_back(ToolResponse::from_results(std::move(results)));
        }
        push_text(Role::Assistant, turn.gold_response);
        span.reply_index = msgs.size() - 1;
        out.turns.push_back(span);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training splits

struct TrainingExample {
    std::string example_id;
    ExpertId expert_target = ExpertId::ToolExpert;
    ScenarioContext context;
    std::vector<ToolSchema> tools;  // reply-injected for ToolExpert
    std::vector<Message> input_messages;
    std::string label;
};

inline std::string reply_sentinel_label() { return serialize_tool_call({std::string(kReplyToolName), Json::object()}); }

/// One ToolExpert example per tool-call message and per assistant reply not
/// preceded by a tool block (labelled with the reply sentinel); one
/// PersonaExpert example per assistant reply that follows a tool block.
/// Inputs are pruned. Direct replies are not trained, so no DirectExpert
/// examples exist.
inline std::vector<TrainingExample> make_splits(std::span<const Message> conversation, std::span<const ToolSchema> tools,
                                                const ScenarioContext& context) {
    std::vector<TrainingExample> out;
    std::vector<ToolSchema> plain(tools.begin(), tools.end());
    std::vector<ToolSchema> with_reply;
    bool need_reply_tools = std::any_of(conversation.begin(), conversation.end(), [](const Message& m) {
        return std::holds_alternative<AssistantText>(m) || std::holds_alternative<AssistantToolCalls>(m);
    });
    if (need_reply_tools) with_reply = inject_reply_tool(plain);

    auto make_id = [&](std::size_t pos, std::string_view kind) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%06zu", pos);
        return context.data_id + ":" + buf + ":" + std::string(kind);
    };

    for (std::size_t i = 0; i < conversation.size(); ++i) {
        const auto& m = conversation[i];
        auto input = prune_history(conversation.subspan(0, i));
        if (const auto* text = std::get_if<AssistantText>(&m)) {
            bool after_tools = i > 0 && std::holds_alternative<ToolResponse>(conversation[i - 1]);
            if (after_tools) {
                out.push_back({make_id(i, "persona"), ExpertId::PersonaExpert, context, plain, std::move(input), text->text});
            } else {
                out.push_back({make_id(i, "tool"), ExpertId::ToolExpert, context, with_reply, std::move(input),
                               reply_sentinel_label()});
            }
        } else if (const auto* calls = std::get_if<AssistantToolCalls>(&m)) {
            out.push_back({make_id(i, "tool"), ExpertId::ToolExpert, context, with_reply, std::move(input),
                           serialize_tool_calls(calls->calls)});
        }
    }
    return out;
}

inline Json example_to_json(const TrainingExample& ex) {
    Json tools = Json::array();
    for (const auto& t : ex.tools) tools.push_back(t.to_json());
    return {{"example_id", ex.example_id},
            {"expert_target", std::string(to_string(ex.expert_target))},
            {"tools", std::move(tools)},
            {"input", render_prompt(ex.context, ex.input_messages, ex.tools) + std::string(kAssistantMarker)},
            {"label", ex.label}};
}

/// One compact JSON object per line, sorted by example_id.
inline std::string export_jsonl(std::span<const TrainingExample> examples) {
    std::vector<const TrainingExample*> sorted;
    for (const auto& e : examples) sorted.push_back(&e);
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const auto* a, const auto* b) { return a->example_id < b->example_id; });
    std::string out;
    for (const auto* e : sorted) {
        out += example_to_json(*e).dump();
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Record-backed tool handlers

namespace detail {

inline std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace detail

/// Handlers for a scenario without real game logic: replay the record's gold
/// return value when name and arguments match a gold function, otherwise
/// return knowledge items whose name appears in a string argument, otherwise
/// an empty list.
inline std::map<std::string, ToolHandler, std::less<>> make_record_handlers(const ConversationRecord& record,
                                                                            std::span<const ToolSchema> schemas) {
    std::map<std::string, ToolHandler, std::less<>> handlers;
    for (const auto& schema : schemas) {
        std::vector<GoldFunction> gold;
        for (const auto& t : record.turns)
            for (const auto& g : t.gold_functions)
                if (g.name == schema.name) gold.push_back(g);
        handlers[schema.name] = [gold = std::move(gold)](const Json& args, const ScenarioContext& ctx) -> Json {
            for (const auto& g : gold)
                if (json_equivalent(g.parameters, args)) return g.return_value;
            Json hits = Json::array();
            for (const auto& item : ctx.knowledge_items) {
                if (!item.is_object() || !item.contains("name") || !item["name"].is_string()) continue;
                auto name = detail::lower(item["name"].get<std::string>());
                for (const auto& [k, v] : args.items())
                    if (v.is_string() && !name.empty() && detail::lower(v.get<std::string>()).find(name) != std::string::npos) {
                        hits.push_back(item);
                        break;
                    }
            }
            return hits;
        };
    }
    return handlers;
}

}  // namespace npc
