#pragma once

// Replays gold conversations through the pipeline and scores tool decisions,
// call accuracy, reply similarity and tool-result integration.

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <memory>
#include <set>
#include <optional>
#include <ranges>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "npc/backend_gateway.hpp"
#include "npc/core_model.hpp"
#include "npc/dataset_toolkit.hpp"
#include "npc/json_text.hpp"
#include "npc/router_engine.hpp"
#include "npc/tool_registry.hpp"

namespace npc {

enum class DecisionQuadrant { TP, FP, TN, FN };

inline std::string_view to_string(DecisionQuadrant q) {
    switch (q) {
        case DecisionQuadrant::TP: return "TP";
        case DecisionQuadrant::FP: return "FP";
        case DecisionQuadrant::TN: return "TN";
        case DecisionQuadrant::FN: return "FN";
    }
    return "TN";
}

/// Positive means "uses tools": gold positive iff gold functions exist.
template <std::ranges::sized_range Gold>
DecisionQuadrant score_decision(const RouteDecision& predicted, const Gold& gold_functions) {
    bool gold_positive = std::ranges::size(gold_functions) > 0;
    bool predicted_positive = !predicted.is_reply();
    if (gold_positive) return predicted_positive ? DecisionQuadrant::TP : DecisionQuadrant::FN;
    return predicted_positive ? DecisionQuadrant::FP : DecisionQuadrant::TN;
}

namespace detail {

inline Json trim_strings(const Json& v) {
    if (v.is_string()) return trim(v.get_ref<const std::string&>());
    if (v.is_object()) {
        Json out = Json::object();
        for (const auto& [k, item] : v.items()) out[k] = trim_strings(item);
        return out;
    }
    if (v.is_array()) {
        Json out = Json::array();
        for (const auto& item : v) out.push_back(trim_strings(item));
        return out;
    }
    return v;
}

}  // namespace detail

/// Same name and same arguments, ignoring key order and whitespace around
/// string values.
inline bool match_call(const ToolCall& predicted, const ToolCall& gold) {
    if (predicted.name != gold.name) return false;
    return json_equivalent(detail::trim_strings(predicted.arguments), detail::trim_strings(gold.arguments));
}

/// Order-insensitive one-to-one matching of two call lists.
inline bool match_call_lists(std::span<const ToolCall> predicted, std::span<const ToolCall> gold) {
    if (predicted.size() != gold.size()) return false;
    std::vector<bool> used(predicted.size(), false);
    for (const auto& g : gold) {
        bool found = false;
        for (std::size_t i = 0; i < predicted.size() && !found; ++i)
            if (!used[i] && match_call(predicted[i], g)) used[i] = found = true;
        if (!found) return false;
    }
    return true;
}

/// Lowercase, drop ASCII punctuation, split on whitespace.
inline std::vector<std::string> normalize_tokens(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char ch : text) {
        auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            if (!current.empty()) tokens.push_back(std::move(current));
            current.clear();
        } else if (!std::ispunct(c)) {
            current += static_cast<char>(std::tolower(c));
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

/// Multiset token F1. Both empty -> 1, exactly one empty -> 0.
inline double similarity_f1(std::string_view predicted, std::string_view gold) {
    auto p = normalize_tokens(predicted);
    auto g = normalize_tokens(gold);
    if (p.empty() && g.empty()) return 1.0;
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> counts;
    for (const auto& t : g) ++counts[t];
    int overlap = 0;
    for (const auto& t : p) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
    double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
    return 2.0 * precision * recall / (precision + recall);
}

inline constexpr double kIntegrationThreshold = 0.5;

namespace detail {

inline void collect_leaves(const Json& v, std::vector<std::string>& out) {
    if (v.is_object()) {
        for (const auto& [k, item] : v.items()) collect_leaves(item, out);
    } else if (v.is_array()) {
        for (const auto& item : v) collect_leaves(item, out);
    } else if (v.is_string()) {
        out.push_back(v.get<std::string>());
    } else if (!v.is_null()) {
        out.push_back(v.dump());
    }
}

}  // namespace detail

/// Fraction of scalar return values the reply mentions: a value counts when
/// at least half of its tokens occur in the reply. No values -> 1.
inline double integration_recall(std::string_view reply, std::span<const ToolResult> results) {
    std::vector<std::string> leaves;
    for (const auto& r : results) detail::collect_leaves(r.return_value, leaves);
    auto reply_tokens = normalize_tokens(reply);
    std::set<std::string> vocab(reply_tokens.begin(), reply_tokens.end());
    int total = 0, integrated = 0;
    for (const auto& leaf : leaves) {
        auto tokens = normalize_tokens(leaf);
        if (tokens.empty()) continue;
        ++total;
        auto hits = std::count_if(tokens.begin(), tokens.end(), [&](const auto& t) { return vocab.count(t) > 0; });
        if (static_cast<double>(hits) >= kIntegrationThreshold * static_cast<double>(tokens.size())) ++integrated;
    }
    if (total == 0) return 1.0;
    return static_cast<double>(integrated) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Replay

struct EvalRow {
    std::string data_id;
    int turn = 0;
    bool skipped = false;
    std::string skip_reason;
    std::optional<DecisionQuadrant> quadrant;
    std::vector<ToolCall> gold_calls;
    std::vector<ToolCall> predicted_calls;
    std::optional<bool> call_exact_match;  // only for turns with gold calls
    std::optional<double> similarity;
    std::optional<double> integration_recall;  // only when tools ran
    std::string reply;
    std::string gold_response;
    std::vector<std::string> warnings;
};

struct EvalReport {
    std::array<std::size_t, 4> counts{};  // indexed by DecisionQuadrant
    std::size_t evaluated_turns = 0;
    std::size_t skipped_turns = 0;
    std::optional<double> accuracy;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> call_exact_match_rate;
    std::optional<double> mean_similarity;
    std::optional<double> mean_integration_recall;
    std::vector<EvalRow> rows;

    std::size_t count(DecisionQuadrant q) const { return counts[static_cast<std::size_t>(q)]; }

    Json to_json() const {
        auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(); };
        Json summary = {{"turns", evaluated_turns},
                        {"skipped", skipped_turns},
                        {"TP", count(DecisionQuadrant::TP)},
                        {"FP", count(DecisionQuadrant::FP)},
                        {"TN", count(DecisionQuadrant::TN)},
                        {"FN", count(DecisionQuadrant::FN)},
                        {"accuracy", opt(accuracy)},
                        {"precision", opt(precision)},
                        {"recall", opt(recall)},
                        {"call_exact_match_rate", opt(call_exact_match_rate)},
                        {"mean_similarity", opt(mean_similarity)},
                        {"mean_integration_recall", opt(mean_integration_recall)}};
        Json rows_json = Json::array();
        for (const auto& r : rows) {
            Json gold = Json::array(), pred = Json::array();
            for (const auto& c : r.gold_calls) gold.push_back(c.to_json());
            for (const auto& c : r.predicted_calls) pred.push_back(c.to_json());
            rows_json.push_back({{"data_id", r.data_id},
                                 {"turn", r.turn},
                                 {"skipped", r.skipped},
                                 {"skip_reason", r.skip_reason},
                                 {"quadrant", r.quadrant ? Json(std::string(to_string(*r.quadrant))) : Json()},
                                 {"gold_calls", std::move(gold)},
                                 {"predicted_calls", std::move(pred)},
                                 {"call_exact_match", r.call_exact_match ? Json(*r.call_exact_match) : Json()},
                                 {"similarity", opt(r.similarity)},
                                 {"integration_recall", opt(r.integration_recall)},
                                 {"reply", r.reply},
                                 {"gold_response", r.gold_response},
                                 {"warnings", r.warnings}});
        }
        return {{"summary", std::move(summary)}, {"rows", std::move(rows_json)}};
    }

    std::string rows_csv() const {
        auto quote = [](const std::string& s) {
            std::string out = "\"";
            for (char c : s) {
                if (c == '"') out += '"';
                out += c;
            }
            return out + "\"";
        };
        auto num = [](const std::optional<double>& v) {
            if (!v) return std::string();
            std::ostringstream ss;
            ss.precision(6);
            ss << *v;
            return ss.str();
        };
        std::string out = "data_id,turn,skipped,quadrant,call_exact_match,similarity,integration_recall,skip_reason\n";
        for (const auto& r : rows) {
            out += quote(r.data_id) + "," + std::to_string(r.turn) + "," + (r.skipped ? "1" : "0") + "," +
                   (r.quadrant ? std::string(to_string(*r.quadrant)) : "") + "," +
                   (r.call_exact_match ? (*r.call_exact_match ? "1" : "0") : "") + "," + num(r.similarity) + "," +
                   num(r.integration_recall) + "," + quote(r.skip_reason) + "\n";
        }
        return out;
    }
};

struct EvalPipeline {
    std::shared_ptr<const Gateway> gateway;
    PipelineConfig config;
};

namespace detail {

struct ReplayTurn {
    Session session;
    std::string user_text;
    const Turn* gold = nullptr;
};

/// Teacher-forced sessions for every turn of a record: history is the pruned
/// gold conversation before the turn's final player line.
inline std::vector<std::optional<ReplayTurn>> replay_turns(const ConversationRecord& record,
                                                           const RestructuredConversation& conv,
                                                           const PipelineConfig& config) {
    auto toolset = std::make_shared<const ToolSet>(conv.tools, make_record_handlers(record, conv.tools));
    std::vector<std::optional<ReplayTurn>> out;
    for (std::size_t t = 0; t < conv.turns.size(); ++t) {
        const auto& span = conv.turns[t];
        if (!span.user_index) {
            out.push_back(std::nullopt);
            continue;
        }
        ReplayTurn rt;
        rt.session.session_id = record.data_id + "/turn_" + std::to_string(t);
        rt.session.context = record.context;
        rt.session.toolset = toolset;
        rt.session.config = config;
        auto before = std::span<const Message>(conv.messages).subspan(0, *span.user_index);
        rt.session.history = prune_history(before);
        rt.user_text = std::get<UserText>(conv.messages[*span.user_index]).text;
        rt.gold = &record.turns[t];
        out.push_back(std::move(rt));
    }
    return out;
}

}  // namespace detail

/// Teacher-forced replay: each turn runs the full pipeline against the gold
/// context before it. Backend failures become skipped rows.
inline EvalReport run_eval(std::span<const ConversationRecord> records, const ToolManifest& manifest,
                           const EvalPipeline& pipeline) {
    EvalReport report;
    auto skip = [&](const ConversationRecord& rec, int turn, std::string reason) {
        EvalRow row;
        row.data_id = rec.data_id;
        row.turn = turn;
        row.skipped = true;
        row.skip_reason = std::move(reason);
        if (turn < static_cast<int>(rec.turns.size())) row.gold_response = rec.turns[static_cast<std::size_t>(turn)].gold_response;
        report.rows.push_back(std::move(row));
        ++report.skipped_turns;
    };

    for (const auto& record : records) {
        RestructuredConversation conv;
        try {
            conv = restructure(record, manifest);
        } catch (const Error& e) {
            for (int t = 0; t < static_cast<int>(record.turns.size()); ++t)
                skip(record, t, std::string(to_string(e.code())) + ": " + e.what());
            continue;
        }
        auto turns = detail::replay_turns(record, conv, pipeline.config);
        for (std::size_t t = 0; t < turns.size(); ++t) {
            if (!turns[t]) {
                skip(record, static_cast<int>(t), "turn does not end with a player line");
                continue;
            }
            auto& rt = *turns[t];
            EvalRow row;
            row.data_id = record.data_id;
            row.turn = static_cast<int>(t);
            row.gold_response = rt.gold->gold_response;
            for (const auto& g : rt.gold->gold_functions) row.gold_calls.push_back(g.call());
            TurnOutcome outcome;
            try {
                outcome = run_turn(rt.session, *pipeline.gateway, rt.user_text);
            } catch (const Error& e) {
                skip(record, static_cast<int>(t), std::string(to_string(e.code())) + ": " + e.what());
                continue;
            }
            const auto& trace = outcome.trace;
            row.quadrant = score_decision(trace.decision, row.gold_calls);
            row.predicted_calls = trace.decision.calls;
            if (!row.gold_calls.empty())
                row.call_exact_match = !trace.decision.is_reply() && match_call_lists(row.predicted_calls, row.gold_calls);
            row.reply = outcome.reply;
            row.similarity = similarity_f1(outcome.reply, row.gold_response);
            if (!trace.tool_results.empty()) row.integration_recall = integration_recall(outcome.reply, trace.tool_results);
            row.warnings = trace.warnings;
            ++report.counts[static_cast<std::size_t>(*row.quadrant)];
            ++report.evaluated_turns;
            report.rows.push_back(std::move(row));
        }
    }

    auto ratio = [](double num, double den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return num / den;
    };
    auto tp = static_cast<double>(report.count(DecisionQuadrant::TP));
    auto fp = static_cast<double>(report.count(DecisionQuadrant::FP));
    auto tn = static_cast<double>(report.count(DecisionQuadrant::TN));
    auto fn = static_cast<double>(report.count(DecisionQuadrant::FN));
    report.accuracy = ratio(tp + tn, static_cast<double>(report.evaluated_turns));
    report.precision = ratio(tp, tp + fp);
    report.recall = ratio(tp, tp + fn);

    double match_sum = 0, match_n = 0, sim_sum = 0, sim_n = 0, int_sum = 0, int_n = 0;
    for (const auto& r : report.rows) {
        if (r.skipped) continue;
        if (r.call_exact_match) {
            match_sum += *r.call_exact_match ? 1 : 0;
            ++match_n;
        }
        if (r.similarity) {
            sim_sum += *r.similarity;
            ++sim_n;
        }
        if (r.integration_recall) {
            int_sum += *r.integration_recall;
            ++int_n;
        }
    }
    report.call_exact_match_rate = ratio(match_sum, match_n);
    report.mean_similarity = ratio(sim_sum, sim_n);
    report.mean_integration_recall = ratio(int_sum, int_n);
    return report;
}

/// Script for a scripted backend that reproduces the gold data exactly: the
/// decision expert emits the gold calls (or the reply sentinel) and the reply
/// experts emit the gold response. Rules are keyed on the full rendered
/// prompt, longest first, so later turns win over their own prefixes.
inline Json make_gold_echo_script(std::span<const ConversationRecord> records, const ToolManifest& manifest,
                                  const PipelineConfig& config) {
    struct Rule {
        ExpertId expert;
        std::string prompt;
        std::string output;
    };
    std::vector<Rule> rules;
    for (const auto& record : records) {
        auto conv = restructure(record, manifest);
        for (auto& maybe : detail::replay_turns(record, conv, config)) {
            if (!maybe) continue;
            auto& rt = *maybe;
            auto working = rt.session.history;
            working.push_back(UserText{rt.user_text});
            std::vector<ToolCall> calls;
            for (const auto& g : rt.gold->gold_functions) calls.push_back(g.call());

            auto decision_text = calls.empty() ? reply_sentinel_label() : serialize_tool_calls(calls);
            if (!starts_with(decision_text, config.prefill))
                throw Error(ErrorCode::ConfigError, "decision prefill does not match the tool-call layout");
            rules.push_back({ExpertId::ToolExpert, build_decision_prompt(rt.session, working),
                             decision_text.substr(config.prefill.size())});

            if (calls.empty()) {
                rules.push_back({ExpertId::DirectExpert, build_direct_prompt(rt.session, working), rt.gold->gold_response});
            } else {
                auto executed = execute_calls(calls, *rt.session.toolset, rt.session.context);
                working.push_back(AssistantToolCalls::from_calls(calls));
                working.push_back(ToolResponse::from_results(std::move(executed.results)));
                rules.push_back({ExpertId::PersonaExpert, build_persona_prompt(rt.session, working), rt.gold->gold_response});
            }
        }
    }
    std::stable_sort(rules.begin(), rules.end(), [](const Rule& a, const Rule& b) { return a.prompt.size() > b.prompt.size(); });
    Json script = Json::array();
    for (const auto& r : rules)
        script.push_back({{"match", {{"expert", std::string(config_key(r.expert))}, {"prompt_substring", r.prompt}}},
                          {"output", r.output}});
    return script;
}

}  // namespace npc
