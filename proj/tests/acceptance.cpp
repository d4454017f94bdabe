// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "support/corpus.hpp"

using namespace npc;

namespace {

struct Verdict {
    bool pass = true;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string ratio(std::size_t a, std::size_t b) { return std::to_string(a) + "/" + std::to_string(b); }

Verdict round_trip() {
    fx::Gen g(20240601);
    std::size_t ok = 0, n = 300;
    for (std::size_t i = 0; i < n; ++i) {
        auto ctx = g.context();
        auto conv = g.conversation(5);
        auto parsed = parse_transcript(render_prompt(ctx, conv));
        ok += parsed.messages == conv && parsed.system == render_system(ctx, {});
    }
    std::size_t outputs_ok = 0;
    for (std::size_t i = 0; i < n; ++i) {
        auto p = g.parsed_output();
        outputs_ok += parse_assistant_output(render_assistant_output(p)) == p;
    }

    // Every opening tag in the fixture texts is parsed or reported.
    std::vector<std::string> texts;
    for (const auto& c : fx::data_conversations())
        for (const auto& m : c.messages) texts.push_back(m.content);
    const std::vector<std::string> pieces = {"<tool_call>\n{\"name\": \"equip\", \"arguments\": {}}\n</tool_call>",
                                             "<tool_call>\n{bad}\n</tool_call>", "<tool_call>\n{\"name\": \"x\"", "</tool_call>",
                                             "text ", "<tool_call>", "{\"arguments\": {}}", "\n"};
    for (int i = 0; i < 500; ++i) {
        std::string t;
        for (int k = g.range(0, 8); k > 0; --k) t += g.pick(pieces);
        texts.push_back(t);
    }
    std::size_t accounted = 0;
    for (const auto& t : texts) {
        std::size_t openings = 0;
        for (auto at = t.find("<tool_call>"); at != std::string::npos; at = t.find("<tool_call>", at + 1)) ++openings;
        auto p = parse_assistant_output(t);
        accounted += p.tool_calls.size() + p.malformed.size() == openings;
    }
    return {ok == n && outputs_ok == n && accounted == texts.size(),
            "transcripts " + ratio(ok, n) + ", outputs " + ratio(outputs_ok, n) + ", openings accounted " +
                ratio(accounted, texts.size())};
}

// 30 scripted turns over three sessions. Each message gets its own decision
// rule; later turns come first so a turn never matches an earlier rule.
struct RoutingSuite {
    struct Planned {
        std::size_t session;
        std::string text;
        std::vector<ToolCall> calls;  // empty -> sentinel
    };
    std::vector<Planned> turns;
    std::shared_ptr<fx::RecordingBackend> recorder;
    std::shared_ptr<Gateway> gateway;
    std::vector<Session> sessions;
    std::shared_ptr<std::atomic<int>> executed = std::make_shared<std::atomic<int>>(0);

    explicit RoutingSuite(std::uint64_t seed) {
        fx::Gen g(seed);
        for (int i = 0; i < 30; ++i) {
            Planned p{static_cast<std::size_t>(i % 3), "Turn " + std::to_string(i) + ": " + g.sentence(2, 6) + "?", {}};
            if (g.coin(0.45))
                for (int k = g.range(1, 2); k > 0; --k)
                    p.calls.push_back({g.coin() ? "check_price" : "equip", {{"item_name", g.sentence(1, 2)}}});
            turns.push_back(std::move(p));
        }
        std::vector<fx::Rule> rules;
        for (auto it = turns.rbegin(); it != turns.rend(); ++it)
            rules.push_back(fx::rule(ExpertId::ToolExpert, it->text + "\n<|assistant|>\n",
                                     it->calls.empty() ? fx::kReplyDecision : fx::decision_output_for(it->calls)));
        rules.push_back(fx::rule(ExpertId::DirectExpert, "", "Of course."));
        rules.push_back(fx::rule(ExpertId::PersonaExpert, "", "Here is what I found."));
        recorder = std::make_shared<fx::RecordingBackend>(std::make_shared<ScriptedBackend>(rules));
        gateway = std::make_shared<Gateway>(fx::bind_all(recorder));

        std::map<std::string, ToolHandler, std::less<>> handlers;
        auto counter = executed;
        for (const auto* name : {"check_price", "equip"})
            handlers[name] = [counter](const Json& a, const ScenarioContext&) {
                ++*counter;
                return Json::array({{{"price", "300 Gold"}, {"item", a.value("item_name", "")}}});
            };
        auto toolset = std::make_shared<const ToolSet>(std::vector<ToolSchema>{fx::check_price_schema(), fx::equip_schema()}, handlers);
        for (int s = 0; s < 3; ++s) {
            Session session;
            session.session_id = "routing_" + std::to_string(s);
            session.context = fx::luna_context();
            session.toolset = toolset;
            sessions.push_back(std::move(session));
        }
    }
};

bool pruned_ok(const std::vector<Message>& h) {
    std::size_t blocks = fx::tool_call_messages(h);
    if (blocks > 1) return false;
    if (blocks == 0) return true;
    // The one block must be trailing: nothing but user lines after it.
    for (auto it = h.rbegin(); it != h.rend(); ++it) {
        if (std::holds_alternative<AssistantToolCalls>(*it)) return true;
        if (std::holds_alternative<AssistantText>(*it)) return false;
    }
    return true;
}

Verdict routing() {
    RoutingSuite suite(7);
    std::size_t correct = 0, prefill_ok = 0, decisions = 0;
    for (const auto& t : suite.turns) {
        auto before_exec = suite.executed->load();
        auto before_direct = suite.recorder->count(ExpertId::DirectExpert);
        auto before_persona = suite.recorder->count(ExpertId::PersonaExpert);
        auto out = run_turn(suite.sessions[t.session], *suite.gateway, t.text);
        bool tools = !t.calls.empty();
        bool ran_tools = suite.executed->load() > before_exec;
        bool direct = suite.recorder->count(ExpertId::DirectExpert) == before_direct + 1;
        bool persona = suite.recorder->count(ExpertId::PersonaExpert) == before_persona + 1;
        bool calls_match = out.trace.tool_calls == t.calls;
        correct += ran_tools == tools && direct == !tools && persona == tools && calls_match;
    }
    for (const auto& [expert, req] : suite.recorder->calls) {
        if (expert != ExpertId::ToolExpert) continue;
        ++decisions;
        prefill_ok += req.prefill == "<tool_call>\n{\"name\": \"" && ends_with(req.prompt, "<|assistant|>\n");
    }
    return {correct == suite.turns.size() && prefill_ok == decisions && decisions == suite.turns.size(),
            "routed " + ratio(correct, suite.turns.size()) + ", prefill byte-equal " + ratio(prefill_ok, decisions)};
}

Verdict spurious() {
    fx::Gen g(3);
    std::size_t ok = 0, n = 0;
    for (int i = 0; i < 60; ++i) {
        auto text_arg = i == 0 ? std::string("...") : g.sentence(1, 6);
        auto output = "reply\", \"arguments\": {\"text\": " + dump_inline(Json(text_arg)) + "}}\n</tool_call>";
        Session s;
        s.context = fx::luna_context();
        s.toolset = std::make_shared<const ToolSet>(std::vector<ToolSchema>{fx::check_price_schema()});
        auto gw = fx::scripted_gateway({fx::rule(ExpertId::ToolExpert, "", output), fx::rule(ExpertId::DirectExpert, "", "Hello.")});
        auto out = run_turn(s, *gw, "Good evening.");
        bool warned = std::any_of(out.trace.warnings.begin(), out.trace.warnings.end(),
                                  [](const auto& w) { return w.find("spurious arguments") != std::string::npos; });
        ok += out.trace.decision.is_reply() && warned && out.trace.expert_used == ExpertId::DirectExpert;
        ++n;

        // The same text handed over whole, without an early stop.
        GenerationResult full;
        full.completion = output;
        auto d = interpret_decision(PipelineConfig{}, full);
        ok += d.decision.is_reply() && !d.warnings.empty();
        ++n;
    }
    return {ok == n, "routed to Reply with warning " + ratio(ok, n)};
}

Verdict pruning() {
    RoutingSuite suite(11);
    std::size_t checked = 0, ok = 0;
    for (const auto& t : suite.turns) {
        run_turn(suite.sessions[t.session], *suite.gateway, t.text);
        for (const auto& s : suite.sessions) {
            ++checked;
            ok += pruned_ok(s.history) && history_problems(s.history).empty();
        }
    }
    fx::Gen g(1000);
    std::size_t agree = 0;
    for (int i = 0; i < 1000; ++i) {
        auto seq = fx::random_sequence(g);
        agree += prune_history(seq) == fx::oracle_prune(seq);
    }
    return {ok == checked && agree == 1000, "stored histories " + ratio(ok, checked) + ", oracle agreement " + ratio(agree, 1000)};
}

Verdict fault_injection() {
    std::ostringstream detail;
    bool pass = true;
    std::uint64_t seed = 500;
    for (const auto& mc : fx::mutation_classes()) {
        auto s = fx::run_mutations(mc, seed++, 60);
        pass &= s.caught == s.seeded && s.seeded >= 50;
        detail << mc.name << " " << ratio(s.caught, s.seeded) << ", ";
    }
    fx::Gen g(77);
    auto clean = fx::data_conversations();
    for (int i = 0; i < 200; ++i) clean.push_back(fx::clean_conversation(g, "clean_" + std::to_string(i)));
    auto errors = summarize(validate_dataset(clean), clean.size()).errors;
    pass &= errors == 0 && fx::mutation_classes().size() == 8;
    detail << "clean errors " << errors;
    return {pass, detail.str()};
}

Verdict flow() {
    fx::Gen g(99);
    auto fixtures = fx::data_conversations();
    for (int i = 0; i < 100; ++i) fixtures.push_back(fx::clean_conversation(g, "f" + std::to_string(i)));
    std::size_t reflexive = 0;
    for (const auto& c : fixtures) reflexive += check_flow_correspondence(c, c).empty();

    std::size_t caught = 0, seeded = 0;
    for (const auto& c : fixtures) {
        for (int kind = 0; kind < 3; ++kind) {
            auto bad = c;
            auto calls = fx::positions(c, fx::is_call_message);
            if (kind == 0) bad.messages[g.pick(calls)].content = g.sentence();
            else if (kind == 1) bad.messages.push_back({"user", g.sentence()});
            else bad.messages.pop_back();
            auto issues = check_flow_correspondence(c, bad);
            ++seeded;
            caught += std::any_of(issues.begin(), issues.end(), [](const auto& x) { return x.severity == Severity::Error; });
        }
    }
    return {reflexive == fixtures.size() && caught == seeded,
            "reflexive " + ratio(reflexive, fixtures.size()) + ", faults caught " + ratio(caught, seeded)};
}

Verdict metrics() {
    fx::Gen g(5);
    std::size_t table_ok = 0;
    for (int i = 0; i < 1000; ++i) {
        std::vector<ToolCall> gold;
        for (int k = g.range(0, 2); k > 0; --k) gold.push_back(g.tool_call());
        RouteDecision pred;
        if (g.coin()) pred = {DecisionKind::Tools, g.tool_calls()};
        bool gp = !gold.empty(), pp = !pred.is_reply();
        auto expected = gp ? (pp ? DecisionQuadrant::TP : DecisionQuadrant::FN) : (pp ? DecisionQuadrant::FP : DecisionQuadrant::TN);
        table_ok += score_decision(pred, gold) == expected;
    }
    std::size_t symmetric = 0;
    for (int i = 0; i < 1000; ++i) {
        auto a = g.sentence(0, 9), b = g.sentence(0, 9);
        symmetric += similarity_f1(a, b) == similarity_f1(b, a);
    }
    double f1 = similarity_f1("the sword costs 300 gold", "this sword costs 300 gold coins");
    std::vector<ToolResult> sword{fx::result("search_item", nullptr,
                                             Json::parse(R"([{"price": "300 Gold", "attack": "15 Attack", "feature": "good for night battles"}])"))};
    double recall = integration_recall("It has an attack of 15.", sword);
    bool pass = table_ok == 1000 && symmetric == 1000 && std::abs(f1 - 0.727) <= 0.001 && recall == 1.0 / 3.0;
    return {pass, "quadrants " + ratio(table_ok, 1000) + ", symmetric " + ratio(symmetric, 1000) + ", f1 " + fmt("%.4f", f1) +
                      ", sword recall " + fmt("%.6f", recall)};
}

Verdict converter() {
    auto j = Json::parse(detail::read_file(fx::data_path("records.json")))[0];
    for (int k = 1; k < 7; ++k) j.erase("turn_" + std::to_string(k));
    j["total_turn"] = 1;
    auto rec = load_records(Json::array({j}).dump()).at(0);
    auto r = restructure(rec, fx::data_manifest());
    bool shape = r.messages.size() == 4 && std::holds_alternative<UserText>(r.messages[0]) &&
                 std::holds_alternative<AssistantToolCalls>(r.messages[1]) && std::holds_alternative<ToolResponse>(r.messages[2]) &&
                 std::holds_alternative<AssistantText>(r.messages[3]);
    bool content = shape && std::get<AssistantToolCalls>(r.messages[1]).calls ==
                                std::vector<ToolCall>{fx::call("search_item", {{"item_description", "a more reliable weapon"}})} &&
                   std::get<ToolResponse>(r.messages[2]).results[0].return_value == Json::parse(R"([{"information": "many"}])") &&
                   starts_with(std::get<AssistantText>(r.messages[3]).text, "Not at all");
    auto ex = make_splits(r.messages, r.tools, rec.context);
    bool split = ex.size() == 2 && ex[0].expert_target == ExpertId::ToolExpert && ex[1].expert_target == ExpertId::PersonaExpert;
    return {shape && content && split, "turn_0 messages " + std::to_string(r.messages.size()) + ", examples " + std::to_string(ex.size())};
}

Verdict latency() {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules()));
    auto id = svc->create_session("task1_train_0001");
    double worst = 0;
    for (int i = 0; i < 20; ++i) {
        auto start = Clock::now();
        svc->post_message(id, i % 2 ? fx::kSwordQuestion : "Good evening.");
        worst = std::max(worst, std::chrono::duration<double, std::milli>(Clock::now() - start).count());
    }

    auto slow = fx::data_service(fx::scripted_gateway(fx::shop_rules(4000, 4000)));
    auto sid = slow->create_session("task1_train_0001");
    auto start = Clock::now();
    bool budget_error = false;
    try {
        slow->post_message(sid, "Good evening.");
    } catch (const Error& e) {
        budget_error = e.code() == ErrorCode::BudgetExceeded;
    }
    double aborted = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    bool pass = worst < 50.0 && budget_error && std::abs(aborted - 7000.0) <= 200.0 && slow->history(sid).empty();
    return {pass, "worst turn " + fmt("%.2f", worst) + " ms, budget abort at " + fmt("%.0f", aborted) + " ms" +
                      (budget_error ? " (BudgetExceeded)" : " (wrong error)")};
}

Verdict gold_echo() {
    auto recs = fx::data_records();
    auto manifest = fx::data_manifest();
    auto report = run_eval(recs, manifest, fx::gold_echo_pipeline(recs, manifest));
    auto is_one = [](const std::optional<double>& v) { return v && *v == 1.0; };
    bool pass = report.skipped_turns == 0 && report.evaluated_turns > 0 && is_one(report.accuracy) &&
                is_one(report.call_exact_match_rate) && is_one(report.mean_similarity);
    auto show = [](const std::optional<double>& v) { return v ? fmt("%.3f", *v) : std::string("null"); };
    return {pass, std::to_string(report.evaluated_turns) + " turns, accuracy " + show(report.accuracy) + ", exact-match " +
                      show(report.call_exact_match_rate) + ", similarity " + show(report.mean_similarity)};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
        {"round-trip parsing", round_trip},
        {"pipeline routing fidelity", routing},
        {"spurious-argument tolerance", spurious},
        {"pruning law", pruning},
        {"validator fault injection", fault_injection},
        {"flow correspondence", flow},
        {"metric oracles", metrics},
        {"converter fixture", converter},
        {"plumbing latency and budget", latency},
        {"oracle end-to-end eval", gold_echo},
    };
    int failures = 0;
    for (const auto& [name, fn] : criteria) {
        Verdict v;
        try {
            v = fn();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s %s: %s\n", v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str());
        std::fflush(stdout);
        failures += !v.pass;
    }
    return failures == 0 ? 0 : 1;
}
