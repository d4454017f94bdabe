#include <csignal>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "npc/npc.hpp"

namespace {

using namespace npc;

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::InvalidArgument, "cannot write " + path);
    out << text;
}

void emit(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-")
        std::cout << text;
    else
        write_file(path, text);
}

std::vector<ConversationRecord> read_records(const std::string& path) {
    return load_records(detail::read_file(path));
}

ToolManifest read_manifest(const std::string& path) { return load_manifest(detail::read_file(path)); }

bool is_jsonl(const std::string& path) { return ends_with(path, ".jsonl"); }

// Records JSON or conversation JSONL, as raw conversations.
std::vector<RawConversation> read_conversations(const std::string& path, const std::string& manifest_path) {
    if (is_jsonl(path)) return load_conversations_jsonl(detail::read_file(path));
    if (manifest_path.empty())
        throw Error(ErrorCode::InvalidArgument, "validating a records file needs --manifest");
    auto manifest = read_manifest(manifest_path);
    std::vector<RawConversation> out;
    for (const auto& rec : read_records(path)) {
        auto conv = restructure(rec, manifest);
        out.push_back(to_raw(rec.data_id, conv.messages, conv.tools));
    }
    return out;
}

struct Scenes {
    ServiceConfig config;
    std::shared_ptr<Gateway> gateway;
    std::map<std::string, Scenario> scenarios;
};

Scenes load_scenes(const std::string& config_path, const std::string& records, const std::string& manifest) {
    Scenes s;
    s.config = ServiceConfig::load(config_path);
    if (!records.empty()) s.config.records = records;
    if (!manifest.empty()) s.config.manifest = manifest;
    if (!s.config.records || !s.config.manifest)
        throw Error(ErrorCode::ConfigError, "scenarios need records and manifest (config keys or flags)");
    s.gateway = build_gateway(s.config);
    s.gateway->set_warning_sink([](const std::string& w) { std::cerr << "warning: " << w << "\n"; });
    auto recs = read_records(*s.config.records);
    s.scenarios = scenarios_from_records(recs, read_manifest(*s.config.manifest));
    return s;
}

int run_convert(const std::string& records, const std::string& manifest_path, const std::string& out,
                const std::string& conversations_out) {
    auto manifest = read_manifest(manifest_path);
    std::vector<TrainingExample> examples;
    std::string conversations;
    for (const auto& rec : read_records(records)) {
        auto conv = restructure(rec, manifest);
        auto split = make_splits(conv.messages, conv.tools, rec.context);
        examples.insert(examples.end(), std::make_move_iterator(split.begin()), std::make_move_iterator(split.end()));
        if (!conversations_out.empty())
            conversations += raw_conversation_to_json(to_raw(rec.data_id, conv.messages, conv.tools)).dump() + "\n";
    }
    emit(out, export_jsonl(examples));
    if (!conversations_out.empty()) write_file(conversations_out, conversations);
    std::cerr << examples.size() << " examples\n";
    return 0;
}

int run_validate(const std::string& input, const std::string& against, const std::string& manifest,
                 const std::string& report) {
    auto dataset = read_conversations(input, manifest);
    auto issues = validate_dataset(dataset);
    if (!against.empty()) {
        auto originals = read_conversations(against, manifest);
        std::map<std::string, const RawConversation*> by_id;
        for (const auto& c : originals) by_id[c.id] = &c;
        for (const auto& aug : dataset) {
            auto it = by_id.find(aug.id);
            if (it == by_id.end()) {
                issues.push_back({Severity::Error, Category::Flow, aug.id, "no-original",
                                  "no original conversation with this id"});
                continue;
            }
            auto flow = check_flow_correspondence(*it->second, aug);
            issues.insert(issues.end(), flow.begin(), flow.end());
        }
    }
    emit(report, report_jsonl(issues, dataset.size()));
    auto summary = summarize(issues, dataset.size());
    std::cerr << summary.errors << " errors, " << summary.warnings << " warnings in " << summary.records_checked
              << " conversations\n";
    return summary.passed() ? 0 : 1;
}

int run_eval_cmd(const std::string& records, const std::string& manifest_path, const std::string& backend,
                 bool gold_echo, const std::string& out, const std::string& csv) {
    auto recs = read_records(records);
    auto manifest = read_manifest(manifest_path);
    EvalPipeline pipeline;
    if (gold_echo) {
        auto script = std::make_shared<ScriptedBackend>(ScriptedBackend::from_json(make_gold_echo_script(recs, manifest, pipeline.config)));
        std::map<ExpertId, ExpertBinding> bindings;
        for (auto id : {ExpertId::ToolExpert, ExpertId::DirectExpert, ExpertId::PersonaExpert}) bindings[id] = {script, "gold-echo"};
        pipeline.gateway = std::make_shared<Gateway>(std::move(bindings));
    } else {
        if (backend.empty()) throw Error(ErrorCode::InvalidArgument, "eval needs --backend <config> or --gold-echo");
        auto cfg = ServiceConfig::load(backend);
        pipeline.config = cfg.pipeline;
        pipeline.gateway = build_gateway(cfg);
    }
    auto report = run_eval(recs, manifest, pipeline);
    emit(out, report.to_json().dump(2) + "\n");
    if (!csv.empty()) write_file(csv, report.rows_csv());
    std::cerr << report.evaluated_turns << " turns evaluated, " << report.skipped_turns << " skipped\n";
    return 0;
}

httplib::Server* g_server = nullptr;

int run_serve(const std::string& config, const std::string& records, const std::string& manifest, std::string host,
              int port) {
    auto scenes = load_scenes(config, records, manifest);
    if (host.empty()) host = scenes.config.host;
    if (port <= 0) port = scenes.config.port;
    Service service(scenes.gateway, scenes.config.pipeline, std::move(scenes.scenarios), scenes.config.budget_ms);
    httplib::Server server;
    mount_api(server, service);
    g_server = &server;
    std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
    });
    std::cerr << "listening on " << host << ":" << port << "\n";
    if (!server.listen(host, port)) {
        std::cerr << "cannot bind " << host << ":" << port << "\n";
        return 1;
    }
    return 0;
}

int run_chat(const std::string& scenario, const std::string& config, const std::string& records,
             const std::string& manifest, bool show_trace) {
    auto scenes = load_scenes(config, records, manifest);
    Service service(scenes.gateway, scenes.config.pipeline, std::move(scenes.scenarios), scenes.config.budget_ms);
    auto id = service.create_session(scenario);
    std::string npc_name;
    for (const auto& s : service.scenarios())
        if (s.id == scenario) npc_name = s.npc_name.empty() ? "NPC" : s.npc_name;
    std::cout << "Talking to " << npc_name << ". Empty line or /quit to leave.\n";
    std::string line;
    while (std::cout << "> " << std::flush, std::getline(std::cin, line)) {
        if (trim_view(line).empty() || line == "/quit") break;
        try {
            auto res = service.post_message(id, line);
            std::cout << npc_name << ": " << res.reply << "\n";
            if (show_trace) std::cout << res.trace.to_json().dump(2) << "\n";
            std::cout << "  [" << (res.trace.decision.is_reply() ? "Reply" : "Tools");
            for (const auto& c : res.trace.tool_calls) std::cout << " " << c.name;
            std::cout << ", " << static_cast<int>(res.timing_total_ms) << " ms]\n";
        } catch (const Error& e) {
            std::cout << "! " << to_string(e.code()) << ": " << e.what() << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"NPC dialogue engine: dataset tools, evaluation and chat service"};
    app.require_subcommand(1);

    std::string records, manifest, out, conversations_out;
    auto* convert = app.add_subcommand("convert", "restructure records and export training examples as JSONL");
    convert->add_option("records", records, "competition records JSON")->required();
    convert->add_option("manifest", manifest, "tool manifest JSON")->required();
    convert->add_option("-o,--output", out, "output JSONL (default stdout)");
    convert->add_option("--conversations", conversations_out, "also write restructured conversations as JSONL");

    std::string input, against, report;
    auto* validate = app.add_subcommand("validate", "run the quality gate over records or conversation JSONL");
    validate->add_option("input", input, "records JSON or conversations .jsonl")->required();
    validate->add_option("--augmented-against", against, "original dataset for flow correspondence");
    validate->add_option("--manifest", manifest, "tool manifest, needed for records input");
    validate->add_option("-o,--output", report, "report JSONL (default stdout)");

    std::string backend, csv;
    bool gold_echo = false;
    auto* eval = app.add_subcommand("eval", "replay gold conversations through the pipeline and score them");
    eval->add_option("records", records, "competition records JSON")->required();
    eval->add_option("manifest", manifest, "tool manifest JSON")->required();
    eval->add_option("--backend", backend, "service config naming the expert backends");
    eval->add_flag("--gold-echo", gold_echo, "use a scripted backend that reproduces the gold data");
    eval->add_option("-o,--output", out, "report JSON (default stdout)");
    eval->add_option("--csv", csv, "also write per-turn rows as CSV");

    std::string config, host;
    int port = 0;
    auto* serve = app.add_subcommand("serve", "start the HTTP chat API");
    serve->add_option("--config", config, "service config JSON")->required();
    serve->add_option("--records", records, "scenario records (overrides config)");
    serve->add_option("--manifest", manifest, "tool manifest (overrides config)");
    serve->add_option("--host", host, "bind address");
    serve->add_option("--port", port, "bind port");

    std::string scenario;
    bool show_trace = false;
    auto* chat = app.add_subcommand("chat", "terminal chat with one scenario's NPC");
    chat->add_option("scenario_id", scenario, "data_id of the scenario")->required();
    chat->add_option("--config", config, "service config JSON")->required();
    chat->add_option("--records", records, "scenario records (overrides config)");
    chat->add_option("--manifest", manifest, "tool manifest (overrides config)");
    chat->add_flag("--trace", show_trace, "print the full turn trace");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*convert) return run_convert(records, manifest, out, conversations_out);
        if (*validate) return run_validate(input, against, manifest, report);
        if (*eval) return run_eval_cmd(records, manifest, backend, gold_echo, out, csv);
        if (*serve) return run_serve(config, records, manifest, host, port);
        if (*chat) return run_chat(scenario, config, records, manifest, show_trace);
    } catch (const npc::Error& e) {
        std::cerr << "error: " << npc::to_string(e.code()) << ": " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
