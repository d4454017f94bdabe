#include <gtest/gtest.h>

#include <atomic>
#include <set>
#include <thread>

#include "npc/http_api.hpp"
#include "support/corpus.hpp"

using namespace npc;
using namespace std::chrono_literals;

namespace {

const std::string kLuna = "task1_train_0001";

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorCode::InvalidArgument;
}

// Tracks how many completions run at once.
class OverlapProbe : public Backend {
public:
    explicit OverlapProbe(std::shared_ptr<Backend> inner) : inner_(std::move(inner)) {}

    RawCompletion complete(ExpertId expert, const GenerationRequest& request, Clock::time_point deadline) override {
        int now = ++active_;
        int seen = peak_.load();
        while (now > seen && !peak_.compare_exchange_weak(seen, now)) {}
        std::this_thread::sleep_for(200us);
        auto out = inner_->complete(expert, request, deadline);
        --active_;
        return out;
    }

    int peak() const { return peak_.load(); }

private:
    std::shared_ptr<Backend> inner_;
    std::atomic<int> active_{0}, peak_{0};
};

struct ApiServer {
    httplib::Server server;
    std::thread thread;
    int port = 0;

    explicit ApiServer(Service& service) {
        mount_api(server, service);
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~ApiServer() {
        server.stop();
        thread.join();
    }
    httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

}  // namespace

TEST(Sessions, CreateExamples) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules()));
    auto a = svc->create_session(kLuna);
    auto b = svc->create_session(kLuna);
    EXPECT_NE(a, b);
    EXPECT_EQ(a.size(), 16u);
    EXPECT_TRUE(svc->history(a).empty());
    EXPECT_EQ(code_of([&] { svc->create_session("missing"); }), ErrorCode::UnknownScenario);
    EXPECT_EQ(code_of([&] { svc->history("nope"); }), ErrorCode::UnknownSession);
}

TEST(Sessions, IdsStayUnique) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules()));
    std::set<std::string> ids;
    for (int i = 0; i < 2000; ++i) ids.insert(svc->create_session(kLuna));
    EXPECT_EQ(ids.size(), 2000u);
    EXPECT_EQ(svc->sessions().size(), 2000u);
}

TEST(Sessions, ScenarioList) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules()));
    auto list = svc->scenarios();
    ASSERT_EQ(list.size(), 2u);
    EXPECT_EQ(list[0].id, kLuna);
    EXPECT_EQ(list[0].npc_name, "Luna");
    EXPECT_EQ(list[0].place, "Weapon shop");
}

TEST(Sessions, IdleExpiry) {
    auto base = Clock::now();
    auto offset = std::make_shared<std::atomic<long long>>(0);
    auto now = [base, offset] { return base + std::chrono::minutes(offset->load()); };
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules()), kDefaultBudgetMs, kDefaultIdleExpiry, now);
    auto id = svc->create_session(kLuna);
    auto other = svc->create_session(kLuna);
    *offset = 20;
    svc->post_message(id, "Hello");
    *offset = 45;  // 25 minutes after the last use of `id`, 45 after `other` was made
    EXPECT_NO_THROW(svc->history(id));
    EXPECT_EQ(code_of([&] { svc->post_message(other, "Hello"); }), ErrorCode::UnknownSession);
    *offset = 76;
    EXPECT_EQ(code_of([&] { svc->post_message(id, "Hello"); }), ErrorCode::UnknownSession);
}

TEST(PostMessage, SwordQuestion) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules()));
    auto id = svc->create_session(kLuna);
    auto r = svc->post_message(id, fx::kSwordQuestion);
    EXPECT_EQ(r.reply, "That one is 300 Gold.");
    ASSERT_EQ(r.trace.tool_calls.size(), 1u);
    EXPECT_EQ(r.trace.tool_calls[0], fx::call("check_price", {{"item_name", "Double-Handed Sword"}}));
    EXPECT_EQ(r.trace.tool_results[0].return_value, Json::parse(R"([{"price": "300 Gold"}])"));
    EXPECT_GE(r.timing_total_ms + 1.0, r.trace.timings.sum());
    auto j = Json::parse(r.to_json().dump());
    EXPECT_EQ(TurnTrace::from_json(j["trace"]).to_json(), r.trace.to_json());
    EXPECT_EQ(svc->history(id).size(), 2u);
}

TEST(PostMessage, LatencyWithScriptedBackends) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules()));
    auto id = svc->create_session(kLuna);
    for (const auto& text : {std::string("Good evening."), fx::kSwordQuestion, std::string("Thanks!")}) {
        auto start = Clock::now();
        auto r = svc->post_message(id, text);
        auto wall = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
        EXPECT_LT(r.timing_total_ms, 50.0);
        EXPECT_LT(wall, 50.0);
    }
}

TEST(PostMessage, SecondPostWhileBusy) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules(300)));
    auto id = svc->create_session(kLuna);
    std::thread first([&] { svc->post_message(id, "Hello"); });
    std::this_thread::sleep_for(60ms);
    EXPECT_EQ(code_of([&] { svc->post_message(id, "Hello again"); }), ErrorCode::TurnInProgress);
    first.join();
    EXPECT_EQ(svc->history(id).size(), 2u);
}

TEST(PostMessage, ParallelPostsNeverInterleave) {
    auto probe = std::make_shared<OverlapProbe>(std::make_shared<ScriptedBackend>(fx::shop_rules()));
    auto svc = fx::data_service(std::make_shared<const Gateway>(fx::bind_all(probe)));
    auto id = svc->create_session(kLuna);
    std::atomic<int> ok{0}, busy{0}, other{0};
    std::vector<std::thread> threads;
    for (int i = 0; i < 128; ++i)
        threads.emplace_back([&, i] {
            try {
                svc->post_message(id, i % 3 ? "Hello" : fx::kSwordQuestion);
                ++ok;
            } catch (const Error& e) {
                (e.code() == ErrorCode::TurnInProgress ? busy : other)++;
            }
        });
    for (auto& t : threads) t.join();
    EXPECT_EQ(other.load(), 0);
    EXPECT_EQ(ok + busy, 128);
    EXPECT_GE(ok.load(), 1);
    EXPECT_EQ(probe->peak(), 1);
    auto h = svc->history(id);
    EXPECT_EQ(h.size(), 2u * static_cast<std::size_t>(ok.load()));
    EXPECT_TRUE(history_problems(h).empty());
}

TEST(PostMessage, ManySessionsInParallel) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules()));
    std::vector<std::string> ids;
    for (int i = 0; i < 8; ++i) ids.push_back(svc->create_session(i % 2 ? kLuna : "task1_train_0002"));
    std::vector<std::thread> threads;
    std::atomic<int> failures{0};
    for (int t = 0; t < 16; ++t)
        threads.emplace_back([&, t] {
            const auto& id = ids[static_cast<std::size_t>(t % 8)];
            for (int k = 0; k < 10;) {
                try {
                    svc->post_message(id, "Message " + std::to_string(k));
                    ++k;
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::TurnInProgress) ++failures, ++k;
                    std::this_thread::yield();
                }
            }
        });
    for (auto& th : threads) th.join();
    EXPECT_EQ(failures.load(), 0);
    for (const auto& id : ids) {
        auto h = svc->history(id);
        EXPECT_EQ(h.size(), 40u);
        EXPECT_TRUE(history_problems(h).empty());
    }
}

TEST(PostMessage, BudgetAbortsSlowTurnAtSevenSeconds) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules(4000, 4000)));
    EXPECT_EQ(svc->budget(), 7000ms);
    auto id = svc->create_session(kLuna);
    auto start = Clock::now();
    EXPECT_EQ(code_of([&] { svc->post_message(id, "Hello"); }), ErrorCode::BudgetExceeded);
    auto elapsed = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    EXPECT_NEAR(elapsed, 7000.0, 200.0);
    EXPECT_TRUE(svc->history(id).empty());
}

TEST(PostMessage, FailedTurnLeavesHistory) {
    auto rules = fx::shop_rules();
    rules[2] = fx::rule(ExpertId::PersonaExpert, "", "", 0, "protocol");
    auto svc = fx::data_service(fx::scripted_gateway(rules));
    auto id = svc->create_session(kLuna);
    svc->post_message(id, "Hello");
    auto before = svc->history(id);
    EXPECT_EQ(code_of([&] { svc->post_message(id, fx::kSwordQuestion); }), ErrorCode::BackendProtocol);
    EXPECT_EQ(svc->history(id), before);
    EXPECT_NO_THROW(svc->post_message(id, "Hello"));
}

TEST(Config, DemoConfigLoads) {
    auto cfg = ServiceConfig::load(fx::data_path("demo_config.json"));
    EXPECT_EQ(cfg.budget_ms, 7000);
    EXPECT_EQ(cfg.timeout_ms, 6000);
    EXPECT_EQ(cfg.experts.size(), 3u);
    EXPECT_EQ(cfg.pipeline.prefill, "<tool_call>\n{\"name\": \"");
    EXPECT_EQ(cfg.pipeline.sentinel, "reply\"");
    ASSERT_TRUE(cfg.records);
    EXPECT_EQ(*cfg.records, fx::data_path("records.json"));
    auto gw = build_gateway(cfg);
    auto records = load_records(detail::read_file(*cfg.records));
    Service svc(gw, cfg.pipeline, scenarios_from_records(records, load_manifest(detail::read_file(*cfg.manifest))), cfg.budget_ms);
    auto id = svc.create_session(kLuna);
    auto r = svc.post_message(id, fx::kSwordQuestion);
    ASSERT_EQ(r.trace.tool_calls.size(), 1u);
    EXPECT_EQ(r.trace.tool_calls[0].name, "check_price");
}

TEST(Config, LiveConfigParses) {
    auto cfg = ServiceConfig::load(fx::data_path("live_config.json"));
    EXPECT_EQ(cfg.experts.at(ExpertId::PersonaExpert).endpoint, "http://127.0.0.1:8000");
    EXPECT_TRUE(cfg.experts.at(ExpertId::PersonaExpert).native_suppression);
    EXPECT_NO_THROW(build_gateway(cfg));
}

TEST(Config, Rejections) {
    auto bad = [](const char* text) { return code_of([&] { ServiceConfig::from_json(Json::parse(text)); }); };
    EXPECT_EQ(bad(R"({"experts": {"tool": {"endpoint": "http://x", "script": "s.json"}}})"), ErrorCode::ConfigError);
    EXPECT_EQ(bad(R"({"experts": {"tool": {}}})"), ErrorCode::ConfigError);
    EXPECT_EQ(bad(R"({"experts": {"critic": {"endpoint": "http://x"}}})"), ErrorCode::ConfigError);
    EXPECT_EQ(bad(R"({"budget_ms": 0})"), ErrorCode::ConfigError);
    EXPECT_EQ(bad(R"({"prefill": ""})"), ErrorCode::ConfigError);
    EXPECT_EQ(bad(R"([])"), ErrorCode::ConfigError);
    auto cfg = ServiceConfig::from_json(Json::parse(R"({"think_prefixes": {"direct": "Be brief."}, "banned_strings": ["<x>"]})"));
    EXPECT_EQ(cfg.pipeline.direct_think_prefix, "Be brief.");
    EXPECT_EQ(cfg.pipeline.banned_strings, std::vector<std::string>{"<x>"});
    EXPECT_EQ(cfg.budget_ms, 7000);
}

TEST(Http, StatusMapping) {
    EXPECT_EQ(http_status(ErrorCode::UnknownSession), 404);
    EXPECT_EQ(http_status(ErrorCode::UnknownScenario), 404);
    EXPECT_EQ(http_status(ErrorCode::TurnInProgress), 409);
    EXPECT_EQ(http_status(ErrorCode::BudgetExceeded), 504);
    EXPECT_EQ(http_status(ErrorCode::BackendUnavailable), 502);
    EXPECT_EQ(http_status(ErrorCode::InvalidArgument), 400);
}

TEST(Http, Routes) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules()));
    ApiServer api(*svc);
    auto cli = api.client();

    auto list = cli.Get("/api/scenarios");
    ASSERT_TRUE(list);
    EXPECT_EQ(list->status, 200);
    auto scenarios = Json::parse(list->body);
    ASSERT_EQ(scenarios.size(), 2u);
    EXPECT_EQ(scenarios[0], Json({{"id", kLuna}, {"npc_name", "Luna"}, {"place", "Weapon shop"}}));

    auto made = cli.Post("/api/sessions", Json({{"scenario_id", kLuna}}).dump(), "application/json");
    ASSERT_TRUE(made);
    EXPECT_EQ(made->status, 200);
    auto id = Json::parse(made->body)["session_id"].get<std::string>();

    auto msg = cli.Post("/api/sessions/" + id + "/messages", Json({{"text", fx::kSwordQuestion}}).dump(), "application/json");
    ASSERT_TRUE(msg);
    EXPECT_EQ(msg->status, 200);
    auto body = Json::parse(msg->body);
    EXPECT_EQ(body["reply"], "That one is 300 Gold.");
    EXPECT_EQ(body["trace"]["tool_calls"][0]["name"], "check_price");
    EXPECT_TRUE(body["timing_total_ms"].is_number());
    std::vector<std::string> keys;
    for (const auto& [k, v] : body.items()) keys.push_back(k);
    EXPECT_EQ(keys, (std::vector<std::string>{"reply", "trace", "timing_total_ms"}));

    auto hist = cli.Get("/api/sessions/" + id + "/history");
    ASSERT_TRUE(hist);
    auto messages = Json::parse(hist->body)["messages"];
    ASSERT_EQ(messages.size(), 2u);
    EXPECT_EQ(message_from_json(messages[0]), Message(UserText{fx::kSwordQuestion}));
}

TEST(Http, ErrorBodies) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules()));
    ApiServer api(*svc);
    auto cli = api.client();
    auto expect_error = [](const httplib::Result& r, int status, const std::string& code) {
        ASSERT_TRUE(r);
        EXPECT_EQ(r->status, status);
        auto j = Json::parse(r->body);
        EXPECT_EQ(j["error"], code);
        EXPECT_TRUE(j["detail"].is_string());
        EXPECT_EQ(j.size(), 2u);
    };
    expect_error(cli.Post("/api/sessions", R"({"scenario_id": "missing"})", "application/json"), 404, "UnknownScenario");
    expect_error(cli.Post("/api/sessions", "not json", "application/json"), 400, "InvalidArgument");
    expect_error(cli.Post("/api/sessions", R"({"scenario": 1})", "application/json"), 400, "InvalidArgument");
    expect_error(cli.Post("/api/sessions/abc/messages", R"({"text": "hi"})", "application/json"), 404, "UnknownSession");
    expect_error(cli.Get("/api/sessions/abc/history"), 404, "UnknownSession");
    auto id = svc->create_session(kLuna);
    expect_error(cli.Post("/api/sessions/" + id + "/messages", R"({"text": "   "})", "application/json"), 400, "InvalidArgument");
}

TEST(Http, BusyAndTimeoutStatuses) {
    auto svc = fx::data_service(fx::scripted_gateway(fx::shop_rules(400, 400)), 600);
    ApiServer api(*svc);
    auto id = svc->create_session(kLuna);
    std::thread first([&] {
        auto cli = api.client();
        auto r = cli.Post("/api/sessions/" + id + "/messages", R"({"text": "Hello"})", "application/json");
        ASSERT_TRUE(r);
        EXPECT_EQ(r->status, 504);
        EXPECT_EQ(Json::parse(r->body)["error"], "BudgetExceeded");
    });
    std::this_thread::sleep_for(100ms);
    auto cli = api.client();
    auto busy = cli.Post("/api/sessions/" + id + "/messages", R"({"text": "Again"})", "application/json");
    ASSERT_TRUE(busy);
    EXPECT_EQ(busy->status, 409);
    EXPECT_EQ(Json::parse(busy->body)["error"], "TurnInProgress");
    first.join();
    auto hist = cli.Get("/api/sessions/" + id + "/history");
    EXPECT_TRUE(Json::parse(hist->body)["messages"].empty());
}
