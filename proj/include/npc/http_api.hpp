#pragma once

#include <string>

#include "httplib.h"
#include "npc/service.hpp"

namespace npc {

inline int http_status(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownScenario:
        case ErrorCode::UnknownSession: return 404;
        case ErrorCode::TurnInProgress: return 409;
        case ErrorCode::BudgetExceeded: return 504;
        case ErrorCode::BackendUnavailable:
        case ErrorCode::BackendProtocol:
        case ErrorCode::UnconfiguredExpert: return 502;
        case ErrorCode::InvalidArgument:
        case ErrorCode::ParseError: return 400;
        default: return 500;
    }
}

inline Json error_body(std::string_view code, const std::string& detail) {
    return {{"error", std::string(code)}, {"detail", detail}};
}

/// Registers the /api routes on `server`. The service must outlive it.
inline void mount_api(httplib::Server& server, Service& service) {
    auto send = [](httplib::Response& res, int status, const Json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    };
    // Wraps a handler so every failure becomes {error, detail}.
    auto guarded = [send](auto fn) {
        return [send, fn](const httplib::Request& req, httplib::Response& res) {
            try {
                fn(req, res);
            } catch (const Error& e) {
                send(res, http_status(e.code()), error_body(to_string(e.code()), e.what()));
            } catch (const Json::exception& e) {
                send(res, 400, error_body(to_string(ErrorCode::InvalidArgument), e.what()));
            } catch (const std::exception& e) {
                send(res, 500, error_body("Internal", e.what()));
            }
        };
    };
    auto body_object = [](const httplib::Request& req) {
        Json doc = Json::parse(req.body, nullptr, false);
        if (doc.is_discarded() || !doc.is_object())
            throw Error(ErrorCode::InvalidArgument, "request body must be a JSON object");
        return doc;
    };
    auto string_field = [](const Json& doc, const char* key) {
        if (!doc.contains(key) || !doc[key].is_string())
            throw Error(ErrorCode::InvalidArgument, std::string("missing string field '") + key + "'");
        return doc[key].get<std::string>();
    };

    server.Get("/api/scenarios", guarded([&service, send](const httplib::Request&, httplib::Response& res) {
        Json out = Json::array();
        for (const auto& s : service.scenarios()) out.push_back(s.to_json());
        send(res, 200, out);
    }));

    server.Post("/api/sessions", guarded([&service, send, body_object, string_field](const httplib::Request& req,
                                                                                     httplib::Response& res) {
        auto id = service.create_session(string_field(body_object(req), "scenario_id"));
        send(res, 200, {{"session_id", id}});
    }));

    server.Post(R"(/api/sessions/([^/]+)/messages)",
                guarded([&service, send, body_object, string_field](const httplib::Request& req, httplib::Response& res) {
                    auto text = string_field(body_object(req), "text");
                    send(res, 200, service.post_message(req.matches[1].str(), text).to_json());
                }));

    server.Get(R"(/api/sessions/([^/]+)/history)",
               guarded([&service, send](const httplib::Request& req, httplib::Response& res) {
                   Json messages = Json::array();
                   for (const auto& m : service.history(req.matches[1].str())) messages.push_back(message_to_json(m));
                   send(res, 200, {{"messages", std::move(messages)}});
               }));
}

}  // namespace npc
