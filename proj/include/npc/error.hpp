#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace npc {

enum class ErrorCode {
    InvalidArgument,
    InvalidHistory,
    EmptyResults,
    NameCollision,
    NameMismatch,
    UnknownTool,
    ToolFailed,
    ManifestError,
    BackendUnavailable,
    BackendProtocol,
    UnconfiguredExpert,
    DecisionUnparseable,
    ParseError,
    MissingTurn,
    UnknownFunctionList,
    GoldFunctionUnknown,
    ConfigError,
    UnknownScenario,
    UnknownSession,
    TurnInProgress,
    BudgetExceeded,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::InvalidHistory: return "InvalidHistory";
        case ErrorCode::EmptyResults: return "EmptyResults";
        case ErrorCode::NameCollision: return "NameCollision";
        case ErrorCode::NameMismatch: return "NameMismatch";
        case ErrorCode::UnknownTool: return "UnknownTool";
        case ErrorCode::ToolFailed: return "ToolFailed";
        case ErrorCode::ManifestError: return "ManifestError";
        case ErrorCode::BackendUnavailable: return "BackendUnavailable";
        case ErrorCode::BackendProtocol: return "BackendProtocol";
        case ErrorCode::UnconfiguredExpert: return "UnconfiguredExpert";
        case ErrorCode::DecisionUnparseable: return "DecisionUnparseable";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::MissingTurn: return "MissingTurn";
        case ErrorCode::UnknownFunctionList: return "UnknownFunctionList";
        case ErrorCode::GoldFunctionUnknown: return "GoldFunctionUnknown";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::UnknownScenario: return "UnknownScenario";
        case ErrorCode::UnknownSession: return "UnknownSession";
        case ErrorCode::TurnInProgress: return "TurnInProgress";
        case ErrorCode::BudgetExceeded: return "BudgetExceeded";
    }
    return "Unknown";
}

/// Base exception for every failure raised by the library. The code is the
/// stable, machine-readable part; what() carries the human detail.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& detail)
        : std::runtime_error(detail), code_(code) {}

    ErrorCode code() const noexcept { return code_; }
    std::string detail() const { return what(); }

private:
    ErrorCode code_;
};

/// Raised by the dataset loader; path is a JSON pointer into the document.
class ParseError : public Error {
public:
    ParseError(std::string path, const std::string& reason)
        : Error(ErrorCode::ParseError, path + ": " + reason), path_(std::move(path)) {}

    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

class MissingTurn : public Error {
public:
    explicit MissingTurn(int turn)
        : Error(ErrorCode::MissingTurn, "missing turn_" + std::to_string(turn)), turn_(turn) {}

    int turn() const noexcept { return turn_; }

private:
    int turn_;
};

}  // namespace npc
