#pragma once

#include <stdexcept>
#include <string>

namespace pixcap {

// Error categories. The CLI maps each category to a distinct exit code
// (see README); library code throws, callers decide.
enum class ErrorCategory { shape, param, input, contract, io, config, numeric };

inline const char* to_string(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::shape: return "shape";
        case ErrorCategory::param: return "param";
        case ErrorCategory::input: return "input";
        case ErrorCategory::contract: return "contract";
        case ErrorCategory::io: return "io";
        case ErrorCategory::config: return "config";
        case ErrorCategory::numeric: return "numeric";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCategory cat, const std::string& msg) : std::runtime_error(msg), cat_(cat) {}
    ErrorCategory category() const noexcept { return cat_; }

private:
    ErrorCategory cat_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error(ErrorCategory::shape, m) {}
};
struct ParamError : Error {
    explicit ParamError(const std::string& m) : Error(ErrorCategory::param, m) {}
};
struct InputError : Error {
    explicit InputError(const std::string& m) : Error(ErrorCategory::input, m) {}
};
struct ContractError : Error {
    explicit ContractError(const std::string& m) : Error(ErrorCategory::contract, m) {}
};
struct IoError : Error {
    explicit IoError(const std::string& m) : Error(ErrorCategory::io, m) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error(ErrorCategory::config, m) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error(ErrorCategory::numeric, m) {}
};

}  // namespace pixcap
