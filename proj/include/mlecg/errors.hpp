#pragma once

#include <stdexcept>
#include <string>

namespace mlecg {

// Error taxonomy shared across the library. The CLI maps these onto process
// exit codes: usage problems -> 1, data/parse/dimension problems -> 2,
// numerical aborts -> 3.

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
    ParseError(const std::string& file, int line, const std::string& what)
        : std::runtime_error(file + ":" + std::to_string(line) + ": " + what) {}
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a metric has no defined value (e.g. ROC-AUC on a single-class
// target vector). Callers that aggregate catch this and report absence.
struct UndefinedMetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mlecg
