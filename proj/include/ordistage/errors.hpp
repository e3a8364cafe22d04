#pragma once

#include <stdexcept>
#include <string>

namespace ordistage {

// Error taxonomy. The CLI maps these onto exit codes (config 2, data 3, numeric 4).

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace ordistage
