#pragma once

#include <stdexcept>
#include <string>

namespace autolora {

// Shape or broadcast violation in a tensor operation.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent configuration (missing LoRA factors, bad attack
// budget, malformed config file, ...).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Violated call contract (label out of range, non-scalar backward root,
// scheduler consulted off-checkpoint, ...).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Malformed file content (checkpoint, CSV, IDX).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite value where training cannot continue.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace autolora
