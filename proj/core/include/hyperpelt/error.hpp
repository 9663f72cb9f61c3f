#pragma once

#include <stdexcept>
#include <string>

namespace hyperpelt {

// Error taxonomy shared across the library. Each category maps to one
// failure class callers are expected to distinguish.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/width mismatch in a numeric operation.
struct dimension_error : error {
    using error::error;
};

// NaN/Inf produced by a forward computation.
struct numeric_error : error {
    using error::error;
};

// Precondition violation (wrong arity, empty input, non-scalar loss, ...).
struct contract_error : error {
    using error::error;
};

// Unknown task/parameter/method name or out-of-range index.
struct lookup_error : error {
    using error::error;
};

// Malformed file contents (checkpoints, feature files, configs).
struct format_error : error {
    using error::error;
};

// Config or checkpoint version not understood by this build.
struct version_error : format_error {
    using format_error::format_error;
};

// Missing or empty slot when rendering a task template.
struct template_error : error {
    using error::error;
};

// A closure expected to be deterministic produced differing results.
struct determinism_error : error {
    using error::error;
};

} // namespace hyperpelt
