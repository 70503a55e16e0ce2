#pragma once

#include <stdexcept>
#include <string>

namespace fperase {

// Base class for everything this library throws on contract violations.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shapes do not line up (matmul inner dims, param/grad mismatch, ...).
struct DimError : Error {
    using Error::Error;
};

// Token id or index outside its valid range.
struct IndexError : Error {
    using Error::Error;
};

// A size limit was exceeded (context window, corpus cap, parameter cap).
struct CapacityError : Error {
    using Error::Error;
};

// Named tensor missing or wrong shape against a model schema.
struct SchemaError : Error {
    using Error::Error;
};

// Malformed checkpoint or report file.
struct FormatError : Error {
    using Error::Error;
};

// Operation requires state the object does not have (e.g. no adapter attached).
struct StateError : Error {
    using Error::Error;
};

// Invalid argument value (ratios, probabilities, empty inputs, ...).
struct InputError : Error {
    using Error::Error;
};

// Training loss became non-finite.
struct DivergenceError : Error {
    using Error::Error;
};

// A fingerprint re-emerged during recovery.
struct RegressionError : Error {
    using Error::Error;
};

// A fingerprint scheme cannot be instantiated for this configuration.
struct InfeasibleError : Error {
    using Error::Error;
};

// Embedding failed to reach full trigger recall within its budget.
struct EmbedFailureError : Error {
    double achieved_fsr;
    EmbedFailureError(const std::string& what, double fsr) : Error(what), achieved_fsr(fsr) {}
};

// A linear system was singular; a positive ridge term is required.
struct SingularError : Error {
    using Error::Error;
};

}  // namespace fperase
