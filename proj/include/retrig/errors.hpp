#pragma once

#include <stdexcept>
#include <string>

namespace retrig {

// Base for every error the engine raises on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed input files, corpora, configs, or arguments that fail a contract.
class DataError : public Error {
public:
    using Error::Error;
};

// A disruption that cannot be applied to the prompt or model shape.
class InvalidDisruption : public DataError {
public:
    using DataError::DataError;
};

// The generation backend could not be reached, timed out, or answered
// with something other than a well-formed reply.
class BackendError : public Error {
public:
    using Error::Error;
};

}  // namespace retrig
