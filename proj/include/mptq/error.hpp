#pragma once

#include <stdexcept>
#include <string>

namespace mptq {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes or channel counts that do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Malformed or non-finite input data.
class InputError : public Error {
public:
    using Error::Error;
};

class LookupError : public Error {
public:
    using Error::Error;
};

// A quantizer could not be fitted to the supplied statistics.
class FitError : public Error {
public:
    using Error::Error;
};

class EncodingError : public Error {
public:
    using Error::Error;
};

class AllocationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Failure inside one pipeline stage; the stage name is carried separately so
// the CLI can report it.
class PipelineError : public Error {
public:
    PipelineError(std::string stage, const std::string& what)
        : Error(stage + ": " + what), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace mptq
