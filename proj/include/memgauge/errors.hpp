#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace memgauge {

/// Base class of every failure raised by the library. `kind()` is a stable,
/// machine-readable tag used by the CLI when reporting errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config"; }
};

class DimensionError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "dimension"; }
};

class ShapeError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "shape"; }
};

class MalformedFileError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "malformed_file"; }
};

class IoError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "io"; }
};

class InvalidLabelError : public Error {
public:
    InvalidLabelError(std::size_t record, unsigned label)
        : Error("invalid label " + std::to_string(label) + " at record " + std::to_string(record)),
          record_(record) {}
    const char* kind() const noexcept override { return "invalid_label"; }
    std::size_t record() const noexcept { return record_; }

private:
    std::size_t record_;
};

class EmptyTrainingSetError : public Error {
public:
    EmptyTrainingSetError() : Error("training set is empty") {}
    const char* kind() const noexcept override { return "empty_training_set"; }
};

class DivergenceError : public Error {
public:
    explicit DivergenceError(std::size_t epoch)
        : Error("non-finite loss at epoch " + std::to_string(epoch)), epoch_(epoch) {}
    const char* kind() const noexcept override { return "divergence"; }
    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

class EstimationError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "estimation"; }
};

class DegenerateTestError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "degenerate_test"; }
};

class EmptyDataError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "empty_data"; }
};

} // namespace memgauge
