#pragma once

#include <stdexcept>
#include <string>

namespace ssmdyn {

/// Base class for every error raised by the library. Messages are single-line
/// so the CLI can print them verbatim as machine-parseable diagnostics.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Raised by the checkpoint reader. `field()` names the header field or
/// tensor that failed validation.
class CheckpointError : public Error {
public:
    CheckpointError(std::string field, const std::string& what)
        : Error(what + " (field: " + field + ")"), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Raised when a config file or override is malformed or names an unknown key.
class ConfigError : public Error {
public:
    ConfigError(std::string key, const std::string& what)
        : Error(what + ": " + key), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

inline void require(bool cond, const char* msg) {
    if (!cond) throw Error(msg);
}

}  // namespace ssmdyn
