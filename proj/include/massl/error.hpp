#pragma once

#include <stdexcept>
#include <string>

namespace massl {

// Tensor extents that do not fit an operation.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Caller broke an operation precondition (non-scalar loss, missing gradient).
class ContractError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

// Invalid configuration value; key() names the offending setting when known.
class ConfigError : public std::invalid_argument {
  public:
    explicit ConfigError(const std::string& msg, std::string key = {})
        : std::invalid_argument(msg), key_(std::move(key)) {}
    const std::string& key() const noexcept { return key_; }

  private:
    std::string key_;
};

// Input data violates a documented domain (e.g. non-binary mask).
class ValidationError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Failure while decoding one of the on-disk formats.
class FormatError : public std::runtime_error {
  public:
    enum class Kind { io, bad_magic, version_mismatch, malformed_header, header_mismatch, truncated };

    FormatError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

  private:
    Kind kind_;
};

inline const char* to_string(FormatError::Kind k) {
    switch (k) {
        case FormatError::Kind::io: return "io";
        case FormatError::Kind::bad_magic: return "bad_magic";
        case FormatError::Kind::version_mismatch: return "version_mismatch";
        case FormatError::Kind::malformed_header: return "malformed_header";
        case FormatError::Kind::header_mismatch: return "header_mismatch";
        case FormatError::Kind::truncated: return "truncated";
    }
    return "unknown";
}

}  // namespace massl
