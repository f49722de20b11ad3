#pragma once

#include <stdexcept>
#include <string>

namespace dhm {

/// Base of every error thrown by the library. Each subclass names one failure family.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error { public: using Error::Error; };
class IndexError : public Error { public: using Error::Error; };
class ContractError : public Error { public: using Error::Error; };
class TapeError : public Error { public: using Error::Error; };
class ArgumentError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class DegenerateError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };
class CheckpointError : public Error { public: using Error::Error; };

/// Config errors carry the offending line (0 when not tied to a line).
class ParseError : public Error {
public:
    ParseError(const std::string& msg, int line)
        : Error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
    int line() const noexcept { return line_; }

private:
    int line_;
};

}  // namespace dhm
