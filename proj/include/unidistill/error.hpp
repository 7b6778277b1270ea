#pragma once

#include <stdexcept>
#include <string>

namespace unidistill {

// Error taxonomy shared by every module. Each derives from std::runtime_error
// so callers that do not care about the category can catch one type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

class ShapeError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "shape"; }
};

class NumericError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "numeric"; }
};

class ContractError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "contract"; }
};

class DomainError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "domain"; }
};

class ValidationError : public Error {
public:
    ValidationError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }
    const char* kind() const noexcept override { return "validation"; }

private:
    std::string field_;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, std::size_t column, const std::string& what)
        : Error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what),
          line_(line), column_(column) {}
    std::size_t line() const noexcept { return line_; }
    std::size_t column() const noexcept { return column_; }
    const char* kind() const noexcept override { return "parse"; }

private:
    std::size_t line_;
    std::size_t column_;
};

class FileError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "file"; }
};

namespace detail {

template <typename E>
inline void require(bool cond, const std::string& msg) {
    if (!cond) throw E(msg);
}

}  // namespace detail

}  // namespace unidistill
