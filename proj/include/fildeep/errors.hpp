#pragma once

#include <stdexcept>
#include <string>

namespace fildeep {

// Every error raised by the library carries the process exit status the CLI
// reports for it.
class Error : public std::runtime_error {
public:
    Error(const std::string& what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("config error: " + what, 2) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error("data error: " + what, 3) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& what) : Error("numerical failure: " + what, 4) {}
};

} // namespace fildeep
