#pragma once

// Error taxonomy shared by the library and the command line tool.
// Each category maps to a distinct process exit code so scripts can
// tell a bad config from a bad dataset from a numerical blowup.

#include <stdexcept>
#include <string>

namespace fdm {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or graph construction mistakes are programming errors, but they get
// their own type so tests can assert on them and messages can name the node.
struct ShapeError : std::logic_error {
    explicit ShapeError(const std::string& msg) : std::logic_error(msg) {}
};

struct UnsupportedError : std::logic_error {
    explicit UnsupportedError(const std::string& msg) : std::logic_error(msg) {}
};

namespace exit_code {
constexpr int ok = 0;
constexpr int config = 2;
constexpr int data = 3;
constexpr int numeric = 4;
constexpr int io = 5;
} // namespace exit_code

} // namespace fdm
