#pragma once

#include <stdexcept>
#include <string>

namespace pkdn {

// Runtime failure (I/O problems, mid-run inconsistencies, numerical aborts).
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Precondition violation on user-supplied input: bad shapes, bad config,
// malformed files. The CLI maps this to exit code 1, everything else to 2.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

}  // namespace pkdn
