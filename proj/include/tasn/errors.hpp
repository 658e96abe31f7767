#pragma once

#include <stdexcept>
#include <string>

namespace tasn {

// Operand shapes do not agree with an operation's contract.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Value outside an operation's mathematical domain, or a non-finite result.
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// API misuse, e.g. differentiating a non-scalar.
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

// Malformed file or stream contents.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace tasn
