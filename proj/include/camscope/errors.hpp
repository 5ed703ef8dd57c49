#pragma once
#include <stdexcept>
#include <string>

namespace camscope {

// File could not be opened, written, or removed.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File exists but its contents violate the on-disk schema.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace camscope
