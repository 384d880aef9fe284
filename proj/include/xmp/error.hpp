#pragma once

#include <stdexcept>
#include <string>

namespace xmp {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ContextOverflow : Error {
    using Error::Error;
};

struct ShapeMismatch : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

/// Non-finite loss during training.
struct Divergence : Error {
    using Error::Error;
};

/// A frozen backbone changed during adapter training.
struct FrozenWeightViolation : Error {
    using Error::Error;
};

struct PreconditionError : Error {
    using Error::Error;
};

}  // namespace xmp
