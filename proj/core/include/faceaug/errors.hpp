#pragma once

#include <stdexcept>
#include <string>

namespace faceaug {

// Base class for all library errors. Specific subclasses map onto the
// failure categories callers are expected to branch on.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/layer shape contract violated.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value or incompatible configuration combination.
struct ConfigError : Error {
    using Error::Error;
};

// Image file could not be decoded.
struct DecodeError : Error {
    using Error::Error;
};

// Crop rectangle degenerate or source image too small.
struct CropError : Error {
    using Error::Error;
};

// Dataset scan found no usable entries.
struct EmptyDataset : Error {
    using Error::Error;
};

// No valid (anchor, positive, negative) triple could be formed.
struct EmptyTriplets : Error {
    using Error::Error;
};

// Non-finite value in a place that indicates a diverged computation.
struct NumericalError : Error {
    using Error::Error;
};

// Filesystem / serialization failure.
struct IoError : Error {
    using Error::Error;
};

}  // namespace faceaug
