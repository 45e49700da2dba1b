#pragma once

#include <stdexcept>
#include <string>

namespace refgen {

// Bad input, bad flags, shape mismatch. CLI exit code 2.
class ValidationError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Wrong magic/version, checksum mismatch, truncated file, manifest hash mismatch. CLI exit code 3.
class IntegrityError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf loss during training. CLI exit code 4.
class DivergenceError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Point set whose support cannot be estimated (e.g. all points identical).
class DegenerateSetError : public ValidationError {
   public:
    using ValidationError::ValidationError;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError(what);
}

}  // namespace refgen
