#pragma once

#include <stdexcept>

namespace hdu::io {

/// Malformed or inconsistent on-disk data.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace hdu::io
