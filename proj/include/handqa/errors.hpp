#pragma once

#include <stdexcept>
#include <string>

namespace handqa {

// Raised for malformed or unreadable input data (files, records, fields).
// Messages carry a "path:line" or "path:line: field" prefix where available
// so the CLI can surface a usable diagnostic.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace handqa
