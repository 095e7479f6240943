// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dlab {

// Failure categories double as process exit codes:
// 1 config, 2 data, 3 numeric, 4 resource.
enum class ErrorCategory { config = 1, data = 2, numeric = 3, resource = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& msg)
      : std::runtime_error(msg), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(ErrorCategory::config, msg) {}
};

struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(ErrorCategory::data, msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(ErrorCategory::numeric, msg) {}
};

struct ResourceError : Error {
  explicit ResourceError(const std::string& msg) : Error(ErrorCategory::resource, msg) {}
};

}  // namespace dlab
