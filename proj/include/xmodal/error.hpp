#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xmodal {

enum class ErrorKind {
  config,
  parse,
  validation,
  empty_sentence,
  empty_component,
  invalid_projection,
  degenerate_input,
  batch_too_small,
  scheduling,
  non_finite,
  io,
  gradient_check,
};

std::string_view to_string(ErrorKind kind);

// Every error names the module and operation that raised it; the CLI maps
// kinds onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string module, std::string operation,
        const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& module() const noexcept { return module_; }
  const std::string& operation() const noexcept { return operation_; }
  // Message without the "[module.operation]" prefix.
  const std::string& detail() const noexcept { return detail_; }

  // True for failures caused by bad inputs or configuration (CLI exit 1);
  // false for runtime failures such as NaN aborts or I/O (CLI exit 2).
  bool is_usage_error() const noexcept;

 private:
  ErrorKind kind_;
  std::string module_;
  std::string operation_;
  std::string detail_;
};

[[noreturn]] void fail(ErrorKind kind, std::string module, std::string operation,
                       const std::string& message);

}  // namespace xmodal
