#include "xmodal/error.hpp"

namespace xmodal {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config";
    case ErrorKind::parse: return "parse";
    case ErrorKind::validation: return "validation";
    case ErrorKind::empty_sentence: return "empty_sentence";
    case ErrorKind::empty_component: return "empty_component";
    case ErrorKind::invalid_projection: return "invalid_projection";
    case ErrorKind::degenerate_input: return "degenerate_input";
    case ErrorKind::batch_too_small: return "batch_too_small";
    case ErrorKind::scheduling: return "scheduling";
    case ErrorKind::non_finite: return "non_finite";
    case ErrorKind::io: return "io";
    case ErrorKind::gradient_check: return "gradient_check";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, std::string module, std::string operation,
             const std::string& message)
    : std::runtime_error("[" + module + "." + operation + "] " +
                         std::string(to_string(kind)) + " error: " + message),
      kind_(kind),
      module_(std::move(module)),
      operation_(std::move(operation)),
      detail_(message) {}

bool Error::is_usage_error() const noexcept {
  switch (kind_) {
    case ErrorKind::non_finite:
    case ErrorKind::io:
    case ErrorKind::gradient_check:
      return false;
    default:
      return true;
  }
}

void fail(ErrorKind kind, std::string module, std::string operation,
          const std::string& message) {
  throw Error(kind, std::move(module), std::move(operation), message);
}

}  // namespace xmodal
