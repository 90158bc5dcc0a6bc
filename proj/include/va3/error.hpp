#pragma once

#include <stdexcept>
#include <string>

namespace va3 {

// Base for every error the library raises. `kind()` is the stable,
// machine-readable name reported by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define VA3_DEFINE_ERROR(Name)                                  \
  class Name : public ::va3::Error {                            \
   public:                                                      \
    explicit Name(const std::string& message)                   \
        : ::va3::Error(#Name, message) {}                       \
  }

VA3_DEFINE_ERROR(SchemaError);
VA3_DEFINE_ERROR(ShapeError);
VA3_DEFINE_ERROR(IndexError);
VA3_DEFINE_ERROR(NonFiniteError);
VA3_DEFINE_ERROR(ConfigError);
VA3_DEFINE_ERROR(IoError);

}  // namespace va3
