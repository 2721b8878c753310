#pragma once

#include <stdexcept>
#include <string>

namespace vibtk {

struct shape_error : std::runtime_error {
  explicit shape_error(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct contract_error : std::runtime_error {
  explicit contract_error(const std::string& msg) : std::runtime_error("contract violation: " + msg) {}
};

struct format_error : std::runtime_error {
  explicit format_error(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

struct consistency_error : std::runtime_error {
  explicit consistency_error(const std::string& msg) : std::runtime_error("consistency error: " + msg) {}
};

struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

}  // namespace vibtk
