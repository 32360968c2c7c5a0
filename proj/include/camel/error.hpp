#pragma once

#include <stdexcept>
#include <string>

namespace camel {

// Error taxonomy shared across the library. Each value maps to one
// contract-violation class; catch sites dispatch on code().
enum class errc {
  rejected_input,
  empty_input,
  degeneracy,
  lifecycle,
  integrity,
  config,
  ingestion,
  pairing,
  malformed_probe,
  io,
};

class error : public std::runtime_error {
 public:
  error(errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  errc code() const noexcept { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& what) { throw error(code, what); }

}  // namespace camel
