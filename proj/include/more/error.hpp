#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace more {

enum class Errc {
  shape_mismatch,
  non_finite,
  label_out_of_range,
  disconnected_tensor,
  invalid_arch,
  invalid_params,
  non_finite_gradient,
  empty_dataset,
  empty_rotation,
  bad_magic,
  truncated_file,
  count_mismatch,
  io_error,
  version_mismatch,
  hash_mismatch,
  gradient_unavailable,
  config_parse,
  stage_failure,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace more
