#pragma once

#include <stdexcept>
#include <string>

namespace loctok {

// Error classes surfaced by the library. Tests and the CLI dispatch on the
// code; the message carries the human-readable detail.
enum class Errc {
  invalid_argument,
  empty_box_set,
  patch_mismatch,
  grid_not_mergeable,
  degenerate_region,
  unknown_referent,
  malformed_markup,
  stray_proxy,
  missing_placeholder,
  placeholder_mismatch,
  not_a_rec_item,
  uncovered_marker,
  parse_error,
  io_error,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_argument: return "invalid argument";
    case Errc::empty_box_set: return "empty box set";
    case Errc::patch_mismatch: return "patch mismatch";
    case Errc::grid_not_mergeable: return "grid not mergeable";
    case Errc::degenerate_region: return "degenerate region";
    case Errc::unknown_referent: return "unknown referent";
    case Errc::malformed_markup: return "malformed markup";
    case Errc::stray_proxy: return "stray proxy";
    case Errc::missing_placeholder: return "missing placeholder";
    case Errc::placeholder_mismatch: return "placeholder mismatch";
    case Errc::not_a_rec_item: return "not a REC item";
    case Errc::uncovered_marker: return "uncovered marker";
    case Errc::parse_error: return "parse error";
    case Errc::io_error: return "i/o error";
  }
  return "unknown error";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  explicit Error(Errc code) : std::runtime_error(errc_name(code)), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace loctok
