#pragma once

#include <cstdint>
#include <iostream>
#include <stdexcept>
#include <string>

namespace ccsi {

inline constexpr int kVersionMajor = 0;
inline constexpr int kVersionMinor = 1;

// ---------------------------------------------------------------------------
// Error hierarchy. Every contract violation throws one of these; the what()
// string always names the offending value.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct LoadError : Error {       using Error::Error; };  // missing/corrupt archive
struct SchemaError : Error {     using Error::Error; };  // label outside declared range etc.
struct ScheduleError : Error {   using Error::Error; };  // task split does not cover classes
struct StratifyError : Error {   using Error::Error; };  // class too small for requested split
struct ShapeError : Error {      using Error::Error; };  // dimension mismatch
struct EmptyBatchError : Error { using Error::Error; };
struct EmptyClassError : Error { using Error::Error; };
struct NumericError : Error {    using Error::Error; };  // NaN/Inf or negative variance
struct StructuralError : Error { using Error::Error; };  // layer-count mismatch
struct CoverageError : Error {   using Error::Error; };  // centroid set missing classes
struct EvalError : Error {       using Error::Error; };
struct ConfigError : Error {     using Error::Error; };
struct ExportError : Error {     using Error::Error; };

// Warnings go to stderr; tests can silence them.
namespace log_detail {
inline bool& warnings_enabled() {
  static bool enabled = true;
  return enabled;
}
}  // namespace log_detail

inline void set_warnings_enabled(bool on) { log_detail::warnings_enabled() = on; }

inline void warn(const std::string& msg) {
  if (log_detail::warnings_enabled()) std::cerr << "[ccsi] warning: " << msg << "\n";
}

// FNV-1a, used for config fingerprints.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace ccsi
