#ifndef STREAMLOC_COMMON_HPP
#define STREAMLOC_COMMON_HPP

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace streamloc {

// Error taxonomy used across the library. Every failure carries a kind so
// callers (CLI, tests) can map it to an exit code without string matching.
enum class ErrorKind {
  kDimension,   // shape / axis mismatch
  kArgument,    // invalid argument value
  kLabel,       // bad label / target encoding
  kState,       // missing optimizer state, untrained network, ...
  kData,        // empty corpus, missing file referenced by annotations
  kParse,       // malformed file content
  kCheckpoint,  // version / config-hash mismatch, truncation
  kIndex,       // out-of-range window or frame index
  kSpec,        // infeasible generation spec
  kUsage,       // bad CLI usage / unknown config key
  kNumeric,     // NaN/Inf detected
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

const char* error_kind_name(ErrorKind kind);

// Train vs eval switch for dropout-carrying forward passes.
enum class Mode { kTrain, kEval };

// Triple of ints for (t, h, w) strides / paddings / windows.
struct Int3 {
  int t = 1;
  int h = 1;
  int w = 1;
};

struct Int2 {
  int h = 1;
  int w = 1;
};

}  // namespace streamloc

#endif  // STREAMLOC_COMMON_HPP
