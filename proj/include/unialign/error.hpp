#pragma once

#include <stdexcept>
#include <string>

namespace unialign {

// Error categories surfaced through the C API as status codes.
enum class ErrorCode {
  kInvalidArgument = 1,
  kConfig,
  kDimension,
  kNumeric,
  kDegenerate,
  kContract,
  kIo,
  kVocabulary,
  kDiverged,
  kSize,
  kEmpty,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace unialign
