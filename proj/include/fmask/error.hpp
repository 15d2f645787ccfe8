#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fmask {

enum class ErrorCode {
  DegenerateInput,
  DegenerateTriangle,
  MeshMismatch,
  SchemeMissingIndices,
  DimensionMismatch,
  ShapeMismatch,
  UnsupportedLoss,
  InvalidArgument,
  ConfigInvalid,
  EvenKernel,
  MissingSeed,
  NoMateInGallery,
  EmptyScores,
  EmptySet,
  EmptyTemplates,
  TooSmall,
  UnknownKey,
  TypeError,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::DegenerateTriangle: return "DegenerateTriangle";
    case ErrorCode::MeshMismatch: return "MeshMismatch";
    case ErrorCode::SchemeMissingIndices: return "SchemeMissingIndices";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::UnsupportedLoss: return "UnsupportedLoss";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::EvenKernel: return "EvenKernel";
    case ErrorCode::MissingSeed: return "MissingSeed";
    case ErrorCode::NoMateInGallery: return "NoMateInGallery";
    case ErrorCode::EmptyScores: return "EmptyScores";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::EmptyTemplates: return "EmptyTemplates";
    case ErrorCode::TooSmall: return "TooSmall";
    case ErrorCode::UnknownKey: return "UnknownKey";
    case ErrorCode::TypeError: return "TypeError";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Warnings (skipped triangles, empty regions, ...) go through a process-wide
// sink. The default writes to stderr.
using WarningSink = std::function<void(std::string_view)>;

namespace detail {
inline std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}
inline WarningSink& warning_sink() {
  static WarningSink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}
}  // namespace detail

inline WarningSink set_warning_sink(WarningSink sink) {
  std::lock_guard lock(detail::warning_mutex());
  auto previous = std::move(detail::warning_sink());
  detail::warning_sink() = std::move(sink);
  return previous;
}

inline void warn(std::string_view msg) {
  std::lock_guard lock(detail::warning_mutex());
  if (detail::warning_sink()) detail::warning_sink()(msg);
}

}  // namespace fmask
