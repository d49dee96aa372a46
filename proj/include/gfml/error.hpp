#pragma once

#include <stdexcept>
#include <string>

namespace gfml {

enum class Errc {
  BadMagic,
  TruncatedFile,
  CountMismatch,
  InvalidParam,
  Infeasible,
  ShapeMismatch,
  EmptyCoalition,
  InvalidFrequency,
  DimMismatch,
  DegenerateFrequencyRange,
  NonConvergence,
  NonMonotoneRound,
  ConfigInvalid,
  Io,
};

inline const char* to_string(Errc code) noexcept {
  switch (code) {
    case Errc::BadMagic: return "BadMagic";
    case Errc::TruncatedFile: return "TruncatedFile";
    case Errc::CountMismatch: return "CountMismatch";
    case Errc::InvalidParam: return "InvalidParam";
    case Errc::Infeasible: return "Infeasible";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::EmptyCoalition: return "EmptyCoalition";
    case Errc::InvalidFrequency: return "InvalidFrequency";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::DegenerateFrequencyRange: return "DegenerateFrequencyRange";
    case Errc::NonConvergence: return "NonConvergence";
    case Errc::NonMonotoneRound: return "NonMonotoneRound";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace gfml
