#pragma once

#include <functional>

#include <gtest/gtest.h>

#include "gfml/error.hpp"

namespace gfml::testing {

// Runs f and returns the error code it threw; records a failure if it did not throw.
inline Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an exception";
  return Errc::Io;
}

}  // namespace gfml::testing
