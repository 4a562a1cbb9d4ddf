#pragma once

namespace pco {

inline constexpr const char* kToolVersion = "pco 0.1.0";

}  // namespace pco
