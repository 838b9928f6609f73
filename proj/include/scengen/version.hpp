#pragma once

namespace scengen {

inline constexpr const char* kToolName = "scengen";
inline constexpr const char* kToolVersion = "1.0.0";

}  // namespace scengen
