#pragma once

namespace dwstrack {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace dwstrack
