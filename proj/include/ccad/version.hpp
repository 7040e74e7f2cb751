#pragma once

namespace ccad {

inline constexpr const char* kVersion = "ccad-0.1.0";

}  // namespace ccad
