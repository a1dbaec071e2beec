#pragma once

namespace las {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace las
