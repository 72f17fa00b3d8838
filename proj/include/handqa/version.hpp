#pragma once

namespace handqa {

inline constexpr const char* kToolName = "handqa";
inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace handqa
