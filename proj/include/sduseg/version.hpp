#pragma once

namespace sduseg {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace sduseg
