#pragma once

namespace sgdm {

inline constexpr const char* kVersion = "sgdm 0.1.0";

}  // namespace sgdm
