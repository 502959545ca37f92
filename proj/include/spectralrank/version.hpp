#pragma once

namespace spectralrank {

inline constexpr const char* library_version = "0.1.0";

}  // namespace spectralrank
