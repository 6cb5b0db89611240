#pragma once

namespace hesskit {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace hesskit
