#pragma once

namespace milengine {

inline constexpr const char* kEngineVersion = "0.1.0";

}  // namespace milengine
