#pragma once
#include <filesystem>
#include <string>

#include "wrcfusion/tensor.hpp"

namespace wrc {

// Self-describing parameter snapshot:
//   magic "WRCF", version u32, parameter count u32, then per parameter:
//   name length u32 + UTF-8 name, rank u32, dims u64 each, f64 payload.
// All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params);

// Loads into an existing store; every stored parameter must exist with a
// matching shape (mismatches name both shapes in the error).
void load_checkpoint(const std::filesystem::path& path, ParamStore& params);

}  // namespace wrc
