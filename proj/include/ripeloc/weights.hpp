#pragma once
// ===== RLW1 weight container =====
//
// Little-endian binary layout:
//   magic "RLW1" (4 bytes), version u32 (= 1), tensor count u32;
//   per tensor: name length u16, UTF-8 name, rank u8, extents u32 each,
//   payload f32 row-major.
// Runtime tensors are f64; save narrows to f32, load widens back. Because
// f32 -> f64 -> f32 is lossless, load-then-save reproduces a file byte for
// byte (bit-exact round-trip).

#include <string>
#include <utility>
#include <vector>

#include "ripeloc/tensor.hpp"

namespace ripeloc {

void save_weights(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_weights(
    const std::string& path);

}  // namespace ripeloc
