#pragma once

#include <string>
#include <utility>
#include <vector>

#include "boxcal/tensor.hpp"

namespace boxcal::nn {

/// Parameter checkpoint: "BXCK" magic, u32 version, u32 tensor count,
/// then per tensor u32 name length, name bytes, u32 rank, u32 dims, and
/// little-endian 32-bit floats. Values are stored single precision
/// regardless of the in-memory scalar type.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<float>>>& tensors);
std::vector<std::pair<std::string, Tensor<float>>> load_checkpoint(const std::string& path);

}  // namespace boxcal::nn
