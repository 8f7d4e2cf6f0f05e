#pragma once

#include <string>
#include <vector>

#include "weakseg/tensor.hpp"

namespace weakseg {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Checkpoint format: <base>.bin of little-endian f32 payloads back to back,
// plus <base>.json listing [{"name","shape","offset"}] with byte offsets into
// the payload, in storage order.
void save_checkpoint(const std::vector<NamedTensor>& tensors, const std::string& path_base);
std::vector<NamedTensor> load_checkpoint(const std::string& path_base);

}  // namespace weakseg
