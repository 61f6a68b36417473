#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deskpro/tensor.hpp"

namespace deskpro {

// Single-file archive of named parameter tensors plus a JSON metadata
// record. Round-trips bit-exactly (save -> load -> save is byte identical).
struct Checkpoint {
  nlohmann::ordered_json metadata;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace deskpro
