#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mdml/tensor.hpp"

namespace mdml {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat parameter archive: UTF-8 metadata block plus named f64 tensors,
/// little-endian throughout. Round-trips bit-exactly.
struct Checkpoint {
  std::string meta;
  std::vector<std::pair<std::string, Tensor>> entries;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mdml
