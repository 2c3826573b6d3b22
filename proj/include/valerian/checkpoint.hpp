#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "valerian/network.hpp"

namespace valerian {

inline constexpr std::uint32_t kModelFormatVersion = 1;

/// Training metadata stored alongside the parameters.
struct CheckpointMeta {
  std::string method;
  int epoch = 0;
  std::uint64_t seed = 0;

  bool operator==(const CheckpointMeta&) const = default;
};

/// Binary model file: extractor config and parameters, every head with its
/// class map and subject, the pretext head, optional normalization stats and
/// training metadata.
void save_model(const Model<float>& m, const std::filesystem::path& path, const CheckpointMeta& meta = {});
Model<float> load_model(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace valerian
