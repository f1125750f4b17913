#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "dsmil/model.hpp"

namespace dsmil {

inline constexpr int kSnapshotVersion = 1;

struct SnapshotHeader {
  int version = kSnapshotVersion;
  std::string model = "dsmil";  // "dsmil" or a baseline kind
  ExtractorConfig extractor;
  double lambda = 0.5;
  std::size_t attention_dim = 0;
  std::uint64_t seed = 0;
};

/// Text snapshot: a header JSON object on the first line, then one line per
/// parameter {"name","shape","values"} with round-trip exact decimals.
std::string serialize_snapshot(const MilModel& model, std::uint64_t seed);
MilModel parse_snapshot(const std::string& text, SnapshotHeader* header = nullptr);

void save_snapshot(const MilModel& model, std::uint64_t seed, const std::filesystem::path& path);
MilModel load_snapshot(const std::filesystem::path& path, SnapshotHeader* header = nullptr);

}  // namespace dsmil
