#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "sense/retrieval.hpp"

namespace sense::support {

inline std::string read_golden(const std::string& name) {
  std::ifstream in(std::string(SENSE_GOLDEN_DIR) + "/" + name, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline BagOfWords make_bow(std::initializer_list<std::pair<const char*, double>> entries) {
  BagOfWords bow;
  std::size_t i = 0;
  for (const auto& [token, score] : entries) bow.entries.push_back({token, i++, score});
  return bow;
}

// Fixture A: the piano example with a two-token BoW.
inline BagOfWords piano_bow() { return make_bow({{"piano", 0.8121}, {"black", 0.7040}}); }

// Fixture B: a full 15-token BoW.
inline BagOfWords piano_bow15() {
  return make_bow({{"piano", 0.8121},   {"black", 0.7040},    {"room", 0.6512},    {"grand", 0.6230},
                   {"floor", 0.5987},   {"wooden", 0.5511},   {"keyboard", 0.5203}, {"music", 0.4978},
                   {"instrument", 0.4702}, {"living", 0.4420}, {"chair", 0.4105},   {"white", 0.3899},
                   {"lamp", 0.3561},    {"window", 0.3302},   {"light", 0.3017}});
}

// A fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sense_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace sense::support
