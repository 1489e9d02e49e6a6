#pragma once

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>

#include "robustbench/datasets.hpp"

#ifndef ROBUSTBENCH_TEST_DATA
#define ROBUSTBENCH_TEST_DATA ""
#endif

/// MNIST location from ROBUSTBENCH_DATA (runtime) or the configure-time path.
inline std::optional<std::filesystem::path> mnist_dir() {
  const char* env = std::getenv("ROBUSTBENCH_DATA");
  for (const char* cand : {env, static_cast<const char*>(ROBUSTBENCH_TEST_DATA)}) {
    if (cand == nullptr || std::string(cand).empty()) continue;
    try {
      return robustbench::find_mnist(cand);
    } catch (const robustbench::DataError&) {
    }
  }
  return std::nullopt;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("robustbench_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}
