#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace prefcodec {

// Append-only JSON-lines training log; every entry gains a wall_time field
// (seconds since the log was opened).
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);

  void record(nlohmann::json entry);
  void step(int step, double loss, double lr, const nlohmann::json& extra = nlohmann::json::object());

 private:
  std::ofstream out_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace prefcodec
