#include "prefcodec/metrics_log.hpp"

#include "prefcodec/error.hpp"

namespace prefcodec {

MetricsLog::MetricsLog(const std::filesystem::path& path) : start_(std::chrono::steady_clock::now()) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw IoError("cannot open metrics log " + path.string());
}

void MetricsLog::record(nlohmann::json entry) {
  entry["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  out_ << entry.dump() << '\n';
  out_.flush();
}

void MetricsLog::step(int step, double loss, double lr, const nlohmann::json& extra) {
  nlohmann::json e = {{"step", step}, {"loss", loss}, {"lr", lr}};
  for (auto it = extra.begin(); it != extra.end(); ++it) e[it.key()] = it.value();
  record(std::move(e));
}

}  // namespace prefcodec
