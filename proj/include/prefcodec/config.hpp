#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "prefcodec/align_methods.hpp"
#include "prefcodec/ar_policy.hpp"
#include "prefcodec/nar_model.hpp"
#include "prefcodec/self_improve.hpp"
#include "prefcodec/world.hpp"

namespace prefcodec {

/// Everything a run needs, with a default for every field. A seed left at 0
/// derives from the master `seed` and the field name on resolve().
struct ExperimentConfig {
  ExperimentConfig();

  std::uint64_t seed = 1;
  int workers = 1;
  std::filesystem::path out = "run";

  WorldConfig world;
  ArConfig ar;
  NarConfig nar;

  // Data sizes.
  int sft_n = 5000;
  int pref_n = 500;
  int eval_n = 1000;
  std::uint64_t data_seed = 0;  // SFT corpus and preference pool

  // SFT.
  int sft_epochs = 8;
  double sft_lr = 2e-3;
  int sft_batch = 32;
  std::uint64_t sft_seed = 0;

  // NAR training.
  int nar_epochs = 3;
  double nar_lr = 2e-3;
  int nar_batch = 32;
  std::uint64_t nar_seed = 0;

  AlignConfig align;

  int iterations = 3;
  double build_temperature = 1.0;
  int verify_m = 200;

  SnapshotOptions eval;

  // Fills every derived seed and world-dependent model field.
  void resolve();
  void validate() const;
};

// INI sections: [run] [world] [ar] [nar] [data] [sft] [nar_train] [align]
// [iterate] [eval]. Unknown sections or keys raise ConfigError.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text);
// Resolved INI with every field written out.
std::string config_to_ini(const ExperimentConfig& config);

TrainOptions sft_options(const ExperimentConfig& config);
NarTrainOptions nar_options(const ExperimentConfig& config);

}  // namespace prefcodec
