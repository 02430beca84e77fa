#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "prefcodec/ar_policy.hpp"
#include "prefcodec/nar_model.hpp"

namespace prefcodec {

// Model-kind tags stored in the checkpoint container.
inline constexpr const char* kKindPolicy = "ar_policy";
inline constexpr const char* kKindReward = "reward_model";
inline constexpr const char* kKindNar = "nar";

// Container: magic "SALM", format version, rng version, model-kind tag, config
// block of named fields, tensor directory (name, shape, offset, size), then
// the flat little-endian f64 payload.
std::vector<std::uint8_t> serialize_model(const ArModel& model);
std::vector<std::uint8_t> serialize_model(const NarModel& model);

void save_model(const std::filesystem::path& path, const ArModel& model);
void save_model(const std::filesystem::path& path, const NarModel& model);

// Loads a policy or reward model (the kind follows the stored reward-head flag).
ArModel load_ar_model(const std::filesystem::path& path);
NarModel load_nar_model(const std::filesystem::path& path);

// Model-kind tag of a checkpoint file without loading its payload.
std::string checkpoint_kind(const std::filesystem::path& path);

}  // namespace prefcodec
