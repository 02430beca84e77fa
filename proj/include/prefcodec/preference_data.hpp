#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "prefcodec/ar_policy.hpp"
#include "prefcodec/nar_model.hpp"
#include "prefcodec/world.hpp"

namespace prefcodec {

// One (text, golden, synthetic) preference triple. The golden first layer
// replays from (world, speaker, seed).
struct PreferenceTriple {
  int iter = 0;
  int speaker = 0;
  std::uint64_t seed = 0;
  TokenSeq text;
  TokenSeq y_g;
  TokenSeq y_s;
  bool operator==(const PreferenceTriple&) const = default;
};

struct PreferenceHeader {
  std::string world_hash;
  std::string policy_hash;
  std::uint64_t base_seed = 0;
  std::uint64_t first_index = 0;
  int iteration = 0;
  int requested = 0;   // fresh triples asked for
  int degenerate = 0;  // skipped after an empty synthetic sample and one retry
  std::vector<int> iterations;  // iteration tags present, in order
  bool operator==(const PreferenceHeader&) const = default;
};

struct PreferenceDataset {
  PreferenceHeader header;
  std::vector<PreferenceTriple> triples;
  std::size_t size() const { return triples.size(); }
  bool operator==(const PreferenceDataset&) const = default;
};

struct PrefBuildOptions {
  double temperature = 1.0;
  // Global index of the first item; lets successive iterations draw disjoint
  // slices of the same seeded pool.
  std::uint64_t first_index = 0;
  // Control token for synthetic sampling; GOOD for chain-of-hindsight policies.
  Control control = Control::kNone;
  int workers = 1;
};

// Item i has global index g = first_index + i: seed mix64(base_seed, g),
// speaker g mod S, golden first layer from the world, synthetic first layer
// sampled from the policy (with options.control) using a sub-seed that also
// depends on the iteration.
PreferenceDataset build_pref_dataset(const World& world, const ArModel& policy, int n, int iteration,
                                     std::uint64_t base_seed, const PrefBuildOptions& options = {});

// Iteration 0 keeps the new dataset alone; later iterations concatenate the
// most recent previous iteration's triples with the new ones.
PreferenceDataset merge_iterations(const std::optional<PreferenceDataset>& previous, const PreferenceDataset& fresh);

// JSON lines: one header object, then one object per triple.
std::string dataset_to_jsonl(const PreferenceDataset& dataset);
PreferenceDataset dataset_from_jsonl(const std::string& text);
void save_dataset(const std::filesystem::path& path, const PreferenceDataset& dataset);
PreferenceDataset load_dataset(const std::filesystem::path& path);

// Recomputes every golden first layer from the world and checks it.
void check_replay(const World& world, const PreferenceDataset& dataset);

struct VerifyResult {
  double golden_win = 0.0;  // percentages
  double tie = 0.0;
  double golden_lose = 0.0;
  int judged = 0;
};

// Prompt for a triple: another utterance of the same speaker, derived from the
// triple's seed.
LayeredTokens triple_prompt(const World& world, const PreferenceTriple& triple, int prompt_len);

// Reconstructs golden and synthetic first layers of m sampled triples through
// the NAR model and judges golden against synthetic.
VerifyResult oracle_verify(const World& world, const NarModel& nar, const PreferenceDataset& dataset, int m,
                           std::uint64_t seed, int workers = 1);

}  // namespace prefcodec
