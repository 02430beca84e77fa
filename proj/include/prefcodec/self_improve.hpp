#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "prefcodec/align_methods.hpp"
#include "prefcodec/eval.hpp"
#include "prefcodec/preference_data.hpp"

namespace prefcodec {

// ---- snapshot evaluation -------------------------------------------------------

struct SnapshotOptions {
  int runs = 10;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  int workers = 1;
};

struct SnapshotSummary {
  double ter_mean = 0.0, ter_sd = 0.0;  // over per-run means
  double sim_mean = 0.0, sim_sd = 0.0;
  double kl_gap = 0.0, kl_se = 0.0;  // teacher-forced, computed once
  double rep_gap = 0.0, rep_se = 0.0;  // averaged over runs
  int runs = 0;
  std::vector<std::vector<Score>> item_scores;  // [run][item]
  GapReport scatter;  // run 0
  bool operator==(const SnapshotSummary& o) const;
};

// Run r generates item j with seed mix64(mix64(seed, r), j), so models
// evaluated with the same options share their random numbers.
SnapshotSummary snapshot_eval(const World& world, const NarModel& nar, std::span<const EvalItem> items,
                              const Generator& generate, const ArModel& scorer, Control control,
                              const SnapshotOptions& options);
// Policy sampled without a control token.
SnapshotSummary snapshot_eval(const World& world, const NarModel& nar, std::span<const EvalItem> items,
                              const ArModel& policy, const SnapshotOptions& options);

// Oracle-judge rates of `a` against `b` over every paired (run, item).
WinRate snapshot_win_rate(const SnapshotSummary& a, const SnapshotSummary& b);
ModelSummary model_summary(const std::string& name, const SnapshotSummary& s);

nlohmann::json to_json(const SnapshotSummary& s);
SnapshotSummary snapshot_from_json(const nlohmann::json& j);

// ---- iteration driver -----------------------------------------------------------

struct IterationPlan {
  int iterations = 3;  // T
  int n = 500;         // fresh triples per iteration
  AlignConfig align;
  std::filesystem::path world_path;
  std::filesystem::path policy_path;  // theta_0
  std::filesystem::path nar_path;     // needed for evaluation
  std::filesystem::path out_dir;
  std::uint64_t base_seed = 1;  // preference pool seed (the SFT corpus seed)
  PrefBuildOptions build;
  bool evaluate = true;
  int eval_n = 1000;
  int prompt_len = 8;
  SnapshotOptions snapshot;

  void validate() const;
};

struct IterationRecord {
  int iteration = 0;
  std::string status;  // "ok" or "failed"
  std::string method;
  std::string dataset_hash;
  std::string pre_hash, post_hash;  // policy checkpoint file hashes
  std::string reward_hash;          // ppo / bon only
  int dataset_size = 0;
  nlohmann::json summary = nlohmann::json::object();
  std::string error;
  bool operator==(const IterationRecord&) const = default;
};

nlohmann::json to_json(const IterationRecord& r);
IterationRecord iteration_record_from_json(const nlohmann::json& j);
std::vector<IterationRecord> read_ledger(const std::filesystem::path& path);

// Seed of the align run in iteration t.
std::uint64_t iteration_seed(std::uint64_t align_seed, int t);

// Runs (or resumes) the loop. Iteration t builds N fresh triples from pool
// items [tN, (t+1)N) with the current policy, merges them with the previous
// iteration's data, aligns, evaluates, and appends a record to ledger.jsonl.
// Completed iterations whose files still match their recorded hashes are
// skipped. A failing stage appends a failed record and rethrows.
std::vector<IterationRecord> run_iterations(const IterationPlan& plan);

// Baseline snapshot of theta_0, cached under out_dir/baseline.json.
SnapshotSummary baseline_snapshot(const IterationPlan& plan);

}  // namespace prefcodec
