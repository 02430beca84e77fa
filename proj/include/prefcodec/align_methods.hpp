#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prefcodec/ar_policy.hpp"
#include "prefcodec/preference_data.hpp"

namespace prefcodec {

class MetricsLog;

enum class AlignMethod { kCoh, kDpo, kPpo, kBon, kContinueSft };

AlignMethod parse_align_method(const std::string& name);
std::string align_method_name(AlignMethod method);

struct AlignConfig {
  AlignMethod method = AlignMethod::kDpo;
  // Shared optimizer budget for coh, dpo and continue-sft.
  double lr = 1e-4;
  int batch = 32;
  int epochs = 1;
  int steps = 0;  // overrides epochs when positive
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  int workers = 1;
  double dpo_beta = 1.0;
  // Reward model.
  double rm_lr = 1e-4;
  int rm_epochs = 2;
  int rm_batch = 16;
  double rm_holdout = 0.1;
  // PPO.
  double ppo_kl_beta = 0.05;
  double ppo_clip = 0.2;
  double ppo_lr = 1e-5;
  int ppo_steps = 60;
  int ppo_batch = 32;
  int ppo_epochs = 4;
  double ppo_baseline_decay = 0.9;
  double kl_abort = 10.0;
  double temperature = 1.0;  // rollout / candidate sampling temperature
  // Best-of-N.
  int bon_n = 8;
  MetricsLog* log = nullptr;

  void validate() const;
};

// ---- chain of hindsight ---------------------------------------------------

// Mean over triples of NLL(y_g | x, GOOD) + NLL(y_s | x, BAD), each a
// sequence-level sum over the loss mask.
Objective coh_objective();
std::vector<Probe> coh_probes(const ArConfig& config, std::span<const PreferenceTriple> batch);
TrainReport coh_train(ArModel& policy, const PreferenceDataset& data, const AlignConfig& config);

// ---- direct preference optimization ----------------------------------------

// -log sigmoid(z) computed as softplus(-z) without overflow.
double neg_log_sigmoid(double z);

// Reference log-likelihoods of each triple's golden and synthetic response.
struct ReferenceScores {
  std::vector<double> golden;
  std::vector<double> synthetic;
};
ReferenceScores reference_scores(const ArModel& reference, std::span<const PreferenceTriple> batch, int workers = 1);

// Policy probes: golden then synthetic per triple, no control token.
std::vector<Probe> pair_probes(const ArConfig& config, std::span<const PreferenceTriple> batch, bool reward);

// -mean log sigmoid(beta ((pi_g - ref_g) - (pi_s - ref_s))); also reports the
// mean implicit-reward margin through `margin` when non-null.
Objective dpo_objective(const ReferenceScores& reference, double beta, double* margin = nullptr);
double dpo_loss(const ArModel& policy, const ArModel& reference, std::span<const PreferenceTriple> batch, double beta);

struct DpoReport {
  std::vector<double> step_loss;
  std::vector<double> step_margin;
  int steps = 0;
};
DpoReport dpo_train(ArModel& policy, const PreferenceDataset& data, const AlignConfig& config);

// Mean (pi_g - ref_g) - (pi_s - ref_s) over triples.
double dpo_margin(const ArModel& policy, const ArModel& reference, std::span<const PreferenceTriple> triples,
                  int workers = 1);

// ---- reward model ----------------------------------------------------------

// -mean log sigmoid(r(x, y_g) - r(x, y_s)).
Objective rm_objective();
double rm_loss(const ArModel& reward_model, std::span<const PreferenceTriple> batch);
double pairwise_accuracy(const ArModel& reward_model, std::span<const PreferenceTriple> triples, int workers = 1);

struct RmReport {
  std::vector<double> step_loss;
  double heldout_accuracy = 0.0;
  int heldout = 0;
  int steps = 0;
};
// Backbone copied from the policy, zero-initialized head. The last
// rm_holdout fraction of the triples is held out for the accuracy report.
ArModel rm_train(const ArModel& policy, const PreferenceDataset& data, const AlignConfig& config,
                 RmReport* report = nullptr);

// ---- PPO -----------------------------------------------------------------

struct PpoPrompt {
  TokenSeq text;
};

struct PpoReport {
  std::vector<double> mean_reward;  // per step, reward-model score of rollouts
  std::vector<double> mean_kl;      // per step, sequence log-ratio to the reference
  std::vector<double> step_loss;
  int steps = 0;
};

// Whitened advantages: (a - mean) / (std + 1e-8), population std.
std::vector<double> whiten(std::span<const double> values);

PpoReport ppo_train(ArModel& policy, const ArModel& reward_model, std::span<const PpoPrompt> prompts,
                    const AlignConfig& config);

// ---- best of N --------------------------------------------------------------

struct BonResult {
  TokenSeq y;
  int index = 0;
  std::vector<double> rewards;
};

// Candidate j uses seed mix64(seed, j); the highest reward wins, ties to the
// lowest index.
BonResult bon_select(const ArModel& policy, const ArModel& reward_model, std::span<const int> text, int n,
                     std::uint64_t seed, double temperature = 1.0);

// ---- continue SFT control -----------------------------------------------------

std::vector<SftExample> golden_examples(const PreferenceDataset& data);
// SFT on the golden responses with the DPO step budget (lr, batch, epochs/steps, seed).
TrainReport continue_sft(ArModel& policy, const PreferenceDataset& data, const AlignConfig& config);

}  // namespace prefcodec
