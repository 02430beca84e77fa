#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "prefcodec/ar_policy.hpp"
#include "prefcodec/nar_model.hpp"
#include "prefcodec/scoring.hpp"
#include "prefcodec/world.hpp"

namespace prefcodec {

// Held-out item: the input text and golden stack of one utterance plus a
// prompt segment from a distinct utterance of the same speaker.
struct EvalItem {
  int speaker = 0;
  TokenSeq text;
  LayeredTokens golden;
  LayeredTokens prompt;
  std::uint64_t seed = 0;
};

// Items come from a reserved named stream of the world seed, so they never
// coincide with training or preference data: item j has speaker j mod S,
// target seed mix64(base, 2j) and prompt seed mix64(base, 2j + 1).
std::vector<EvalItem> build_eval_set(const World& world, int n, int prompt_len);

// ---- distribution gap -----------------------------------------------------------

struct KlGap {
  double mean = 0.0;  // per-position KL averaged over positions and items
  double se = 0.0;    // bootstrap standard error over items
  std::vector<double> per_item;
};

// Log-probabilities over the k_ar first-layer tokens for item `item` after the
// golden prefix of length `position`.
using ConditionalFn = std::function<std::vector<double>(std::size_t item, int position)>;

KlGap kl_gap(const World& world, std::span<const EvalItem> items, const ConditionalFn& model, std::uint64_t seed = 1);
// The policy's next-token distribution along the golden sequence, renormalized
// over the k_ar first-layer tokens.
KlGap kl_gap(const World& world, const ArModel& policy, std::span<const EvalItem> items, Control control = Control::kNone,
             std::uint64_t seed = 1, int workers = 1);

struct GapReport {
  double centroid_distance = 0.0;
  double se = 0.0;  // bootstrap standard error
  int skipped = 0;  // items whose synthetic response was empty
  // PCA projection of every pooled representation: golden points first, then synthetic.
  std::vector<std::array<double, 2>> coords;
  std::vector<int> labels;  // 0 golden, 1 synthetic
};

// Top-2 principal-component coordinates of the rows of a point matrix.
std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<double>>& points);

// Pooled representations of golden and synthetic responses under one scoring policy.
GapReport rep_gap(const ArModel& scorer, std::span<const EvalItem> items, std::span<const TokenSeq> synthetic,
                  std::uint64_t seed = 1, int workers = 1);

// Bootstrap standard error of the mean.
double bootstrap_se(std::span<const double> values, std::uint64_t seed, int resamples = 200);

// ---- generation -----------------------------------------------------------------

using Generator = std::function<TokenSeq(const EvalItem&, std::uint64_t seed)>;
Generator policy_generator(const ArModel& policy, Control control, double temperature);

// Per-item TER and SIM of generated first layers decoded through the NAR model.
// Item j uses seed mix64(seed, j), shared by every model evaluated with the same seed.
std::vector<Score> score_generation(const World& world, const NarModel& nar, std::span<const EvalItem> items,
                                    const Generator& generate, std::uint64_t seed, int workers = 1,
                                    std::vector<TokenSeq>* outputs = nullptr);

struct WinRate {
  double win = 0.0;  // percentages for the first argument
  double tie = 0.0;
  double lose = 0.0;
};
WinRate win_rate(std::span<const Score> a, std::span<const Score> b);

// ---- reconstruction experiment ------------------------------------------------------

struct ReconRow {
  std::string condition;  // groundtruth, golden-input, synthetic-input
  double ter = 0.0;
  double sim = 0.0;
};

std::vector<ReconRow> reconstruction_experiment(const World& world, const NarModel& nar, std::span<const EvalItem> items,
                                                std::span<const TokenSeq> synthetic, std::uint64_t seed,
                                                int workers = 1);

// ---- reports --------------------------------------------------------------------

struct ModelSummary {
  std::string name;
  double ter_mean = 0.0, ter_sd = 0.0, sim_mean = 0.0, sim_sd = 0.0;
  double kl_gap = 0.0, kl_se = 0.0, rep_gap = 0.0, rep_se = 0.0;
  int runs = 0;
};

struct WinRateRow {
  std::string model, baseline;
  WinRate rate;
};

struct ScatterSet {
  std::string model;
  GapReport gap;
};

struct RunReport {
  std::vector<ModelSummary> models;
  std::vector<ReconRow> reconstruction;
  std::vector<WinRateRow> winrates;
  std::vector<ScatterSet> scatter;
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json to_json(const RunReport& report);
RunReport run_report_from_json(const nlohmann::json& j);

// Writes metrics.json, tables.csv, scatter.csv and winrate.csv.
void emit_report(const RunReport& report, const std::filesystem::path& out_dir);

// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace prefcodec
