#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prefcodec/params.hpp"
#include "prefcodec/transformer.hpp"
#include "prefcodec/world.hpp"

namespace prefcodec {

class MetricsLog;

// Quality control token prepended to the prompt (chain-of-hindsight labels).
enum class Control { kNone, kGood, kBad };

/// Decoder-only AR codec model over text symbols, first-layer tokens and
/// specials. Vocabulary layout: [0, v_text) text, [v_text, v_text + k_ar)
/// first-layer tokens, then BOS, SEP, EOS, GOOD, BAD.
struct ArConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int d_ffn = 256;
  int max_context = 64;
  double init_std = 0.02;
  std::uint64_t param_seed = 1;
  int v_text = 16;
  int k_ar = 32;
  int l_text = 12;
  int l_ar = 24;
  // Adds a scalar head on the final hidden state of the last response position.
  bool reward_head = false;

  static ArConfig for_world(const WorldConfig& world);

  int vocab_size() const { return v_text + k_ar + 5; }
  int text_token(int symbol) const { return symbol; }
  int ar_token(int token) const { return v_text + token; }
  int bos() const { return v_text + k_ar; }
  int sep() const { return v_text + k_ar + 1; }
  int eos() const { return v_text + k_ar + 2; }
  int good() const { return v_text + k_ar + 3; }
  int bad() const { return v_text + k_ar + 4; }
  CoreDims core_dims() const { return {d_model, n_layers, n_heads, d_ffn, true}; }
  void validate() const;
  bool operator==(const ArConfig&) const = default;
};

// Framed token sequence: [GOOD|BAD]? BOS text SEP y EOS. The logits at
// positions [first_target, first_target + num_targets) predict y and EOS;
// that span is the loss mask.
struct FramedSequence {
  std::vector<int> tokens;
  int first_target = 0;
  int num_targets = 0;

  int response_length() const { return num_targets - 1; }
  int eos_position() const { return first_target + num_targets; }
  bool in_loss_mask(int position) const {
    return position >= first_target && position < first_target + num_targets;
  }
};

FramedSequence frame_sequence(const ArConfig& config, std::span<const int> text, std::span<const int> y,
                              Control control);

class ArModel {
 public:
  explicit ArModel(const ArConfig& config);

  const ArConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<double> params() { return values_; }
  std::span<const double> params() const { return values_; }
  std::span<double> tensor(std::string_view name);
  std::span<const double> tensor(std::string_view name) const;

  // Converts a policy into a reward model: same backbone, zero-initialized head.
  ArModel with_reward_head() const;

  struct Index {
    std::size_t tok_emb = 0, pos_emb = 0, head_w = 0, head_b = 0, reward_w = 0, reward_b = 0;
    CoreIndex core;
  };
  const Index& index() const { return index_; }

 private:
  void build_layout();

  ArConfig config_;
  ParamLayout layout_;
  Index index_;
  std::vector<double> values_;
};

// Row-major [tokens.size()][vocab] logits. Throws ShapeError past max_context.
std::vector<double> forward_logits(const ArModel& model, std::span<const int> tokens);

// Final layer-normalized hidden states, [tokens.size()][d_model].
std::vector<double> final_hidden(const ArModel& model, std::span<const int> tokens);

double seq_logprob(const ArModel& model, std::span<const int> text, std::span<const int> y, Control control);

// Per-target log-probabilities over the loss mask of a framed sequence.
std::vector<double> target_logprobs(const ArModel& model, const FramedSequence& seq);

// Ancestral sampling restricted to first-layer tokens and EOS; stops at EOS
// or after l_ar tokens. temperature 0 is argmax with ties to the lowest index.
TokenSeq sample(const ArModel& model, std::span<const int> text, Control control, double temperature,
                std::uint64_t seed);

// Next-token distribution the sampler uses after the given response prefix,
// over [k_ar tokens..., EOS].
std::vector<double> next_token_distribution(const ArModel& model, std::span<const int> text,
                                            std::span<const int> prefix, Control control, double temperature);

// Mean of final hidden states over the first-layer token positions.
std::vector<double> pooled_rep(const ArModel& model, std::span<const int> text, std::span<const int> y);
std::vector<double> mean_rows(std::span<const double> rows, int width, int begin, int end);

// Scalar reward of a model carrying a reward head.
double reward_score(const ArModel& model, std::span<const int> text, std::span<const int> y);

// ---- differentiable objectives -------------------------------------------

// One framed sequence whose masked log-probabilities (and optionally reward)
// feed an objective.
struct Probe {
  FramedSequence seq;
  bool reward = false;
  bool logp = true;  // false leaves ProbeValues::logp empty (reward-only probes)
};

struct ProbeValues {
  std::vector<double> logp;  // one per loss-masked target
  double reward = 0.0;
};

struct ProbeAdjoint {
  std::vector<double> d_logp;
  double d_reward = 0.0;
};

// Computes the loss from probe values and writes d(loss)/d(value) adjoints.
using Objective = std::function<double(std::span<const ProbeValues>, std::span<ProbeAdjoint>)>;

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

LossGrad loss_and_grad(const ArModel& model, std::span<const Probe> probes, const Objective& objective,
                       int workers = 1);
std::vector<ProbeValues> evaluate_probes(const ArModel& model, std::span<const Probe> probes, int workers = 1);

// ---- supervised training -------------------------------------------------

struct SftExample {
  TokenSeq text;
  TokenSeq y;
  Control control = Control::kNone;
};

struct TrainOptions {
  int epochs = 3;
  // When positive, run exactly this many optimizer steps (cycling epochs).
  int steps = 0;
  double lr = 1e-3;
  int batch = 32;
  std::uint64_t seed = 1;
  int workers = 1;
  double grad_clip = 1.0;
  MetricsLog* log = nullptr;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> step_loss;
  int steps = 0;
};

// First layers of golden utterances as uncontrolled SFT examples.
std::vector<SftExample> sft_examples(std::span<const Utterance> corpus);

// Mean NLL per masked token over a batch.
Objective nll_objective();
std::vector<Probe> sft_probes(const ArConfig& config, std::span<const SftExample> batch);

TrainReport sft_train(ArModel& model, std::span<const SftExample> data, const TrainOptions& options);

// Index batches: epoch-wise permutations from (seed, epoch); the last partial
// batch of an epoch is kept. With steps > 0 the schedule is cut (or extended
// with further epochs) to exactly that many batches.
struct BatchSchedule {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<int> epoch;
};
BatchSchedule batch_schedule(std::size_t n, int batch, int epochs, int steps, std::uint64_t seed);

}  // namespace prefcodec
