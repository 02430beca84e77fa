#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "prefcodec/params.hpp"
#include "prefcodec/transformer.hpp"
#include "prefcodec/world.hpp"

namespace prefcodec {

class MetricsLog;

/// Bidirectional masked-prediction model for layers 1..Q-1 given the first
/// layer and a prompt segment of the same speaker. Each position embeds the
/// sum of its per-layer token embeddings (row `layer_vocab` is the mask
/// token), a position embedding, and an embedding of the layer being
/// predicted.
struct NarConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int d_ffn = 256;
  int prompt_len = 8;
  int decode_steps = 4;
  double init_std = 0.02;
  std::uint64_t param_seed = 1;
  int num_layers = 3;
  int k_ar = 32;
  int k_nar = 32;
  int max_length = 24;  // longest first layer

  static NarConfig for_world(const WorldConfig& world);

  int layer_vocab(int layer) const { return layer == 0 ? k_ar : k_nar; }
  int mask_token(int layer) const { return layer_vocab(layer); }
  int max_rows() const { return prompt_len + max_length; }
  CoreDims core_dims() const { return {d_model, n_layers, n_heads, d_ffn, false}; }
  void validate() const;
  bool operator==(const NarConfig&) const = default;
};

// Prompt from a distinct utterance of the same speaker, the first layer to
// condition on, and the full golden stack as target.
struct NarItem {
  LayeredTokens prompt;
  LayeredTokens target;
};

// One realized masking of an item: the token grid fed to the model
// (prompt rows then body rows, every layer, mask ids where hidden) and the
// masked body positions of the predicted layer.
struct NarExample {
  std::vector<std::vector<int>> grid;  // [layer][row]
  int target_layer = 1;
  std::vector<int> positions;  // body positions (0-based within the body)
  std::vector<int> labels;
};

class NarModel {
 public:
  explicit NarModel(const NarConfig& config);

  const NarConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<double> params() { return values_; }
  std::span<const double> params() const { return values_; }
  std::span<double> tensor(std::string_view name);

  struct Index {
    std::vector<std::size_t> layer_emb;  // per layer, [vocab + 1][d]
    std::size_t pos_emb = 0, target_emb = 0;
    std::vector<std::size_t> head_w, head_b;  // per predicted layer 1..Q-1 (index q-1)
    CoreIndex core;
  };
  const Index& index() const { return index_; }

 private:
  void build_layout();

  NarConfig config_;
  ParamLayout layout_;
  Index index_;
  std::vector<double> values_;
};

// Builds the input grid for a prompt and a body whose layers [0, known) are
// given and every later layer is masked.
std::vector<std::vector<int>> nar_grid(const NarConfig& config, const LayeredTokens& prompt,
                                       const LayeredTokens& body, int known);

// Log-probabilities at the example's masked positions, one row of k_nar per position.
std::vector<double> nar_position_logprobs(const NarModel& model, const NarExample& ex);

struct NarLossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

// Mean NLL over all masked positions of the batch, with its gradient.
NarLossGrad nar_loss_and_grad(const NarModel& model, std::span<const NarExample> batch, int workers = 1);

// Draws the training masking for an item: target layer uniform over 1..Q-1,
// ceil(u L) of its L body positions masked for u ~ U(0, 1) (re-drawn if it
// masks nothing), later layers fully masked.
NarExample nar_mask_item(const NarConfig& config, const NarItem& item, std::uint64_t seed);

struct NarTrainOptions {
  int epochs = 3;
  int steps = 0;
  double lr = 1e-3;
  int batch = 32;
  std::uint64_t seed = 1;
  int workers = 1;
  double grad_clip = 1.0;
  MetricsLog* log = nullptr;
};

struct NarTrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> step_loss;
  int steps = 0;
};

NarTrainReport nar_train(NarModel& model, std::span<const NarItem> data, const NarTrainOptions& options);

// First prompt_len positions of every layer of an utterance.
LayeredTokens prompt_segment(const Utterance& utterance, int prompt_len);

// Training items from golden utterances: each utterance's prompt is the first
// prompt_len positions of another utterance of the same speaker.
std::vector<NarItem> nar_items_from_utterances(const NarConfig& config, std::span<const Utterance> utterances);

struct NarDecodeTrace {
  // Per predicted layer and step, the body positions committed at that step.
  std::vector<std::vector<std::vector<int>>> committed;
};

// Fills layers 1..Q-1 in order. Each layer starts fully masked; after step k
// of `steps`, L - floor(L cos(pi/2 k/steps)) positions are committed, the most
// confident first (probability of the chosen token, ties to the lower
// position). temperature 0 chooses the argmax (ties to the lower token);
// otherwise tokens are sampled from the tempered softmax with the seed.
LayeredTokens nar_decode(const NarModel& model, const LayeredTokens& prompt, std::span<const int> layer1,
                         int steps, std::uint64_t seed, double temperature = 0.0, NarDecodeTrace* trace = nullptr);

struct Reconstruction {
  double ter = 0.0;
  double sim = 0.0;
  LayeredTokens stack;
};

// Decodes later layers for a first layer and scores the stack: TER of the
// first layer against the text, SIM of the whole stack against the speaker.
Reconstruction reconstruct(const World& world, const NarModel& model, const LayeredTokens& prompt,
                           std::span<const int> layer1, std::span<const int> text, int speaker, std::uint64_t seed);

}  // namespace prefcodec
