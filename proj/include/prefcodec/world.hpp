#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace prefcodec {

using TokenSeq = std::vector<int>;

// Token stack: layers[0] is the autoregressive (first) layer, layers[q] for
// q >= 1 are the layers the NAR model produces. All layers share one length.
struct LayeredTokens {
  std::vector<TokenSeq> layers;

  int num_layers() const { return static_cast<int>(layers.size()); }
  int length() const { return layers.empty() ? 0 : static_cast<int>(layers.front().size()); }
  bool operator==(const LayeredTokens&) const = default;
};

struct WorldConfig {
  int v_text = 16;         // text alphabet size
  int l_text = 12;         // text length
  int k_ar = 32;           // first-layer vocabulary
  int k_nar = 32;          // vocabulary of every later layer
  int num_layers = 3;      // total token layers (Q)
  int expansion = 2;       // first-layer tokens per text symbol (R)
  int speakers = 8;
  double tau_oracle = 0.5;
  double eps_nar = 0.05;
  int d_emb = 16;
  // Weight of the speaker-specific component of the oracle logits; the rest is
  // shared by all speakers. 1 makes every speaker an independent oracle.
  double speaker_mix = 0.3;
  // Standard deviation of the Gaussian oracle logits before division by tau_oracle.
  double logit_std = 4.5;
  // Distinct later-layer tokens each speaker's expansion table may emit, per layer.
  int nar_palette = 8;
  std::uint64_t world_seed = 1;

  int ar_length() const { return expansion * l_text; }
  int layer_vocab(int layer) const { return layer == 0 ? k_ar : k_nar; }
  // Throws ConfigError naming the first invalid field.
  void validate() const;
  bool operator==(const WorldConfig&) const = default;
};

struct Utterance {
  int speaker = 0;
  TokenSeq text;
  LayeredTokens golden;
  std::uint64_t sample_seed = 0;
};

/// Seeded ground-truth generator. The first layer follows a first-order
/// Markov oracle conditioned on (speaker, text symbol); later layers are
/// per-speaker lookup tables of the first layer with uniform noise.
/// Immutable after construction and safe to share across threads.
class World {
 public:
  static constexpr int kSpeakerRefSamples = 512;

  explicit World(const WorldConfig& config);

  const WorldConfig& config() const { return config_; }
  int start_symbol() const { return config_.k_ar; }

  // Rows over k_ar next tokens; prev may be start_symbol().
  std::span<const double> logits(int speaker, int symbol, int prev) const;
  std::span<const double> probs(int speaker, int symbol, int prev) const;
  std::span<const double> log_probs(int speaker, int symbol, int prev) const;

  int nar_table(int layer, int speaker, int token) const;
  std::span<const double> token_sig(int layer, int token) const;
  std::span<const double> speaker_ref(int speaker) const;

  Utterance sample_utterance(int speaker, std::uint64_t sample_seed) const;
  // Sum of log p*(y_i | text, y_{i-1}, speaker); -inf if any factor underflowed to 0.
  double golden_logprob(int speaker, std::span<const int> text, std::span<const int> y) const;
  LayeredTokens nar_expand(int speaker, std::span<const int> layer1, std::uint64_t noise_seed) const;
  // MAP text symbol per block of `expansion` tokens; ties go to the lower symbol.
  TokenSeq transcribe(int speaker, std::span<const int> layer1) const;
  std::vector<double> speaker_embed(const LayeredTokens& tokens) const;

  // Exact per-position entropy of p* averaged over symbols, previous tokens and speakers.
  double mean_oracle_entropy() const;

  void save(const std::filesystem::path& path) const;
  static World load(const std::filesystem::path& path);
  std::vector<std::uint8_t> serialize() const;
  // Content hash of the serialized form.
  std::string hash() const;

  std::span<const double> raw_logits() const { return logits_; }

 private:
  World() = default;
  void derive_tables();
  std::size_t row_offset(int speaker, int symbol, int prev) const;
  void check_layer1(std::span<const int> layer1) const;

  WorldConfig config_;
  std::vector<double> logits_;      // [S][V][K+1][K]
  std::vector<double> probs_;       // softmax rows of logits_
  std::vector<double> log_probs_;   // log of probs_
  std::vector<int> nar_tables_;     // [Q-1][S][K_ar]
  std::vector<std::vector<double>> token_sig_;  // per layer: [vocab][d_emb]
  std::vector<double> speaker_ref_;  // [S][d_emb]
};

// Golden utterances: item i has speaker i mod S and sample seed mix64(seed, i).
std::vector<Utterance> sample_corpus(const World& world, int n, std::uint64_t seed);

}  // namespace prefcodec
