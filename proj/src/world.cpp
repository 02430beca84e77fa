#include "prefcodec/world.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "prefcodec/binio.hpp"
#include "prefcodec/error.hpp"
#include "prefcodec/rng.hpp"

namespace prefcodec {

namespace {

constexpr std::uint32_t kWorldFormatVersion = 1;

void require(bool ok, const char* field, const char* rule) {
  if (!ok) throw ConfigError(std::string("world config: ") + field + " " + rule);
}

void normalize(std::span<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
}

}  // namespace

void WorldConfig::validate() const {
  require(v_text >= 2, "v_text", "must be >= 2");
  require(l_text >= 1, "l_text", "must be >= 1");
  require(k_ar >= 2, "k_ar", "must be >= 2");
  require(k_nar >= 2, "k_nar", "must be >= 2");
  require(num_layers >= 2, "num_layers", "must be >= 2");
  require(expansion >= 2, "expansion", "must be >= 2");
  require(speakers >= 2, "speakers", "must be >= 2");
  require(d_emb >= 2, "d_emb", "must be >= 2");
  require(tau_oracle > 0.0 && std::isfinite(tau_oracle), "tau_oracle", "must be > 0");
  require(eps_nar >= 0.0 && eps_nar < 1.0, "eps_nar", "must lie in [0, 1)");
  require(speaker_mix >= 0.0 && speaker_mix <= 1.0, "speaker_mix", "must lie in [0, 1]");
  require(logit_std > 0.0 && std::isfinite(logit_std), "logit_std", "must be > 0");
  require(nar_palette >= 1 && nar_palette <= k_nar, "nar_palette", "must lie in [1, k_nar]");
}

World::World(const WorldConfig& config) : config_(config) {
  config_.validate();
  const auto& c = config_;
  const std::size_t row = static_cast<std::size_t>(c.k_ar);
  const std::size_t per_speaker = static_cast<std::size_t>(c.v_text) * (c.k_ar + 1) * row;

  // Logits mix a table shared by all speakers with a per-speaker table; both
  // are standard normal so the mixture keeps unit variance before tempering.
  Rng shared_rng = Rng::named(c.world_seed, "oracle_logits/shared");
  std::vector<double> shared(per_speaker);
  for (double& x : shared) x = shared_rng.normal();
  const double w_spk = c.speaker_mix;
  const double w_shared = std::sqrt(1.0 - w_spk * w_spk);
  logits_.resize(per_speaker * c.speakers);
  for (int s = 0; s < c.speakers; ++s) {
    Rng rng = Rng::named(c.world_seed, "oracle_logits/speaker").split(static_cast<std::uint64_t>(s));
    for (std::size_t i = 0; i < per_speaker; ++i) {
      logits_[s * per_speaker + i] = c.logit_std * (w_shared * shared[i] + w_spk * rng.normal()) / c.tau_oracle;
    }
  }

  // Each (layer, speaker) table draws its outputs from a speaker palette: a
  // random subset of nar_palette tokens.
  Rng table_rng = Rng::named(c.world_seed, "nar_tables");
  nar_tables_.resize(static_cast<std::size_t>(c.num_layers - 1) * c.speakers * c.k_ar);
  for (int q = 1; q < c.num_layers; ++q) {
    for (int s = 0; s < c.speakers; ++s) {
      std::vector<int> pool(c.k_nar);
      for (int i = 0; i < c.k_nar; ++i) pool[i] = i;
      for (int i = 0; i < c.nar_palette; ++i) {
        const auto j = i + static_cast<int>(table_rng.below(static_cast<std::uint64_t>(c.k_nar - i)));
        std::swap(pool[i], pool[j]);
      }
      for (int k = 0; k < c.k_ar; ++k) {
        nar_tables_[(static_cast<std::size_t>(q - 1) * c.speakers + s) * c.k_ar + k] =
            pool[table_rng.below(static_cast<std::uint64_t>(c.nar_palette))];
      }
    }
  }

  Rng sig_rng = Rng::named(c.world_seed, "token_sig");
  token_sig_.resize(c.num_layers);
  for (int q = 0; q < c.num_layers; ++q) {
    const int vocab = c.layer_vocab(q);
    token_sig_[q].resize(static_cast<std::size_t>(vocab) * c.d_emb);
    for (int k = 0; k < vocab; ++k) {
      std::span<double> v(token_sig_[q].data() + static_cast<std::size_t>(k) * c.d_emb, c.d_emb);
      for (double& x : v) x = sig_rng.normal();
      normalize(v);
    }
  }

  derive_tables();

  const std::uint64_t ref_base = Rng::named(c.world_seed, "speaker_ref").key();
  speaker_ref_.assign(static_cast<std::size_t>(c.speakers) * c.d_emb, 0.0);
  for (int s = 0; s < c.speakers; ++s) {
    std::span<double> ref(speaker_ref_.data() + static_cast<std::size_t>(s) * c.d_emb, c.d_emb);
    for (int m = 0; m < kSpeakerRefSamples; ++m) {
      const auto u = sample_utterance(s, mix64(mix64(ref_base, static_cast<std::uint64_t>(s)), m));
      const auto e = speaker_embed(u.golden);
      for (int d = 0; d < c.d_emb; ++d) ref[d] += e[d];
    }
    normalize(ref);
  }
}

void World::derive_tables() {
  const int k = config_.k_ar;
  probs_.resize(logits_.size());
  log_probs_.resize(logits_.size());
  for (std::size_t off = 0; off < logits_.size(); off += k) {
    const double* l = logits_.data() + off;
    const double m = *std::max_element(l, l + k);
    double z = 0.0;
    for (int i = 0; i < k; ++i) z += std::exp(l[i] - m);
    for (int i = 0; i < k; ++i) {
      probs_[off + i] = std::exp(l[i] - m) / z;
      log_probs_[off + i] = std::log(probs_[off + i]);
    }
  }
}

std::size_t World::row_offset(int speaker, int symbol, int prev) const {
  const auto& c = config_;
  return ((static_cast<std::size_t>(speaker) * c.v_text + symbol) * (c.k_ar + 1) + prev) * c.k_ar;
}

std::span<const double> World::logits(int speaker, int symbol, int prev) const {
  return {logits_.data() + row_offset(speaker, symbol, prev), static_cast<std::size_t>(config_.k_ar)};
}
std::span<const double> World::probs(int speaker, int symbol, int prev) const {
  return {probs_.data() + row_offset(speaker, symbol, prev), static_cast<std::size_t>(config_.k_ar)};
}
std::span<const double> World::log_probs(int speaker, int symbol, int prev) const {
  return {log_probs_.data() + row_offset(speaker, symbol, prev), static_cast<std::size_t>(config_.k_ar)};
}

int World::nar_table(int layer, int speaker, int token) const {
  return nar_tables_[(static_cast<std::size_t>(layer - 1) * config_.speakers + speaker) * config_.k_ar + token];
}

std::span<const double> World::token_sig(int layer, int token) const {
  return {token_sig_[layer].data() + static_cast<std::size_t>(token) * config_.d_emb,
          static_cast<std::size_t>(config_.d_emb)};
}

std::span<const double> World::speaker_ref(int speaker) const {
  return {speaker_ref_.data() + static_cast<std::size_t>(speaker) * config_.d_emb,
          static_cast<std::size_t>(config_.d_emb)};
}

Utterance World::sample_utterance(int speaker, std::uint64_t sample_seed) const {
  const auto& c = config_;
  if (speaker < 0 || speaker >= c.speakers) throw ShapeError("speaker id out of range");
  Rng rng(sample_seed);
  Utterance u;
  u.speaker = speaker;
  u.sample_seed = sample_seed;
  u.text.resize(c.l_text);
  for (int& x : u.text) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.v_text)));
  TokenSeq y(c.ar_length());
  int prev = start_symbol();
  for (int i = 0; i < c.ar_length(); ++i) {
    y[i] = rng.categorical(probs(speaker, u.text[i / c.expansion], prev));
    prev = y[i];
  }
  u.golden = nar_expand(speaker, y, mix64(sample_seed, fnv1a64("nar_noise")));
  return u;
}

void World::check_layer1(std::span<const int> layer1) const {
  for (int t : layer1) {
    if (t < 0 || t >= config_.k_ar) throw ShapeError("first-layer token out of vocabulary");
  }
}

double World::golden_logprob(int speaker, std::span<const int> text, std::span<const int> y) const {
  const auto& c = config_;
  if (speaker < 0 || speaker >= c.speakers) throw ShapeError("speaker id out of range");
  if (static_cast<int>(text.size()) != c.l_text) throw ShapeError("text length mismatch");
  if (static_cast<int>(y.size()) != c.ar_length()) throw ShapeError("first-layer length mismatch");
  for (int x : text) {
    if (x < 0 || x >= c.v_text) throw ShapeError("text symbol out of vocabulary");
  }
  check_layer1(y);
  double total = 0.0;
  int prev = start_symbol();
  for (int i = 0; i < c.ar_length(); ++i) {
    total += log_probs(speaker, text[i / c.expansion], prev)[y[i]];
    prev = y[i];
  }
  return total;
}

LayeredTokens World::nar_expand(int speaker, std::span<const int> layer1, std::uint64_t noise_seed) const {
  const auto& c = config_;
  check_layer1(layer1);
  LayeredTokens out;
  out.layers.emplace_back(layer1.begin(), layer1.end());
  for (int q = 1; q < c.num_layers; ++q) {
    Rng rng = Rng(noise_seed).split(static_cast<std::uint64_t>(q));
    TokenSeq layer(layer1.size());
    for (std::size_t i = 0; i < layer1.size(); ++i) {
      const double u = rng.uniform();
      const int noise = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.k_nar)));
      layer[i] = u < c.eps_nar ? noise : nar_table(q, speaker, layer1[i]);
    }
    out.layers.push_back(std::move(layer));
  }
  return out;
}

TokenSeq World::transcribe(int speaker, std::span<const int> layer1) const {
  const auto& c = config_;
  if (layer1.size() % c.expansion != 0) throw ShapeError("first-layer length not divisible by expansion");
  check_layer1(layer1);
  TokenSeq text(layer1.size() / c.expansion);
  for (std::size_t b = 0; b < text.size(); ++b) {
    int best = 0;
    double best_ll = -std::numeric_limits<double>::infinity();
    for (int sym = 0; sym < c.v_text; ++sym) {
      double ll = 0.0;
      for (int r = 0; r < c.expansion; ++r) {
        const std::size_t i = b * c.expansion + r;
        const int prev = i == 0 ? start_symbol() : layer1[i - 1];
        ll += log_probs(speaker, sym, prev)[layer1[i]];
      }
      if (ll > best_ll || (sym == 0 && ll == best_ll)) {
        best_ll = ll;
        best = sym;
      }
    }
    text[b] = best;
  }
  return text;
}

std::vector<double> World::speaker_embed(const LayeredTokens& tokens) const {
  const auto& c = config_;
  if (tokens.layers.empty() || tokens.length() == 0) throw ShapeError("speaker_embed on empty tokens");
  std::vector<double> e(c.d_emb, 0.0);
  for (int q = 0; q < tokens.num_layers(); ++q) {
    for (int t : tokens.layers[q]) {
      if (t < 0 || t >= c.layer_vocab(q)) throw ShapeError("token out of layer vocabulary");
      const auto sig = token_sig(q, t);
      for (int d = 0; d < c.d_emb; ++d) e[d] += sig[d];
    }
  }
  const double n = static_cast<double>(tokens.num_layers()) * tokens.length();
  for (double& x : e) x /= n;
  normalize(e);
  return e;
}

double World::mean_oracle_entropy() const {
  double total = 0.0;
  std::size_t rows = 0;
  for (std::size_t off = 0; off < probs_.size(); off += config_.k_ar, ++rows) {
    for (int i = 0; i < config_.k_ar; ++i) {
      const double p = probs_[off + i];
      if (p > 0.0) total -= p * std::log(p);
    }
  }
  return total / static_cast<double>(rows);
}

std::vector<std::uint8_t> World::serialize() const {
  const auto& c = config_;
  ByteWriter w;
  w.magic("SALW");
  w.u32(kWorldFormatVersion);
  w.u32(kRngVersion);
  for (int v : {c.v_text, c.l_text, c.k_ar, c.k_nar, c.num_layers, c.expansion, c.speakers, c.d_emb,
                c.nar_palette}) {
    w.i64(v);
  }
  w.f64(c.tau_oracle);
  w.f64(c.eps_nar);
  w.f64(c.speaker_mix);
  w.f64(c.logit_std);
  w.u64(c.world_seed);
  w.f64s(logits_);
  std::vector<double> tables(nar_tables_.begin(), nar_tables_.end());
  w.f64s(tables);
  for (const auto& sig : token_sig_) w.f64s(sig);
  w.f64s(speaker_ref_);
  return w.data();
}

void World::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

std::string World::hash() const { return content_hash(serialize()); }

World World::load(const std::filesystem::path& path) {
  ByteReader r(read_file(path));
  r.expect_magic("SALW");
  if (r.u32() != kWorldFormatVersion) throw IoError("unsupported world format version in " + path.string());
  if (r.u32() != kRngVersion) throw IoError("world generated with a different rng version: " + path.string());
  World w;
  auto& c = w.config_;
  int* ints[] = {&c.v_text, &c.l_text, &c.k_ar, &c.k_nar, &c.num_layers, &c.expansion, &c.speakers, &c.d_emb,
                 &c.nar_palette};
  for (int* p : ints) *p = static_cast<int>(r.i64());
  c.tau_oracle = r.f64();
  c.eps_nar = r.f64();
  c.speaker_mix = r.f64();
  c.logit_std = r.f64();
  c.world_seed = r.u64();
  c.validate();
  w.logits_.resize(static_cast<std::size_t>(c.speakers) * c.v_text * (c.k_ar + 1) * c.k_ar);
  r.f64s(w.logits_);
  std::vector<double> tables(static_cast<std::size_t>(c.num_layers - 1) * c.speakers * c.k_ar);
  r.f64s(tables);
  w.nar_tables_.assign(tables.begin(), tables.end());
  w.token_sig_.resize(c.num_layers);
  for (int q = 0; q < c.num_layers; ++q) {
    w.token_sig_[q].resize(static_cast<std::size_t>(c.layer_vocab(q)) * c.d_emb);
    r.f64s(w.token_sig_[q]);
  }
  w.speaker_ref_.resize(static_cast<std::size_t>(c.speakers) * c.d_emb);
  r.f64s(w.speaker_ref_);
  if (!r.done()) throw IoError("trailing bytes in world file " + path.string());
  w.derive_tables();
  return w;
}

std::vector<Utterance> sample_corpus(const World& world, int n, std::uint64_t seed) {
  if (n < 0) throw ConfigError("corpus size must be non-negative");
  std::vector<Utterance> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(world.sample_utterance(i % world.config().speakers, mix64(seed, static_cast<std::uint64_t>(i))));
  return out;
}

}  // namespace prefcodec
