#include "prefcodec/nar_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "prefcodec/ar_policy.hpp"
#include "prefcodec/error.hpp"
#include "prefcodec/metrics_log.hpp"
#include "prefcodec/parallel.hpp"
#include "prefcodec/rng.hpp"
#include "prefcodec/scoring.hpp"

namespace prefcodec {

using kernels::linear_backward_row;
using kernels::linear_row;
using kernels::log_sum_exp;

NarConfig NarConfig::for_world(const WorldConfig& world) {
  NarConfig c;
  c.num_layers = world.num_layers;
  c.k_ar = world.k_ar;
  c.k_nar = world.k_nar;
  c.max_length = world.ar_length();
  return c;
}

void NarConfig::validate() const {
  auto require = [](bool ok, const char* field, const char* rule) {
    if (!ok) throw ConfigError(std::string("nar config: ") + field + " " + rule);
  };
  require(d_model > 0, "d_model", "must be positive");
  require(n_heads > 0 && d_model % n_heads == 0, "n_heads", "must divide d_model");
  require(n_layers >= 1, "n_layers", "must be >= 1");
  require(d_ffn > 0, "d_ffn", "must be positive");
  require(prompt_len >= 1, "prompt_len", "must be >= 1");
  require(decode_steps >= 1, "decode_steps", "must be >= 1");
  require(init_std > 0.0, "init_std", "must be positive");
  require(num_layers >= 2, "num_layers", "must be >= 2");
  require(k_ar >= 1 && k_nar >= 1, "vocabulary", "sizes must be positive");
  require(max_length >= 1, "max_length", "must be >= 1");
}

NarModel::NarModel(const NarConfig& config) : config_(config) {
  config_.validate();
  build_layout();
  values_.assign(layout_.size(), 0.0);
  Rng rng = Rng::named(config_.param_seed, "nar_init");
  const double s = config_.init_std;
  for (int q = 0; q < config_.num_layers; ++q) init_normal(values_, layout_.find("emb.layer" + std::to_string(q)), rng, s);
  init_normal(values_, layout_.find("pos_emb"), rng, s);
  init_normal(values_, layout_.find("target_emb"), rng, s);
  init_core_params(values_, layout_, index_.core, config_.core_dims(), rng, s);
  for (int q = 1; q < config_.num_layers; ++q) init_normal(values_, layout_.find("head.layer" + std::to_string(q) + ".w"), rng, s);
}

void NarModel::build_layout() {
  const auto& c = config_;
  const int d = c.d_model;
  for (int q = 0; q < c.num_layers; ++q) {
    index_.layer_emb.push_back(layout_.add("emb.layer" + std::to_string(q), {c.layer_vocab(q) + 1, d}));
  }
  index_.pos_emb = layout_.add("pos_emb", {c.max_rows(), d});
  index_.target_emb = layout_.add("target_emb", {c.num_layers - 1, d});
  index_.core = add_core_params(layout_, c.core_dims(), "");
  for (int q = 1; q < c.num_layers; ++q) {
    index_.head_w.push_back(layout_.add("head.layer" + std::to_string(q) + ".w", {d, c.k_nar}));
    index_.head_b.push_back(layout_.add("head.layer" + std::to_string(q) + ".b", {c.k_nar}));
  }
}

std::span<double> NarModel::tensor(std::string_view name) {
  const auto& t = layout_.find(name);
  return {values_.data() + t.offset, t.size};
}

std::vector<std::vector<int>> nar_grid(const NarConfig& config, const LayeredTokens& prompt,
                                       const LayeredTokens& body, int known) {
  const int Q = config.num_layers;
  if (prompt.num_layers() != Q || prompt.length() != config.prompt_len) {
    throw ShapeError("prompt must hold every layer over prompt_len positions");
  }
  if (body.num_layers() < known || known < 1) throw ShapeError("body is missing conditioning layers");
  const int L = body.length();
  if (L > config.max_length) throw ShapeError("first layer longer than max_length");
  std::vector<std::vector<int>> grid(Q);
  for (int q = 0; q < Q; ++q) {
    auto& row = grid[q];
    row.reserve(config.prompt_len + L);
    for (int t : prompt.layers[q]) {
      if (t < 0 || t >= config.layer_vocab(q)) throw ShapeError("prompt token out of layer vocabulary");
      row.push_back(t);
    }
    for (int i = 0; i < L; ++i) {
      if (q < known) {
        const int t = body.layers[q][i];
        if (t < 0 || t >= config.layer_vocab(q)) throw ShapeError("token out of layer vocabulary");
        row.push_back(t);
      } else {
        row.push_back(config.mask_token(q));
      }
    }
  }
  return grid;
}

namespace {

int grid_rows(const std::vector<std::vector<int>>& grid) { return static_cast<int>(grid.front().size()); }

void check_example(const NarConfig& c, const NarExample& ex) {
  if (static_cast<int>(ex.grid.size()) != c.num_layers) throw ShapeError("grid must hold every layer");
  const int rows = grid_rows(ex.grid);
  if (rows > c.max_rows() || rows <= c.prompt_len) throw ShapeError("grid row count out of range");
  for (int q = 0; q < c.num_layers; ++q) {
    if (static_cast<int>(ex.grid[q].size()) != rows) throw ShapeError("ragged grid");
    for (int t : ex.grid[q]) {
      if (t < 0 || t > c.mask_token(q)) throw ShapeError("grid token out of range");
    }
  }
  if (ex.target_layer < 1 || ex.target_layer >= c.num_layers) throw ShapeError("target layer out of range");
  if (ex.positions.size() != ex.labels.size()) throw ShapeError("positions and labels differ in length");
  for (std::size_t j = 0; j < ex.positions.size(); ++j) {
    if (ex.positions[j] < 0 || ex.positions[j] >= rows - c.prompt_len) throw ShapeError("masked position out of range");
    if (ex.labels[j] < 0 || ex.labels[j] >= c.k_nar) throw ShapeError("label out of vocabulary");
  }
}

void nar_embed(const NarModel& model, const std::vector<std::vector<int>>& grid, int target_layer,
               std::vector<double>& x0) {
  const auto& c = model.config();
  const auto& idx = model.index();
  const double* p = model.params().data();
  const int d = c.d_model;
  const int rows = grid_rows(grid);
  x0.assign(static_cast<std::size_t>(rows) * d, 0.0);
  const double* te = p + idx.target_emb + static_cast<std::size_t>(target_layer - 1) * d;
  for (int r = 0; r < rows; ++r) {
    double* x = &x0[static_cast<std::size_t>(r) * d];
    const double* pe = p + idx.pos_emb + static_cast<std::size_t>(r) * d;
    for (int i = 0; i < d; ++i) x[i] = pe[i] + te[i];
    for (int q = 0; q < c.num_layers; ++q) {
      const double* e = p + idx.layer_emb[q] + static_cast<std::size_t>(grid[q][r]) * d;
      for (int i = 0; i < d; ++i) x[i] += e[i];
    }
  }
}

void nar_head(const NarModel& model, int layer, const double* hidden, double* logits) {
  const auto& c = model.config();
  const double* p = model.params().data();
  linear_row(hidden, c.d_model, p + model.index().head_w[layer - 1], p + model.index().head_b[layer - 1], c.k_nar,
             logits);
}

void nar_hidden(const NarModel& model, const std::vector<std::vector<int>>& grid, int target_layer, CoreTape& tape) {
  std::vector<double> x0;
  nar_embed(model, grid, target_layer, x0);
  core_forward(model.params().data(), model.index().core, model.config().core_dims(), grid_rows(grid), x0, tape);
}

// Adds the example's NLL (scaled) gradient into grad; returns its summed NLL.
double nar_example_grad(const NarModel& model, const NarExample& ex, double scale, std::span<double> grad) {
  const auto& c = model.config();
  const auto& idx = model.index();
  const int d = c.d_model;
  const int K = c.k_nar;
  const double* p = model.params().data();
  CoreTape tape;
  nar_hidden(model, ex.grid, ex.target_layer, tape);
  const int rows = grid_rows(ex.grid);
  std::vector<double> d_hidden(static_cast<std::size_t>(rows) * d, 0.0), logits(K);
  double nll = 0.0;
  for (std::size_t j = 0; j < ex.positions.size(); ++j) {
    const int row = c.prompt_len + ex.positions[j];
    const double* h = &tape.hidden[static_cast<std::size_t>(row) * d];
    nar_head(model, ex.target_layer, h, logits.data());
    const double lse = log_sum_exp(logits.data(), K);
    const double lp = logits[ex.labels[j]] - lse;
    if (!std::isfinite(lp)) throw NumericError("non-finite NAR log-probability at body position " + std::to_string(ex.positions[j]));
    nll -= lp;
    for (int k = 0; k < K; ++k) logits[k] = scale * std::exp(logits[k] - lse);
    logits[ex.labels[j]] -= scale;
    linear_backward_row(h, logits.data(), p + idx.head_w[ex.target_layer - 1], d, K,
                        &d_hidden[static_cast<std::size_t>(row) * d], grad.data() + idx.head_w[ex.target_layer - 1],
                        grad.data() + idx.head_b[ex.target_layer - 1]);
  }
  std::vector<double> d_x0(static_cast<std::size_t>(rows) * d);
  core_backward(p, idx.core, c.core_dims(), tape, d_hidden, grad.data(), d_x0);
  double* g_target = grad.data() + idx.target_emb + static_cast<std::size_t>(ex.target_layer - 1) * d;
  for (int r = 0; r < rows; ++r) {
    const double* dx = &d_x0[static_cast<std::size_t>(r) * d];
    double* g_pos = grad.data() + idx.pos_emb + static_cast<std::size_t>(r) * d;
    for (int i = 0; i < d; ++i) {
      g_pos[i] += dx[i];
      g_target[i] += dx[i];
    }
    for (int q = 0; q < c.num_layers; ++q) {
      double* g = grad.data() + idx.layer_emb[q] + static_cast<std::size_t>(ex.grid[q][r]) * d;
      for (int i = 0; i < d; ++i) g[i] += dx[i];
    }
  }
  return nll;
}

}  // namespace

std::vector<double> nar_position_logprobs(const NarModel& model, const NarExample& ex) {
  const auto& c = model.config();
  check_example(c, ex);
  CoreTape tape;
  nar_hidden(model, ex.grid, ex.target_layer, tape);
  const int K = c.k_nar;
  std::vector<double> out(ex.positions.size() * K);
  for (std::size_t j = 0; j < ex.positions.size(); ++j) {
    const int row = c.prompt_len + ex.positions[j];
    double* l = &out[j * K];
    nar_head(model, ex.target_layer, &tape.hidden[static_cast<std::size_t>(row) * c.d_model], l);
    const double lse = log_sum_exp(l, K);
    for (int k = 0; k < K; ++k) l[k] -= lse;
  }
  return out;
}

NarLossGrad nar_loss_and_grad(const NarModel& model, std::span<const NarExample> batch, int workers) {
  std::size_t count = 0;
  for (const auto& ex : batch) {
    check_example(model.config(), ex);
    count += ex.positions.size();
  }
  if (count == 0) throw ShapeError("NAR batch has no masked positions");
  const double scale = 1.0 / static_cast<double>(count);
  NarLossGrad out;
  out.grad.assign(model.params().size(), 0.0);
  std::vector<double> nll(batch.size());
  reduce_ordered(batch.size(), workers, out.grad, [&](std::size_t i, std::span<double> acc) {
    nll[i] = nar_example_grad(model, batch[i], scale, acc);
  });
  for (double v : nll) out.loss += v;
  out.loss *= scale;
  return out;
}

NarExample nar_mask_item(const NarConfig& config, const NarItem& item, std::uint64_t seed) {
  Rng rng(seed);
  const int Q = config.num_layers;
  const int L = item.target.length();
  if (item.target.num_layers() != Q || L == 0) throw ShapeError("NAR item target must hold every layer");
  NarExample ex;
  ex.target_layer = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(Q - 1)));
  ex.grid = nar_grid(config, item.prompt, item.target, Q);
  int masked = 0;
  while (masked == 0) masked = static_cast<int>(std::ceil(rng.uniform() * L));  // 0 only when u == 0
  std::vector<int> order(L);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < masked; ++i) std::swap(order[i], order[i + static_cast<int>(rng.below(static_cast<std::uint64_t>(L - i)))]);
  ex.positions.assign(order.begin(), order.begin() + masked);
  std::sort(ex.positions.begin(), ex.positions.end());
  for (int pos : ex.positions) {
    ex.labels.push_back(item.target.layers[ex.target_layer][pos]);
    ex.grid[ex.target_layer][config.prompt_len + pos] = config.mask_token(ex.target_layer);
  }
  for (int q = ex.target_layer + 1; q < Q; ++q) {
    for (int i = 0; i < L; ++i) ex.grid[q][config.prompt_len + i] = config.mask_token(q);
  }
  return ex;
}

NarTrainReport nar_train(NarModel& model, std::span<const NarItem> data, const NarTrainOptions& options) {
  const auto schedule = batch_schedule(data.size(), options.batch, options.epochs, options.steps, options.seed);
  const std::uint64_t mask_base = Rng::named(options.seed, "nar_mask").key();
  AdamState adam;
  NarTrainReport report;
  double epoch_sum = 0.0;
  int epoch_count = 0;
  for (std::size_t s = 0; s < schedule.batches.size(); ++s) {
    std::vector<NarExample> batch;
    for (std::size_t i : schedule.batches[s]) {
      batch.push_back(nar_mask_item(model.config(), data[i], mix64(mix64(mask_base, s), i)));
    }
    auto lg = nar_loss_and_grad(model, batch, options.workers);
    if (!std::isfinite(lg.loss) || !all_finite(lg.grad)) {
      throw NumericError("nar_train: non-finite loss or gradient at step " + std::to_string(s));
    }
    clip_grad_norm(lg.grad, options.grad_clip);
    adam_step(model.params(), lg.grad, adam, options.lr);
    report.step_loss.push_back(lg.loss);
    if (options.log != nullptr) options.log->step(static_cast<int>(s), lg.loss, options.lr);
    epoch_sum += lg.loss;
    ++epoch_count;
    if (s + 1 == schedule.batches.size() || schedule.epoch[s + 1] != schedule.epoch[s]) {
      report.epoch_loss.push_back(epoch_sum / epoch_count);
      epoch_sum = 0.0;
      epoch_count = 0;
    }
  }
  report.steps = static_cast<int>(schedule.batches.size());
  if (!all_finite(model.params())) throw NumericError("nar_train: parameters became non-finite");
  return report;
}

LayeredTokens prompt_segment(const Utterance& utterance, int prompt_len) {
  LayeredTokens out;
  for (const auto& layer : utterance.golden.layers) {
    if (static_cast<int>(layer.size()) < prompt_len) throw ShapeError("utterance shorter than the prompt");
    out.layers.emplace_back(layer.begin(), layer.begin() + prompt_len);
  }
  return out;
}

std::vector<NarItem> nar_items_from_utterances(const NarConfig& config, std::span<const Utterance> utterances) {
  std::vector<std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    const int s = utterances[i].speaker;
    if (s >= static_cast<int>(by_speaker.size())) by_speaker.resize(s + 1);
    by_speaker[s].push_back(i);
  }
  std::vector<NarItem> items;
  items.reserve(utterances.size());
  for (const auto& group : by_speaker) {
    if (group.size() < 2) continue;  // needs a distinct utterance for the prompt
    for (std::size_t j = 0; j < group.size(); ++j) {
      const auto& target = utterances[group[j]];
      const auto& source = utterances[group[(j + 1) % group.size()]];
      NarItem item;
      item.prompt = prompt_segment(source, config.prompt_len);
      item.target = target.golden;
      items.push_back(std::move(item));
    }
  }
  return items;
}

LayeredTokens nar_decode(const NarModel& model, const LayeredTokens& prompt, std::span<const int> layer1, int steps,
                         std::uint64_t seed, double temperature, NarDecodeTrace* trace) {
  const auto& c = model.config();
  if (steps < 1) throw ConfigError("nar_decode: steps must be >= 1");
  if (temperature < 0.0) throw ConfigError("nar_decode: temperature must be >= 0");
  const int Q = c.num_layers;
  const int L = static_cast<int>(layer1.size());
  LayeredTokens out;
  out.layers.emplace_back(layer1.begin(), layer1.end());
  for (int q = 1; q < Q; ++q) out.layers.emplace_back(L, 0);
  if (trace != nullptr) trace->committed.assign(Q - 1, {});
  if (L == 0) return out;
  LayeredTokens body;
  body.layers = {out.layers[0]};
  auto grid = nar_grid(c, prompt, body, 1);
  const int K = c.k_nar;
  const int d = c.d_model;
  std::vector<double> logits(K);
  for (int q = 1; q < Q; ++q) {
    Rng rng = Rng::named(seed, "nar_decode").split(static_cast<std::uint64_t>(q));
    std::vector<char> done(L, 0);
    int committed = 0;
    for (int k = 1; k <= steps; ++k) {
      const int goal =
          k == steps ? L : L - static_cast<int>(std::floor(L * std::cos(std::numbers::pi / 2.0 * k / steps)));
      CoreTape tape;
      nar_hidden(model, grid, q, tape);
      struct Candidate {
        double confidence;
        int position;
        int token;
      };
      std::vector<Candidate> cands;
      for (int i = 0; i < L; ++i) {
        if (done[i]) continue;
        nar_head(model, q, &tape.hidden[static_cast<std::size_t>(c.prompt_len + i) * d], logits.data());
        int token = 0;
        if (temperature == 0.0) {
          token = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
          kernels::softmax_inplace(logits.data(), K);
        } else {
          for (double& v : logits) v /= temperature;
          kernels::softmax_inplace(logits.data(), K);
          token = rng.categorical(logits);
        }
        cands.push_back({logits[token], i, token});
      }
      std::stable_sort(cands.begin(), cands.end(),
                       [](const Candidate& a, const Candidate& b) { return a.confidence > b.confidence; });
      const int take = std::min(goal - committed, static_cast<int>(cands.size()));
      std::vector<int> now;
      for (int j = 0; j < take; ++j) {
        const auto& cand = cands[j];
        done[cand.position] = 1;
        out.layers[q][cand.position] = cand.token;
        grid[q][c.prompt_len + cand.position] = cand.token;
        now.push_back(cand.position);
      }
      committed += take;
      if (trace != nullptr) {
        std::sort(now.begin(), now.end());
        trace->committed[q - 1].push_back(std::move(now));
      }
    }
  }
  return out;
}

Reconstruction reconstruct(const World& world, const NarModel& model, const LayeredTokens& prompt,
                           std::span<const int> layer1, std::span<const int> text, int speaker, std::uint64_t seed) {
  Reconstruction r;
  r.stack = nar_decode(model, prompt, layer1, model.config().decode_steps, seed);
  r.ter = token_error_rate(world, speaker, text, layer1);
  r.sim = speaker_similarity(world, speaker, r.stack);
  return r;
}

}  // namespace prefcodec
