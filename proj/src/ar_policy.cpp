#include "prefcodec/ar_policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "prefcodec/error.hpp"
#include "prefcodec/metrics_log.hpp"
#include "prefcodec/parallel.hpp"
#include "prefcodec/rng.hpp"

namespace prefcodec {

using kernels::dot;
using kernels::linear_backward_row;
using kernels::linear_row;
using kernels::log_sum_exp;

ArConfig ArConfig::for_world(const WorldConfig& world) {
  ArConfig c;
  c.v_text = world.v_text;
  c.k_ar = world.k_ar;
  c.l_text = world.l_text;
  c.l_ar = world.ar_length();
  return c;
}

void ArConfig::validate() const {
  auto require = [](bool ok, const char* field, const char* rule) {
    if (!ok) throw ConfigError(std::string("ar config: ") + field + " " + rule);
  };
  require(d_model > 0, "d_model", "must be positive");
  require(n_heads > 0 && d_model % n_heads == 0, "n_heads", "must divide d_model");
  require(n_layers >= 1, "n_layers", "must be >= 1");
  require(d_ffn > 0, "d_ffn", "must be positive");
  require(init_std > 0.0, "init_std", "must be positive");
  require(v_text >= 1 && k_ar >= 1 && l_text >= 1 && l_ar >= 1, "vocab layout", "sizes must be positive");
  require(max_context >= 2 + l_text + 1 + l_ar + 1, "max_context", "must fit control + BOS/text/SEP/response/EOS");
}

FramedSequence frame_sequence(const ArConfig& config, std::span<const int> text, std::span<const int> y,
                              Control control) {
  FramedSequence seq;
  seq.tokens.reserve(text.size() + y.size() + 4);
  if (control == Control::kGood) seq.tokens.push_back(config.good());
  if (control == Control::kBad) seq.tokens.push_back(config.bad());
  seq.tokens.push_back(config.bos());
  for (int x : text) {
    if (x < 0 || x >= config.v_text) throw ShapeError("text symbol out of vocabulary");
    seq.tokens.push_back(config.text_token(x));
  }
  seq.first_target = static_cast<int>(seq.tokens.size());
  seq.tokens.push_back(config.sep());
  for (int t : y) {
    if (t < 0 || t >= config.k_ar) throw ShapeError("first-layer token out of vocabulary");
    seq.tokens.push_back(config.ar_token(t));
  }
  seq.tokens.push_back(config.eos());
  seq.num_targets = static_cast<int>(y.size()) + 1;
  if (static_cast<int>(seq.tokens.size()) > config.max_context) throw ShapeError("sequence exceeds max_context");
  return seq;
}

ArModel::ArModel(const ArConfig& config) : config_(config) {
  config_.validate();
  build_layout();
  values_.assign(layout_.size(), 0.0);
  Rng rng = Rng::named(config_.param_seed, "ar_init");
  const double s = config_.init_std;
  init_normal(values_, layout_.find("tok_emb"), rng, s);
  init_normal(values_, layout_.find("pos_emb"), rng, s);
  init_core_params(values_, layout_, index_.core, config_.core_dims(), rng, s);
  init_normal(values_, layout_.find("head.w"), rng, s);
}

void ArModel::build_layout() {
  const int d = config_.d_model;
  const int v = config_.vocab_size();
  index_.tok_emb = layout_.add("tok_emb", {v, d});
  index_.pos_emb = layout_.add("pos_emb", {config_.max_context, d});
  index_.core = add_core_params(layout_, config_.core_dims(), "");
  index_.head_w = layout_.add("head.w", {d, v});
  index_.head_b = layout_.add("head.b", {v});
  if (config_.reward_head) {
    index_.reward_w = layout_.add("reward.w", {d});
    index_.reward_b = layout_.add("reward.b", {1});
  }
}

std::span<double> ArModel::tensor(std::string_view name) {
  const auto& t = layout_.find(name);
  return {values_.data() + t.offset, t.size};
}

std::span<const double> ArModel::tensor(std::string_view name) const {
  const auto& t = layout_.find(name);
  return {values_.data() + t.offset, t.size};
}

ArModel ArModel::with_reward_head() const {
  ArConfig c = config_;
  c.reward_head = true;
  ArModel rm(c);
  for (const auto& t : layout_.tensors()) {
    const auto src = tensor(t.name);
    std::copy(src.begin(), src.end(), rm.tensor(t.name).begin());
  }
  std::ranges::fill(rm.tensor("reward.w"), 0.0);
  std::ranges::fill(rm.tensor("reward.b"), 0.0);
  return rm;
}

namespace {

void embed_row(const ArModel& model, int token, int position, double* out) {
  const auto& c = model.config();
  if (token < 0 || token >= c.vocab_size()) throw ShapeError("token id out of vocabulary");
  if (position >= c.max_context) throw ShapeError("sequence exceeds max_context");
  const int d = c.d_model;
  const double* p = model.params().data();
  const double* te = p + model.index().tok_emb + static_cast<std::size_t>(token) * d;
  const double* pe = p + model.index().pos_emb + static_cast<std::size_t>(position) * d;
  for (int i = 0; i < d; ++i) out[i] = te[i] + pe[i];
}

struct ArTape {
  CoreTape core;
  std::vector<double> target_probs;  // softmax rows at targets, [num_targets][V]
};

void run_core(const ArModel& model, std::span<const int> tokens, CoreTape& tape) {
  const auto& c = model.config();
  if (static_cast<int>(tokens.size()) > c.max_context) throw ShapeError("sequence exceeds max_context");
  if (tokens.empty()) throw ShapeError("empty token sequence");
  const int d = c.d_model;
  std::vector<double> x0(tokens.size() * d);
  for (std::size_t t = 0; t < tokens.size(); ++t) embed_row(model, tokens[t], static_cast<int>(t), &x0[t * d]);
  core_forward(model.params().data(), model.index().core, c.core_dims(), static_cast<int>(tokens.size()), x0, tape);
}

void head_row(const ArModel& model, const double* hidden, double* logits) {
  const auto& c = model.config();
  const double* p = model.params().data();
  linear_row(hidden, c.d_model, p + model.index().head_w, p + model.index().head_b, c.vocab_size(), logits);
}

double reward_from_hidden(const ArModel& model, const double* hidden) {
  const double* p = model.params().data();
  return dot(hidden, p + model.index().reward_w, model.config().d_model) + p[model.index().reward_b];
}

// Forward pass for one probe: values plus whatever backward needs.
ProbeValues probe_forward(const ArModel& model, const Probe& probe, ArTape* tape, std::size_t probe_index) {
  const auto& c = model.config();
  const auto& seq = probe.seq;
  const int V = c.vocab_size();
  const int d = c.d_model;
  CoreTape local;
  CoreTape& core = tape != nullptr ? tape->core : local;
  run_core(model, seq.tokens, core);
  ProbeValues out;
  const int targets = probe.logp ? seq.num_targets : 0;
  out.logp.resize(targets);
  std::vector<double> logits(V);
  if (tape != nullptr) tape->target_probs.resize(static_cast<std::size_t>(targets) * V);
  for (int j = 0; j < targets; ++j) {
    const int row = seq.first_target + j;
    head_row(model, &core.hidden[static_cast<std::size_t>(row) * d], logits.data());
    const double lse = log_sum_exp(logits.data(), V);
    out.logp[j] = logits[seq.tokens[row + 1]] - lse;
    if (!std::isfinite(out.logp[j])) {
      throw NumericError("non-finite log-probability in probe " + std::to_string(probe_index) + " at position " +
                         std::to_string(row));
    }
    if (tape != nullptr) {
      double* probs = &tape->target_probs[static_cast<std::size_t>(j) * V];
      for (int v = 0; v < V; ++v) probs[v] = std::exp(logits[v] - lse);
    }
  }
  if (probe.reward) {
    if (!c.reward_head) throw ShapeError("reward requested from a model without a reward head");
    out.reward = reward_from_hidden(model, &core.hidden[static_cast<std::size_t>(seq.eos_position()) * d]);
    if (!std::isfinite(out.reward)) {
      throw NumericError("non-finite reward in probe " + std::to_string(probe_index));
    }
  }
  return out;
}

void probe_backward(const ArModel& model, const Probe& probe, const ArTape& tape, const ProbeAdjoint& adj,
                    std::span<double> grad) {
  const auto& c = model.config();
  const auto& idx = model.index();
  const auto& seq = probe.seq;
  const int V = c.vocab_size();
  const int d = c.d_model;
  const double* p = model.params().data();
  const std::size_t T = seq.tokens.size();
  std::vector<double> d_hidden(T * d, 0.0), d_logits(V);
  for (std::size_t j = 0; j < adj.d_logp.size(); ++j) {
    const double a = adj.d_logp[j];
    if (a == 0.0) continue;
    const int row = seq.first_target + static_cast<int>(j);
    const double* probs = &tape.target_probs[j * V];
    for (int v = 0; v < V; ++v) d_logits[v] = -a * probs[v];
    d_logits[seq.tokens[row + 1]] += a;
    linear_backward_row(&tape.core.hidden[static_cast<std::size_t>(row) * d], d_logits.data(), p + idx.head_w, d, V,
                        &d_hidden[static_cast<std::size_t>(row) * d], grad.data() + idx.head_w,
                        grad.data() + idx.head_b);
  }
  if (probe.reward && adj.d_reward != 0.0) {
    const std::size_t row = static_cast<std::size_t>(seq.eos_position());
    const double* h = &tape.core.hidden[row * d];
    for (int i = 0; i < d; ++i) {
      d_hidden[row * d + i] += adj.d_reward * p[idx.reward_w + i];
      grad[idx.reward_w + i] += adj.d_reward * h[i];
    }
    grad[idx.reward_b] += adj.d_reward;
  }
  std::vector<double> d_x0(T * d);
  core_backward(p, idx.core, c.core_dims(), tape.core, d_hidden, grad.data(), d_x0);
  for (std::size_t t = 0; t < T; ++t) {
    double* te = grad.data() + idx.tok_emb + static_cast<std::size_t>(seq.tokens[t]) * d;
    double* pe = grad.data() + idx.pos_emb + t * d;
    for (int i = 0; i < d; ++i) {
      te[i] += d_x0[t * d + i];
      pe[i] += d_x0[t * d + i];
    }
  }
}

std::vector<int> prompt_tokens(const ArConfig& c, std::span<const int> text, Control control) {
  FramedSequence seq = frame_sequence(c, text, {}, control);
  seq.tokens.pop_back();  // EOS
  return seq.tokens;
}

// Restricted next-token weights over [k_ar tokens..., EOS].
int choose_token(const ArConfig& c, std::span<const double> logits, double temperature, Rng& rng) {
  const int n = c.k_ar + 1;
  std::vector<double> allowed(n);
  for (int k = 0; k < c.k_ar; ++k) allowed[k] = logits[c.ar_token(k)];
  allowed[c.k_ar] = logits[c.eos()];
  if (temperature <= 0.0) {
    return static_cast<int>(std::max_element(allowed.begin(), allowed.end()) - allowed.begin());
  }
  const double m = *std::max_element(allowed.begin(), allowed.end());
  for (double& a : allowed) a = std::exp((a - m) / temperature);
  return rng.categorical(allowed);
}

}  // namespace

std::vector<double> final_hidden(const ArModel& model, std::span<const int> tokens) {
  CoreTape tape;
  run_core(model, tokens, tape);
  return std::move(tape.hidden);
}

std::vector<double> forward_logits(const ArModel& model, std::span<const int> tokens) {
  const auto hidden = final_hidden(model, tokens);
  const int V = model.config().vocab_size();
  const int d = model.config().d_model;
  std::vector<double> logits(tokens.size() * V);
  for (std::size_t t = 0; t < tokens.size(); ++t) head_row(model, &hidden[t * d], &logits[t * V]);
  return logits;
}

std::vector<double> target_logprobs(const ArModel& model, const FramedSequence& seq) {
  return probe_forward(model, Probe{seq, false}, nullptr, 0).logp;
}

double seq_logprob(const ArModel& model, std::span<const int> text, std::span<const int> y, Control control) {
  const auto lp = target_logprobs(model, frame_sequence(model.config(), text, y, control));
  return std::accumulate(lp.begin(), lp.end(), 0.0);
}

TokenSeq sample(const ArModel& model, std::span<const int> text, Control control, double temperature,
                std::uint64_t seed) {
  if (temperature < 0.0) throw ConfigError("sample: temperature must be >= 0");
  const auto& c = model.config();
  const int d = c.d_model;
  const double* p = model.params().data();
  DecodeCache cache;
  std::vector<double> x(d), h(d), logits(c.vocab_size());
  const auto prompt = prompt_tokens(c, text, control);
  int pos = 0;
  for (int tok : prompt) {
    embed_row(model, tok, pos++, x.data());
    core_step(p, model.index().core, c.core_dims(), x, cache, h);
  }
  Rng rng(seed);
  TokenSeq y;
  while (static_cast<int>(y.size()) < c.l_ar) {
    head_row(model, h.data(), logits.data());
    const int choice = choose_token(c, logits, temperature, rng);
    if (choice == c.k_ar) break;  // EOS
    y.push_back(choice);
    if (static_cast<int>(y.size()) == c.l_ar) break;
    embed_row(model, c.ar_token(choice), pos++, x.data());
    core_step(p, model.index().core, c.core_dims(), x, cache, h);
  }
  return y;
}

std::vector<double> next_token_distribution(const ArModel& model, std::span<const int> text,
                                            std::span<const int> prefix, Control control, double temperature) {
  const auto& c = model.config();
  auto tokens = prompt_tokens(c, text, control);
  for (int t : prefix) tokens.push_back(c.ar_token(t));
  const auto logits = forward_logits(model, tokens);
  const double* last = &logits[(tokens.size() - 1) * c.vocab_size()];
  std::vector<double> allowed(c.k_ar + 1);
  for (int k = 0; k < c.k_ar; ++k) allowed[k] = last[c.ar_token(k)];
  allowed[c.k_ar] = last[c.eos()];
  if (temperature <= 0.0) {
    std::vector<double> one_hot(allowed.size(), 0.0);
    one_hot[std::max_element(allowed.begin(), allowed.end()) - allowed.begin()] = 1.0;
    return one_hot;
  }
  for (double& a : allowed) a /= temperature;
  kernels::softmax_inplace(allowed.data(), static_cast<int>(allowed.size()));
  return allowed;
}

std::vector<double> mean_rows(std::span<const double> rows, int width, int begin, int end) {
  if (end <= begin) throw ShapeError("mean over an empty row range");
  std::vector<double> out(width, 0.0);
  for (int t = begin; t < end; ++t) {
    for (int i = 0; i < width; ++i) out[i] += rows[static_cast<std::size_t>(t) * width + i];
  }
  for (double& v : out) v /= (end - begin);
  return out;
}

std::vector<double> pooled_rep(const ArModel& model, std::span<const int> text, std::span<const int> y) {
  if (y.empty()) throw ShapeError("pooled_rep of an empty response");
  const auto seq = frame_sequence(model.config(), text, y, Control::kNone);
  const auto hidden = final_hidden(model, seq.tokens);
  return mean_rows(hidden, model.config().d_model, seq.first_target + 1, seq.first_target + 1 + static_cast<int>(y.size()));
}

double reward_score(const ArModel& model, std::span<const int> text, std::span<const int> y) {
  if (!model.config().reward_head) throw ShapeError("reward_score needs a model with a reward head");
  const auto seq = frame_sequence(model.config(), text, y, Control::kNone);
  const auto hidden = final_hidden(model, seq.tokens);
  return reward_from_hidden(model, &hidden[static_cast<std::size_t>(seq.eos_position()) * model.config().d_model]);
}

std::vector<ProbeValues> evaluate_probes(const ArModel& model, std::span<const Probe> probes, int workers) {
  std::vector<ProbeValues> values(probes.size());
  parallel_for(probes.size(), workers, [&](std::size_t i) { values[i] = probe_forward(model, probes[i], nullptr, i); });
  return values;
}

LossGrad loss_and_grad(const ArModel& model, std::span<const Probe> probes, const Objective& objective,
                       int workers) {
  std::vector<ArTape> tapes(probes.size());
  std::vector<ProbeValues> values(probes.size());
  parallel_for(probes.size(), workers,
               [&](std::size_t i) { values[i] = probe_forward(model, probes[i], &tapes[i], i); });
  std::vector<ProbeAdjoint> adjoints(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) adjoints[i].d_logp.assign(values[i].logp.size(), 0.0);
  LossGrad out;
  out.loss = objective(values, adjoints);
  if (!std::isfinite(out.loss)) throw NumericError("objective returned a non-finite loss");
  out.grad.assign(model.params().size(), 0.0);
  reduce_ordered(probes.size(), workers, out.grad, [&](std::size_t i, std::span<double> acc) {
    probe_backward(model, probes[i], tapes[i], adjoints[i], acc);
  });
  return out;
}

Objective nll_objective() {
  return [](std::span<const ProbeValues> values, std::span<ProbeAdjoint> adj) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& v : values) {
      for (double lp : v.logp) total -= lp;
      count += v.logp.size();
    }
    const double inv = 1.0 / static_cast<double>(count);
    for (auto& a : adj) std::ranges::fill(a.d_logp, -inv);
    return total * inv;
  };
}

std::vector<SftExample> sft_examples(std::span<const Utterance> corpus) {
  std::vector<SftExample> out;
  out.reserve(corpus.size());
  for (const auto& u : corpus) out.push_back({u.text, u.golden.layers.at(0), Control::kNone});
  return out;
}

std::vector<Probe> sft_probes(const ArConfig& config, std::span<const SftExample> batch) {
  std::vector<Probe> probes;
  probes.reserve(batch.size());
  for (const auto& ex : batch) probes.push_back({frame_sequence(config, ex.text, ex.y, ex.control), false});
  return probes;
}

BatchSchedule batch_schedule(std::size_t n, int batch, int epochs, int steps, std::uint64_t seed) {
  if (n == 0) throw ShapeError("empty training set");
  if (batch <= 0) throw ConfigError("batch must be positive");
  BatchSchedule s;
  for (int e = 0;; ++e) {
    if (steps <= 0 && e >= epochs) break;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng = Rng::named(seed, "shuffle").split(static_cast<std::uint64_t>(e));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch)) {
      if (steps > 0 && static_cast<int>(s.batches.size()) >= steps) return s;
      s.batches.emplace_back(perm.begin() + b, perm.begin() + std::min(n, b + static_cast<std::size_t>(batch)));
      s.epoch.push_back(e);
    }
    if (steps > 0 && static_cast<int>(s.batches.size()) >= steps) break;
  }
  return s;
}

TrainReport sft_train(ArModel& model, std::span<const SftExample> data, const TrainOptions& options) {
  const auto schedule = batch_schedule(data.size(), options.batch, options.epochs, options.steps, options.seed);
  AdamState adam;
  TrainReport report;
  double epoch_sum = 0.0;
  int epoch_count = 0;
  for (std::size_t s = 0; s < schedule.batches.size(); ++s) {
    std::vector<SftExample> batch;
    for (std::size_t i : schedule.batches[s]) batch.push_back(data[i]);
    const auto probes = sft_probes(model.config(), batch);
    auto lg = loss_and_grad(model, probes, nll_objective(), options.workers);
    if (!all_finite(lg.grad)) throw NumericError("sft_train: non-finite gradient at step " + std::to_string(s));
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
  if (!all_finite(model.params())) throw NumericError("sft_train: parameters became non-finite");
  return report;
}

}  // namespace prefcodec
