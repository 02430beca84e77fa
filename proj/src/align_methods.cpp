#include "prefcodec/align_methods.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prefcodec/error.hpp"
#include "prefcodec/metrics_log.hpp"
#include "prefcodec/parallel.hpp"
#include "prefcodec/rng.hpp"

namespace prefcodec {

AlignMethod parse_align_method(const std::string& name) {
  if (name == "coh") return AlignMethod::kCoh;
  if (name == "dpo") return AlignMethod::kDpo;
  if (name == "ppo") return AlignMethod::kPpo;
  if (name == "bon") return AlignMethod::kBon;
  if (name == "continue-sft") return AlignMethod::kContinueSft;
  throw ConfigError("align: unknown method '" + name + "' (expected coh, dpo, ppo, bon or continue-sft)");
}

std::string align_method_name(AlignMethod method) {
  switch (method) {
    case AlignMethod::kCoh:
      return "coh";
    case AlignMethod::kDpo:
      return "dpo";
    case AlignMethod::kPpo:
      return "ppo";
    case AlignMethod::kBon:
      return "bon";
    case AlignMethod::kContinueSft:
      break;
  }
  return "continue-sft";
}

void AlignConfig::validate() const {
  auto require = [](bool ok, const char* field, const char* rule) {
    if (!ok) throw ConfigError(std::string("align config: ") + field + " " + rule);
  };
  require(lr > 0.0, "lr", "must be positive");
  require(batch >= 1, "batch", "must be >= 1");
  require(epochs >= 1 || steps >= 1, "epochs", "or steps must be positive");
  require(dpo_beta > 0.0, "dpo_beta", "must be positive");
  require(rm_lr > 0.0, "rm_lr", "must be positive");
  require(rm_epochs >= 1, "rm_epochs", "must be >= 1");
  require(rm_batch >= 1, "rm_batch", "must be >= 1");
  require(rm_holdout >= 0.0 && rm_holdout < 1.0, "rm_holdout", "must lie in [0, 1)");
  require(ppo_kl_beta >= 0.0, "ppo_kl_beta", "must be >= 0");
  require(ppo_clip > 0.0 && ppo_clip < 1.0, "ppo_clip", "must lie in (0, 1)");
  require(ppo_lr > 0.0, "ppo_lr", "must be positive");
  require(ppo_steps >= 1, "ppo_steps", "must be >= 1");
  require(ppo_batch >= 2, "ppo_batch", "must be >= 2");
  require(ppo_epochs >= 1, "ppo_epochs", "must be >= 1");
  require(ppo_baseline_decay >= 0.0 && ppo_baseline_decay < 1.0, "ppo_baseline_decay", "must lie in [0, 1)");
  require(kl_abort > 0.0, "kl_abort", "must be positive");
  require(temperature > 0.0, "temperature", "must be positive");
  require(bon_n >= 1, "bon_n", "must be >= 1");
}

namespace {

double sum(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); }

std::vector<PreferenceTriple> gather(const PreferenceDataset& data, std::span<const std::size_t> idx) {
  std::vector<PreferenceTriple> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(data.triples[i]);
  return out;
}

// One optimizer step with the shared guards.
void apply_step(ArModel& model, LossGrad& lg, AdamState& adam, double lr, double clip, const char* who,
                std::size_t step) {
  if (!all_finite(lg.grad)) throw NumericError(std::string(who) + ": non-finite gradient at step " + std::to_string(step));
  clip_grad_norm(lg.grad, clip);
  adam_step(model.params(), lg.grad, adam, lr);
  if (!all_finite(model.params())) {
    throw NumericError(std::string(who) + ": parameters became non-finite at step " + std::to_string(step));
  }
}

void require_data(const PreferenceDataset& data, const char* who) {
  if (data.size() == 0) throw ShapeError(std::string(who) + ": empty preference dataset");
}

}  // namespace

// ---- chain of hindsight -----------------------------------------------------

Objective coh_objective() {
  return [](std::span<const ProbeValues> values, std::span<ProbeAdjoint> adj) {
    const double pairs = static_cast<double>(values.size() / 2);
    double loss = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      loss -= sum(values[i].logp);
      std::ranges::fill(adj[i].d_logp, -1.0 / pairs);
    }
    return loss / pairs;
  };
}

std::vector<Probe> coh_probes(const ArConfig& config, std::span<const PreferenceTriple> batch) {
  std::vector<Probe> probes;
  probes.reserve(2 * batch.size());
  for (const auto& t : batch) {
    probes.push_back({frame_sequence(config, t.text, t.y_g, Control::kGood)});
    probes.push_back({frame_sequence(config, t.text, t.y_s, Control::kBad)});
  }
  return probes;
}

TrainReport coh_train(ArModel& policy, const PreferenceDataset& data, const AlignConfig& config) {
  config.validate();
  require_data(data, "coh_train");
  const auto schedule = batch_schedule(data.size(), config.batch, config.epochs, config.steps, config.seed);
  AdamState adam;
  TrainReport report;
  for (std::size_t s = 0; s < schedule.batches.size(); ++s) {
    const auto batch = gather(data, schedule.batches[s]);
    auto lg = loss_and_grad(policy, coh_probes(policy.config(), batch), coh_objective(), config.workers);
    apply_step(policy, lg, adam, config.lr, config.grad_clip, "coh_train", s);
    report.step_loss.push_back(lg.loss);
    if (config.log != nullptr) config.log->step(static_cast<int>(s), lg.loss, config.lr);
  }
  report.steps = static_cast<int>(schedule.batches.size());
  return report;
}

// ---- DPO ------------------------------------------------------------------------

double neg_log_sigmoid(double z) { return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)); }

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

std::vector<Probe> pair_probes(const ArConfig& config, std::span<const PreferenceTriple> batch, bool reward) {
  std::vector<Probe> probes;
  probes.reserve(2 * batch.size());
  for (const auto& t : batch) {
    probes.push_back({frame_sequence(config, t.text, t.y_g, Control::kNone), reward, !reward});
    probes.push_back({frame_sequence(config, t.text, t.y_s, Control::kNone), reward, !reward});
  }
  return probes;
}

ReferenceScores reference_scores(const ArModel& reference, std::span<const PreferenceTriple> batch, int workers) {
  const auto values = evaluate_probes(reference, pair_probes(reference.config(), batch, false), workers);
  ReferenceScores r;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    r.golden.push_back(sum(values[2 * i].logp));
    r.synthetic.push_back(sum(values[2 * i + 1].logp));
  }
  return r;
}

Objective dpo_objective(const ReferenceScores& reference, double beta, double* margin) {
  return [&reference, beta, margin](std::span<const ProbeValues> values, std::span<ProbeAdjoint> adj) {
    const std::size_t n = values.size() / 2;
    if (reference.golden.size() != n) throw ShapeError("dpo: reference scores do not match the batch");
    double loss = 0.0, total_margin = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double m = (sum(values[2 * i].logp) - reference.golden[i]) - (sum(values[2 * i + 1].logp) - reference.synthetic[i]);
      const double z = beta * m;
      loss += neg_log_sigmoid(z);
      total_margin += m;
      const double dz = -sigmoid(-z) / static_cast<double>(n);
      std::ranges::fill(adj[2 * i].d_logp, dz * beta);
      std::ranges::fill(adj[2 * i + 1].d_logp, -dz * beta);
    }
    if (margin != nullptr) *margin = total_margin / static_cast<double>(n);
    return loss / static_cast<double>(n);
  };
}

double dpo_loss(const ArModel& policy, const ArModel& reference, std::span<const PreferenceTriple> batch, double beta) {
  if (batch.empty()) throw ShapeError("dpo_loss: empty batch");
  const auto ref = reference_scores(reference, batch);
  const auto probes = pair_probes(policy.config(), batch, false);
  const auto values = evaluate_probes(policy, probes);
  std::vector<ProbeAdjoint> adj(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) adj[i].d_logp.assign(values[i].logp.size(), 0.0);
  return dpo_objective(ref, beta)(values, adj);
}

double dpo_margin(const ArModel& policy, const ArModel& reference, std::span<const PreferenceTriple> triples,
                  int workers) {
  if (triples.empty()) throw ShapeError("dpo_margin: no triples");
  const auto pol = reference_scores(policy, triples, workers);
  const auto ref = reference_scores(reference, triples, workers);
  double total = 0.0;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    total += (pol.golden[i] - ref.golden[i]) - (pol.synthetic[i] - ref.synthetic[i]);
  }
  return total / static_cast<double>(triples.size());
}

DpoReport dpo_train(ArModel& policy, const PreferenceDataset& data, const AlignConfig& config) {
  config.validate();
  require_data(data, "dpo_train");
  const ArModel reference = policy;  // frozen snapshot of the incoming policy
  const auto all_ref = reference_scores(reference, data.triples, config.workers);
  const auto schedule = batch_schedule(data.size(), config.batch, config.epochs, config.steps, config.seed);
  AdamState adam;
  DpoReport report;
  for (std::size_t s = 0; s < schedule.batches.size(); ++s) {
    const auto& idx = schedule.batches[s];
    const auto batch = gather(data, idx);
    ReferenceScores ref;
    for (std::size_t i : idx) {
      ref.golden.push_back(all_ref.golden[i]);
      ref.synthetic.push_back(all_ref.synthetic[i]);
    }
    double margin = 0.0;
    auto lg = loss_and_grad(policy, pair_probes(policy.config(), batch, false),
                            dpo_objective(ref, config.dpo_beta, &margin), config.workers);
    apply_step(policy, lg, adam, config.lr, config.grad_clip, "dpo_train", s);
    report.step_loss.push_back(lg.loss);
    report.step_margin.push_back(margin);
    if (config.log != nullptr) config.log->step(static_cast<int>(s), lg.loss, config.lr, {{"margin", margin}});
  }
  report.steps = static_cast<int>(schedule.batches.size());
  return report;
}

// ---- reward model ---------------------------------------------------------------

Objective rm_objective() {
  return [](std::span<const ProbeValues> values, std::span<ProbeAdjoint> adj) {
    const std::size_t n = values.size() / 2;
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = values[2 * i].reward - values[2 * i + 1].reward;
      loss += neg_log_sigmoid(z);
      const double dz = -sigmoid(-z) / static_cast<double>(n);
      adj[2 * i].d_reward = dz;
      adj[2 * i + 1].d_reward = -dz;
    }
    return loss / static_cast<double>(n);
  };
}

double rm_loss(const ArModel& reward_model, std::span<const PreferenceTriple> batch) {
  if (batch.empty()) throw ShapeError("rm_loss: empty batch");
  const auto values = evaluate_probes(reward_model, pair_probes(reward_model.config(), batch, true));
  std::vector<ProbeAdjoint> adj(values.size());
  return rm_objective()(values, adj);
}

double pairwise_accuracy(const ArModel& reward_model, std::span<const PreferenceTriple> triples, int workers) {
  if (triples.empty()) throw StatisticsError("pairwise_accuracy: no triples");
  const auto values = evaluate_probes(reward_model, pair_probes(reward_model.config(), triples, true), workers);
  int correct = 0;
  for (std::size_t i = 0; i < triples.size(); ++i) correct += values[2 * i].reward > values[2 * i + 1].reward;
  return static_cast<double>(correct) / static_cast<double>(triples.size());
}

ArModel rm_train(const ArModel& policy, const PreferenceDataset& data, const AlignConfig& config, RmReport* report) {
  config.validate();
  require_data(data, "rm_train");
  ArModel rm = policy.with_reward_head();
  const std::size_t heldout = static_cast<std::size_t>(std::floor(config.rm_holdout * static_cast<double>(data.size())));
  const std::size_t train_n = data.size() - heldout;
  if (train_n == 0) throw ShapeError("rm_train: no training triples after the hold-out split");
  const auto schedule = batch_schedule(train_n, config.rm_batch, config.rm_epochs, 0, mix64(config.seed, fnv1a64("rm")));
  AdamState adam;
  RmReport local;
  for (std::size_t s = 0; s < schedule.batches.size(); ++s) {
    const auto batch = gather(data, schedule.batches[s]);
    auto lg = loss_and_grad(rm, pair_probes(rm.config(), batch, true), rm_objective(), config.workers);
    apply_step(rm, lg, adam, config.rm_lr, config.grad_clip, "rm_train", s);
    local.step_loss.push_back(lg.loss);
    if (config.log != nullptr) config.log->step(static_cast<int>(s), lg.loss, config.rm_lr);
  }
  local.steps = static_cast<int>(schedule.batches.size());
  local.heldout = static_cast<int>(heldout);
  if (heldout > 0) {
    const std::span<const PreferenceTriple> held(data.triples.data() + train_n, heldout);
    local.heldout_accuracy = pairwise_accuracy(rm, held, config.workers);
  }
  if (report != nullptr) *report = std::move(local);
  return rm;
}

// ---- PPO -----------------------------------------------------------------------

std::vector<double> whiten(std::span<const double> values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  const double mean = sum(values) / n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - mean) / (sd + 1e-8);
  return out;
}

namespace {

struct Rollout {
  Probe probe;
  int actions = 0;  // scored targets: sampled tokens, plus EOS when it was sampled
  std::vector<double> old_logp;
  double advantage = 0.0;
};

}  // namespace

PpoReport ppo_train(ArModel& policy, const ArModel& reward_model, std::span<const PpoPrompt> prompts,
                    const AlignConfig& config) {
  config.validate();
  if (prompts.empty()) throw ShapeError("ppo_train: no prompts");
  if (!reward_model.config().reward_head) throw ShapeError("ppo_train: reward model lacks a reward head");
  const ArModel reference = policy;
  const auto& c = policy.config();
  const auto schedule = batch_schedule(prompts.size(), config.ppo_batch, 0, config.ppo_steps, config.seed);
  const std::uint64_t rollout_base = Rng::named(config.seed, "ppo_rollout").key();
  AdamState adam;
  PpoReport report;
  double baseline = 0.0;
  for (std::size_t step = 0; step < schedule.batches.size(); ++step) {
    const auto& idx = schedule.batches[step];
    std::vector<Rollout> rolls(idx.size());
    std::vector<double> reward(idx.size()), kl(idx.size());
    parallel_for(idx.size(), config.workers, [&](std::size_t j) {
      const auto& text = prompts[idx[j]].text;
      const auto y = sample(policy, text, Control::kNone, config.temperature, mix64(mix64(rollout_base, step), j));
      auto& r = rolls[j];
      r.probe = {frame_sequence(c, text, y, Control::kNone)};
      r.actions = static_cast<int>(y.size()) + (static_cast<int>(y.size()) < c.l_ar ? 1 : 0);
      r.old_logp = target_logprobs(policy, r.probe.seq);
      const auto ref_logp = target_logprobs(reference, r.probe.seq);
      double k = 0.0;
      for (int a = 0; a < r.actions; ++a) k += r.old_logp[a] - ref_logp[a];
      kl[j] = k;
      reward[j] = reward_score(reward_model, text, y);
    });
    const double n = static_cast<double>(idx.size());
    const double mean_reward = sum(reward) / n;
    const double mean_kl = sum(kl) / n;
    report.mean_reward.push_back(mean_reward);
    report.mean_kl.push_back(mean_kl);
    if (!std::isfinite(mean_kl) || mean_kl > config.kl_abort) {
      throw NumericError("ppo_train: mean KL to the reference " + std::to_string(mean_kl) + " exceeds " +
                         std::to_string(config.kl_abort) + " nats at step " + std::to_string(step));
    }
    std::vector<double> score(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) score[j] = reward[j] - config.ppo_kl_beta * kl[j];
    const double mean_score = sum(score) / n;
    if (step == 0) baseline = mean_score;
    std::vector<double> adv(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) adv[j] = score[j] - baseline;
    baseline = config.ppo_baseline_decay * baseline + (1.0 - config.ppo_baseline_decay) * mean_score;
    adv = whiten(adv);
    std::vector<Probe> probes;
    int tokens = 0;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      rolls[j].advantage = adv[j];
      probes.push_back(rolls[j].probe);
      tokens += rolls[j].actions;
    }
    const double eps = config.ppo_clip;
    const Objective surrogate = [&](std::span<const ProbeValues> values, std::span<ProbeAdjoint> adjs) {
      double loss = 0.0;
      for (std::size_t j = 0; j < values.size(); ++j) {
        const auto& r = rolls[j];
        for (int a = 0; a < r.actions; ++a) {
          const double ratio = std::exp(values[j].logp[a] - r.old_logp[a]);
          const double unclipped = ratio * r.advantage;
          const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * r.advantage;
          loss -= std::min(unclipped, clipped);
          if (unclipped <= clipped) adjs[j].d_logp[a] = -unclipped / tokens;
        }
      }
      return loss / tokens;
    };
    double last_loss = 0.0;
    for (int e = 0; e < config.ppo_epochs; ++e) {
      auto lg = loss_and_grad(policy, probes, surrogate, config.workers);
      apply_step(policy, lg, adam, config.ppo_lr, config.grad_clip, "ppo_train", step);
      last_loss = lg.loss;
    }
    report.step_loss.push_back(last_loss);
    if (config.log != nullptr) {
      config.log->step(static_cast<int>(step), last_loss, config.ppo_lr, {{"mean_reward", mean_reward}, {"mean_kl", mean_kl}});
    }
  }
  report.steps = static_cast<int>(schedule.batches.size());
  return report;
}

// ---- best of N -----------------------------------------------------------------

BonResult bon_select(const ArModel& policy, const ArModel& reward_model, std::span<const int> text, int n,
                     std::uint64_t seed, double temperature) {
  if (n < 1) throw ConfigError("bon_select: N must be >= 1");
  BonResult out;
  std::vector<TokenSeq> pool(n);
  for (int j = 0; j < n; ++j) {
    pool[j] = sample(policy, text, Control::kNone, temperature, mix64(seed, static_cast<std::uint64_t>(j)));
    out.rewards.push_back(reward_score(reward_model, text, pool[j]));
  }
  out.index = static_cast<int>(std::max_element(out.rewards.begin(), out.rewards.end()) - out.rewards.begin());
  out.y = pool[out.index];
  return out;
}

// ---- continue SFT -------------------------------------------------------------------

std::vector<SftExample> golden_examples(const PreferenceDataset& data) {
  std::vector<SftExample> out;
  out.reserve(data.size());
  for (const auto& t : data.triples) out.push_back({t.text, t.y_g, Control::kNone});
  return out;
}

TrainReport continue_sft(ArModel& policy, const PreferenceDataset& data, const AlignConfig& config) {
  config.validate();
  require_data(data, "continue_sft");
  TrainOptions opt;
  opt.epochs = config.epochs;
  opt.steps = config.steps;
  opt.lr = config.lr;
  opt.batch = config.batch;
  opt.seed = config.seed;
  opt.workers = config.workers;
  opt.grad_clip = config.grad_clip;
  opt.log = config.log;
  return sft_train(policy, golden_examples(data), opt);
}

}  // namespace prefcodec
