#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "grad_check.hpp"
#include "prefcodec/ar_policy.hpp"
#include "prefcodec/error.hpp"
#include "prefcodec/params.hpp"
#include "prefcodec/rng.hpp"

namespace prefcodec {
namespace {

ArConfig micro_config(double init_std = 0.02) {
  ArConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ffn = 32;
  c.max_context = 16;
  c.v_text = 2;
  c.k_ar = 4;
  c.l_text = 2;
  c.l_ar = 2;
  c.init_std = init_std;
  c.param_seed = 3;
  return c;
}

FramedSequence some_sequence(const ArConfig& c) {
  return frame_sequence(c, std::vector<int>{1, 0}, std::vector<int>{2, 3}, Control::kNone);
}

TEST(ArConfig, RejectsBadHeadsAndContext) {
  ArConfig c = micro_config();
  c.n_heads = 3;
  EXPECT_THROW(ArModel{c}, ConfigError);
  c = micro_config();
  c.max_context = 6;
  EXPECT_THROW(ArModel{c}, ConfigError);
}

TEST(ArModel, ParameterCountIsAPureFunctionOfConfig) {
  const ArModel a(micro_config()), b(micro_config());
  EXPECT_EQ(a.params().size(), b.params().size());
  EXPECT_TRUE(std::equal(a.params().begin(), a.params().end(), b.params().begin()));
  EXPECT_TRUE(all_finite(a.params()));
}

TEST(FrameSequence, LayoutAndMask) {
  const ArConfig c = micro_config();
  const auto seq = frame_sequence(c, std::vector<int>{1, 0}, std::vector<int>{2, 3}, Control::kGood);
  const std::vector<int> expected{c.good(), c.bos(), 1, 0, c.sep(), c.ar_token(2), c.ar_token(3), c.eos()};
  EXPECT_EQ(seq.tokens, expected);
  EXPECT_EQ(seq.first_target, 4);
  EXPECT_EQ(seq.num_targets, 3);
  EXPECT_EQ(seq.eos_position(), 7);
  EXPECT_FALSE(seq.in_loss_mask(3));
  EXPECT_TRUE(seq.in_loss_mask(6));
  EXPECT_FALSE(seq.in_loss_mask(7));
  EXPECT_THROW(frame_sequence(c, std::vector<int>{2}, {}, Control::kNone), ShapeError);
}

TEST(ForwardLogits, CausalPrefixIsBitIdentical) {
  const ArModel m(micro_config(0.3));
  auto tokens = some_sequence(m.config()).tokens;
  const auto base = forward_logits(m, tokens);
  const int V = m.config().vocab_size();
  for (std::size_t j = 1; j < tokens.size(); ++j) {
    auto changed = tokens;
    changed[j] = (changed[j] + 1) % V;
    const auto out = forward_logits(m, changed);
    for (std::size_t i = 0; i < j * V; ++i) ASSERT_EQ(out[i], base[i]) << "position " << i / V << " moved by " << j;
  }
}

TEST(ForwardLogits, RowsNormalizeAndRepeat) {
  const ArModel m(micro_config(0.3));
  const auto tokens = some_sequence(m.config()).tokens;
  const auto a = forward_logits(m, tokens);
  EXPECT_EQ(a, forward_logits(m, tokens));
  const int V = m.config().vocab_size();
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    std::vector<double> row(a.begin() + t * V, a.begin() + (t + 1) * V);
    kernels::softmax_inplace(row.data(), V);
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(ForwardLogits, OverlengthIsShapeError) {
  const ArModel m(micro_config());
  EXPECT_THROW(forward_logits(m, std::vector<int>(17, 0)), ShapeError);
  EXPECT_THROW(forward_logits(m, std::vector<int>{m.config().vocab_size()}), ShapeError);
}

TEST(SeqLogprob, ContinuationsEnumerateToOne) {
  // Every continuation of length l_ar + 1 over the full vocabulary, scored by
  // the same chain of conditionals seq_logprob sums.
  const ArModel m(micro_config(0.3));
  const auto& c = m.config();
  const int V = c.vocab_size();
  FramedSequence seq = some_sequence(c);
  double total = 0.0;
  for (int a = 0; a < V; ++a)
    for (int b = 0; b < V; ++b)
      for (int e = 0; e < V; ++e) {
        seq.tokens[seq.first_target + 1] = a;
        seq.tokens[seq.first_target + 2] = b;
        seq.tokens[seq.first_target + 3] = e;
        const auto lp = target_logprobs(m, seq);
        total += std::exp(std::accumulate(lp.begin(), lp.end(), 0.0));
      }
  EXPECT_NEAR(total, 1.0, 1e-8);
}

TEST(SeqLogprob, ZeroHeadGivesUniform) {
  ArModel m(micro_config(0.3));
  std::ranges::fill(m.tensor("head.w"), 0.0);
  std::ranges::fill(m.tensor("head.b"), 0.0);
  const double V = m.config().vocab_size();
  const double lp = seq_logprob(m, std::vector<int>{0, 1}, std::vector<int>{1, 1}, Control::kBad);
  EXPECT_NEAR(lp, 3 * std::log(1.0 / V), 1e-12);
}

TEST(SeqLogprob, IsAdditiveAndNonPositive) {
  const ArModel m(micro_config(0.3));
  const auto seq = some_sequence(m.config());
  const auto lp = target_logprobs(m, seq);
  ASSERT_EQ(lp.size(), 3u);
  for (double v : lp) EXPECT_LE(v, 0.0);
  EXPECT_DOUBLE_EQ(seq_logprob(m, std::vector<int>{1, 0}, std::vector<int>{2, 3}, Control::kNone),
                   std::accumulate(lp.begin(), lp.end(), 0.0));
}

TEST(Sample, GreedyIsDeterministicAndArgmax) {
  const ArModel m(micro_config(0.5));
  const auto& c = m.config();
  const std::vector<int> text{1, 1};
  const auto y = sample(m, text, Control::kNone, 0.0, 1);
  EXPECT_EQ(y, sample(m, text, Control::kNone, 0.0, 99));
  // Position-wise argmax of the restricted logits along the generated prefix.
  auto seq = frame_sequence(c, text, y, Control::kNone);
  const auto logits = forward_logits(m, seq.tokens);
  const int V = c.vocab_size();
  for (int j = 0; j < seq.num_targets && j <= static_cast<int>(y.size()); ++j) {
    if (j == static_cast<int>(y.size()) && j == c.l_ar) break;  // capped, no EOS decision
    const double* row = &logits[static_cast<std::size_t>(seq.first_target + j) * V];
    int best = c.ar_token(0);
    for (int k = 1; k < c.k_ar; ++k)
      if (row[c.ar_token(k)] > row[best]) best = c.ar_token(k);
    if (row[c.eos()] > row[best]) best = c.eos();
    EXPECT_EQ(best, seq.tokens[seq.first_target + j + 1]);
  }
}

TEST(Sample, GreedyBeatsSingleTokenPerturbation) {
  const ArModel m(micro_config(0.5));
  const auto& c = m.config();
  std::vector<int> text{0, 0};
  TokenSeq y;
  for (int code = 0; code < 4 && y.empty(); ++code) {
    text = {code % 2, code / 2};
    y = sample(m, text, Control::kNone, 0.0, 1);
  }
  ASSERT_FALSE(y.empty());
  const auto base = target_logprobs(m, frame_sequence(c, text, y, Control::kNone));
  for (std::size_t i = 0; i < y.size(); ++i)
    for (int k = 0; k < c.k_ar; ++k) {
      if (k == y[i]) continue;
      auto z = y;
      z[i] = k;
      const auto lp = target_logprobs(m, frame_sequence(c, text, z, Control::kNone));
      EXPECT_GE(base[i], lp[i]);
    }
}

TEST(Sample, TemperatureOneMatchesSoftmax) {
  const ArModel m(micro_config(0.5));
  const auto& c = m.config();
  const std::vector<int> text{1, 0};
  const auto p = next_token_distribution(m, text, {}, Control::kNone, 1.0);
  std::vector<int> counts(c.k_ar + 1, 0);
  const int draws = 20000;
  for (int n = 0; n < draws; ++n) {
    const auto y = sample(m, text, Control::kNone, 1.0, mix64(17, n));
    ++counts[y.empty() ? c.k_ar : y[0]];
  }
  double tv = 0.0;
  for (int k = 0; k <= c.k_ar; ++k) tv += std::abs(counts[k] / double(draws) - p[k]);
  EXPECT_LT(0.5 * tv, 0.02);
  EXPECT_EQ(sample(m, text, Control::kNone, 1.0, 5), sample(m, text, Control::kNone, 1.0, 5));
}

TEST(Sample, StopsAtLengthCap) {
  const ArModel m(micro_config(0.5));
  for (int n = 0; n < 50; ++n) EXPECT_LE(sample(m, std::vector<int>{1, 1}, Control::kGood, 1.0, n).size(), 2u);
}

TEST(PooledRep, ConstantHiddenGivesConstant) {
  ArModel m(micro_config(0.3));
  std::ranges::fill(m.tensor("ln_f.gain"), 0.0);
  auto bias = m.tensor("ln_f.bias");
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = 0.1 * static_cast<double>(i);
  const auto rep = pooled_rep(m, std::vector<int>{0, 1}, std::vector<int>{3, 2});
  for (std::size_t i = 0; i < rep.size(); ++i) EXPECT_DOUBLE_EQ(rep[i], 0.1 * static_cast<double>(i));
}

TEST(PooledRep, SingletonEqualsHiddenRowAndEmptyRejected) {
  const ArModel m(micro_config(0.3));
  const auto& c = m.config();
  const std::vector<int> text{0, 1};
  const auto rep = pooled_rep(m, text, std::vector<int>{2});
  const auto seq = frame_sequence(c, text, std::vector<int>{2}, Control::kNone);
  const auto hidden = final_hidden(m, seq.tokens);
  for (int i = 0; i < c.d_model; ++i)
    EXPECT_EQ(rep[i], hidden[static_cast<std::size_t>(seq.first_target + 1) * c.d_model + i]);
  EXPECT_THROW(pooled_rep(m, text, {}), ShapeError);
}

TEST(PooledRep, SensitiveToTokenOrderAfterTraining) {
  ArModel m(micro_config());
  std::vector<SftExample> data{{{0, 1}, {1, 3}, Control::kNone}, {{1, 0}, {2, 0}, Control::kNone}};
  TrainOptions opt;
  opt.steps = 30;
  opt.batch = 2;
  sft_train(m, data, opt);
  const auto a = pooled_rep(m, std::vector<int>{0, 1}, std::vector<int>{1, 3});
  const auto b = pooled_rep(m, std::vector<int>{0, 1}, std::vector<int>{3, 1});
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(LossAndGrad, SftMatchesFiniteDifferences) {
  ArModel m(micro_config(0.3));
  const std::vector<SftExample> batch{{{0, 1}, {1, 3}, Control::kNone},
                                      {{1, 1}, {2}, Control::kGood},
                                      {{1, 0}, {0, 0}, Control::kBad}};
  const auto probes = sft_probes(m.config(), batch);
  const auto lg = loss_and_grad(m, probes, nll_objective());
  ASSERT_EQ(lg.grad.size(), m.params().size());
  const auto r = testing::grad_check(m.params(), lg.grad, [&] { return loss_and_grad(m, probes, nll_objective()).loss; });
  EXPECT_LT(r.max_rel_err, 1e-4) << "worst coordinate " << r.worst_index;
}

TEST(LossAndGrad, ConstantObjectiveHasZeroGradient) {
  const ArModel m(micro_config(0.3));
  const std::vector<Probe> probes{{some_sequence(m.config()), false}};
  const auto lg = loss_and_grad(m, probes, [](auto, auto) { return 2.5; });
  EXPECT_EQ(lg.loss, 2.5);
  for (double g : lg.grad) EXPECT_EQ(g, 0.0);
}

TEST(LossAndGrad, ScalingTheLossScalesTheGradient) {
  const ArModel m(micro_config(0.3));
  const std::vector<Probe> probes{{some_sequence(m.config()), false}};
  const auto base = loss_and_grad(m, probes, nll_objective());
  const auto nll = nll_objective();
  const auto tripled = loss_and_grad(m, probes, [&](std::span<const ProbeValues> v, std::span<ProbeAdjoint> a) {
    const double l = nll(v, a);
    for (auto& adj : a)
      for (double& d : adj.d_logp) d *= 3.0;
    return 3.0 * l;
  });
  EXPECT_NEAR(tripled.loss, 3.0 * base.loss, 1e-12);
  for (std::size_t i = 0; i < base.grad.size(); ++i) EXPECT_NEAR(tripled.grad[i], 3.0 * base.grad[i], 1e-12);
}

TEST(LossAndGrad, WorkerCountDoesNotChangeBits) {
  const ArModel m(micro_config(0.3));
  std::vector<SftExample> batch;
  for (int i = 0; i < 11; ++i) batch.push_back({{i % 2, 1}, {i % 4, (i + 1) % 4}, Control::kNone});
  const auto probes = sft_probes(m.config(), batch);
  const auto one = loss_and_grad(m, probes, nll_objective(), 1);
  const auto three = loss_and_grad(m, probes, nll_objective(), 3);
  EXPECT_EQ(one.loss, three.loss);
  EXPECT_EQ(one.grad, three.grad);
}

TEST(LossAndGrad, NonFiniteForwardIsNumericError) {
  ArModel m(micro_config());
  m.tensor("head.b")[0] = std::numeric_limits<double>::quiet_NaN();
  const std::vector<Probe> probes{{some_sequence(m.config()), false}};
  EXPECT_THROW(loss_and_grad(m, probes, nll_objective()), NumericError);
}

TEST(AdamStep, ZeroGradientLeavesParams) {
  std::vector<double> p{1.0, -2.0, 3.0};
  AdamState s;
  adam_step(p, std::vector<double>(3, 0.0), s, 0.1);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(AdamStep, FirstStepMovesBySignTimesLr) {
  std::vector<double> p{1.0, -2.0, 3.0};
  const std::vector<double> g{0.5, -3.0, 0.2};
  AdamState s;
  adam_step(p, g, s, 0.01);
  EXPECT_NEAR(p[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p[1], -2.0 + 0.01, 1e-9);
  EXPECT_NEAR(p[2], 3.0 - 0.01, 1e-9);
}

TEST(AdamStep, DeterministicAndShapeChecked) {
  std::vector<double> a{1, 2}, b{1, 2};
  AdamState sa, sb;
  for (int i = 0; i < 5; ++i) {
    adam_step(a, std::vector<double>{0.3, -0.1 * i}, sa, 0.01);
    adam_step(b, std::vector<double>{0.3, -0.1 * i}, sb, 0.01);
  }
  EXPECT_EQ(a, b);
  EXPECT_THROW(adam_step(a, std::vector<double>{1.0}, sa, 0.01), ShapeError);
}

TEST(BatchSchedule, ReproducibleAndCoversEveryIndex) {
  const auto a = batch_schedule(10, 4, 2, 0, 5);
  const auto b = batch_schedule(10, 4, 2, 0, 5);
  EXPECT_EQ(a.batches, b.batches);
  ASSERT_EQ(a.batches.size(), 6u);
  std::vector<int> seen(10, 0);
  for (int i = 0; i < 3; ++i)
    for (auto k : a.batches[i]) ++seen[k];
  EXPECT_EQ(seen, std::vector<int>(10, 1));
  EXPECT_NE(batch_schedule(10, 4, 2, 0, 6).batches, a.batches);
  EXPECT_EQ(batch_schedule(10, 4, 1, 7, 5).batches.size(), 7u);
}

TEST(SftTrain, MemorizesSingleExample) {
  ArModel m(micro_config());
  const std::vector<SftExample> one{{{1, 0}, {3, 1}, Control::kNone}};
  TrainOptions opt;
  opt.steps = 200;
  opt.batch = 1;
  opt.lr = 3e-3;
  const auto report = sft_train(m, one, opt);
  const double nll = -seq_logprob(m, one[0].text, one[0].y, Control::kNone) / 3.0;
  EXPECT_LT(nll, 0.1);
  EXPECT_LT(report.step_loss.back(), 0.9 * report.step_loss.front());
  EXPECT_TRUE(all_finite(m.params()));
}

TEST(SftTrain, ReproducibleTrajectory) {
  std::vector<SftExample> data;
  for (int i = 0; i < 9; ++i) data.push_back({{i % 2, (i / 2) % 2}, {i % 4, (i * 3) % 4}, Control::kNone});
  TrainOptions opt;
  opt.epochs = 2;
  opt.batch = 4;
  ArModel a(micro_config()), b(micro_config());
  const auto ra = sft_train(a, data, opt);
  const auto rb = sft_train(b, data, opt);
  EXPECT_EQ(ra.step_loss, rb.step_loss);
  EXPECT_TRUE(std::equal(a.params().begin(), a.params().end(), b.params().begin()));
  EXPECT_EQ(ra.epoch_loss.size(), 2u);
}

}  // namespace
}  // namespace prefcodec
