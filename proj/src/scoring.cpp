#include "prefcodec/scoring.hpp"

#include <algorithm>
#include <cmath>

#include "prefcodec/error.hpp"

namespace prefcodec {

int edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double ter(std::span<const int> hypothesis, std::span<const int> reference) {
  if (reference.empty()) throw StatisticsError("ter: empty reference");
  return static_cast<double>(edit_distance(hypothesis, reference)) / static_cast<double>(reference.size());
}

double token_error_rate(const World& world, int speaker, std::span<const int> text, std::span<const int> layer1) {
  const std::size_t r = static_cast<std::size_t>(world.config().expansion);
  const auto whole = layer1.first(layer1.size() - layer1.size() % r);
  return ter(world.transcribe(speaker, whole), text);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine of vectors with different sizes");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

double speaker_similarity(const World& world, int speaker, const LayeredTokens& stack) {
  if (stack.length() == 0) return 0.0;  // an empty generation carries no speaker evidence
  return cosine(world.speaker_embed(stack), world.speaker_ref(speaker));
}


Verdict oracle_judge(const Score& a, const Score& b) {
  if (a.ter < b.ter - 1e-9) return Verdict::kWin;
  if (b.ter < a.ter - 1e-9) return Verdict::kLose;
  if (a.sim > b.sim + 0.01) return Verdict::kWin;
  if (b.sim > a.sim + 0.01) return Verdict::kLose;
  return Verdict::kTie;
}

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::kWin:
      return "win";
    case Verdict::kLose:
      return "lose";
    case Verdict::kTie:
      break;
  }
  return "tie";
}

}  // namespace prefcodec
