#pragma once

#include <span>
#include <vector>

#include "prefcodec/world.hpp"

namespace prefcodec {

// Levenshtein distance with unit insert/delete/substitute costs.
int edit_distance(std::span<const int> a, std::span<const int> b);

// Edit distance over the reference length; may exceed 1 with insertions.
// Throws StatisticsError on an empty reference.
double ter(std::span<const int> hypothesis, std::span<const int> reference);

// Token error rate of a generated first layer: edit distance between its
// transcription and the input text, over the text length. A first layer whose
// length is not a multiple of the expansion ratio is truncated to the last
// whole block; missing symbols count as deletions.
double token_error_rate(const World& world, int speaker, std::span<const int> text, std::span<const int> layer1);

// Cosine between the stack's speaker embedding and the speaker's reference;
// 0 for an empty stack.
double speaker_similarity(const World& world, int speaker, const LayeredTokens& stack);

double cosine(std::span<const double> a, std::span<const double> b);

struct Score {
  double ter = 0.0;
  double sim = 0.0;
};

enum class Verdict { kWin, kTie, kLose };

// Deterministic preference proxy: lower TER wins (margin 1e-9); at equal TER a
// SIM lead above 0.01 wins; otherwise a tie. Verdict is for `a`.
Verdict oracle_judge(const Score& a, const Score& b);
const char* verdict_name(Verdict v);

}  // namespace prefcodec
