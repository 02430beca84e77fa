#pragma once

#include <optional>
#include <vector>

#include "prefcodec/ar_policy.hpp"
#include "prefcodec/nar_model.hpp"
#include "prefcodec/preference_data.hpp"
#include "prefcodec/world.hpp"

namespace prefcodec::testing {

// Small world shared by the alignment, data and evaluation tests.
inline WorldConfig small_world_config() {
  WorldConfig w;
  w.v_text = 4;
  w.l_text = 3;
  w.k_ar = 6;
  w.k_nar = 6;
  w.num_layers = 3;
  w.expansion = 2;
  w.speakers = 2;
  w.d_emb = 8;
  w.nar_palette = 3;
  w.world_seed = 5;
  return w;
}

inline ArConfig small_ar_config(const WorldConfig& w, double init_std = 0.3, std::uint64_t seed = 3) {
  ArConfig c = ArConfig::for_world(w);
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ffn = 32;
  c.max_context = 16;
  c.init_std = init_std;
  c.param_seed = seed;
  return c;
}

inline NarConfig small_nar_config(const WorldConfig& w) {
  NarConfig c = NarConfig::for_world(w);
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ffn = 32;
  c.prompt_len = 2;
  c.decode_steps = 2;
  c.init_std = 0.1;
  return c;
}

}  // namespace prefcodec::testing
