#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "prefcodec/rng.hpp"

namespace prefcodec::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
};

// Central differences on `samples` random coordinates. Relative error uses
// max(|analytic|, |numeric|, floor) so coordinates with vanishing gradients
// are judged on absolute error.
inline GradCheckResult grad_check(std::span<double> params, std::span<const double> analytic,
                                  const std::function<double()>& loss, int samples = 200, double h = 1e-5,
                                  std::uint64_t seed = 7, double floor = 1e-5) {
  GradCheckResult r;
  Rng rng = Rng::named(seed, "grad_check");
  for (int s = 0; s < samples; ++s) {
    const std::size_t i = rng.below(params.size());
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss();
    params[i] = saved - h;
    const double down = loss();
    params[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double err =
        std::abs(numeric - analytic[i]) / std::max({std::abs(numeric), std::abs(analytic[i]), floor});
    if (err > r.max_rel_err) {
      r.max_rel_err = err;
      r.worst_index = i;
    }
  }
  return r;
}

}  // namespace prefcodec::testing
