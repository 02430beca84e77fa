#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace prefcodec {

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Named tensors packed into one flat parameter vector, in registration order.
class ParamLayout {
 public:
  std::size_t add(std::string name, std::vector<int> shape);
  const TensorInfo& find(std::string_view name) const;
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::size_t size() const { return size_; }
  bool operator==(const ParamLayout& other) const;

 private:
  std::vector<TensorInfo> tensors_;
  std::size_t size_ = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

// One bias-corrected Adam update in place. Throws ShapeError on length mismatch.
void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state, double lr,
               const AdamHyper& hyper = {});

// Rescales grad to at most max_norm (L2); returns the norm before clipping.
double clip_grad_norm(std::span<double> grad, double max_norm);

bool all_finite(std::span<const double> v);

}  // namespace prefcodec
