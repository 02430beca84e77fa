#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "prefcodec/params.hpp"
#include "prefcodec/rng.hpp"

namespace prefcodec {

// Pre-norm transformer stack shared by the AR policy (causal) and the NAR
// model (bidirectional). Inputs are already-embedded rows; the output is the
// final layer-normalized hidden state per row.
struct CoreDims {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int d_ffn = 256;
  bool causal = true;

  int head_dim() const { return d_model / n_heads; }
};

struct BlockIndex {
  std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
};

struct CoreIndex {
  std::vector<BlockIndex> blocks;
  std::size_t lnf_g = 0, lnf_b = 0;
};

CoreIndex add_core_params(ParamLayout& layout, const CoreDims& dims, const std::string& prefix);
// Gains to 1, biases to 0, matrices to N(0, init_std^2).
void init_core_params(std::span<double> params, const ParamLayout& layout, const CoreIndex& index,
                      const CoreDims& dims, Rng& rng, double init_std);
void init_normal(std::span<double> params, const TensorInfo& tensor, Rng& rng, double stddev);

struct LayerTape {
  std::vector<double> x_in, ln1, ln1_mean, ln1_rstd, qkv, probs, att, x_mid, ln2, ln2_mean, ln2_rstd, fc_pre,
      fc_act;
};

struct CoreTape {
  int rows = 0;
  std::vector<LayerTape> layers;
  std::vector<double> x_out, lnf_mean, lnf_rstd, hidden;
};

void core_forward(const double* params, const CoreIndex& index, const CoreDims& dims, int rows,
                  std::span<const double> x0, CoreTape& tape);

// Accumulates parameter gradients into grad and writes d(loss)/d(x0) into d_x0.
void core_backward(const double* params, const CoreIndex& index, const CoreDims& dims, const CoreTape& tape,
                   std::span<const double> d_hidden, double* grad, std::span<double> d_x0);

// Key/value rows of every processed position, per layer, for causal decoding.
struct DecodeCache {
  std::vector<std::vector<double>> keys, values;
  int length = 0;
};

// Processes one more row causally. Produces exactly the bits core_forward
// would produce for that row given the same prefix.
void core_step(const double* params, const CoreIndex& index, const CoreDims& dims, std::span<const double> x_row,
               DecodeCache& cache, std::span<double> hidden_row);

namespace kernels {

// y = b + x W for one row; W is [in][out] row-major.
void linear_row(const double* x, int in, const double* w, const double* b, int out, double* y);
// dx += dy W^T, dW += x^T dy, db += dy for one row. dx may be null.
void linear_backward_row(const double* x, const double* dy, const double* w, int in, int out, double* dx,
                         double* dw, double* db);
double dot(const double* a, const double* b, int n);
void softmax_inplace(double* v, int n);
double log_sum_exp(const double* v, int n);

}  // namespace kernels

}  // namespace prefcodec
