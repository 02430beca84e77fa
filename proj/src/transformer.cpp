#include "prefcodec/transformer.hpp"

#include <algorithm>
#include <cmath>

namespace prefcodec {

namespace kernels {

void linear_row(const double* x, int in, const double* w, const double* b, int out, double* y) {
  for (int o = 0; o < out; ++o) y[o] = b[o];
  for (int k = 0; k < in; ++k) {
    const double xk = x[k];
    const double* wk = w + static_cast<std::size_t>(k) * out;
#pragma omp simd
    for (int o = 0; o < out; ++o) y[o] += xk * wk[o];
  }
}

double dot(const double* a, const double* b, int n) {
  double s = 0.0;
#pragma omp simd reduction(+ : s)
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void linear_backward_row(const double* x, const double* dy, const double* w, int in, int out, double* dx,
                         double* dw, double* db) {
  for (int k = 0; k < in; ++k) {
    const double* wk = w + static_cast<std::size_t>(k) * out;
    if (dx != nullptr) dx[k] += dot(dy, wk, out);
    const double xk = x[k];
    double* dwk = dw + static_cast<std::size_t>(k) * out;
#pragma omp simd
    for (int o = 0; o < out; ++o) dwk[o] += xk * dy[o];
  }
#pragma omp simd
  for (int o = 0; o < out; ++o) db[o] += dy[o];
}

void softmax_inplace(double* v, int n) {
  const double m = *std::max_element(v, v + n);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    v[i] = std::exp(v[i] - m);
    z += v[i];
  }
  for (int i = 0; i < n; ++i) v[i] /= z;
}

double log_sum_exp(const double* v, int n) {
  const double m = *std::max_element(v, v + n);
  double z = 0.0;
  for (int i = 0; i < n; ++i) z += std::exp(v[i] - m);
  return m + std::log(z);
}

}  // namespace kernels

namespace {

using kernels::dot;
using kernels::linear_backward_row;
using kernels::linear_row;

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

void layernorm_row(const double* x, const double* g, const double* b, int n, double* y, double* mean_out,
                   double* rstd_out) {
  double mean = 0.0;
#pragma omp simd reduction(+ : mean)
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= n;
  double var = 0.0;
#pragma omp simd reduction(+ : var)
  for (int i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= n;
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (int i = 0; i < n; ++i) y[i] = (x[i] - mean) * rstd * g[i] + b[i];
  *mean_out = mean;
  *rstd_out = rstd;
}

// dx += LN'(x)^T dy; dg, db accumulate.
void layernorm_backward_row(const double* x, double mean, double rstd, const double* g, const double* dy, int n,
                            double* dx, double* dg, double* db) {
  double sum_dxhat = 0.0;
  double sum_dxhat_xhat = 0.0;
  for (int i = 0; i < n; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double dxhat = dy[i] * g[i];
    sum_dxhat += dxhat;
    sum_dxhat_xhat += dxhat * xhat;
    dg[i] += dy[i] * xhat;
    db[i] += dy[i];
  }
  const double inv_n = 1.0 / n;
  for (int i = 0; i < n; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double dxhat = dy[i] * g[i];
    dx[i] += rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// One query row against n_ctx key/value rows (given by base pointer + stride).
void attend_row(const double* q, const double* keys, const double* values, std::size_t stride, int n_ctx, int hd,
                double scale, double* probs, double* out) {
  for (int j = 0; j < n_ctx; ++j) probs[j] = dot(q, keys + j * stride, hd) * scale;
  kernels::softmax_inplace(probs, n_ctx);
  for (int c = 0; c < hd; ++c) out[c] = 0.0;
  for (int j = 0; j < n_ctx; ++j) {
    const double p = probs[j];
    const double* v = values + j * stride;
#pragma omp simd
    for (int c = 0; c < hd; ++c) out[c] += p * v[c];
  }
}

// Feed-forward half of a block for one row: x_out = x_mid + proj(gelu(fc(ln2(x_mid)))).
void mlp_row(const double* p, const BlockIndex& bi, const CoreDims& dims, const double* x_mid, double* ln2,
             double* mean, double* rstd, double* fc_pre, double* fc_act, double* x_out) {
  const int d = dims.d_model;
  const int f = dims.d_ffn;
  layernorm_row(x_mid, p + bi.ln2_g, p + bi.ln2_b, d, ln2, mean, rstd);
  linear_row(ln2, d, p + bi.w_fc, p + bi.b_fc, f, fc_pre);
  for (int i = 0; i < f; ++i) fc_act[i] = gelu(fc_pre[i]);
  linear_row(fc_act, f, p + bi.w_proj, p + bi.b_proj, d, x_out);
  for (int i = 0; i < d; ++i) x_out[i] += x_mid[i];
}

}  // namespace

CoreIndex add_core_params(ParamLayout& layout, const CoreDims& dims, const std::string& prefix) {
  const int d = dims.d_model;
  const int f = dims.d_ffn;
  CoreIndex idx;
  for (int l = 0; l < dims.n_layers; ++l) {
    const std::string p = prefix + "block" + std::to_string(l) + ".";
    BlockIndex b{};
    b.ln1_g = layout.add(p + "ln1.gain", {d});
    b.ln1_b = layout.add(p + "ln1.bias", {d});
    b.w_qkv = layout.add(p + "attn.w_qkv", {d, 3 * d});
    b.b_qkv = layout.add(p + "attn.b_qkv", {3 * d});
    b.w_o = layout.add(p + "attn.w_out", {d, d});
    b.b_o = layout.add(p + "attn.b_out", {d});
    b.ln2_g = layout.add(p + "ln2.gain", {d});
    b.ln2_b = layout.add(p + "ln2.bias", {d});
    b.w_fc = layout.add(p + "mlp.w_fc", {d, f});
    b.b_fc = layout.add(p + "mlp.b_fc", {f});
    b.w_proj = layout.add(p + "mlp.w_proj", {f, d});
    b.b_proj = layout.add(p + "mlp.b_proj", {d});
    idx.blocks.push_back(b);
  }
  idx.lnf_g = layout.add(prefix + "ln_f.gain", {d});
  idx.lnf_b = layout.add(prefix + "ln_f.bias", {d});
  return idx;
}

void init_normal(std::span<double> params, const TensorInfo& tensor, Rng& rng, double stddev) {
  for (std::size_t i = 0; i < tensor.size; ++i) params[tensor.offset + i] = stddev * rng.normal();
}

void init_core_params(std::span<double> params, const ParamLayout& layout, const CoreIndex& index,
                      const CoreDims& dims, Rng& rng, double init_std) {
  (void)dims;
  auto fill = [&](std::size_t off, std::size_t n, double v) { std::fill_n(params.begin() + off, n, v); };
  // Core tensors are registered contiguously, from the first block's ln1 to ln_f.
  const std::size_t first = index.blocks.empty() ? index.lnf_g : index.blocks.front().ln1_g;
  for (const auto& t : layout.tensors()) {
    if (t.offset < first || t.offset > index.lnf_b) continue;
    const bool is_matrix = t.shape.size() == 2;
    if (is_matrix) {
      init_normal(params, t, rng, init_std);
    } else if (t.name.ends_with(".gain")) {
      fill(t.offset, t.size, 1.0);
    } else {
      fill(t.offset, t.size, 0.0);
    }
  }
}

void core_forward(const double* p, const CoreIndex& index, const CoreDims& dims, int rows,
                  std::span<const double> x0, CoreTape& tape) {
  const int d = dims.d_model;
  const int f = dims.d_ffn;
  const int h = dims.n_heads;
  const int hd = dims.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t T = static_cast<std::size_t>(rows);
  tape.rows = rows;
  tape.layers.resize(index.blocks.size());
  std::vector<double> x(x0.begin(), x0.end());
  for (std::size_t l = 0; l < index.blocks.size(); ++l) {
    const BlockIndex& bi = index.blocks[l];
    LayerTape& lt = tape.layers[l];
    lt.x_in = x;
    lt.ln1.resize(T * d);
    lt.ln1_mean.resize(T);
    lt.ln1_rstd.resize(T);
    lt.qkv.resize(T * 3 * d);
    lt.probs.assign(static_cast<std::size_t>(h) * T * T, 0.0);
    lt.att.resize(T * d);
    lt.x_mid.resize(T * d);
    lt.ln2.resize(T * d);
    lt.ln2_mean.resize(T);
    lt.ln2_rstd.resize(T);
    lt.fc_pre.resize(T * f);
    lt.fc_act.resize(T * f);
    for (std::size_t t = 0; t < T; ++t) {
      layernorm_row(&x[t * d], p + bi.ln1_g, p + bi.ln1_b, d, &lt.ln1[t * d], &lt.ln1_mean[t], &lt.ln1_rstd[t]);
      linear_row(&lt.ln1[t * d], d, p + bi.w_qkv, p + bi.b_qkv, 3 * d, &lt.qkv[t * 3 * d]);
    }
    const std::size_t stride = 3 * static_cast<std::size_t>(d);
    for (std::size_t t = 0; t < T; ++t) {
      const int n_ctx = dims.causal ? static_cast<int>(t) + 1 : rows;
      for (int hh = 0; hh < h; ++hh) {
        attend_row(&lt.qkv[t * stride + hh * hd], &lt.qkv[d + hh * hd], &lt.qkv[2 * d + hh * hd], stride, n_ctx, hd,
                   scale, &lt.probs[(hh * T + t) * T], &lt.att[t * d + hh * hd]);
      }
      linear_row(&lt.att[t * d], d, p + bi.w_o, p + bi.b_o, d, &lt.x_mid[t * d]);
      for (int i = 0; i < d; ++i) lt.x_mid[t * d + i] += x[t * d + i];
      mlp_row(p, bi, dims, &lt.x_mid[t * d], &lt.ln2[t * d], &lt.ln2_mean[t], &lt.ln2_rstd[t], &lt.fc_pre[t * f],
              &lt.fc_act[t * f], &x[t * d]);
    }
  }
  tape.x_out = x;
  tape.hidden.resize(T * d);
  tape.lnf_mean.resize(T);
  tape.lnf_rstd.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    layernorm_row(&x[t * d], p + index.lnf_g, p + index.lnf_b, d, &tape.hidden[t * d], &tape.lnf_mean[t],
                  &tape.lnf_rstd[t]);
  }
}

void core_backward(const double* p, const CoreIndex& index, const CoreDims& dims, const CoreTape& tape,
                   std::span<const double> d_hidden, double* grad, std::span<double> d_x0) {
  const int d = dims.d_model;
  const int f = dims.d_ffn;
  const int h = dims.n_heads;
  const int hd = dims.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t T = static_cast<std::size_t>(tape.rows);

  std::vector<double> dx(T * d, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    layernorm_backward_row(&tape.x_out[t * d], tape.lnf_mean[t], tape.lnf_rstd[t], p + index.lnf_g,
                           &d_hidden[t * d], d, &dx[t * d], grad + index.lnf_g, grad + index.lnf_b);
  }

  std::vector<double> d_mid(T * d), d_fc(f), d_ln(d), d_att(T * d), d_qkv(T * 3 * d), d_prob(T);
  for (std::size_t l = index.blocks.size(); l-- > 0;) {
    const BlockIndex& bi = index.blocks[l];
    const LayerTape& lt = tape.layers[l];

    // MLP half: x_out = x_mid + proj(gelu(fc(ln2(x_mid)))).
    d_mid = dx;
    for (std::size_t t = 0; t < T; ++t) {
      std::fill(d_fc.begin(), d_fc.end(), 0.0);
      linear_backward_row(&lt.fc_act[t * f], &dx[t * d], p + bi.w_proj, f, d, d_fc.data(), grad + bi.w_proj,
                          grad + bi.b_proj);
      for (int i = 0; i < f; ++i) d_fc[i] *= gelu_grad(lt.fc_pre[t * f + i]);
      std::fill(d_ln.begin(), d_ln.end(), 0.0);
      linear_backward_row(&lt.ln2[t * d], d_fc.data(), p + bi.w_fc, d, f, d_ln.data(), grad + bi.w_fc,
                          grad + bi.b_fc);
      layernorm_backward_row(&lt.x_mid[t * d], lt.ln2_mean[t], lt.ln2_rstd[t], p + bi.ln2_g, d_ln.data(), d,
                             &d_mid[t * d], grad + bi.ln2_g, grad + bi.ln2_b);
    }

    // Attention half: x_mid = x_in + out_proj(att).
    dx = d_mid;
    std::fill(d_att.begin(), d_att.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      linear_backward_row(&lt.att[t * d], &d_mid[t * d], p + bi.w_o, d, d, &d_att[t * d], grad + bi.w_o,
                          grad + bi.b_o);
    }
    std::fill(d_qkv.begin(), d_qkv.end(), 0.0);
    const std::size_t stride = 3 * static_cast<std::size_t>(d);
    for (int hh = 0; hh < h; ++hh) {
      for (std::size_t t = 0; t < T; ++t) {
        const int n_ctx = dims.causal ? static_cast<int>(t) + 1 : tape.rows;
        const double* probs = &lt.probs[(hh * T + t) * T];
        const double* da = &d_att[t * d + hh * hd];
        double weighted = 0.0;
        for (int j = 0; j < n_ctx; ++j) {
          d_prob[j] = dot(da, &lt.qkv[j * stride + 2 * d + hh * hd], hd);
          weighted += probs[j] * d_prob[j];
        }
        const double* q = &lt.qkv[t * stride + hh * hd];
        double* dq = &d_qkv[t * stride + hh * hd];
        for (int j = 0; j < n_ctx; ++j) {
          const double ds = probs[j] * (d_prob[j] - weighted) * scale;
          const double* k = &lt.qkv[j * stride + d + hh * hd];
          double* dk = &d_qkv[j * stride + d + hh * hd];
          double* dv = &d_qkv[j * stride + 2 * d + hh * hd];
          for (int c = 0; c < hd; ++c) {
            dq[c] += ds * k[c];
            dk[c] += ds * q[c];
            dv[c] += probs[j] * da[c];
          }
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      std::fill(d_ln.begin(), d_ln.end(), 0.0);
      linear_backward_row(&lt.ln1[t * d], &d_qkv[t * stride], p + bi.w_qkv, d, 3 * d, d_ln.data(), grad + bi.w_qkv,
                          grad + bi.b_qkv);
      layernorm_backward_row(&lt.x_in[t * d], lt.ln1_mean[t], lt.ln1_rstd[t], p + bi.ln1_g, d_ln.data(), d,
                             &dx[t * d], grad + bi.ln1_g, grad + bi.ln1_b);
    }
  }
  std::copy(dx.begin(), dx.end(), d_x0.begin());
}

void core_step(const double* p, const CoreIndex& index, const CoreDims& dims, std::span<const double> x_row,
               DecodeCache& cache, std::span<double> hidden_row) {
  const int d = dims.d_model;
  const int f = dims.d_ffn;
  const int h = dims.n_heads;
  const int hd = dims.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t L = index.blocks.size();
  if (cache.keys.size() != L) {
    cache.keys.assign(L, {});
    cache.values.assign(L, {});
    cache.length = 0;
  }
  std::vector<double> x(x_row.begin(), x_row.end()), ln(d), qkv(3 * d), att(d), mid(d), fc_pre(f), fc_act(f);
  std::vector<double> probs(cache.length + 1);
  double mean, rstd;
  for (std::size_t l = 0; l < L; ++l) {
    const BlockIndex& bi = index.blocks[l];
    layernorm_row(x.data(), p + bi.ln1_g, p + bi.ln1_b, d, ln.data(), &mean, &rstd);
    linear_row(ln.data(), d, p + bi.w_qkv, p + bi.b_qkv, 3 * d, qkv.data());
    cache.keys[l].insert(cache.keys[l].end(), qkv.begin() + d, qkv.begin() + 2 * d);
    cache.values[l].insert(cache.values[l].end(), qkv.begin() + 2 * d, qkv.end());
    const int n_ctx = cache.length + 1;
    for (int hh = 0; hh < h; ++hh) {
      attend_row(&qkv[hh * hd], &cache.keys[l][hh * hd], &cache.values[l][hh * hd], static_cast<std::size_t>(d),
                 n_ctx, hd, scale, probs.data(), &att[hh * hd]);
    }
    linear_row(att.data(), d, p + bi.w_o, p + bi.b_o, d, mid.data());
    for (int i = 0; i < d; ++i) mid[i] += x[i];
    mlp_row(p, bi, dims, mid.data(), ln.data(), &mean, &rstd, fc_pre.data(), fc_act.data(), x.data());
  }
  ++cache.length;
  layernorm_row(x.data(), p + index.lnf_g, p + index.lnf_b, d, hidden_row.data(), &mean, &rstd);
}

}  // namespace prefcodec
