#pragma once

// Independent straight-line oracles used by the unit tests and the acceptance
// suite. Everything here is written against plain double arrays with explicit
// loops; none of it calls into the graph kernels it is used to verify.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vistok/model.hpp"

namespace testing_oracles {

inline std::vector<double> softmax_row_oracle(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> out(logits.size());
  double sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

inline double gelu_oracle(double x) {
  return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

// Forward pass of the decoder-plus-MM-head pipeline on a [BOS][one patch]
// sequence, reimplemented with explicit loops. Config must have one layer,
// one head and a single 1x1 patch.
inline std::vector<double> micro_compute_q_oracle(vistok::Model<double>& model,
                                                  const std::vector<double>& patch_pixels) {
  const auto& cfg = model.config();
  const std::size_t d = cfg.model_dim, C = cfg.vocab_size;
  auto P = [&](const std::string& name) -> const std::vector<double>& {
    return model.params().at(name).value;
  };

  // visual encoder: one patch row, x = proj * px + bias + pos
  std::vector<double> vis(cfg.vis_dim, 0.0);
  for (std::size_t i = 0; i < cfg.vis_dim; ++i) {
    double acc = P("encoder.bias")[i] + P("encoder.pos")[i];
    for (std::size_t k = 0; k < cfg.patch_dim(); ++k)
      acc += P("encoder.proj")[i * cfg.patch_dim() + k] * patch_pixels[k];
    vis[i] = acc;
  }

  // adapter: gelu(x W1 + b1) W2 + b2
  std::vector<double> hidden(cfg.adapter_hidden, 0.0);
  for (std::size_t j = 0; j < cfg.adapter_hidden; ++j) {
    double acc = P("adapter.b1")[j];
    for (std::size_t k = 0; k < cfg.vis_dim; ++k)
      acc += vis[k] * P("adapter.w1")[k * cfg.adapter_hidden + j];
    hidden[j] = gelu_oracle(acc);
  }
  std::vector<double> x_img(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double acc = P("adapter.b2")[j];
    for (std::size_t k = 0; k < cfg.adapter_hidden; ++k)
      acc += hidden[k] * P("adapter.w2")[k * d + j];
    x_img[j] = acc;
  }

  // sequence: BOS embedding row, then the visual row
  const std::size_t L = 2;
  std::vector<double> x(L * d);
  for (std::size_t j = 0; j < d; ++j) {
    x[j] = P("decoder.embeddings")[1 * d + j];
    x[d + j] = x_img[j];
  }

  auto layer_norm = [&](const std::vector<double>& in, const std::string& gain,
                        const std::string& bias) {
    std::vector<double> out(L * d);
    for (std::size_t i = 0; i < L; ++i) {
      double mean = 0;
      for (std::size_t j = 0; j < d; ++j) mean += in[i * d + j];
      mean /= static_cast<double>(d);
      double var = 0;
      for (std::size_t j = 0; j < d; ++j)
        var += (in[i * d + j] - mean) * (in[i * d + j] - mean);
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + 1e-5);
      for (std::size_t j = 0; j < d; ++j)
        out[i * d + j] = (in[i * d + j] - mean) * inv * P(gain)[j] + P(bias)[j];
    }
    return out;
  };
  auto linear = [&](const std::vector<double>& in, const std::string& w, const std::string& b,
                    std::size_t out_dim) {
    std::vector<double> out(L * out_dim);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < out_dim; ++j) {
        double acc = P(b)[j];
        for (std::size_t k = 0; k < d; ++k) acc += in[i * d + k] * P(w)[k * out_dim + j];
        out[i * out_dim + j] = acc;
      }
    return out;
  };

  // one pre-norm block, one head
  {
    auto h = layer_norm(x, "decoder.block0.ln1.gain", "decoder.block0.ln1.bias");
    auto q = linear(h, "decoder.block0.wq", "decoder.block0.bq.bias", d);
    auto k = linear(h, "decoder.block0.wk", "decoder.block0.bk.bias", d);
    auto v = linear(h, "decoder.block0.wv", "decoder.block0.bv.bias", d);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
    // row 0 attends to itself only; row 1 attends to rows 0 and 1
    std::vector<double> att(L * d, 0.0);
    for (std::size_t j = 0; j < d; ++j) att[j] = v[j];
    double s0 = 0, s1 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      s0 += q[d + j] * k[j];
      s1 += q[d + j] * k[d + j];
    }
    auto w01 = softmax_row_oracle({s0 * inv_sqrt, s1 * inv_sqrt});
    for (std::size_t j = 0; j < d; ++j) att[d + j] = w01[0] * v[j] + w01[1] * v[d + j];
    auto proj = linear(att, "decoder.block0.wo", "decoder.block0.bo.bias", d);
    for (std::size_t i = 0; i < L * d; ++i) x[i] += proj[i];
  }
  {
    auto h = layer_norm(x, "decoder.block0.ln2.gain", "decoder.block0.ln2.bias");
    const std::size_t m = model.config().mlp_hidden();
    std::vector<double> mid(L * m);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double acc = P("decoder.block0.bm1.bias")[j];
        for (std::size_t k = 0; k < d; ++k)
          acc += h[i * d + k] * P("decoder.block0.wm1")[k * m + j];
        mid[i * m + j] = gelu_oracle(acc);
      }
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = P("decoder.block0.bm2.bias")[j];
        for (std::size_t k = 0; k < m; ++k)
          acc += mid[i * m + k] * P("decoder.block0.wm2")[k * d + j];
        x[i * d + j] += acc;
      }
  }
  x = layer_norm(x, "decoder.lnf.gain", "decoder.lnf.bias");

  // MM head + softmax
  std::vector<double> q_out(L * C);
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<double> logits(C, 0.0);
    for (std::size_t j = 0; j < C; ++j)
      for (std::size_t k = 0; k < d; ++k)
        logits[j] += x[i * d + k] * P("mm_head.w")[j * d + k];
    auto probs = softmax_row_oracle(logits);
    for (std::size_t j = 0; j < C; ++j) q_out[i * C + j] = probs[j];
  }
  return q_out;
}

// Plain Adam (no weight decay), the reference for the AdamW wd=0 case.
struct AdamOracle {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  long t = 0;

  explicit AdamOracle(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    ++t;
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1 - beta1) * grads[i];
      v[i] = beta2 * v[i] + (1 - beta2) * grads[i] * grads[i];
      const double mh = m[i] / (1 - std::pow(beta1, t));
      const double vh = v[i] / (1 - std::pow(beta2, t));
      params[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

// Direct-summation cross entropy over (row, target) pairs.
inline double ce_oracle(const std::vector<std::vector<double>>& q_rows,
                        const std::vector<std::size_t>& targets) {
  double total = 0;
  for (std::size_t i = 0; i < q_rows.size(); ++i)
    total += -std::log(std::max(q_rows[i][targets[i]], 1e-12));
  return total / static_cast<double>(q_rows.size());
}

// Direct-summation KL(p || q) with the 0 log 0 = 0 convention, averaged over rows.
inline double kl_oracle(const std::vector<std::vector<double>>& p_rows,
                        const std::vector<std::vector<double>>& q_rows) {
  double total = 0;
  for (std::size_t i = 0; i < p_rows.size(); ++i)
    for (std::size_t j = 0; j < p_rows[i].size(); ++j) {
      if (p_rows[i][j] == 0.0) continue;
      total += p_rows[i][j] * (std::log(std::max(p_rows[i][j], 1e-12)) -
                               std::log(std::max(q_rows[i][j], 1e-12)));
    }
  return total / static_cast<double>(p_rows.size());
}

}  // namespace testing_oracles
