#pragma once

// Central finite-difference verification of every registered kernel gradient
// and of the combined training loss through the whole model. The difference
// quotient is compared against the reverse-mode gradient with
//   rel_err = |ad - fd| / max(1, |ad|, |fd|).
// The label side of the combined loss (the visual tokens) is held at its
// base-point values, matching what the optimizer differentiates.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "vistok/common.hpp"
#include "vistok/data.hpp"
#include "vistok/model.hpp"
#include "vistok/objectives.hpp"
#include "vistok/tensor.hpp"

namespace vistok {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::string scalar_width;
  double tolerance = 0;
  std::vector<GradCheckEntry> entries;

  double worst() const {
    double w = 0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_err);
    return w;
  }
  bool passed() const { return worst() < tolerance; }
};

namespace gc_detail {

template <class S>
constexpr double fd_step_scale() {
  // cbrt(machine epsilon): balances truncation against roundoff for a
  // central difference.
  return std::is_same_v<S, float> ? 5e-3 : 6e-6;
}

inline double rel_err(double ad, double fd) {
  return std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
}

// One named input tensor for an op check.
template <class S>
struct CheckInput {
  Shape shape;
  std::vector<S> data;
};

// Checks d(sum(w .* op(inputs)))/d(input) for every input element, where w is
// a fixed random weighting that makes every output element matter.
template <class S>
GradCheckEntry check_op(const std::string& name, std::vector<CheckInput<S>> inputs,
                        const std::function<Tensor<S>(Graph<S>&, std::vector<Tensor<S>>&)>& op,
                        Rng& rng) {
  // Probe output geometry once to draw the weights.
  std::vector<S> weights;
  {
    Graph<S> g(false);
    std::vector<Tensor<S>> ts;
    for (auto& in : inputs) ts.push_back(g.input(in.shape, in.data));
    auto out = op(g, ts);
    weights.resize(out.size());
    for (auto& w : weights) w = S(rng.uniform(-1.0, 1.0));
  }

  auto eval = [&]() -> double {
    Graph<S> g(false);
    std::vector<Tensor<S>> ts;
    for (auto& in : inputs) ts.push_back(g.input(in.shape, in.data));
    auto out = op(g, ts);
    auto w = g.input(out.shape(), weights);
    return static_cast<double>(g.sum(g.mul(out, w)).item());
  };

  // Reverse-mode gradients at the base point. Leaves are promoted to
  // parameters so requires_grad is set.
  std::vector<std::vector<S>> ad_grads;
  {
    Graph<S> g;
    std::vector<Parameter<S>> leafs;
    leafs.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Parameter<S> p("in" + std::to_string(i), Group::Decoder, inputs[i].shape);
      p.value = inputs[i].data;
      leafs.push_back(std::move(p));
    }
    std::vector<Tensor<S>> ts;
    for (auto& p : leafs) ts.push_back(g.param(p));
    auto out = op(g, ts);
    auto w = g.input(out.shape(), weights);
    g.backward(g.sum(g.mul(out, w)));
    for (auto& p : leafs) ad_grads.push_back(g.param_grad(p));
  }

  GradCheckEntry entry{name, 0.0, 0};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].data.size(); ++k) {
      S& x = inputs[i].data[k];
      const S orig = x;
      const double h = fd_step_scale<S>() * std::max(1.0, std::abs(static_cast<double>(orig)));
      x = S(static_cast<double>(orig) + h);
      const double fp = eval();
      x = S(static_cast<double>(orig) - h);
      const double fm = eval();
      x = orig;
      const double fd = (fp - fm) / (2.0 * h);
      entry.max_rel_err =
          std::max(entry.max_rel_err, rel_err(static_cast<double>(ad_grads[i][k]), fd));
      ++entry.checked;
    }
  }
  return entry;
}

}  // namespace gc_detail

// Finite-difference check of every registered kernel.
template <class S>
GradCheckReport gradcheck_ops(double tolerance, std::uint64_t seed) {
  using gc_detail::CheckInput;
  Rng rng(seed);
  auto randv = [&rng](std::size_t n, double lo, double hi) {
    std::vector<S> v(n);
    for (auto& x : v) x = S(rng.uniform(lo, hi));
    return v;
  };

  GradCheckReport rep;
  rep.scalar_width = std::is_same_v<S, float> ? "f32" : "f64";
  rep.tolerance = tolerance;
  auto run = [&](const std::string& name, std::vector<CheckInput<S>> ins,
                 std::function<Tensor<S>(Graph<S>&, std::vector<Tensor<S>>&)> op) {
    rep.entries.push_back(gc_detail::check_op<S>(name, std::move(ins), op, rng));
  };

  run("add", {{{3, 4}, randv(12, -2, 2)}, {{3, 4}, randv(12, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.add(t[0], t[1]); });
  run("sub", {{{3, 4}, randv(12, -2, 2)}, {{3, 4}, randv(12, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.sub(t[0], t[1]); });
  run("mul", {{{3, 4}, randv(12, -2, 2)}, {{3, 4}, randv(12, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.mul(t[0], t[1]); });
  run("scale", {{{3, 4}, randv(12, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.scale(t[0], S(1.7)); });
  run("add_bias", {{{3, 4}, randv(12, -2, 2)}, {{4}, randv(4, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.add_bias(t[0], t[1]); });
  run("matmul", {{{3, 4}, randv(12, -2, 2)}, {{4, 2}, randv(8, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.matmul(t[0], t[1]); });
  run("matmul_nt", {{{3, 4}, randv(12, -2, 2)}, {{2, 4}, randv(8, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.matmul_nt(t[0], t[1]); });
  run("exp", {{{2, 3}, randv(6, -1.5, 1.5)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.exp(t[0]); });
  run("log", {{{2, 3}, randv(6, 0.2, 3.0)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.log(t[0]); });
  run("log_floored", {{{2, 3}, randv(6, 0.2, 3.0)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.log_floored(t[0]); });
  run("gelu", {{{2, 4}, randv(8, -2.5, 2.5)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.gelu(t[0]); });
  run("layer_norm",
      {{{3, 6}, randv(18, -2, 2)}, {{6}, randv(6, 0.5, 1.5)}, {{6}, randv(6, -0.5, 0.5)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.layer_norm(t[0], t[1], t[2]); });
  run("softmax", {{{3, 5}, randv(15, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.softmax(t[0]); });
  run("log_softmax", {{{3, 5}, randv(15, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.log_softmax(t[0]); });
  run("causal_softmax", {{{5, 5}, randv(25, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.causal_softmax(t[0]); });
  run("take_rows", {{{6, 4}, randv(24, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) {
        return g.take_rows(t[0], {0, 2, 2, 5});
      });
  run("pick", {{{4, 5}, randv(20, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.pick(t[0], {1, 0, 4, 2}); });
  run("concat_rows", {{{2, 3}, randv(6, -2, 2)}, {{3, 3}, randv(9, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) {
        return g.concat_rows({t[0], t[1]});
      });
  run("concat_cols", {{{3, 2}, randv(6, -2, 2)}, {{3, 3}, randv(9, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) {
        return g.concat_cols({t[0], t[1]});
      });
  run("slice_cols", {{{3, 6}, randv(18, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.slice_cols(t[0], 1, 4); });
  run("sum", {{{3, 4}, randv(12, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.sum(t[0]); });
  run("mean", {{{3, 4}, randv(12, -2, 2)}},
      [](Graph<S>& g, std::vector<Tensor<S>>& t) { return g.mean(t[0]); });
  return rep;
}

// Finite-difference check of the combined loss through the full model on
// `n_check` sampled parameter scalars.
template <class S>
GradCheckReport gradcheck_model(double tolerance, std::uint64_t seed, std::size_t n_check,
                                const ModelConfig& cfg = {}) {
  GradCheckReport rep;
  rep.scalar_width = std::is_same_v<S, float> ? "f32" : "f64";
  rep.tolerance = tolerance;

  Model<S> model(cfg);
  model.init_weights(seed);
  model.params().set_trainable_groups({Group::VisualEncoder, Group::Adapter, Group::Decoder,
                                       Group::MmHead, Group::VmHead});

  Vocabulary vocab = Vocabulary::standard(cfg.vocab_size);
  CorpusGen gen(vocab, cfg.patch_rows, cfg.patch_px);
  const auto sample = gen.generate(seed, 1).front();

  // Visual-token labels fixed at the base point.
  std::vector<S> p_label;
  {
    Graph<S> g(false);
    auto px = g.input({cfg.patches(), cfg.patch_dim()},
                      patch_matrix<S>(sample.pixels, cfg.patch_rows, cfg.patch_px));
    auto x_image = model.adapt(g, model.visual_encode(g, px));
    auto seq = assemble_input(g, model, x_image, sample.instruction, sample.response);
    p_label = visual_tokens(g, model, seq).value();
  }

  auto forward = [&](bool with_grad) {
    auto g = std::make_unique<Graph<S>>(with_grad);
    auto px = g->input({cfg.patches(), cfg.patch_dim()},
                       patch_matrix<S>(sample.pixels, cfg.patch_rows, cfg.patch_px));
    auto x_image = model.adapt(*g, model.visual_encode(*g, px));
    auto seq = assemble_input(*g, model, x_image, sample.instruction, sample.response);
    auto q = compute_q(*g, model, seq);
    auto labels = g->input({cfg.patches(), cfg.vocab_size}, p_label);
    auto total = g->add(loss_lm(*g, seq, q), loss_vm(*g, seq, q, labels));
    return std::make_pair(std::move(g), total);
  };

  // Reverse-mode gradients once.
  std::vector<std::vector<S>> ad;
  {
    auto [g, total] = forward(true);
    g->backward(total);
    for (std::size_t i = 0; i < model.params().size(); ++i)
      ad.push_back(g->param_grad(model.params()[i]));
  }

  auto eval = [&]() {
    auto [g, total] = forward(false);
    return static_cast<double>(total.item());
  };

  // Uniform sample over all parameter scalars.
  Rng rng(seed ^ 0xabcdef12345ULL);
  const std::size_t total_scalars = model.params().scalar_count();
  GradCheckEntry entry{"loss_mm/full_model", 0.0, 0};
  for (std::size_t c = 0; c < n_check; ++c) {
    std::size_t flat = rng.index(total_scalars);
    std::size_t pi = 0;
    while (flat >= model.params()[pi].size()) {
      flat -= model.params()[pi].size();
      ++pi;
    }
    Parameter<S>& p = model.params()[pi];
    S& x = p.value[flat];
    const S orig = x;
    const double h =
        gc_detail::fd_step_scale<S>() * std::max(1.0, std::abs(static_cast<double>(orig)));
    x = S(static_cast<double>(orig) + h);
    const double fp = eval();
    x = S(static_cast<double>(orig) - h);
    const double fm = eval();
    x = orig;
    const double fd = (fp - fm) / (2.0 * h);
    entry.max_rel_err =
        std::max(entry.max_rel_err, gc_detail::rel_err(static_cast<double>(ad[pi][flat]), fd));
    ++entry.checked;
  }
  rep.entries.push_back(entry);
  return rep;
}

}  // namespace vistok
