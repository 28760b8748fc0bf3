#pragma once

// Multi-modal sequence assembly, supervision index sets, visual tokens and
// the training losses.
//
// Supervision pairing: output index n is supervised by position n + 1. A BOS
// row always leads the sequence, so the first patch has a predecessor. The
// language pairs cover only response tokens plus the trailing EOS; the visual
// pairs cover every visual position.

#include <cstdint>
#include <optional>
#include <vector>

#include "vistok/common.hpp"
#include "vistok/model.hpp"
#include "vistok/tensor.hpp"

namespace vistok {

using TokenId = std::size_t;

constexpr TokenId kPadId = 0;
constexpr TokenId kBosId = 1;
constexpr TokenId kEosId = 2;

template <class S>
struct MultiModalSequence {
  Tensor<S> embeddings;                 // [L x d]
  Tensor<S> x_image;                    // [P x d]: the visual rows, pre-decoder
  std::vector<Modality> tags;           // length L
  std::vector<std::optional<TokenId>> text_targets;  // per position, supervised text only
  std::vector<std::pair<std::size_t, TokenId>> lm_pairs;      // (output n, target id)
  std::vector<std::pair<std::size_t, std::size_t>> vm_pairs;  // (output n, visual pos p = n+1)
  std::size_t visual_start = 0;         // sequence position of patch 0

  std::size_t length() const { return tags.size(); }
  std::size_t patch_count() const { return vm_pairs.size(); }
};

struct AssembleOptions {
  // When false the trailing EOS row is omitted (open-ended assembly used
  // during generation). Defaults to appending EOS whenever the response is
  // nonempty; a pure-image sequence (no instruction, no response) never
  // carries EOS.
  bool append_eos = true;
  // Right-pad the text portion with PAD rows up to this total sequence
  // length (0 = no padding). PAD rows get no supervision pairs.
  std::size_t pad_to = 0;
};

// Builds [BOS][visual rows][instruction][response][EOS]. `visual_rows`
// normally comes from adapt(visual_encode(...)); passing pseudo image
// features instead substitutes them transparently.
template <class S>
MultiModalSequence<S> assemble_input(Graph<S>& g, Model<S>& model, Tensor<S> visual_rows,
                                     const std::vector<TokenId>& instruction,
                                     const std::vector<TokenId>& response,
                                     const AssembleOptions& opts = {}) {
  const ModelConfig& cfg = model.config();
  if (visual_rows.shape().size() != 2 || visual_rows.cols() != cfg.model_dim)
    throw ShapeError("assemble_input: visual rows " + shape_str(visual_rows.shape()) +
                     " do not match model dim " + std::to_string(cfg.model_dim));
  for (TokenId t : instruction)
    if (t >= cfg.vocab_size)
      throw VocabError("assemble_input: instruction token " + std::to_string(t) +
                       " >= vocab size " + std::to_string(cfg.vocab_size));
  for (TokenId t : response)
    if (t >= cfg.vocab_size)
      throw VocabError("assemble_input: response token " + std::to_string(t) + " >= vocab size " +
                       std::to_string(cfg.vocab_size));

  const std::size_t P = visual_rows.rows();
  const bool with_eos = opts.append_eos && !response.empty();
  std::vector<TokenId> text;
  text.reserve(instruction.size() + response.size() + 2);
  text.insert(text.end(), instruction.begin(), instruction.end());
  text.insert(text.end(), response.begin(), response.end());
  if (with_eos) text.push_back(kEosId);

  std::size_t L = 1 + P + text.size();
  if (opts.pad_to > 0) {
    if (opts.pad_to < L)
      throw LengthError("assemble_input: pad_to " + std::to_string(opts.pad_to) +
                        " shorter than sequence " + std::to_string(L));
    while (text.size() + 1 + P < opts.pad_to) text.push_back(kPadId);
    L = opts.pad_to;
  }
  if (L > cfg.max_seq_len)
    throw LengthError("assemble_input: sequence length " + std::to_string(L) + " exceeds max " +
                      std::to_string(cfg.max_seq_len));

  MultiModalSequence<S> seq;
  seq.visual_start = 1;
  seq.x_image = visual_rows;
  std::vector<Tensor<S>> parts;
  parts.push_back(model.embed_text(g, std::vector<TokenId>{kBosId}));
  parts.push_back(visual_rows);
  if (!text.empty()) parts.push_back(model.embed_text(g, text));
  seq.embeddings = g.concat_rows(parts);

  seq.tags.assign(L, Modality::Text);
  for (std::size_t p = 0; p < P; ++p) seq.tags[1 + p] = Modality::Visual;

  seq.text_targets.assign(L, std::nullopt);
  const std::size_t resp_begin = 1 + P + instruction.size();
  const std::size_t resp_end = resp_begin + response.size() + (with_eos ? 1 : 0);
  for (std::size_t pos = resp_begin; pos < resp_end; ++pos) {
    const TokenId id = text[pos - 1 - P];
    seq.text_targets[pos] = id;
    seq.lm_pairs.emplace_back(pos - 1, id);
  }
  for (std::size_t p = 0; p < P; ++p) seq.vm_pairs.emplace_back(p, p + 1);
  return seq;
}

// Q = softmax(MM head applied to decoder outputs), one row per position.
template <class S>
Tensor<S> compute_q(Graph<S>& g, Model<S>& model, const MultiModalSequence<S>& seq) {
  return g.softmax(model.mm_head(g, model.decode(g, seq.embeddings, seq.tags)));
}

// P' = softmax(VM head applied to the visual rows of the input), one row per
// patch, computed pre-decoder.
template <class S>
Tensor<S> visual_tokens(Graph<S>& g, Model<S>& model, const MultiModalSequence<S>& seq) {
  if (seq.vm_pairs.empty())
    throw ContractError("visual_tokens: sequence has no visual positions");
  return g.softmax(model.vm_head(g, seq.x_image));
}

// Mean over the language pairs of -log Q_n(target).
template <class S>
Tensor<S> loss_lm(Graph<S>& g, const MultiModalSequence<S>& seq, Tensor<S> q) {
  if (seq.lm_pairs.empty()) throw ContractError("loss_lm: no language supervision pairs");
  std::vector<std::size_t> rows, targets;
  rows.reserve(seq.lm_pairs.size());
  targets.reserve(seq.lm_pairs.size());
  for (const auto& [n, t] : seq.lm_pairs) {
    rows.push_back(n);
    targets.push_back(t);
  }
  auto picked = g.pick(g.take_rows(q, rows), targets);
  return g.scale(g.sum(g.log_floored(picked)), S(-1) / S(seq.lm_pairs.size()));
}

// Forward KL over the visual pairs: mean_n KL(P'_{n+1} || Q_n). `p_label`
// must already be detached -- it is the supervision side.
template <class S>
Tensor<S> loss_vm(Graph<S>& g, const MultiModalSequence<S>& seq, Tensor<S> q, Tensor<S> p_label) {
  if (seq.vm_pairs.empty()) throw ContractError("loss_vm: no visual supervision pairs");
  return kl_over_pairs(g, seq, p_label, q);
}

// Reversed KL used when fitting the VM head: mean_n KL(Q_n || P'_{n+1}).
// `q_label` must already be detached.
template <class S>
Tensor<S> loss_vm_distill(Graph<S>& g, const MultiModalSequence<S>& seq, Tensor<S> q_label,
                          Tensor<S> p_pred) {
  if (seq.vm_pairs.empty()) throw ContractError("loss_vm_distill: no visual supervision pairs");
  return kl_over_pairs(g, seq, q_label, p_pred);
}

template <class S>
struct CombinedLoss {
  Tensor<S> total;
  Tensor<S> lm;
  Tensor<S> vm;
  Tensor<S> q;
  Tensor<S> p_visual;  // detached visual tokens
};

// Loss_MM = Loss_LM + Loss_VM from a single forward pass; the visual tokens
// are detached so no gradient reaches the VM head.
template <class S>
CombinedLoss<S> loss_mm(Graph<S>& g, Model<S>& model, const MultiModalSequence<S>& seq) {
  if (seq.lm_pairs.empty() || seq.vm_pairs.empty())
    throw ContractError("loss_mm: both supervision index sets must be nonempty");
  CombinedLoss<S> out;
  out.q = compute_q(g, model, seq);
  out.p_visual = g.detach(visual_tokens(g, model, seq));
  out.lm = loss_lm(g, seq, out.q);
  out.vm = loss_vm(g, seq, out.q, out.p_visual);
  out.total = g.add(out.lm, out.vm);
  return out;
}

// mean over pairs of sum_i label(i) * (log label(i) - log pred(i)), with the
// 0 log 0 = 0 convention via the floored log. Label rows are indexed by patch
// (p - visual_start), prediction rows by output index n.
template <class S>
Tensor<S> kl_over_pairs(Graph<S>& g, const MultiModalSequence<S>& seq, Tensor<S> label,
                        Tensor<S> pred) {
  std::vector<std::size_t> label_rows, pred_rows;
  label_rows.reserve(seq.vm_pairs.size());
  pred_rows.reserve(seq.vm_pairs.size());
  const bool label_is_patchwise = label.rows() == seq.patch_count();
  const bool pred_is_patchwise = pred.rows() == seq.patch_count();
  for (const auto& [n, p] : seq.vm_pairs) {
    label_rows.push_back(label_is_patchwise ? p - seq.visual_start : n);
    pred_rows.push_back(pred_is_patchwise ? p - seq.visual_start : n);
  }
  auto lab = g.take_rows(label, label_rows);
  auto prd = g.take_rows(pred, pred_rows);
  auto terms = g.mul(lab, g.sub(g.log_floored(lab), g.log_floored(prd)));
  return g.scale(g.sum(terms), S(1) / S(seq.vm_pairs.size()));
}

}  // namespace vistok
