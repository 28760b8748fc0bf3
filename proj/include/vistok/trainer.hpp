#pragma once

// Four-stage training: adapter alignment, instruction tuning, VM-head
// distillation, multi-modal auto-regressive tuning. Each stage freezes every
// parameter group outside its trainable set, uses AdamW under a
// warmup-plus-cosine schedule, and emits per-step metrics plus a binary
// checkpoint.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vistok/analysis.hpp"
#include "vistok/common.hpp"
#include "vistok/data.hpp"
#include "vistok/model.hpp"
#include "vistok/objectives.hpp"
#include "vistok/tensor.hpp"

namespace vistok {

// ---- learning-rate schedule --------------------------------------------------

// Linear warmup from 0 to peak over ceil(warmup_ratio * total) steps, then
// half-cosine decay from peak to exactly 0 at step == total.
inline double lr_at(std::size_t step, std::size_t total_steps, double peak_lr,
                    double warmup_ratio) {
  if (total_steps == 0) throw ContractError("lr_at: total_steps must be positive");
  if (step > total_steps) throw ContractError("lr_at: step beyond total_steps");
  const auto warmup = static_cast<std::size_t>(
      std::ceil(warmup_ratio * static_cast<double>(total_steps)));
  if (warmup > 0 && step < warmup)
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total_steps) return 0.0;
  const double span = static_cast<double>(total_steps - warmup);
  const double t = static_cast<double>(step - warmup) / span;
  return peak_lr * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

// ---- optimizer ------------------------------------------------------------------

// Decoupled-weight-decay Adam. Frozen parameters are never touched.
template <class S>
class AdamW {
public:
  explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet<S>& params, double lr, double weight_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<S>& p = params[i];
      if (!p.trainable) continue;
      auto& slot = slots_[p.name];
      if (slot.m.empty()) {
        slot.m.assign(p.size(), S(0));
        slot.v.assign(p.size(), S(0));
      }
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = static_cast<double>(p.grad[k]);
        if (!std::isfinite(g))
          throw NumericError("adamw: non-finite gradient in '" + p.name + "'");
        const double m = beta1_ * static_cast<double>(slot.m[k]) + (1.0 - beta1_) * g;
        const double v = beta2_ * static_cast<double>(slot.v[k]) + (1.0 - beta2_) * g * g;
        slot.m[k] = S(m);
        slot.v[k] = S(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_) +
                              weight_decay * static_cast<double>(p.value[k]);
        p.value[k] = S(static_cast<double>(p.value[k]) - lr * update);
      }
    }
  }

  std::int64_t steps_taken() const { return t_; }

private:
  struct Slot {
    std::vector<S> m, v;
  };
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Slot> slots_;
};

// Global-norm gradient clipping over the trainable parameters. Returns the
// pre-clip norm.
template <class S>
double clip_grad_norm(ParamSet<S>& params, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<S>& p = params[i];
    if (!p.trainable) continue;
    for (S g : p.grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const S scale = S(max_norm / norm);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<S>& p = params[i];
      if (!p.trainable) continue;
      for (S& g : p.grad) g *= scale;
    }
  }
  return norm;
}

// ---- stage configuration -----------------------------------------------------------

enum class LossKind { Lm, VmDistill, Mm };

struct StageConfig {
  int stage = 1;  // 1..4
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double warmup_ratio = 0.03;
  double weight_decay = 0.0;
  std::size_t epochs = 3;
  std::uint64_t seed = 7;
  std::string dataset;
  double clip_norm = 1.0;
  std::string loss = "";  // "", "lm", "vm_distill", "mm"; "" = stage default

  static StageConfig defaults(int stage) {
    StageConfig c;
    c.stage = stage;
    switch (stage) {
      case 1: c.batch_size = 32; c.lr = 1e-3; c.epochs = 3; break;
      case 2: c.batch_size = 16; c.lr = 2e-5; c.epochs = 3; break;
      case 3: c.batch_size = 32; c.lr = 1e-3; c.epochs = 3; break;
      case 4: c.batch_size = 16; c.lr = 2e-5; c.epochs = 3; break;
      default: throw ContractError("stage must be 1..4");
    }
    return c;
  }

  std::vector<Group> trainable_groups() const {
    switch (stage) {
      case 1: return {Group::Adapter};
      case 2: return {Group::Decoder, Group::MmHead, Group::Adapter};
      case 3: return {Group::VmHead};
      case 4: return {Group::Decoder, Group::MmHead};
      default: throw ContractError("stage must be 1..4");
    }
  }

  LossKind loss_kind() const {
    if (loss == "lm") return LossKind::Lm;
    if (loss == "vm_distill") return LossKind::VmDistill;
    if (loss == "mm") return LossKind::Mm;
    if (!loss.empty()) throw ContractError("unknown loss selector '" + loss + "'");
    switch (stage) {
      case 1:
      case 2: return LossKind::Lm;
      case 3: return LossKind::VmDistill;
      case 4: return LossKind::Mm;
      default: throw ContractError("stage must be 1..4");
    }
  }
};

inline void from_json_into(const nlohmann::json& j, StageConfig& c) {
  if (j.contains("stage")) c.stage = j.at("stage").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("lr")) c.lr = j.at("lr").get<double>();
  if (j.contains("warmup_ratio")) c.warmup_ratio = j.at("warmup_ratio").get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
  if (j.contains("clip_norm")) c.clip_norm = j.at("clip_norm").get<double>();
  if (j.contains("loss")) c.loss = j.at("loss").get<std::string>();
}

inline nlohmann::json to_json(const StageConfig& c) {
  return nlohmann::json{{"stage", c.stage},
                        {"batch_size", c.batch_size},
                        {"lr", c.lr},
                        {"warmup_ratio", c.warmup_ratio},
                        {"weight_decay", c.weight_decay},
                        {"epochs", c.epochs},
                        {"seed", c.seed},
                        {"dataset", c.dataset},
                        {"clip_norm", c.clip_norm},
                        {"loss", c.loss}};
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return nlohmann::json{{"vocab_size", m.vocab_size}, {"model_dim", m.model_dim},
                        {"layers", m.layers},         {"heads", m.heads},
                        {"max_seq_len", m.max_seq_len}, {"patch_rows", m.patch_rows},
                        {"patch_cols", m.patch_cols}, {"patch_px", m.patch_px},
                        {"channels", m.channels},     {"vis_dim", m.vis_dim},
                        {"adapter_hidden", m.adapter_hidden}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.vocab_size = j.at("vocab_size").get<std::size_t>();
  m.model_dim = j.at("model_dim").get<std::size_t>();
  m.layers = j.at("layers").get<std::size_t>();
  m.heads = j.at("heads").get<std::size_t>();
  m.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  m.patch_rows = j.at("patch_rows").get<std::size_t>();
  m.patch_cols = j.at("patch_cols").get<std::size_t>();
  m.patch_px = j.at("patch_px").get<std::size_t>();
  m.channels = j.at("channels").get<std::size_t>();
  m.vis_dim = j.at("vis_dim").get<std::size_t>();
  m.adapter_hidden = j.at("adapter_hidden").get<std::size_t>();
  return m;
}

// ---- checkpoints ----------------------------------------------------------------------

struct TrainState {
  int stage = 0;
  std::uint64_t step = 0;
  std::string rng_state;
};

namespace detail {
inline void put_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void put_u64(std::ofstream& f, std::uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint32_t get_u32(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline std::uint64_t get_u64(std::ifstream& f) {
  std::uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'V', 'I', 'S', 'T', 'O', 'K', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout: 8-byte magic, version u32, config length u32 + JSON bytes,
// tensor count u32, then per tensor: name length u32 + bytes, group tag u8,
// rank u32, dims u64 each, payload little-endian f32. Written to a temporary
// file and renamed into place.
template <class S>
void save_checkpoint(const std::string& path, const Model<S>& model, const TrainState& state) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot write " + tmp);
    f.write(kCheckpointMagic, 8);
    detail::put_u32(f, kCheckpointVersion);
    nlohmann::json cfg;
    cfg["model"] = to_json(model.config());
    cfg["stage"] = state.stage;
    cfg["step"] = state.step;
    cfg["rng_state"] = state.rng_state;
    const std::string cfg_bytes = cfg.dump();
    detail::put_u32(f, static_cast<std::uint32_t>(cfg_bytes.size()));
    f.write(cfg_bytes.data(), static_cast<std::streamsize>(cfg_bytes.size()));
    const ParamSet<S>& params = model.params();
    detail::put_u32(f, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Parameter<S>& p = params[i];
      detail::put_u32(f, static_cast<std::uint32_t>(p.name.size()));
      f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      const std::uint8_t tag = static_cast<std::uint8_t>(p.group);
      f.write(reinterpret_cast<const char*>(&tag), 1);
      detail::put_u32(f, static_cast<std::uint32_t>(p.shape.size()));
      for (std::size_t d : p.shape) detail::put_u64(f, static_cast<std::uint64_t>(d));
      std::vector<float> payload(p.value.begin(), p.value.end());
      f.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
    }
    if (!f) throw IoError("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("checkpoint: cannot rename " + tmp + " to " + path);
}

template <class S>
struct LoadedCheckpoint {
  ModelConfig config;
  TrainState state;
  std::vector<std::pair<std::string, std::vector<float>>> tensors;

  void apply(Model<S>& model) const {
    for (const auto& [name, payload] : tensors) {
      Parameter<S>& p = model.params().at(name);
      if (payload.size() != p.size())
        throw ParseError("checkpoint: tensor '" + name + "' has " +
                         std::to_string(payload.size()) + " values, expected " +
                         std::to_string(p.size()));
      for (std::size_t k = 0; k < payload.size(); ++k) p.value[k] = S(payload[k]);
    }
  }
};

template <class S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot read " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ParseError("checkpoint: " + path + " is not a checkpoint file");
  const std::uint32_t version = detail::get_u32(f);
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint: unknown format version " + std::to_string(version));
  const std::uint32_t cfg_len = detail::get_u32(f);
  std::string cfg_bytes(cfg_len, '\0');
  f.read(cfg_bytes.data(), cfg_len);
  nlohmann::json cfg = nlohmann::json::parse(cfg_bytes, nullptr, false);
  if (cfg.is_discarded()) throw ParseError("checkpoint: malformed config block");
  LoadedCheckpoint<S> out;
  out.config = model_config_from_json(cfg.at("model"));
  out.state.stage = cfg.value("stage", 0);
  out.state.step = cfg.value("step", std::uint64_t{0});
  out.state.rng_state = cfg.value("rng_state", std::string{});
  const std::uint32_t count = detail::get_u32(f);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::get_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    std::uint8_t tag = 0;
    f.read(reinterpret_cast<char*>(&tag), 1);
    const std::uint32_t rank = detail::get_u32(f);
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) n *= static_cast<std::size_t>(detail::get_u64(f));
    std::vector<float> payload(n);
    f.read(reinterpret_cast<char*>(payload.data()),
           static_cast<std::streamsize>(n * sizeof(float)));
    if (!f) throw ParseError("checkpoint: truncated tensor record '" + name + "'");
    out.tensors.emplace_back(std::move(name), std::move(payload));
  }
  return out;
}

// ---- metrics -----------------------------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0, loss = 0, loss_lm = 0, loss_vm = 0, seconds = 0;
};

class MetricsWriter {
public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::string& path) {
    if (path.empty()) return;
    file_.open(path, std::ios::trunc);
    if (!file_) throw IoError("metrics: cannot write " + path);
    file_ << "step,lr,loss,loss_lm,loss_vm,seconds\n";
  }

  void write(const StepMetrics& m) {
    if (!file_.is_open()) return;
    char buf[192];
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%.6f\n", m.step, m.lr, m.loss,
                  m.loss_lm, m.loss_vm, m.seconds);
    file_ << buf;
    file_.flush();
  }

private:
  std::ofstream file_;
};

// ---- stage runner ------------------------------------------------------------------------

struct RunResult {
  std::vector<StepMetrics> metrics;
  double initial_loss = 0;
  double final_loss = 0;
  std::size_t steps = 0;
};

namespace detail {

// Per-sample training loss for stages I, II and IV.
template <class S>
CombinedLoss<S> lm_family_sample_loss(Graph<S>& g, Model<S>& model, const SyntheticSample& s,
                                      const StageConfig& cfg, std::size_t pad_to) {
  const ModelConfig& mc = model.config();
  auto px = g.input({mc.patches(), mc.patch_dim()},
                    patch_matrix<S>(s.pixels, mc.patch_rows, mc.patch_px));
  auto x_image = model.adapt(g, model.visual_encode(g, px));
  const std::vector<TokenId> no_instruction;
  const auto& instruction = cfg.stage == 1 ? no_instruction : s.instruction;
  AssembleOptions opts;
  opts.pad_to = pad_to;
  auto seq = assemble_input(g, model, x_image, instruction, s.response, opts);
  if (cfg.loss_kind() == LossKind::Mm) return loss_mm(g, model, seq);
  CombinedLoss<S> out;
  out.q = compute_q(g, model, seq);
  out.lm = loss_lm(g, seq, out.q);
  out.vm = g.scalar(S(0));
  out.total = out.lm;
  return out;
}

}  // namespace detail

// Trains exactly the stage's parameter groups with the stage's loss; every
// other parameter is left bit-identical. Metrics rows are appended per step.
template <class S>
RunResult run_stage(Model<S>& model, const Dataset& data, const StageConfig& cfg,
                    MetricsWriter* metrics = nullptr, bool verbose = false) {
  if (data.size() == 0) throw ContractError("run_stage: dataset is empty");
  const LossKind kind = cfg.loss_kind();
  if (cfg.stage == 3 && kind != LossKind::VmDistill)
    throw ContractError("run_stage: stage III trains with the distillation loss");
  model.params().set_trainable_groups(cfg.trainable_groups());
  model.params().zero_grads();
  AdamW<S> opt;
  BatchIterator iter(data.size(), cfg.batch_size, cfg.seed, /*drop_last=*/true);
  const std::size_t per_epoch = iter.batches_per_epoch();
  if (per_epoch == 0) throw ContractError("run_stage: batch size exceeds dataset size");
  const std::size_t total_steps = per_epoch * cfg.epochs;

  // Stage III supervises the VM head against a frozen teacher, so visual
  // features and teacher distributions are cached per distinct image.
  std::map<std::vector<std::uint8_t>, std::pair<std::vector<S>, std::vector<S>>> teacher_cache;

  RunResult res;
  res.steps = total_steps;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : iter.batches(epoch)) {
      const auto t0 = std::chrono::steady_clock::now();
      const double lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_ratio);
      double batch_loss = 0, batch_lm = 0, batch_vm = 0;
      const S inv_b = S(1) / S(batch.size());

      std::size_t pad_to = 0;
      if (kind != LossKind::VmDistill) {
        const ModelConfig& mc = model.config();
        for (std::size_t idx : batch) {
          const auto& s = data[idx];
          const std::size_t instr = cfg.stage == 1 ? 0 : s.instruction.size();
          pad_to = std::max(pad_to, 1 + mc.patches() + instr + s.response.size() + 1);
        }
      }

      for (std::size_t idx : batch) {
        const SyntheticSample& s = data[idx];
        try {
          if (kind == LossKind::VmDistill) {
            auto it = teacher_cache.find(s.pixels);
            if (it == teacher_cache.end()) {
              const ModelConfig& mc = model.config();
              Graph<S> tg(false);
              auto px = tg.input({mc.patches(), mc.patch_dim()},
                                 patch_matrix<S>(s.pixels, mc.patch_rows, mc.patch_px));
              auto x_image = model.adapt(tg, model.visual_encode(tg, px));
              auto seq = assemble_input(tg, model, x_image, {}, {});
              auto q = compute_q(tg, model, seq);
              it = teacher_cache
                       .emplace(s.pixels, std::make_pair(x_image.value(), q.value()))
                       .first;
            }
            const ModelConfig& mc = model.config();
            Graph<S> g;
            auto x_image = g.input({mc.patches(), mc.model_dim}, it->second.first);
            auto q_label = g.input({mc.patches() + 1, mc.vocab_size}, it->second.second);
            auto seq = assemble_input(g, model, x_image, {}, {});
            auto p_pred = visual_tokens(g, model, seq);
            auto loss = loss_vm_distill(g, seq, q_label, p_pred);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
              throw NumericError("non-finite distillation loss");
            g.backward(loss);
            g.accumulate_param_grads(inv_b);
            batch_loss += lv / batch.size();
            batch_vm += lv / batch.size();
          } else {
            Graph<S> g;
            auto losses = detail::lm_family_sample_loss(g, model, s, cfg, pad_to);
            const double lt = static_cast<double>(losses.total.item());
            if (!std::isfinite(lt)) throw NumericError("non-finite loss");
            g.backward(losses.total);
            g.accumulate_param_grads(inv_b);
            batch_loss += lt / batch.size();
            batch_lm += static_cast<double>(losses.lm.item()) / batch.size();
            batch_vm += static_cast<double>(losses.vm.item()) / batch.size();
          }
        } catch (const Error& e) {
          throw Error("stage " + std::to_string(cfg.stage) + " step " +
                      std::to_string(step) + ": " + e.what());
        }
      }

      clip_grad_norm(model.params(), cfg.clip_norm);
      opt.step(model.params(), lr, cfg.weight_decay);
      model.params().zero_grads();

      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      StepMetrics m{step, lr, batch_loss, batch_lm, batch_vm, secs};
      if (metrics) metrics->write(m);
      res.metrics.push_back(m);
      if (step == 0) res.initial_loss = batch_loss;
      res.final_loss = batch_loss;
      if (verbose && (step % 50 == 0 || step + 1 == total_steps))
        std::cout << "stage " << cfg.stage << " step " << step << "/" << total_steps
                  << " lr " << lr << " loss " << batch_loss << "\n";
      ++step;
    }
  }
  return res;
}

// ---- evaluation -----------------------------------------------------------------------------

struct EvalResult {
  double caption_accuracy = 0;  // greedy exact-match
  double mean_loss_lm = 0;
  double mean_loss_vm = 0;  // forward KL(P' || Q) over visual positions
  std::size_t n = 0;
};

// Visual rows for one sample: real adapter outputs, or pseudo image features.
template <class S>
Tensor<S> eval_visual_rows(Graph<S>& g, Model<S>& model, const SyntheticSample& s,
                           bool pseudo) {
  const ModelConfig& mc = model.config();
  auto px = g.input({mc.patches(), mc.patch_dim()},
                    patch_matrix<S>(s.pixels, mc.patch_rows, mc.patch_px));
  auto x_image = model.adapt(g, model.visual_encode(g, px));
  if (!pseudo) return x_image;
  return pseudo_image_features(g, model, x_image);
}

template <class S>
std::vector<TokenId> greedy_caption(Model<S>& model, const SyntheticSample& s, bool pseudo,
                                    std::size_t max_new_tokens) {
  std::vector<TokenId> generated;
  for (std::size_t i = 0; i < max_new_tokens; ++i) {
    Graph<S> g(false);
    auto rows = eval_visual_rows(g, model, s, pseudo);
    AssembleOptions opts;
    opts.append_eos = false;
    auto seq = assemble_input(g, model, rows, s.instruction, generated, opts);
    auto q = compute_q(g, model, seq);
    const std::size_t C = model.config().vocab_size;
    const S* last = q.value().data() + (seq.length() - 1) * C;
    std::size_t best = 0;
    for (std::size_t j = 1; j < C; ++j)
      if (last[j] > last[best]) best = j;
    if (best == kEosId) break;
    generated.push_back(best);
  }
  return generated;
}

template <class S>
EvalResult evaluate(Model<S>& model, const Dataset& data, bool pseudo = false,
                    std::size_t max_new_tokens = 8) {
  EvalResult r;
  r.n = data.size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const SyntheticSample& s = data[i];
    {
      Graph<S> g(false);
      auto rows = eval_visual_rows(g, model, s, pseudo);
      auto seq = assemble_input(g, model, rows, s.instruction, s.response);
      auto q = compute_q(g, model, seq);
      auto pv = visual_tokens(g, model, seq);
      r.mean_loss_lm += static_cast<double>(loss_lm(g, seq, q).item()) / data.size();
      r.mean_loss_vm += static_cast<double>(loss_vm(g, seq, q, pv).item()) / data.size();
    }
    if (greedy_caption(model, s, pseudo, max_new_tokens) == s.response)
      r.caption_accuracy += 1.0 / data.size();
  }
  return r;
}

// ---- full pipeline -----------------------------------------------------------------------------

struct TrainPlan {
  ModelConfig model;
  std::uint64_t seed = 7;
  std::string dataset;
  std::string out_dir = ".";
  std::array<StageConfig, 4> stages{StageConfig::defaults(1), StageConfig::defaults(2),
                                    StageConfig::defaults(3), StageConfig::defaults(4)};
  bool verbose = false;

  StageConfig stage(int k) const { return stages.at(static_cast<std::size_t>(k - 1)); }
};

inline std::string stage_checkpoint_path(const std::string& out_dir, int stage) {
  return out_dir + "/ckpt_stage" + std::to_string(stage) + ".bin";
}

inline std::string stage_metrics_path(const std::string& out_dir, int stage) {
  return out_dir + "/metrics_stage" + std::to_string(stage) + ".csv";
}

// Runs stages 1..4 in order from a fresh seeded initialization, saving one
// checkpoint and one metrics file per stage. Optional per-stage hook runs
// after each stage (used by the acceptance suite to verify freezing).
template <class S>
std::array<RunResult, 4> train_all(
    const TrainPlan& plan, const Dataset& data, Model<S>* out_model = nullptr,
    const std::function<void(int, Model<S>&)>& after_stage = {}) {
  Model<S> model(plan.model);
  Rng init_rng(plan.seed);
  model.init_weights(plan.seed);
  std::array<RunResult, 4> results;
  for (int stage = 1; stage <= 4; ++stage) {
    StageConfig cfg = plan.stage(stage);
    cfg.stage = stage;
    if (cfg.dataset.empty()) cfg.dataset = plan.dataset;
    cfg.seed = plan.seed * 1000 + static_cast<std::uint64_t>(stage);
    MetricsWriter metrics(stage_metrics_path(plan.out_dir, stage));
    results[static_cast<std::size_t>(stage - 1)] =
        run_stage(model, data, cfg, &metrics, plan.verbose);
    TrainState st;
    st.stage = stage;
    st.step = results[static_cast<std::size_t>(stage - 1)].steps;
    st.rng_state = init_rng.state();
    save_checkpoint(stage_checkpoint_path(plan.out_dir, stage), model, st);
    if (after_stage) after_stage(stage, model);
  }
  if (out_model) *out_model = std::move(model);
  return results;
}

}  // namespace vistok
