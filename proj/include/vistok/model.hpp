#pragma once

// The five model components: visual encoder (patch projector), adapter MLP,
// causal multi-modal decoder with its embedding table, MM head and VM head.
// Parameters are partitioned into groups so training stages can freeze them
// independently.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vistok/common.hpp"
#include "vistok/tensor.hpp"

namespace vistok {

struct ModelConfig {
  std::size_t vocab_size = 64;    // C
  std::size_t model_dim = 64;     // d
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t max_seq_len = 128;
  std::size_t patch_rows = 4;
  std::size_t patch_cols = 4;
  std::size_t patch_px = 8;       // patch is patch_px x patch_px x channels
  std::size_t channels = 3;
  std::size_t vis_dim = 32;       // d_v, visual encoder output width
  std::size_t adapter_hidden = 128;

  std::size_t patches() const { return patch_rows * patch_cols; }
  std::size_t patch_dim() const { return patch_px * patch_px * channels; }
  std::size_t mlp_hidden() const { return 4 * model_dim; }
  std::size_t head_dim() const { return model_dim / heads; }
  std::size_t image_px() const { return patch_rows * patch_px * patch_cols * patch_px * channels; }

  void validate() const {
    if (model_dim == 0 || heads == 0 || model_dim % heads != 0)
      throw ContractError("config: model_dim must be a positive multiple of heads");
    if (vocab_size == 0 || layers == 0 || max_seq_len == 0)
      throw ContractError("config: vocab_size, layers and max_seq_len must be positive");
  }
};

enum class Modality : std::uint8_t { Visual = 0, Text = 1 };

// Named parameters with stable registration order, partitioned into the five
// freezing groups. Registration order doubles as the deterministic iteration
// and serialization order.
template <class S>
class ParamSet {
public:
  Parameter<S>& add(std::string name, Group group, Shape shape) {
    if (index_.count(name)) throw ContractError("param '" + name + "' registered twice");
    params_.push_back(std::make_unique<Parameter<S>>(name, group, std::move(shape)));
    index_[params_.back()->name] = params_.size() - 1;
    return *params_.back();
  }

  Parameter<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown param '" + name + "'");
    return *params_[it->second];
  }
  const Parameter<S>& at(const std::string& name) const {
    return const_cast<ParamSet*>(this)->at(name);
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  Parameter<S>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<S>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
  }

  std::vector<Parameter<S>*> group(Group g) {
    std::vector<Parameter<S>*> out;
    for (auto& p : params_)
      if (p->group == g) out.push_back(p.get());
    return out;
  }

  void set_trainable_groups(const std::vector<Group>& groups) {
    for (auto& p : params_) {
      bool on = false;
      for (Group g : groups) on = on || (p->group == g);
      p->trainable = on;
    }
  }

  void zero_grads() {
    for (auto& p : params_) p->zero_grad();
  }

private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class S>
class Model {
public:
  explicit Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    register_params();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<S>& params() { return params_; }
  const ParamSet<S>& params() const { return params_; }

  // Truncated normal (sigma 0.02) for weight matrices, the embedding table
  // and the encoder's patch-position embedding (frozen, so it must carry its
  // positional information from initialization); zeros for biases and
  // layer-norm shifts; ones for layer-norm gains.
  void init_weights(std::uint64_t seed) {
    Rng rng(seed);
    const double sigma = 0.02;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<S>& p = params_[i];
      const std::string& n = p.name;
      bool zero = ends_with(n, ".bias");
      bool one = ends_with(n, ".gain");
      for (auto& v : p.value)
        v = zero ? S(0) : one ? S(1) : S(rng.truncated_normal(sigma));
    }
  }

  // ---- visual encoder: per-patch linear projection + 2-D positional term ----
  // pixels: [P x patch_dim], already normalized to [0, 1].
  Tensor<S> visual_encode(Graph<S>& g, Tensor<S> pixels) {
    if (pixels.shape() != Shape{cfg_.patches(), cfg_.patch_dim()})
      throw ShapeError("visual_encode: expected " +
                       shape_str({cfg_.patches(), cfg_.patch_dim()}) + ", got " +
                       shape_str(pixels.shape()));
    auto w = g.param(params_.at("encoder.proj"));   // [d_v x patch_dim]
    auto b = g.param(params_.at("encoder.bias"));
    auto pos = g.param(params_.at("encoder.pos"));  // [P x d_v]
    return g.add(g.add_bias(g.matmul_nt(pixels, w), b), pos);
  }

  // ---- adapter: two-layer MLP, rows independent -----------------------------
  Tensor<S> adapt(Graph<S>& g, Tensor<S> features) {
    if (features.shape().size() != 2 || features.cols() != cfg_.vis_dim)
      throw ShapeError("adapt: expected [P x " + std::to_string(cfg_.vis_dim) + "], got " +
                       shape_str(features.shape()));
    auto h = g.add_bias(g.matmul(features, g.param(params_.at("adapter.w1"))),
                        g.param(params_.at("adapter.b1")));
    h = g.gelu(h);
    return g.add_bias(g.matmul(h, g.param(params_.at("adapter.w2"))),
                      g.param(params_.at("adapter.b2")));
  }

  // ---- embedding lookup ------------------------------------------------------
  Tensor<S> embed_text(Graph<S>& g, const std::vector<std::size_t>& token_ids) {
    for (std::size_t id : token_ids)
      if (id >= cfg_.vocab_size)
        throw VocabError("embed_text: token id " + std::to_string(id) + " >= vocab size " +
                         std::to_string(cfg_.vocab_size));
    return g.take_rows(g.param(params_.at("decoder.embeddings")), token_ids);
  }

  // ---- causal decoder ----------------------------------------------------------
  // Pre-norm transformer: `layers` blocks of (LN -> causal attention ->
  // residual, LN -> MLP -> residual), then a final LN. Position information
  // rides on the input rows (the visual encoder's patch-position term); the
  // decoder itself adds none, so output row n depends only on input rows <= n
  // and its own index through masking alone.
  Tensor<S> decode(Graph<S>& g, Tensor<S> x_input, const std::vector<Modality>& tags) {
    const std::size_t L = x_input.rows();
    if (L > cfg_.max_seq_len)
      throw LengthError("decode: sequence length " + std::to_string(L) + " exceeds max " +
                        std::to_string(cfg_.max_seq_len));
    if (!tags.empty() && tags.size() != L)
      throw ShapeError("decode: " + std::to_string(tags.size()) + " modality tags for length " +
                       std::to_string(L));
    auto x = x_input;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      x = g.add(x, attention(g, layer_norm(g, x, l, "ln1"), l));
      x = g.add(x, mlp(g, layer_norm(g, x, l, "ln2"), l));
    }
    return g.layer_norm(x, g.param(params_.at("decoder.lnf.gain")),
                        g.param(params_.at("decoder.lnf.bias")));
  }

  // ---- heads: unbiased C x d linear maps -----------------------------------------
  Tensor<S> mm_head(Graph<S>& g, Tensor<S> hidden) {
    check_head_input("mm_head", hidden);
    return g.matmul_nt(hidden, g.param(params_.at("mm_head.w")));
  }

  Tensor<S> vm_head(Graph<S>& g, Tensor<S> x_image) {
    check_head_input("vm_head", x_image);
    return g.matmul_nt(x_image, g.param(params_.at("vm_head.w")));
  }

private:
  void register_params() {
    const std::size_t d = cfg_.model_dim, dv = cfg_.vis_dim, C = cfg_.vocab_size;
    params_.add("encoder.proj", Group::VisualEncoder, {dv, cfg_.patch_dim()});
    params_.add("encoder.bias", Group::VisualEncoder, {dv});
    params_.add("encoder.pos", Group::VisualEncoder, {cfg_.patches(), dv});
    params_.add("adapter.w1", Group::Adapter, {dv, cfg_.adapter_hidden});
    params_.add("adapter.b1", Group::Adapter, {cfg_.adapter_hidden});
    params_.add("adapter.w2", Group::Adapter, {cfg_.adapter_hidden, d});
    params_.add("adapter.b2", Group::Adapter, {d});
    params_.add("decoder.embeddings", Group::Decoder, {C, d});
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string b = "decoder.block" + std::to_string(l) + ".";
      params_.add(b + "ln1.gain", Group::Decoder, {d});
      params_.add(b + "ln1.bias", Group::Decoder, {d});
      params_.add(b + "wq", Group::Decoder, {d, d});
      params_.add(b + "bq.bias", Group::Decoder, {d});
      params_.add(b + "wk", Group::Decoder, {d, d});
      params_.add(b + "bk.bias", Group::Decoder, {d});
      params_.add(b + "wv", Group::Decoder, {d, d});
      params_.add(b + "bv.bias", Group::Decoder, {d});
      params_.add(b + "wo", Group::Decoder, {d, d});
      params_.add(b + "bo.bias", Group::Decoder, {d});
      params_.add(b + "ln2.gain", Group::Decoder, {d});
      params_.add(b + "ln2.bias", Group::Decoder, {d});
      params_.add(b + "wm1", Group::Decoder, {d, cfg_.mlp_hidden()});
      params_.add(b + "bm1.bias", Group::Decoder, {cfg_.mlp_hidden()});
      params_.add(b + "wm2", Group::Decoder, {cfg_.mlp_hidden(), d});
      params_.add(b + "bm2.bias", Group::Decoder, {d});
    }
    params_.add("decoder.lnf.gain", Group::Decoder, {d});
    params_.add("decoder.lnf.bias", Group::Decoder, {d});
    params_.add("mm_head.w", Group::MmHead, {C, d});
    params_.add("vm_head.w", Group::VmHead, {C, d});
  }

  Tensor<S> layer_norm(Graph<S>& g, Tensor<S> x, std::size_t layer, const char* which) {
    const std::string b = "decoder.block" + std::to_string(layer) + "." + which;
    return g.layer_norm(x, g.param(params_.at(b + ".gain")), g.param(params_.at(b + ".bias")));
  }

  Tensor<S> attention(Graph<S>& g, Tensor<S> x, std::size_t layer) {
    const std::string b = "decoder.block" + std::to_string(layer) + ".";
    auto q = g.add_bias(g.matmul(x, g.param(params_.at(b + "wq"))), g.param(params_.at(b + "bq.bias")));
    auto k = g.add_bias(g.matmul(x, g.param(params_.at(b + "wk"))), g.param(params_.at(b + "bk.bias")));
    auto v = g.add_bias(g.matmul(x, g.param(params_.at(b + "wv"))), g.param(params_.at(b + "bv.bias")));
    const std::size_t hd = cfg_.head_dim();
    const S inv_sqrt = S(1) / std::sqrt(S(hd));
    std::vector<Tensor<S>> heads;
    heads.reserve(cfg_.heads);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      auto qh = g.slice_cols(q, h * hd, (h + 1) * hd);
      auto kh = g.slice_cols(k, h * hd, (h + 1) * hd);
      auto vh = g.slice_cols(v, h * hd, (h + 1) * hd);
      auto weights = g.causal_softmax(g.scale(g.matmul_nt(qh, kh), inv_sqrt));
      heads.push_back(g.matmul(weights, vh));
    }
    auto merged = cfg_.heads == 1 ? heads[0] : g.concat_cols(heads);
    return g.add_bias(g.matmul(merged, g.param(params_.at(b + "wo"))),
                      g.param(params_.at(b + "bo.bias")));
  }

  Tensor<S> mlp(Graph<S>& g, Tensor<S> x, std::size_t layer) {
    const std::string b = "decoder.block" + std::to_string(layer) + ".";
    auto h = g.add_bias(g.matmul(x, g.param(params_.at(b + "wm1"))), g.param(params_.at(b + "bm1.bias")));
    h = g.gelu(h);
    return g.add_bias(g.matmul(h, g.param(params_.at(b + "wm2"))), g.param(params_.at(b + "bm2.bias")));
  }

  void check_head_input(const char* op, const Tensor<S>& t) const {
    if (t.shape().size() != 2 || t.cols() != cfg_.model_dim)
      throw ShapeError(std::string(op) + ": expected [* x " + std::to_string(cfg_.model_dim) +
                       "], got " + shape_str(t.shape()));
  }

  static bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  }

  ModelConfig cfg_;
  ParamSet<S> params_;
};

}  // namespace vistok
