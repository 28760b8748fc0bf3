#pragma once

// Interpretability probes: per-patch nearest-token maps (cosine against the
// embedding table), highest-probability visual-token maps, and pseudo image
// features built from visual tokens and the embedding table.

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "vistok/common.hpp"
#include "vistok/data.hpp"
#include "vistok/model.hpp"
#include "vistok/objectives.hpp"

namespace vistok {

struct TokenMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> grid;          // row-major, rows*cols entries
  std::vector<std::string> tokens;    // decoded token per cell
  std::vector<double> top_probs;      // per cell; 0 for the cosine map
  std::string source;                 // "nearest_cosine" | "top_visual_token"

  TokenId at(std::size_t r, std::size_t c) const { return grid[r * cols + c]; }
};

// Token whose embedding row has the highest cosine similarity with x.
// Ties break toward the smallest index; zero-norm rows are never selected.
template <class S>
TokenId nearest_token(const std::vector<S>& x, const std::vector<S>& embeddings,
                      std::size_t vocab, std::size_t dim) {
  if (x.size() != dim)
    throw ShapeError("nearest_token: vector length " + std::to_string(x.size()) +
                     " does not match embedding dim " + std::to_string(dim));
  double xn = 0;
  for (S v : x) xn += static_cast<double>(v) * static_cast<double>(v);
  if (xn == 0) throw DegenerateInputError("nearest_token: zero input vector");
  xn = std::sqrt(xn);

  TokenId best = 0;
  double best_sim = -2.0;
  bool found = false;
  for (std::size_t j = 0; j < vocab; ++j) {
    const S* row = embeddings.data() + j * dim;
    double dot = 0, rn = 0;
    for (std::size_t k = 0; k < dim; ++k) {
      dot += static_cast<double>(x[k]) * static_cast<double>(row[k]);
      rn += static_cast<double>(row[k]) * static_cast<double>(row[k]);
    }
    if (rn == 0) continue;
    const double sim = dot / (xn * std::sqrt(rn));
    if (!found || sim > best_sim) {
      found = true;
      best_sim = sim;
      best = j;
    }
  }
  if (!found) throw DegenerateInputError("nearest_token: all embedding rows are zero");
  return best;
}

// Adapter-output visual embeddings for one image, evaluated without grads.
template <class S>
std::vector<S> image_embeddings(Model<S>& model, const std::vector<std::uint8_t>& pixels) {
  const ModelConfig& cfg = model.config();
  Graph<S> g(false);
  auto px = g.input({cfg.patches(), cfg.patch_dim()},
                    patch_matrix<S>(pixels, cfg.patch_rows, cfg.patch_px));
  return model.adapt(g, model.visual_encode(g, px)).value();
}

template <class S>
TokenMap token_map_nearest(Model<S>& model, const Vocabulary& vocab,
                           const std::vector<std::uint8_t>& pixels) {
  const ModelConfig& cfg = model.config();
  const std::size_t d = cfg.model_dim;
  const auto emb = model.params().at("decoder.embeddings").value;
  const auto rows = image_embeddings(model, pixels);
  TokenMap map;
  map.rows = cfg.patch_rows;
  map.cols = cfg.patch_cols;
  map.source = "nearest_cosine";
  for (std::size_t p = 0; p < cfg.patches(); ++p) {
    std::vector<S> x(rows.begin() + p * d, rows.begin() + (p + 1) * d);
    const TokenId id = nearest_token<S>(x, emb, cfg.vocab_size, d);
    map.grid.push_back(id);
    map.tokens.push_back(vocab.token(id));
    map.top_probs.push_back(0.0);
  }
  return map;
}

// Visual-token distributions for one image, [P x C], evaluated without grads.
template <class S>
std::vector<S> visual_token_rows(Model<S>& model, const std::vector<std::uint8_t>& pixels) {
  const ModelConfig& cfg = model.config();
  Graph<S> g(false);
  auto px = g.input({cfg.patches(), cfg.patch_dim()},
                    patch_matrix<S>(pixels, cfg.patch_rows, cfg.patch_px));
  auto x_image = model.adapt(g, model.visual_encode(g, px));
  return g.softmax(model.vm_head(g, x_image)).value();
}

template <class S>
TokenMap token_map_top(Model<S>& model, const Vocabulary& vocab,
                       const std::vector<std::uint8_t>& pixels) {
  const ModelConfig& cfg = model.config();
  const std::size_t C = cfg.vocab_size;
  const auto probs = visual_token_rows(model, pixels);
  TokenMap map;
  map.rows = cfg.patch_rows;
  map.cols = cfg.patch_cols;
  map.source = "top_visual_token";
  for (std::size_t p = 0; p < cfg.patches(); ++p) {
    const S* row = probs.data() + p * C;
    std::size_t best = 0;
    for (std::size_t j = 1; j < C; ++j)
      if (row[j] > row[best]) best = j;
    map.grid.push_back(best);
    map.tokens.push_back(vocab.token(best));
    map.top_probs.push_back(static_cast<double>(row[best]));
  }
  return map;
}

// Pseudo image features: each row of X_p is the visual-token-weighted convex
// combination of embedding rows, X_p = P' * W_embeddings.
template <class S>
Tensor<S> pseudo_image_features(Graph<S>& g, Model<S>& model, Tensor<S> x_image) {
  auto p_visual = g.softmax(model.vm_head(g, x_image));
  return g.matmul(p_visual, g.param(model.params().at("decoder.embeddings")));
}

inline nlohmann::json to_json(const TokenMap& map) {
  nlohmann::json j;
  j["source"] = map.source;
  j["rows"] = map.rows;
  j["cols"] = map.cols;
  nlohmann::json grid = nlohmann::json::array();
  nlohmann::json tokens = nlohmann::json::array();
  nlohmann::json probs = nlohmann::json::array();
  for (std::size_t r = 0; r < map.rows; ++r) {
    nlohmann::json gr = nlohmann::json::array(), tr = nlohmann::json::array(),
                   pr = nlohmann::json::array();
    for (std::size_t c = 0; c < map.cols; ++c) {
      gr.push_back(map.grid[r * map.cols + c]);
      tr.push_back(map.tokens[r * map.cols + c]);
      pr.push_back(map.top_probs[r * map.cols + c]);
    }
    grid.push_back(gr);
    tokens.push_back(tr);
    probs.push_back(pr);
  }
  j["grid"] = grid;
  j["tokens"] = tokens;
  j["top_probs"] = probs;
  return j;
}

}  // namespace vistok
