#pragma once

// Synthetic image-caption corpus: a colored shape in one quadrant of a 4x4
// patch grid on a black background, captioned "<color> <shape> <row> <col>".
// Captions are a pure function of the pixels. Files are JSONL, one sample per
// line, plus a one-token-per-line vocabulary file.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vistok/common.hpp"
#include "vistok/objectives.hpp"

namespace vistok {

struct SyntheticSample;
inline nlohmann::json to_json(const SyntheticSample& s);

class Vocabulary {
public:
  // Built-in word list padded with <unusedN> entries up to `size` ids.
  static Vocabulary standard(std::size_t size = 64) {
    std::vector<std::string> words = {
        "<pad>", "<bos>", "<eos>",
        "red", "green", "blue", "yellow",
        "square", "circle", "triangle", "cross",
        "top", "bottom", "left", "right",
        "describe", "the", "image",
        "what", "colour", "shape", "is", "shown", "in", "this", "picture",
        "a", "an", "of", "and", "on", "background", "black", "white",
        "small", "large", "solid", "object", "corner", "center", "edge", "dark",
    };
    if (words.size() > size)
      throw ContractError("vocabulary: built-in word list exceeds requested size");
    for (std::size_t i = words.size(); i < size; ++i)
      words.push_back("<unused" + std::to_string(i) + ">");
    return Vocabulary(std::move(words));
  }

  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {}

  std::size_t size() const { return words_.size(); }

  const std::string& token(TokenId id) const {
    if (id >= words_.size())
      throw VocabError("decode: token id " + std::to_string(id) + " >= vocabulary size " +
                       std::to_string(words_.size()));
    return words_[id];
  }

  TokenId id_of(const std::string& word) const {
    for (std::size_t i = 0; i < words_.size(); ++i)
      if (words_[i] == word) return i;
    throw VocabError("encode: word '" + word + "' is not in the vocabulary");
  }

  std::vector<TokenId> encode(const std::string& text) const {
    std::vector<TokenId> ids;
    std::istringstream is(text);
    std::string word;
    while (is >> word) ids.push_back(id_of(word));
    return ids;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("vocabulary: cannot write " + path);
    for (const auto& w : words_) f << w << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("vocabulary: cannot read " + path);
    std::vector<std::string> words;
    std::string line;
    while (std::getline(f, line)) words.push_back(line);
    if (words.empty()) throw ParseError("vocabulary: file " + path + " is empty");
    return Vocabulary(std::move(words));
  }

private:
  std::vector<std::string> words_;
};

// ---- synthetic images ------------------------------------------------------

struct ImageSpec {
  std::size_t color;     // 0..3
  std::size_t shape;     // 0..3
  std::size_t quadrant;  // 0..3 row-major: TL, TR, BL, BR
};

struct SyntheticSample {
  std::vector<std::uint8_t> pixels;  // row-major [H][W][RGB]
  std::vector<TokenId> instruction;
  std::vector<TokenId> response;
};

class CorpusGen {
public:
  explicit CorpusGen(const Vocabulary& vocab, std::size_t grid = 4, std::size_t patch_px = 8)
      : vocab_(vocab), grid_(grid), patch_px_(patch_px) {
    color_ids_ = {vocab.id_of("red"), vocab.id_of("green"), vocab.id_of("blue"),
                  vocab.id_of("yellow")};
    shape_ids_ = {vocab.id_of("square"), vocab.id_of("circle"), vocab.id_of("triangle"),
                  vocab.id_of("cross")};
    instruction_ = vocab.encode("describe the image");
  }

  static constexpr std::size_t kColors = 4;
  static constexpr std::size_t kShapes = 4;
  static constexpr std::size_t kQuadrants = 4;
  static constexpr std::size_t kCombos = kColors * kShapes * kQuadrants;

  std::size_t image_side() const { return grid_ * patch_px_; }
  std::size_t pixel_count() const { return image_side() * image_side() * 3; }

  std::vector<std::uint8_t> render(const ImageSpec& spec) const {
    const std::size_t side = image_side();
    std::vector<std::uint8_t> px(pixel_count(), 0);
    const auto rgb = color_rgb(spec.color);
    const std::size_t half = side / 2;
    const std::size_t oy = (spec.quadrant / 2) * half;
    const std::size_t ox = (spec.quadrant % 2) * half;
    for (std::size_t y = 0; y < half; ++y)
      for (std::size_t x = 0; x < half; ++x)
        if (inside_shape(spec.shape, y, x, half)) {
          std::uint8_t* p = px.data() + ((oy + y) * side + ox + x) * 3;
          p[0] = rgb[0];
          p[1] = rgb[1];
          p[2] = rgb[2];
        }
    return px;
  }

  std::vector<TokenId> caption(const ImageSpec& spec) const {
    const TokenId row = vocab_.id_of(spec.quadrant / 2 == 0 ? "top" : "bottom");
    const TokenId col = vocab_.id_of(spec.quadrant % 2 == 0 ? "left" : "right");
    return {color_ids_[spec.color], shape_ids_[spec.shape], row, col};
  }

  const std::vector<TokenId>& instruction() const { return instruction_; }

  // Inverse of render: identifies the spec by exhaustive re-rendering.
  ImageSpec spec_for_pixels(const std::vector<std::uint8_t>& pixels) const {
    for (std::size_t i = 0; i < kCombos; ++i) {
      const ImageSpec s = combo(i);
      if (render(s) == pixels) return s;
    }
    throw ParseError("pixels do not match any synthetic image");
  }

  std::vector<TokenId> caption_for_pixels(const std::vector<std::uint8_t>& pixels) const {
    return caption(spec_for_pixels(pixels));
  }

  static ImageSpec combo(std::size_t i) {
    return ImageSpec{i / (kShapes * kQuadrants), (i / kQuadrants) % kShapes, i % kQuadrants};
  }

  // Deterministic corpus: every color x shape x quadrant combination appears
  // floor/ceil(n / 64) times, order shuffled by the seed. The task mix
  // alternates per combination between plain captioning (empty instruction)
  // and instruction following, so both sequence layouts are trained.
  std::vector<SyntheticSample> generate(std::uint64_t seed, std::size_t n_samples) const {
    if (n_samples < 1) throw ContractError("generate: n_samples must be >= 1");
    const std::size_t blocks = (n_samples + kCombos - 1) / kCombos;
    std::vector<std::size_t> order;
    order.reserve(blocks * kCombos);
    for (std::size_t rep = 0; rep < blocks; ++rep)
      for (std::size_t i = 0; i < kCombos; ++i) order.push_back(rep * kCombos + i);
    Rng rng(seed);
    rng.shuffle(order);
    order.resize(n_samples);
    std::vector<SyntheticSample> out;
    out.reserve(n_samples);
    for (std::size_t coded : order) {
      const ImageSpec s = combo(coded % kCombos);
      const bool with_instruction = (coded / kCombos) % 2 == 1;
      out.push_back(SyntheticSample{
          render(s), with_instruction ? instruction_ : std::vector<TokenId>{}, caption(s)});
    }
    return out;
  }

  void write_corpus(std::uint64_t seed, std::size_t n_samples, const std::string& path) const {
    auto samples = generate(seed, n_samples);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("gen-data: cannot write " + path);
    for (const auto& s : samples) f << to_json(s).dump() << '\n';
    if (!f) throw IoError("gen-data: write failed for " + path);
  }

  static std::array<std::uint8_t, 3> color_rgb(std::size_t color) {
    switch (color) {
      case 0: return {255, 0, 0};
      case 1: return {0, 255, 0};
      case 2: return {0, 0, 255};
      default: return {255, 255, 0};
    }
  }

private:
  static bool inside_shape(std::size_t shape, std::size_t y, std::size_t x, std::size_t side) {
    const double c = (static_cast<double>(side) - 1.0) / 2.0;
    switch (shape) {
      case 0:  // square fills the quadrant
        return true;
      case 1: {  // inscribed disc
        const double dy = static_cast<double>(y) - c;
        const double dx = static_cast<double>(x) - c;
        const double r = static_cast<double>(side) / 2.0;
        return dy * dy + dx * dx <= r * r;
      }
      case 2:  // lower-left triangle
        return y >= x;
      default: {  // plus sign, bars 6 px wide at side 16
        const std::size_t lo = side * 5 / 16, hi = side * 11 / 16;
        return (y >= lo && y < hi) || (x >= lo && x < hi);
      }
    }
  }

  const Vocabulary& vocab_;
  std::size_t grid_;
  std::size_t patch_px_;
  std::vector<TokenId> color_ids_, shape_ids_, instruction_;
};

// ---- JSONL dataset ----------------------------------------------------------

inline nlohmann::json to_json(const SyntheticSample& s) {
  nlohmann::json j;
  j["pixels"] = s.pixels;
  j["instruction"] = s.instruction;
  j["response"] = s.response;
  return j;
}

class Dataset {
public:
  static Dataset load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("dataset: cannot read " + path);
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("pixels") || !j.contains("instruction") ||
          !j.contains("response"))
        throw ParseError("dataset: " + path + " line " + std::to_string(line_no) +
                         ": malformed sample");
      SyntheticSample s;
      try {
        s.pixels = j["pixels"].get<std::vector<std::uint8_t>>();
        s.instruction = j["instruction"].get<std::vector<TokenId>>();
        s.response = j["response"].get<std::vector<TokenId>>();
      } catch (const nlohmann::json::exception& e) {
        throw ParseError("dataset: " + path + " line " + std::to_string(line_no) + ": " +
                         e.what());
      }
      ds.samples_.push_back(std::move(s));
    }
    return ds;
  }

  static Dataset from_samples(std::vector<SyntheticSample> samples) {
    Dataset ds;
    ds.samples_ = std::move(samples);
    return ds;
  }

  std::size_t size() const { return samples_.size(); }
  const SyntheticSample& operator[](std::size_t i) const { return samples_[i]; }

private:
  std::vector<SyntheticSample> samples_;
};

// Pixels of one sample as a patch-major matrix [P x patch_px*patch_px*3],
// normalized to [0, 1].
template <class S>
std::vector<S> patch_matrix(const std::vector<std::uint8_t>& pixels, std::size_t grid,
                            std::size_t patch_px) {
  const std::size_t side = grid * patch_px;
  if (pixels.size() != side * side * 3)
    throw ShapeError("patch_matrix: expected " + std::to_string(side * side * 3) +
                     " pixel values, got " + std::to_string(pixels.size()));
  const std::size_t pdim = patch_px * patch_px * 3;
  std::vector<S> out(grid * grid * pdim);
  for (std::size_t pr = 0; pr < grid; ++pr)
    for (std::size_t pc = 0; pc < grid; ++pc) {
      S* dst = out.data() + (pr * grid + pc) * pdim;
      for (std::size_t y = 0; y < patch_px; ++y)
        for (std::size_t x = 0; x < patch_px; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch)
            *dst++ = S(pixels[((pr * patch_px + y) * side + pc * patch_px + x) * 3 + ch]) / S(255);
    }
  return out;
}

// Deterministic per-epoch shuffled batching over a dataset.
class BatchIterator {
public:
  BatchIterator(std::size_t n_samples, std::size_t batch_size, std::uint64_t seed,
                bool drop_last = true)
      : n_(n_samples), batch_(batch_size), seed_(seed), drop_last_(drop_last) {
    if (batch_ == 0) throw ContractError("batch_iterator: batch size must be positive");
  }

  std::size_t batches_per_epoch() const {
    return drop_last_ ? n_ / batch_ : (n_ + batch_ - 1) / batch_;
  }

  // Every epoch is one full permutation of the sample indices.
  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> order(n_);
    for (std::size_t i = 0; i < n_; ++i) order[i] = i;
    Rng rng(seed_ + 0x9e3779b97f4a7c15ULL * (epoch + 1));
    rng.shuffle(order);
    return order;
  }

  std::vector<std::vector<std::size_t>> batches(std::size_t epoch) const {
    auto order = epoch_order(epoch);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < n_; b += batch_) {
      const std::size_t hi = std::min(b + batch_, n_);
      if (hi - b < batch_ && drop_last_) break;
      out.emplace_back(order.begin() + b, order.begin() + hi);
    }
    return out;
  }

private:
  std::size_t n_, batch_;
  std::uint64_t seed_;
  bool drop_last_;
};

}  // namespace vistok
