#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "vistok/data.hpp"

using vistok::BatchIterator;
using vistok::CorpusGen;
using vistok::Dataset;
using vistok::TokenId;
using vistok::Vocabulary;

namespace {

std::string temp_path(const std::string& name) {
  return std::string(std::getenv("TMPDIR") ? std::getenv("TMPDIR") : "/tmp") + "/" + name;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("vocabulary round trip and reserved ids", "[data]") {
  Vocabulary v = Vocabulary::standard();
  CHECK(v.size() == 64);
  CHECK(v.token(vistok::kPadId) == "<pad>");
  CHECK(v.token(vistok::kBosId) == "<bos>");
  CHECK(v.token(vistok::kEosId) == "<eos>");

  CHECK(v.encode("").empty());
  CHECK(v.decode({}).empty());

  auto ids = v.encode("red square");
  CHECK(ids == std::vector<TokenId>{v.id_of("red"), v.id_of("square")});
  CHECK(v.decode(ids) == "red square");

  CHECK_THROWS_MATCHES(v.encode("red banana"), vistok::VocabError,
                       Catch::Matchers::Message("encode: word 'banana' is not in the vocabulary"));
}

TEST_CASE("random in-vocabulary sentences round trip", "[data]") {
  Vocabulary v = Vocabulary::standard();
  vistok::Rng rng(5);
  for (int rep = 0; rep < 25; ++rep) {
    std::vector<TokenId> ids(10);
    for (auto& id : ids) id = 3 + rng.index(v.size() - 3);
    const std::string text = v.decode(ids);
    CHECK(v.encode(text) == ids);
  }
}

TEST_CASE("vocabulary file io preserves line-number ids", "[data]") {
  Vocabulary v = Vocabulary::standard();
  const std::string path = temp_path("vistok_vocab_test.txt");
  v.save(path);
  Vocabulary loaded = Vocabulary::load(path);
  REQUIRE(loaded.size() == v.size());
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(loaded.token(i) == v.token(i));
  std::remove(path.c_str());
}

TEST_CASE("corpus generation is deterministic per seed", "[data]") {
  Vocabulary v = Vocabulary::standard();
  CorpusGen gen(v);
  const std::string a = temp_path("vistok_corpus_a.jsonl");
  const std::string b = temp_path("vistok_corpus_b.jsonl");
  gen.write_corpus(42, 50, a);
  gen.write_corpus(42, 50, b);
  CHECK(read_file(a) == read_file(b));
  gen.write_corpus(43, 50, b);
  CHECK(read_file(a) != read_file(b));
  std::remove(a.c_str());
  std::remove(b.c_str());
}

TEST_CASE("single-sample corpus writes exactly one line", "[data]") {
  Vocabulary v = Vocabulary::standard();
  CorpusGen gen(v);
  const std::string path = temp_path("vistok_corpus_one.jsonl");
  gen.write_corpus(1, 1, path);
  const std::string text = read_file(path);
  std::size_t lines = 0;
  for (char c : text) lines += c == '\n' ? 1 : 0;
  CHECK(lines == 1);
  std::remove(path.c_str());
}

TEST_CASE("4096 samples balance the four primary colors", "[data]") {
  Vocabulary v = Vocabulary::standard();
  CorpusGen gen(v);
  auto samples = gen.generate(7, 4096);
  std::array<std::size_t, 4> counts{};
  const std::array<TokenId, 4> color_ids = {v.id_of("red"), v.id_of("green"), v.id_of("blue"),
                                            v.id_of("yellow")};
  for (const auto& s : samples) {
    REQUIRE(!s.response.empty());
    for (std::size_t c = 0; c < 4; ++c)
      if (s.response.front() == color_ids[c]) ++counts[c];
  }
  for (std::size_t c = 0; c < 4; ++c) {
    INFO("color " << c << " count " << counts[c]);
    CHECK(counts[c] >= 1024 - 64);
    CHECK(counts[c] <= 1024 + 64);
  }
}

TEST_CASE("captions are a pure function of the pixels", "[data]") {
  Vocabulary v = Vocabulary::standard();
  CorpusGen gen(v);
  auto samples = gen.generate(11, 128);
  for (const auto& s : samples)
    CHECK(gen.caption_for_pixels(s.pixels) == s.response);
}

TEST_CASE("every color-shape-quadrant combination renders distinctly", "[data]") {
  Vocabulary v = Vocabulary::standard();
  CorpusGen gen(v);
  std::vector<std::vector<std::uint8_t>> seen;
  for (std::size_t i = 0; i < CorpusGen::kCombos; ++i) {
    auto px = gen.render(CorpusGen::combo(i));
    for (const auto& other : seen) CHECK(px != other);
    seen.push_back(std::move(px));
  }
}

TEST_CASE("dataset loading reports malformed lines", "[data]") {
  const std::string path = temp_path("vistok_corrupt.jsonl");
  {
    Vocabulary v = Vocabulary::standard();
    CorpusGen gen(v);
    gen.write_corpus(3, 2, path);
    std::ofstream f(path, std::ios::app);
    f << "{not json\n";
  }
  CHECK_THROWS_MATCHES(Dataset::load(path), vistok::ParseError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("line 3")));
  std::remove(path.c_str());
}

TEST_CASE("dataset io round trips sample content", "[data]") {
  Vocabulary v = Vocabulary::standard();
  CorpusGen gen(v);
  const std::string path = temp_path("vistok_roundtrip.jsonl");
  gen.write_corpus(9, 8, path);
  auto direct = gen.generate(9, 8);
  Dataset ds = Dataset::load(path);
  REQUIRE(ds.size() == direct.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(ds[i].pixels == direct[i].pixels);
    CHECK(ds[i].instruction == direct[i].instruction);
    CHECK(ds[i].response == direct[i].response);
  }
  std::remove(path.c_str());
}

TEST_CASE("patch matrix extracts patch-major normalized pixels", "[data]") {
  Vocabulary v = Vocabulary::standard();
  CorpusGen gen(v);
  // red square in the top-left quadrant: patches (0,0), (0,1), (1,0), (1,1) solid red
  auto px = gen.render({0, 0, 0});
  auto mat = vistok::patch_matrix<double>(px, 4, 8);
  const std::size_t pdim = 8 * 8 * 3;
  REQUIRE(mat.size() == 16 * pdim);
  CHECK(mat[0 * pdim + 0] == 1.0);  // R of patch (0,0)
  CHECK(mat[0 * pdim + 1] == 0.0);  // G
  CHECK(mat[5 * pdim + 0] == 1.0);  // patch (1,1) is inside the square
  CHECK(mat[2 * pdim + 0] == 0.0);  // patch (0,2) is background
}

TEST_CASE("batch iterator shapes and determinism", "[data]") {
  BatchIterator it(10, 4, 99, /*drop_last=*/true);
  auto batches = it.batches(0);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);

  BatchIterator it2(10, 4, 99, true);
  CHECK(it2.batches(0) == batches);
  CHECK(it2.batches(1) != batches);

  BatchIterator keep(10, 4, 99, /*drop_last=*/false);
  auto kept = keep.batches(0);
  REQUIRE(kept.size() == 3);
  CHECK(kept[2].size() == 2);
}

TEST_CASE("each epoch order is a permutation", "[data]") {
  BatchIterator it(257, 16, 5);
  for (std::size_t epoch = 0; epoch < 3; ++epoch) {
    auto order = it.epoch_order(epoch);
    std::vector<bool> seen(order.size(), false);
    for (std::size_t i : order) {
      REQUIRE(i < seen.size());
      CHECK(!seen[i]);
      seen[i] = true;
    }
  }
}
