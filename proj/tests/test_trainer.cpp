#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "vistok/trainer.hpp"
#include "oracles.hpp"
#include "testing.hpp"

using vistok::AdamW;
using vistok::CorpusGen;
using vistok::Dataset;
using vistok::Graph;
using vistok::Group;
using vistok::Model;
using vistok::ModelConfig;
using vistok::Rng;
using vistok::StageConfig;
using vistok::Vocabulary;

namespace {

std::string temp_path(const std::string& name) {
  return std::string("/tmp/") + name;
}

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 64;
  c.model_dim = 16;
  c.layers = 1;
  c.heads = 2;
  c.max_seq_len = 32;
  c.patch_rows = 2;
  c.patch_cols = 2;
  c.patch_px = 4;
  c.vis_dim = 6;
  c.adapter_hidden = 8;
  return c;
}

Dataset tiny_dataset(std::size_t n, std::size_t grid = 2, std::size_t patch_px = 4) {
  Vocabulary v = Vocabulary::standard();
  CorpusGen gen(v, grid, patch_px);
  return Dataset::from_samples(gen.generate(123, n));
}

std::vector<float> snapshot(const Model<float>& m, Group g) {
  std::vector<float> out;
  for (std::size_t i = 0; i < m.params().size(); ++i)
    if (m.params()[i].group == g)
      out.insert(out.end(), m.params()[i].value.begin(), m.params()[i].value.end());
  return out;
}

std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("learning-rate schedule hits its anchor points exactly", "[trainer]") {
  const std::size_t total = 1000;
  const double peak = 3e-4, ratio = 0.03;
  const std::size_t warmup = 30;  // ceil(0.03 * 1000)

  CHECK(vistok::lr_at(0, total, peak, ratio) == 0.0);
  CHECK(vistok::lr_at(warmup, total, peak, ratio) == peak);
  CHECK(vistok::lr_at(total, total, peak, ratio) == 0.0);

  // decay span is 970; its midpoint step gives peak/2
  const std::size_t mid = warmup + (total - warmup) / 2;
  CHECK(std::abs(vistok::lr_at(mid, total, peak, ratio) - peak / 2) < 1e-12);

  CHECK_THROWS_AS(vistok::lr_at(0, 0, peak, ratio), vistok::ContractError);
}

TEST_CASE("learning-rate schedule is continuous with a single peak", "[trainer]") {
  const std::size_t total = 200;
  const double peak = 1e-3;
  double prev = vistok::lr_at(0, total, peak, 0.03);
  bool rising = true;
  std::size_t direction_changes = 0;
  for (std::size_t s = 1; s <= total; ++s) {
    const double cur = vistok::lr_at(s, total, peak, 0.03);
    CHECK(std::abs(cur - prev) < peak * 0.2);  // no jumps
    if (rising && cur < prev) {
      rising = false;
      ++direction_changes;
    } else if (!rising && cur > prev + 1e-15) {
      ++direction_changes;
    }
    prev = cur;
  }
  CHECK(direction_changes == 1);
}

TEST_CASE("adamw leaves parameters alone for zero gradients", "[trainer]") {
  Model<float> m(small_config());
  m.init_weights(3);
  m.params().set_trainable_groups({Group::Adapter});
  auto before = snapshot(m, Group::Adapter);
  AdamW<float> opt;
  opt.step(m.params(), 1e-3, 0.0);
  CHECK(snapshot(m, Group::Adapter) == before);
}

TEST_CASE("adamw with zero weight decay matches the Adam oracle for 10 steps", "[trainer]") {
  // three scalars updated against a hand-rolled Adam
  vistok::ParamSet<double> params;
  auto& p = params.add("w", Group::Decoder, {3});
  p.value = {0.5, -1.25, 2.0};
  std::vector<double> oracle_params = {0.5, -1.25, 2.0};
  testing_oracles::AdamOracle oracle(3);
  AdamW<double> opt;

  Rng rng(7);
  for (int step = 0; step < 10; ++step) {
    std::vector<double> grads(3);
    for (auto& gv : grads) gv = rng.uniform(-1, 1);
    p.grad = grads;
    opt.step(params, 1e-2, 0.0);
    oracle.step(oracle_params, grads, 1e-2);
    p.zero_grad();
  }
  for (std::size_t k = 0; k < 3; ++k)
    CHECK(std::abs(p.value[k] - oracle_params[k]) < 1e-10);
}

TEST_CASE("adamw first step magnitude matches the closed form", "[trainer]") {
  vistok::ParamSet<double> params;
  auto& p = params.add("w", Group::Decoder, {1});
  p.value = {0.0};
  p.grad = {1.0};
  AdamW<double> opt;
  opt.step(params, 1e-2, 0.0);

  std::vector<double> oracle_params = {0.0};
  testing_oracles::AdamOracle oracle(1);
  oracle.step(oracle_params, {1.0}, 1e-2);
  CHECK(std::abs(p.value[0] - oracle_params[0]) < 1e-15);
  // with g = 1: update = lr * 1/(sqrt(1) + eps)
  CHECK(p.value[0] == Catch::Approx(-1e-2 * (1.0 / (1.0 + 1e-8))).epsilon(1e-12));
}

TEST_CASE("adamw rejects non-finite gradients", "[trainer]") {
  vistok::ParamSet<double> params;
  auto& p = params.add("w", Group::Decoder, {2});
  p.grad = {0.0, std::nan("")};
  AdamW<double> opt;
  CHECK_THROWS_AS(opt.step(params, 1e-3, 0.0), vistok::NumericError);
}

TEST_CASE("gradient clipping rescales only above the threshold", "[trainer]") {
  vistok::ParamSet<double> params;
  auto& p = params.add("w", Group::Decoder, {2});
  p.grad = {3.0, 4.0};  // norm 5
  const double norm = vistok::clip_grad_norm(params, 1.0);
  CHECK(norm == Catch::Approx(5.0));
  CHECK(p.grad[0] == Catch::Approx(0.6));
  CHECK(p.grad[1] == Catch::Approx(0.8));

  p.grad = {0.3, 0.4};
  vistok::clip_grad_norm(params, 1.0);
  CHECK(p.grad[0] == Catch::Approx(0.3));
}

TEST_CASE("stage table pins trainable groups and loss selectors", "[trainer]") {
  using vistok::LossKind;
  CHECK(StageConfig::defaults(1).trainable_groups() == std::vector<Group>{Group::Adapter});
  CHECK(StageConfig::defaults(2).trainable_groups() ==
        std::vector<Group>{Group::Decoder, Group::MmHead, Group::Adapter});
  CHECK(StageConfig::defaults(3).trainable_groups() == std::vector<Group>{Group::VmHead});
  CHECK(StageConfig::defaults(4).trainable_groups() ==
        std::vector<Group>{Group::Decoder, Group::MmHead});

  CHECK(StageConfig::defaults(1).loss_kind() == LossKind::Lm);
  CHECK(StageConfig::defaults(2).loss_kind() == LossKind::Lm);
  CHECK(StageConfig::defaults(3).loss_kind() == LossKind::VmDistill);
  CHECK(StageConfig::defaults(4).loss_kind() == LossKind::Mm);

  // vm head and decoder are never trained together
  for (int stage = 1; stage <= 4; ++stage) {
    auto groups = StageConfig::defaults(stage).trainable_groups();
    bool vm = false, dec = false;
    for (Group g : groups) {
      vm = vm || g == Group::VmHead;
      dec = dec || g == Group::Decoder;
    }
    CHECK_FALSE((vm && dec));
  }

  CHECK_THROWS_AS(StageConfig::defaults(5), vistok::ContractError);
}

TEST_CASE("stage config json round trip and overrides", "[trainer]") {
  StageConfig cfg = StageConfig::defaults(4);
  nlohmann::json j = vistok::to_json(cfg);
  j["lr"] = 5e-4;
  j["loss"] = "lm";
  j["epochs"] = 9;
  StageConfig parsed = StageConfig::defaults(4);
  vistok::from_json_into(j, parsed);
  CHECK(parsed.lr == 5e-4);
  CHECK(parsed.loss == "lm");
  CHECK(parsed.epochs == 9);
  CHECK(parsed.batch_size == cfg.batch_size);
  CHECK(parsed.loss_kind() == vistok::LossKind::Lm);
}

TEST_CASE("each stage leaves frozen groups bit-identical", "[trainer]") {
  Dataset data = tiny_dataset(16);
  Model<float> m(small_config());
  m.init_weights(11);

  for (int stage = 1; stage <= 4; ++stage) {
    StageConfig cfg = StageConfig::defaults(stage);
    cfg.batch_size = 8;
    cfg.epochs = 1;
    cfg.seed = 50 + stage;
    auto trainable = cfg.trainable_groups();
    std::vector<Group> all = {Group::VisualEncoder, Group::Adapter, Group::Decoder,
                              Group::MmHead, Group::VmHead};
    std::vector<std::pair<Group, std::vector<float>>> frozen_before;
    for (Group g : all) {
      bool is_trainable = false;
      for (Group t : trainable) is_trainable = is_trainable || t == g;
      if (!is_trainable) frozen_before.emplace_back(g, snapshot(m, g));
    }
    vistok::run_stage(m, data, cfg);
    for (auto& [g, before] : frozen_before) {
      INFO("stage " << stage << " group " << vistok::group_name(g));
      CHECK(snapshot(m, g) == before);
    }
  }
}

TEST_CASE("stage one with zero learning rate changes nothing", "[trainer]") {
  Dataset data = tiny_dataset(16);
  Model<float> m(small_config());
  m.init_weights(13);

  std::vector<std::vector<float>> before;
  for (std::size_t i = 0; i < m.params().size(); ++i) before.push_back(m.params()[i].value);

  StageConfig cfg = StageConfig::defaults(1);
  cfg.batch_size = 8;
  cfg.epochs = 1;
  cfg.lr = 0.0;
  vistok::run_stage(m, data, cfg);
  for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(m.params()[i].value == before[i]);
}

TEST_CASE("training losses decrease on a tiny corpus", "[trainer]") {
  Dataset data = tiny_dataset(32);
  Model<float> m(small_config());
  m.init_weights(17);
  StageConfig cfg = StageConfig::defaults(2);
  cfg.batch_size = 8;
  cfg.epochs = 8;
  cfg.lr = 3e-3;  // large lr; just exercising the loop
  auto res = vistok::run_stage(m, data, cfg);
  CHECK(res.final_loss < res.initial_loss);
}

TEST_CASE("identical stage-three runs produce byte-identical checkpoints", "[trainer]") {
  Dataset data = tiny_dataset(16);
  const std::string ck_a = temp_path("vistok_s3_a.bin");
  const std::string ck_b = temp_path("vistok_s3_b.bin");
  for (const std::string& path : {ck_a, ck_b}) {
    Model<float> m(small_config());
    m.init_weights(21);
    StageConfig cfg = StageConfig::defaults(3);
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.seed = 77;
    vistok::run_stage(m, data, cfg);
    vistok::save_checkpoint(path, m, {3, 4, "state"});
  }
  CHECK(file_bytes(ck_a) == file_bytes(ck_b));
  std::remove(ck_a.c_str());
  std::remove(ck_b.c_str());
}

TEST_CASE("checkpoints round trip bit-exactly and reject unknown versions", "[trainer]") {
  Model<float> m(small_config());
  m.init_weights(23);
  const std::string path = temp_path("vistok_ck_roundtrip.bin");
  vistok::TrainState st{2, 99, Rng(5).state()};
  vistok::save_checkpoint(path, m, st);

  auto loaded = vistok::load_checkpoint<float>(path);
  CHECK(loaded.state.stage == 2);
  CHECK(loaded.state.step == 99);
  CHECK(loaded.state.rng_state == st.rng_state);
  Model<float> restored(loaded.config);
  loaded.apply(restored);
  for (std::size_t i = 0; i < m.params().size(); ++i)
    CHECK(restored.params()[i].value == m.params()[i].value);

  // corrupt the version field (bytes 8..11)
  std::string bytes = file_bytes(path);
  bytes[8] = 42;
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << bytes;
  }
  CHECK_THROWS_MATCHES(vistok::load_checkpoint<float>(path), vistok::ParseError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("version")));
  std::remove(path.c_str());

  CHECK_THROWS_AS(vistok::load_checkpoint<float>(temp_path("missing_ck.bin")),
                  vistok::IoError);
}

TEST_CASE("metrics files carry the pinned csv schema", "[trainer]") {
  Dataset data = tiny_dataset(8);
  Model<float> m(small_config());
  m.init_weights(29);
  StageConfig cfg = StageConfig::defaults(1);
  cfg.batch_size = 4;
  cfg.epochs = 1;
  const std::string path = temp_path("vistok_metrics.csv");
  vistok::MetricsWriter w(path);
  auto res = vistok::run_stage(m, data, cfg, &w);

  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  CHECK(header == "step,lr,loss,loss_lm,loss_vm,seconds");
  std::size_t rows = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == res.steps);
  std::remove(path.c_str());
}

TEST_CASE("padded positions never enter the language pairs", "[trainer]") {
  Model<float> m(small_config());
  m.init_weights(31);
  Rng rng(32);
  const auto& cfg = m.config();
  Graph<float> g;
  std::vector<float> px(cfg.patches() * cfg.patch_dim());
  for (auto& v : px) v = float(rng.uniform(0, 1));
  auto rows = m.adapt(g, m.visual_encode(g, g.input({cfg.patches(), cfg.patch_dim()}, px)));

  vistok::AssembleOptions opts;
  opts.pad_to = 1 + cfg.patches() + 8;
  auto seq = vistok::assemble_input(g, m, rows, {15, 16}, {17}, opts);
  CHECK(seq.length() == opts.pad_to);
  for (const auto& [n, t] : seq.lm_pairs) {
    CHECK(t != vistok::kPadId);
    CHECK(seq.text_targets[n + 1].has_value());
  }
  // exactly response + EOS are supervised
  CHECK(seq.lm_pairs.size() == 2);
}

TEST_CASE("train_all chains stages and saves per-stage artifacts", "[trainer]") {
  Dataset data = tiny_dataset(16);
  vistok::TrainPlan plan;
  plan.model = small_config();
  plan.seed = 5;
  plan.out_dir = "/tmp";
  for (auto& s : plan.stages) {
    s.batch_size = 8;
    s.epochs = 1;
  }
  auto results = vistok::train_all<float>(plan, data);
  for (int stage = 1; stage <= 4; ++stage) {
    CHECK(results[stage - 1].steps == 2 * plan.stages[stage - 1].epochs);
    const std::string ck = vistok::stage_checkpoint_path("/tmp", stage);
    auto loaded = vistok::load_checkpoint<float>(ck);
    CHECK(loaded.state.stage == stage);
    std::remove(ck.c_str());
    std::remove(vistok::stage_metrics_path("/tmp", stage).c_str());
  }
}
