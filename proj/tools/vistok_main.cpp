// Command-line front end: synthetic data generation, staged training,
// held-out evaluation (optionally with pseudo image features), token-map
// analysis and gradient checking.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "vistok/analysis.hpp"
#include "vistok/common.hpp"
#include "vistok/data.hpp"
#include "vistok/gradcheck.hpp"
#include "vistok/model.hpp"
#include "vistok/objectives.hpp"
#include "vistok/trainer.hpp"

#ifdef VISTOK_F64
using Scalar = double;
#else
using Scalar = float;
#endif

namespace {

using vistok::Dataset;
using vistok::Model;
using vistok::ModelConfig;
using vistok::StageConfig;
using vistok::Vocabulary;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw vistok::IoError("config: cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw vistok::ParseError("config: " + path + " is not valid JSON");
  return j;
}

ModelConfig model_config_from(const nlohmann::json& j) {
  ModelConfig base;
  if (!j.contains("model")) return base;
  nlohmann::json m = vistok::to_json(base);
  m.update(j.at("model"));
  return vistok::model_config_from_json(m);
}

Model<Scalar> load_model(const std::string& ckpt_path) {
  auto loaded = vistok::load_checkpoint<Scalar>(ckpt_path);
  Model<Scalar> model(loaded.config);
  loaded.apply(model);
  return model;
}

void print_gradcheck(const vistok::GradCheckReport& rep, bool& all_ok) {
  for (const auto& e : rep.entries) {
    const bool ok = e.max_rel_err < rep.tolerance;
    all_ok = all_ok && ok;
    std::cout << (ok ? "  ok   " : "  FAIL ") << rep.scalar_width << " " << e.name
              << "  max_rel_err=" << e.max_rel_err << "  (checked " << e.checked
              << ", tol " << rep.tolerance << ")\n";
  }
}

int cmd_gen_data(const std::string& out, std::size_t n, std::uint64_t seed,
                 const std::string& vocab_out) {
  Vocabulary vocab = Vocabulary::standard();
  vistok::CorpusGen gen(vocab);
  gen.write_corpus(seed, n, out);
  if (!vocab_out.empty()) vocab.save(vocab_out);
  std::cout << "wrote " << n << " samples to " << out << "\n";
  return 0;
}

int cmd_train(int stage, const std::string& data_path, const std::string& in_ckpt,
              const std::string& out_ckpt, const std::string& config_path,
              const std::string& metrics_path, const CLI::App* cmd, std::uint64_t seed,
              std::size_t epochs, double lr, std::size_t batch_size, const std::string& loss,
              bool verbose) {
  StageConfig cfg = StageConfig::defaults(stage);
  nlohmann::json file_cfg;
  if (!config_path.empty()) {
    file_cfg = read_json_file(config_path);
    vistok::from_json_into(file_cfg, cfg);
    cfg.stage = stage;
  }
  if (cmd->count("--seed")) cfg.seed = seed;
  if (cmd->count("--epochs")) cfg.epochs = epochs;
  if (cmd->count("--lr")) cfg.lr = lr;
  if (cmd->count("--batch-size")) cfg.batch_size = batch_size;
  if (cmd->count("--loss")) cfg.loss = loss;
  if (!data_path.empty()) cfg.dataset = data_path;
  if (cfg.dataset.empty()) throw vistok::ContractError("train: no dataset given");

  Dataset data = Dataset::load(cfg.dataset);
  Model<Scalar> model = [&]() {
    if (!in_ckpt.empty()) return load_model(in_ckpt);
    Model<Scalar> m(model_config_from(file_cfg));
    m.init_weights(cfg.seed);
    return m;
  }();

  vistok::MetricsWriter metrics(metrics_path);
  auto res = vistok::run_stage(model, data, cfg, &metrics, verbose);
  vistok::TrainState st;
  st.stage = stage;
  st.step = res.steps;
  st.rng_state = vistok::Rng(cfg.seed).state();
  vistok::save_checkpoint(out_ckpt, model, st);
  std::cout << "stage " << stage << ": " << res.steps << " steps, loss "
            << res.initial_loss << " -> " << res.final_loss << ", checkpoint " << out_ckpt
            << "\n";
  return 0;
}

int cmd_train_all(const std::string& data_path, const std::string& out_dir,
                  const std::string& config_path, const CLI::App* cmd, std::uint64_t seed,
                  bool verbose) {
  vistok::TrainPlan plan;
  plan.dataset = data_path;
  plan.out_dir = out_dir;
  plan.verbose = verbose;
  if (!config_path.empty()) {
    nlohmann::json j = read_json_file(config_path);
    plan.model = model_config_from(j);
    if (j.contains("seed")) plan.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("stages"))
      for (std::size_t k = 0; k < 4 && k < j.at("stages").size(); ++k)
        vistok::from_json_into(j.at("stages")[k], plan.stages[k]);
  }
  if (cmd->count("--seed")) plan.seed = seed;

  Dataset data = Dataset::load(data_path);
  auto results = vistok::train_all<Scalar>(plan, data);
  for (int s = 1; s <= 4; ++s)
    std::cout << "stage " << s << ": loss " << results[s - 1].initial_loss << " -> "
              << results[s - 1].final_loss << "\n";
  std::cout << "final checkpoint: " << vistok::stage_checkpoint_path(out_dir, 4) << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, bool pseudo,
             std::size_t max_new) {
  Model<Scalar> model = load_model(ckpt);
  Dataset data = Dataset::load(data_path);
  auto original = vistok::evaluate(model, data, /*pseudo=*/false, max_new);
  std::cout << "original features:  loss_lm " << original.mean_loss_lm << "  loss_vm "
            << original.mean_loss_vm << "  caption_acc " << original.caption_accuracy << "\n";
  if (pseudo) {
    auto sub = vistok::evaluate(model, data, /*pseudo=*/true, max_new);
    std::cout << "pseudo features:    loss_lm " << sub.mean_loss_lm << "  loss_vm "
              << sub.mean_loss_vm << "  caption_acc " << sub.caption_accuracy << "\n";
  }
  return 0;
}

int cmd_analyze(const std::string& ckpt, const std::string& data_path, const std::string& mode,
                std::size_t n, const std::string& out_path) {
  Model<Scalar> model = load_model(ckpt);
  Dataset data = Dataset::load(data_path);
  Vocabulary vocab = Vocabulary::standard(model.config().vocab_size);
  std::ofstream out_file;
  std::ostream* out = &std::cout;
  if (!out_path.empty()) {
    out_file.open(out_path, std::ios::trunc);
    if (!out_file) throw vistok::IoError("analyze: cannot write " + out_path);
    out = &out_file;
  }
  const std::size_t count = n == 0 ? data.size() : std::min(n, data.size());
  for (std::size_t i = 0; i < count; ++i) {
    vistok::TokenMap map = mode == "nearest"
                               ? vistok::token_map_nearest(model, vocab, data[i].pixels)
                               : vistok::token_map_top(model, vocab, data[i].pixels);
    *out << vistok::to_json(map).dump() << "\n";
  }
  return 0;
}

int cmd_gradcheck(bool quick, std::uint64_t seed) {
  const std::size_t n_model = quick ? 64 : 1000;
  bool ok = true;
  std::cout << "kernel gradients vs central finite differences\n";
  print_gradcheck(vistok::gradcheck_ops<float>(1e-3, seed), ok);
  print_gradcheck(vistok::gradcheck_ops<double>(1e-5, seed), ok);
  std::cout << "combined loss through the full model (" << n_model << " sampled scalars)\n";
  print_gradcheck(vistok::gradcheck_model<float>(1e-3, seed, n_model), ok);
  print_gradcheck(vistok::gradcheck_model<double>(1e-5, seed, n_model), ok);
  std::cout << (ok ? "gradcheck: PASS\n" : "gradcheck: FAIL\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vistok: toy vision-language decoder trained with visual-token supervision"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic image-caption corpus");
  std::string gen_out = "train.jsonl", gen_vocab;
  std::size_t gen_n = 4096;
  std::uint64_t gen_seed = 7;
  gen->add_option("--out", gen_out, "output JSONL path");
  gen->add_option("--n", gen_n, "number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--vocab-out", gen_vocab, "also write the vocabulary file here");

  // train
  auto* train = app.add_subcommand("train", "run one training stage");
  int tr_stage = 1;
  std::string tr_data, tr_in, tr_out = "ckpt.bin", tr_config, tr_metrics, tr_loss;
  std::uint64_t tr_seed = 7;
  std::size_t tr_epochs = 3, tr_batch = 32;
  double tr_lr = 1e-3;
  bool tr_verbose = false;
  train->add_option("--stage", tr_stage, "training stage")->required()->check(CLI::Range(1, 4));
  train->add_option("--data", tr_data, "dataset JSONL path");
  train->add_option("--in", tr_in, "input checkpoint (omit for fresh init)");
  train->add_option("--out", tr_out, "output checkpoint");
  train->add_option("--config", tr_config, "stage config JSON file");
  train->add_option("--metrics", tr_metrics, "per-step metrics CSV path");
  train->add_option("--seed", tr_seed, "stage seed");
  train->add_option("--epochs", tr_epochs, "epochs");
  train->add_option("--lr", tr_lr, "peak learning rate");
  train->add_option("--batch-size", tr_batch, "batch size");
  train->add_option("--loss", tr_loss, "loss selector override (lm|vm_distill|mm)");
  train->add_flag("--verbose", tr_verbose, "log progress");

  // train-all
  auto* ta = app.add_subcommand("train-all", "run all four stages in order");
  std::string ta_data, ta_out = ".", ta_config;
  std::uint64_t ta_seed = 7;
  bool ta_verbose = false;
  ta->add_option("--data", ta_data, "dataset JSONL path")->required();
  ta->add_option("--out-dir", ta_out, "directory for checkpoints and metrics");
  ta->add_option("--config", ta_config, "training plan JSON file");
  ta->add_option("--seed", ta_seed, "master seed");
  ta->add_flag("--verbose", ta_verbose, "log progress");

  // eval
  auto* ev = app.add_subcommand("eval", "held-out evaluation of a checkpoint");
  std::string ev_ckpt, ev_data;
  bool ev_pseudo = false;
  std::size_t ev_max_new = 8;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "evaluation JSONL path")->required();
  ev->add_flag("--pseudo-features", ev_pseudo,
               "also evaluate with pseudo image features substituted");
  ev->add_option("--max-new", ev_max_new, "max generated tokens per caption");

  // analyze
  auto* an = app.add_subcommand("analyze", "emit per-patch token maps as JSON");
  std::string an_ckpt, an_data, an_mode = "top", an_out;
  std::size_t an_n = 4;
  an->add_option("--ckpt", an_ckpt, "checkpoint path")->required();
  an->add_option("--data", an_data, "JSONL with images")->required();
  an->add_option("--mode", an_mode, "nearest | top")
      ->check(CLI::IsMember({"nearest", "top"}));
  an->add_option("--n", an_n, "number of images (0 = all)");
  an->add_option("--out", an_out, "write JSON lines here instead of stdout");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  bool gc_quick = false;
  std::uint64_t gc_seed = 31;
  gc->add_flag("--quick", gc_quick, "fewer sampled parameters");
  gc->add_option("--seed", gc_seed, "sampling seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_n, gen_seed, gen_vocab);
    if (train->parsed())
      return cmd_train(tr_stage, tr_data, tr_in, tr_out, tr_config, tr_metrics, train, tr_seed,
                       tr_epochs, tr_lr, tr_batch, tr_loss, tr_verbose);
    if (ta->parsed()) return cmd_train_all(ta_data, ta_out, ta_config, ta, ta_seed, ta_verbose);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_pseudo, ev_max_new);
    if (an->parsed()) return cmd_analyze(an_ckpt, an_data, an_mode, an_n, an_out);
    if (gc->parsed()) return cmd_gradcheck(gc_quick, gc_seed);
  } catch (const vistok::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
