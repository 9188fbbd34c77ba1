// asyncfm experiment CLI: dataset generation, unified backbone training,
// rater training, inference, evaluation and the two analysis sweeps.

#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "asyncfm/commands.hpp"
#include "asyncfm/threads.hpp"
#include "asyncfm/types.hpp"

int main(int argc, char** argv) {
  CLI::App app{"asyncfm: asynchronous flow-matching action generation on a synthetic bench"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker thread cap")->capture_default_str();

  std::string config_path, data_path, ckpt_path, backbone_ckpt, out_path, mode = "async";
  int episode_index = 0;
  double scale = 1.0, fraction = 0.25;
  int epochs = 200;
  std::string kind = "gaussian-offset";
  std::vector<int> indices;
  std::vector<uint64_t> seeds{1, 2, 3};

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset file");
  gen->add_option("--config", config_path, "Experiment config (JSON)")->required();
  gen->add_option("--out", out_path, "Output dataset path")->required();

  auto* train = app.add_subcommand("train", "Train the unified SFM/AFM backbone");
  train->add_option("--config", config_path, "Experiment config (JSON)")->required();
  train->add_option("--data", data_path, "Dataset file")->required();
  train->add_option("--out", out_path, "Output checkpoint path")->required();

  auto* trater = app.add_subcommand("train-rater", "Train the confidence rater");
  trater->add_option("--config", config_path, "Experiment config (JSON)")->required();
  trater->add_option("--data", data_path, "Dataset file")->required();
  trater->add_option("--backbone", backbone_ckpt, "Trained backbone checkpoint")->required();
  trater->add_option("--out", out_path, "Output checkpoint path")->required();

  auto* infer = app.add_subcommand("infer", "Run one test episode and dump diagnostics");
  infer->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  infer->add_option("--data", data_path, "Dataset file")->required();
  infer->add_option("--episode", episode_index, "Test episode index")->capture_default_str();
  infer->add_option("--mode", mode, "sfm-only | async | random-mask")->capture_default_str();
  infer->add_option("--out", out_path, "Diagnostics report path")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate one inference mode on the test split");
  eval->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  eval->add_option("--data", data_path, "Dataset file")->required();
  eval->add_option("--mode", mode, "sfm-only | async | random-mask")->capture_default_str();
  eval->add_option("--out", out_path, "Report path")->required();

  auto* sc = app.add_subcommand("self-correct", "Corruption-injection self-correction study");
  sc->add_option("--ckpt", ckpt_path, "Checkpoint path (backbone + rater)")->required();
  sc->add_option("--data", data_path, "Dataset file")->required();
  sc->add_option("--scale", scale, "Corruption scale")->capture_default_str();
  sc->add_option("--kind", kind, "gaussian-offset | replace-with-noise")->capture_default_str();
  sc->add_option("--index", indices, "Corrupted token indices (default: one random per episode)")
      ->delimiter(',');
  sc->add_option("--out", out_path, "Report path")->required();

  auto* de = app.add_subcommand("data-efficiency",
                                "Seed-matched unified vs all-one-mask training curves");
  de->add_option("--config", config_path, "Experiment config (JSON)")->required();
  de->add_option("--fraction", fraction, "Training-set fraction")->capture_default_str();
  de->add_option("--epochs", epochs, "Epochs per run")->capture_default_str();
  de->add_option("--seeds", seeds, "Seeds (one paired run each)")
      ->delimiter(',')
      ->capture_default_str();
  de->add_option("--out", out_path, "Column-file output path")->required();

  CLI11_PARSE(app, argc, argv);
  asyncfm::set_thread_cap(threads);

  try {
    if (*gen) asyncfm::cmd_gen_data(config_path, out_path);
    if (*train) asyncfm::cmd_train(config_path, data_path, out_path);
    if (*trater) asyncfm::cmd_train_rater(config_path, data_path, backbone_ckpt, out_path);
    if (*infer) asyncfm::cmd_infer(ckpt_path, data_path, episode_index, mode, out_path);
    if (*eval) asyncfm::cmd_eval(ckpt_path, data_path, mode, out_path);
    if (*sc) asyncfm::cmd_self_correct(ckpt_path, data_path, scale, kind, indices, out_path);
    if (*de) asyncfm::cmd_data_efficiency(config_path, fraction, epochs, seeds, out_path);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error (invalid argument): " << e.what() << "\n";
    return 2;
  } catch (const asyncfm::NumericError& e) {
    std::cerr << "error (numeric): " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
