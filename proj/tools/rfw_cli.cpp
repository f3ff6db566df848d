// Experiment driver: thin flag parsing over the functions in
// rfw/experiments.hpp. Exit codes: 0 success, 1 validation/usage failure,
// 2 numeric failure (gradient check miss or non-finite training loss).

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "rfw/experiments.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string checkpoint;
  std::string dataset_dir;
  int threads = 0;
};

void add_common(CLI::App* sc, CommonFlags* f) {
  sc->add_option("--config", f->config_path, "config file (key = value lines)");
  sc->add_option("--seed", f->seed, "RNG seed override");
  sc->add_option("--out", f->out_dir, "output directory override");
  sc->add_option("--checkpoint", f->checkpoint, "checkpoint path override");
  sc->add_option("--dataset", f->dataset_dir, "dataset directory override");
  sc->add_option("--threads", f->threads, "worker thread count override");
}

rfw::RFWNetConfig assemble(const CLI::App* sc, const CommonFlags& f) {
  rfw::RFWNetConfig cfg;
  if (!f.config_path.empty()) cfg = rfw::load_config(f.config_path);
  if (sc->count("--seed")) cfg.seed = f.seed;
  if (sc->count("--out")) cfg.out_dir = f.out_dir;
  if (sc->count("--checkpoint")) cfg.checkpoint_path = f.checkpoint;
  if (sc->count("--dataset")) cfg.dataset_dir = f.dataset_dir;
  if (sc->count("--threads")) cfg.train.threads = f.threads;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale detector experiments"};
  app.require_subcommand(1);

  CommonFlags gc_flags;
  double gc_tolerance = 1e-4;
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--seed", gc_flags.seed, "RNG seed");
  gc->add_option("--tolerance", gc_tolerance, "max allowed relative error");

  double sens_box = 16.0, sens_c = 12.8;
  std::string sens_out = "out";
  CLI::App* sens = app.add_subcommand("sensitivity", "box shift sensitivity sweep");
  sens->add_option("--box-size", sens_box, "square box side length");
  sens->add_option("--nwd-c", sens_c, "similarity normalization constant");
  sens->add_option("--out", sens_out, "output directory");

  CommonFlags train_flags;
  CLI::App* train = app.add_subcommand("train", "train on the synthetic dataset");
  add_common(train, &train_flags);

  CommonFlags eval_flags;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
  add_common(eval, &eval_flags);

  CommonFlags ablate_flags;
  CLI::App* ablate = app.add_subcommand("ablate", "train the seven loss-mix settings");
  add_common(ablate, &ablate_flags);

  CommonFlags exp_flags;
  int image_index = 0;
  CLI::App* expat = app.add_subcommand("export-attention", "write attention gate maps");
  add_common(expat, &exp_flags);
  expat->add_option("--image-index", image_index, "held-out image to visualize");

  CommonFlags params_flags;
  CLI::App* params = app.add_subcommand("params", "print the trainable parameter count");
  add_common(params, &params_flags);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gc->parsed()) return rfw::cmd_gradcheck(gc_flags.seed, gc_tolerance, std::cout);
    if (sens->parsed()) return rfw::cmd_sensitivity(sens_box, sens_c, sens_out, std::cout);
    if (train->parsed()) return rfw::cmd_train(assemble(train, train_flags), std::cout);
    if (eval->parsed()) return rfw::cmd_eval(assemble(eval, eval_flags), std::cout);
    if (ablate->parsed()) return rfw::cmd_ablate(assemble(ablate, ablate_flags), std::cout);
    if (expat->parsed())
      return rfw::cmd_export_attention(assemble(expat, exp_flags), image_index, std::cout);
    if (params->parsed()) return rfw::cmd_params(assemble(params, params_flags), std::cout);
  } catch (const rfw::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
