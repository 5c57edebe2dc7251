// Command-line front end: synthetic dataset generation, training runs,
// the experiment matrix, evaluation, overlays, and the gradient suite.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metaseg/gradsuite.hpp"
#include "metaseg/manifest.hpp"
#include "metaseg/runner.hpp"

namespace {

enum class Precision { kF32, kF64 };

Precision precision_from_env() {
  const char* env = std::getenv("METASEG_PRECISION");
  if (!env || std::string(env).empty() || std::string(env) == "f32") return Precision::kF32;
  if (std::string(env) == "f64") return Precision::kF64;
  throw metaseg::ConfigError("METASEG_PRECISION must be f32 or f64, got '" + std::string(env) + "'");
}

std::vector<std::pair<std::int32_t, std::int64_t>> parse_spec(const std::string& spec) {
  std::vector<std::pair<std::int32_t, std::int64_t>> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw metaseg::ConfigError("bad --spec entry '" + item + "', expected K:n");
    try {
      out.push_back({std::stoi(item.substr(0, colon)), std::stoll(item.substr(colon + 1))});
    } catch (const std::exception&) {
      throw metaseg::ConfigError("bad --spec entry '" + item + "', expected K:n");
    }
  }
  if (out.empty()) throw metaseg::ConfigError("--spec is empty");
  return out;
}

std::vector<double> parse_fractions(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meta-learning benchmark for multi-task semantic segmentation"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate synthetic task sources");
  std::uint64_t synth_seed = 1;
  std::string synth_spec;
  std::string synth_out;
  std::int64_t synth_size = 64;
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--spec", synth_spec, "sources as K:n[,K:n...]")->required();
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--size", synth_size, "square sample size (default 64)");

  // train
  auto* train = app.add_subcommand("train", "run a manifest (maml, transfer, or refine)");
  std::string train_manifest;
  train->add_option("--manifest", train_manifest, "RunManifest JSON file")->required();

  // matrix
  auto* matrix = app.add_subcommand("matrix", "pretrain/refine/evaluate the full task grid");
  std::string matrix_dataset, matrix_config, matrix_out;
  int matrix_jobs = 1;
  matrix->add_option("--dataset", matrix_dataset, "dataset root")->required();
  matrix->add_option("--config", matrix_config, "protocol config JSON (manifest schema)")->required();
  matrix->add_option("--out", matrix_out, "grid output directory")->required();
  matrix->add_option("--jobs", matrix_jobs, "concurrent cells (default 1)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on one task");
  std::string eval_ckpt, eval_dataset, eval_task, eval_split = "test", eval_fracs = "0.8,0,0.2";
  std::uint64_t eval_split_seed = 1;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--dataset", eval_dataset)->required();
  eval_cmd->add_option("--task", eval_task)->required();
  eval_cmd->add_option("--split", eval_split, "train|val|test (default test)");
  eval_cmd->add_option("--fractions", eval_fracs, "split fractions (default 0.8,0,0.2)");
  eval_cmd->add_option("--split-seed", eval_split_seed, "split seed (default 1)");

  // overlay
  auto* overlay = app.add_subcommand("overlay", "write an input/truth/prediction strip PNG");
  std::string ov_ckpt, ov_dataset, ov_task, ov_out, ov_fracs = "0.8,0,0.2";
  std::int64_t ov_index = 0;
  std::uint64_t ov_split_seed = 1;
  overlay->add_option("--checkpoint", ov_ckpt)->required();
  overlay->add_option("--dataset", ov_dataset)->required();
  overlay->add_option("--task", ov_task)->required();
  overlay->add_option("--index", ov_index, "sample index within the task")->required();
  overlay->add_option("--out", ov_out)->required();
  overlay->add_option("--fractions", ov_fracs);
  overlay->add_option("--split-seed", ov_split_seed);

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "run the finite-difference gradient suite (f64)");
  unsigned gc_seeds = 10;
  gradcheck->add_option("--seeds", gc_seeds, "number of seeds (default 10)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    const Precision prec = precision_from_env();

    if (*synth) {
      auto spec = parse_spec(synth_spec);
      const auto ids = prec == Precision::kF64
                           ? metaseg::run_synth<double>(synth_seed, spec, synth_size, synth_out)
                           : metaseg::run_synth<float>(synth_seed, spec, synth_size, synth_out);
      for (const auto& id : ids) std::cout << id << "\n";
    } else if (*train) {
      const auto manifest = metaseg::RunManifest::from_file(train_manifest);
      if (prec == Precision::kF64)
        metaseg::run_manifest<double>(manifest, std::cout);
      else
        metaseg::run_manifest<float>(manifest, std::cout);
    } else if (*matrix) {
      auto base = metaseg::RunManifest::from_file(matrix_config);
      base.mode = base.mode.empty() ? "maml" : base.mode;  // placeholder; cells set their own
      if (prec == Precision::kF64)
        metaseg::run_matrix<double>(matrix_dataset, base, matrix_out, matrix_jobs, std::cout);
      else
        metaseg::run_matrix<float>(matrix_dataset, base, matrix_out, matrix_jobs, std::cout);
    } else if (*eval_cmd) {
      const auto fracs = parse_fractions(eval_fracs);
      const double v = prec == Precision::kF64
                           ? metaseg::run_eval<double>(eval_ckpt, eval_dataset, eval_task, eval_split, fracs,
                                                       eval_split_seed)
                           : metaseg::run_eval<float>(eval_ckpt, eval_dataset, eval_task, eval_split, fracs,
                                                      eval_split_seed);
      std::cout << "miou\t" << metaseg::detail::format_double(v) << "\n";
    } else if (*overlay) {
      const auto fracs = parse_fractions(ov_fracs);
      if (prec == Precision::kF64)
        metaseg::run_overlay<double>(ov_ckpt, ov_dataset, ov_task, ov_index, ov_out, fracs, ov_split_seed);
      else
        metaseg::run_overlay<float>(ov_ckpt, ov_dataset, ov_task, ov_index, ov_out, fracs, ov_split_seed);
    } else if (*gradcheck) {
      const bool ok = metaseg::run_gradient_suite(std::cout, gc_seeds);
      std::cout << (ok ? "gradient suite: PASS" : "gradient suite: FAIL") << "\n";
      return ok ? 0 : 1;
    }
  } catch (const metaseg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
