#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "tdaf/io/dataset.hpp"
#include "tdaf/train/gradcheck_suite.hpp"
#include "tdaf/train/trainer.hpp"

namespace {

tdaf::RunConfig load_run_config(const std::string& path, std::uint64_t* seed_override) {
  tdaf::RunConfig cfg = tdaf::load_config(path);
  if (seed_override) cfg.seed = *seed_override;
  return cfg;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Top-down attention framework: training, evaluation and inspection"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int sample_index = 0;
  std::vector<std::string> gradcheck_filter;

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "Override the config's seed")
        ->each([&](const std::string&) { seed_set = true; });
  };

  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", config_path, "Config file")->required();
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  add_seed(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--config", config_path, "Config file")->required();
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  add_seed(eval_cmd);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Run the double-precision gradient suite");
  grad_cmd
      ->add_option("--ops", gradcheck_filter,
                   "Only run blocks whose name contains one of these substrings")
      ->delimiter(',');

  auto* params_cmd = app.add_subcommand("params", "Parameter audit for a config");
  params_cmd->add_option("--config", config_path, "Config file")->required();
  add_seed(params_cmd);

  auto* export_cmd = app.add_subcommand("export-attn", "Export attention maps as PGM images");
  export_cmd->add_option("--config", config_path, "Config file")->required();
  export_cmd->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  export_cmd->add_option("--index", sample_index, "Test-set sample index");
  export_cmd->add_option("--out", out_dir, "Output directory")->required();
  add_seed(export_cmd);

  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic saliency dataset");
  gen_cmd->add_option("--config", config_path, "Config file (optional; defaults otherwise)");
  gen_cmd->add_option("--out", out_dir, "Output directory")->required();
  add_seed(gen_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      auto cfg = load_run_config(config_path, seed_set ? &seed : nullptr);
      auto result = tdaf::train_run(cfg, out_dir);
      std::cout << "TDAF train ok steps=" << result.steps << " epochs=" << cfg.epochs
                << " best_test_acc=" << fmt(result.best_test_accuracy)
                << " best_epoch=" << result.best_epoch
                << " final_loss=" << fmt(result.final_train_loss) << " out=" << result.out_dir
                << "\n";
    } else if (*eval_cmd) {
      auto cfg = load_run_config(config_path, seed_set ? &seed : nullptr);
      auto result = tdaf::evaluate_checkpoint(cfg, ckpt_path);
      std::cout << "TDAF eval ok samples=" << result.samples
                << " accuracy=" << fmt(result.accuracy)
                << " mean_loss=" << fmt(result.mean_loss);
      if (cfg.data.dataset == "synthetic" && cfg.mode == tdaf::RunMode::attention &&
          cfg.flows >= 2)
        std::cout << " localization=" << fmt(tdaf::attention_localization_score(cfg, ckpt_path));
      std::cout << "\n";
    } else if (*grad_cmd) {
      auto report = tdaf::run_gradient_suite(gradcheck_filter);
      for (const auto& b : report.blocks)
        std::cout << "block " << b.name << " rel_err=" << fmt(b.rel_err)
                  << " tol=" << fmt(b.tolerance) << " probes=" << b.probes << " "
                  << (b.pass ? "PASS" : "FAIL")
                  << (b.failure.empty() ? "" : " (" + b.failure + ")") << "\n";
      if (!report.pass) {
        std::cout << "TDAF gradcheck FAIL blocks=" << report.blocks.size()
                  << " worst_rel_err=" << fmt(report.worst_rel_err) << "\n";
        return 1;
      }
      std::cout << "TDAF gradcheck ok blocks=" << report.blocks.size()
                << " worst_rel_err=" << fmt(report.worst_rel_err) << "\n";
    } else if (*params_cmd) {
      auto cfg = load_run_config(config_path, seed_set ? &seed : nullptr);
      auto audit = tdaf::audit_params(cfg);
      std::cout << "TDAF params ok total=" << audit.total << " stage=" << audit.stage_total
                << " attention=" << audit.attention_total << " head=" << audit.head_total
                << " baseline=" << audit.baseline_total
                << " overhead_pct=" << fmt(audit.overhead_pct)
                << " anar_formula_match=" << (audit.anar_formula_matches ? "true" : "false")
                << "\n";
    } else if (*export_cmd) {
      auto cfg = load_run_config(config_path, seed_set ? &seed : nullptr);
      const int files = tdaf::export_attention(cfg, ckpt_path, sample_index, out_dir);
      std::cout << "TDAF export-attn ok files=" << files << " index=" << sample_index
                << " out=" << out_dir << "\n";
    } else if (*gen_cmd) {
      tdaf::RunConfig cfg;
      if (!config_path.empty()) cfg = tdaf::load_config(config_path);
      if (seed_set) cfg.data.seed = seed;
      tdaf::require(cfg.data.dataset == "synthetic", "gen-data: config selects '",
                    cfg.data.dataset, "'; only the synthetic dataset can be generated");
      std::filesystem::create_directories(out_dir);
      auto train = tdaf::make_synthetic_split(cfg.data.seed, "train", cfg.data.train_samples,
                                              cfg.data.num_classes);
      auto test = tdaf::make_synthetic_split(cfg.data.seed, "test", cfg.data.test_samples,
                                             cfg.data.num_classes);
      tdaf::write_cifar_records(train, out_dir + "/train.bin");
      tdaf::write_cifar_records(test, out_dir + "/test.bin");
      tdaf::write_patch_meta_csv(train, out_dir + "/meta_train.csv");
      tdaf::write_patch_meta_csv(test, out_dir + "/meta_test.csv");
      std::cout << "TDAF gen-data ok train=" << train.n << " test=" << test.n
                << " seed=" << cfg.data.seed << " out=" << out_dir << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
