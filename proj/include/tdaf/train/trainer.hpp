#pragma once

#include <memory>
#include <string>

#include "tdaf/io/checkpoint.hpp"
#include "tdaf/io/config.hpp"
#include "tdaf/io/dataset.hpp"
#include "tdaf/io/metrics.hpp"

namespace tdaf {

struct TrainResult {
  std::string out_dir;
  std::string metrics_path;
  std::string final_checkpoint;
  std::string best_checkpoint;
  double best_test_accuracy = 0;
  int best_epoch = -1;
  long long steps = 0;
  double final_train_loss = 0;
  double wall_seconds = 0;  // written to a sidecar file, never into the CSV
};

/// Runs the configured training job: shuffled mini-batch SGD with step decay,
/// per-epoch eval-mode test evaluation, metrics CSV, and final/best
/// checkpoints. Fully deterministic for a fixed config.
TrainResult train_run(const RunConfig& cfg, const std::string& out_dir);

struct EvalResult {
  double accuracy = 0;
  double mean_loss = 0;
  int samples = 0;
};

EvalResult evaluate_model(R2dnsModel<float>& model, const Dataset& ds, const RunConfig& cfg);
EvalResult evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path);

std::unique_ptr<R2dnsModel<float>> build_model(const RunConfig& cfg);
std::unique_ptr<R2dnsModel<float>> load_model(const RunConfig& cfg,
                                              const std::string& checkpoint_path);

/// Writes one 8-bit grayscale PGM per (flow, stage) attention map for the
/// given test-set sample, named attn_f<flow>_s<stage>.pgm, plus an index.txt
/// listing file names and dims. Returns the number of map files written.
int export_attention(const RunConfig& cfg, const std::string& checkpoint_path, int sample_index,
                     const std::string& out_dir);

/// Mean attention inside the class patch divided by mean attention overall,
/// for the last flow's stage-1 map, averaged over the synthetic test set.
double attention_localization_score(const RunConfig& cfg, const std::string& checkpoint_path);
double attention_localization_score_model(R2dnsModel<float>& model, const Dataset& ds,
                                          const RunConfig& cfg);

struct ParamAudit {
  std::int64_t total = 0;
  std::int64_t stage_total = 0;
  std::int64_t attention_total = 0;
  std::int64_t head_total = 0;
  std::int64_t baseline_total = 0;  // bare backbone with the same stages + head
  double overhead_pct = 0;          // (total - baseline) / baseline * 100
  bool anar_formula_matches = false;
  std::vector<std::int64_t> anar_formula_per_module;
};

ParamAudit audit_params(const RunConfig& cfg);

}  // namespace tdaf
