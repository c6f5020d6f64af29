// Criterion 7: the full attention model (tiny ResNet, L=4, N=3, 3-layer
// attention modules) memorizes 64 samples to 100% train accuracy within 500
// steps, in under 10 minutes. Also pins the backbone sanity floor: the bare
// N=1 model reaches < 0.05 training loss on the same task within 500 steps.

#include <chrono>
#include <filesystem>

#include <tdaf/train/trainer.hpp>

#include "accept.hpp"

using namespace tdaf;

namespace {

RunConfig memorize_config() {
  RunConfig cfg;  // tiny_resnet L=4, channels 32..256
  cfg.backbone.num_classes = 4;
  cfg.flows = 3;
  cfg.anar.variant = 3;
  cfg.epochs = 500;  // batch 64 over 64 samples: one step per epoch
  cfg.batch_size = 64;
  cfg.eval_train = true;
  cfg.data.train_samples = 64;
  cfg.data.test_samples = 0;
  cfg.seed = 11;
  return cfg;
}

void criterion_memorize(std::string& note) {
  const auto t0 = std::chrono::steady_clock::now();
  auto dir = std::filesystem::temp_directory_path() / "tdaf_acceptance_memorize";
  std::filesystem::create_directories(dir);

  auto cfg = memorize_config();
  auto result = train_run(cfg, (dir / "tdaf").string());
  accept::check(result.steps == 500, "expected 500 steps, ran ", result.steps);
  auto table = parse_metrics_csv(result.metrics_path);
  const int reached = table.first_epoch_at_accuracy("train_eval", 1.0);
  accept::check(reached >= 0, "never reached 100% train accuracy in 500 steps");

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  accept::check(secs < 600.0, "took ", secs, "s, budget is 600s");
  std::ostringstream os;
  os << "100% train accuracy at step " << reached + 1 << " of 500, " << int(secs) << "s";
  note = os.str();
}

void baseline_sanity_floor(std::string& note) {
  auto dir = std::filesystem::temp_directory_path() / "tdaf_acceptance_memorize";
  std::filesystem::create_directories(dir);
  auto cfg = memorize_config();
  cfg.flows = 1;
  auto result = train_run(cfg, (dir / "baseline").string());
  auto table = parse_metrics_csv(result.metrics_path);
  double best_loss = 1e30;
  int at_step = -1;
  for (const auto& r : table.rows)
    if (r.event == "train_step" && r.has_loss && r.loss < best_loss) {
      best_loss = r.loss;
      at_step = int(r.step);
    }
  accept::check(best_loss < 0.05, "baseline loss floor ", best_loss, " never went below 0.05");
  std::ostringstream os;
  os << "loss " << best_loss << " at step " << at_step;
  note = os.str();
}

}  // namespace

int main() {
  return accept::run_criteria({
      {7, "memorization: 100% train accuracy on 64 samples within 500 steps",
       criterion_memorize},
      {7, "baseline sanity floor: N=1 loss < 0.05 within 500 steps", baseline_sanity_floor},
  });
}
