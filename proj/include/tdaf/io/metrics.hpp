#pragma once

#include <fstream>
#include <string>
#include <vector>

namespace tdaf {

/// Append-only training log with a fixed schema:
///   event,step,epoch,split,loss,accuracy,lr
/// One row per logical event; empty cells where a field does not apply.
/// Rows contain no wall-clock values, so same-seed runs produce
/// byte-identical files.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void train_step(long long step, int epoch, double loss, double lr);
  void epoch_eval(long long step, int epoch, const std::string& split, double loss,
                  double accuracy);
  void best(long long step, int epoch, double accuracy);
  const std::string& path() const { return path_; }

  static const char* header();

 private:
  void row(const std::string& event, long long step, int epoch, const std::string& split,
           const std::string& loss, const std::string& accuracy, const std::string& lr);
  std::string path_;
  std::ofstream out_;
};

struct MetricsRow {
  std::string event;
  long long step = 0;
  int epoch = 0;
  std::string split;
  double loss = 0;
  double accuracy = 0;
  double lr = 0;
  bool has_loss = false, has_accuracy = false, has_lr = false;
};

struct MetricsTable {
  std::vector<MetricsRow> rows;

  /// Highest test accuracy over epoch_eval rows (split == "test").
  double best_test_accuracy() const;
  int best_test_epoch() const;
  /// First epoch whose eval accuracy on `split` reached `threshold`, or -1.
  int first_epoch_at_accuracy(const std::string& split, double threshold) const;
  std::vector<double> step_losses() const;
};

MetricsTable parse_metrics_csv(const std::string& path);

std::string format_double(double v);

}  // namespace tdaf
