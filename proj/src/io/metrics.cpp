#include "tdaf/io/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "tdaf/core/tensor.hpp"

namespace tdaf {

const char* MetricsWriter::header() { return "event,step,epoch,split,loss,accuracy,lr"; }

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);  // exact double round-trip
  return buf;
}

MetricsWriter::MetricsWriter(const std::string& path) : path_(path), out_(path) {
  require(out_.good(), "MetricsWriter: cannot open ", path);
  out_ << header() << "\n";
  out_.flush();
}

void MetricsWriter::row(const std::string& event, long long step, int epoch,
                        const std::string& split, const std::string& loss,
                        const std::string& accuracy, const std::string& lr) {
  out_ << event << "," << step << "," << epoch << "," << split << "," << loss << "," << accuracy
       << "," << lr << "\n";
  out_.flush();
}

void MetricsWriter::train_step(long long step, int epoch, double loss, double lr) {
  row("train_step", step, epoch, "train", format_double(loss), "", format_double(lr));
}

void MetricsWriter::epoch_eval(long long step, int epoch, const std::string& split, double loss,
                               double accuracy) {
  row("epoch_eval", step, epoch, split, format_double(loss), format_double(accuracy), "");
}

void MetricsWriter::best(long long step, int epoch, double accuracy) {
  row("best", step, epoch, "test", "", format_double(accuracy), "");
}

MetricsTable parse_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "parse_metrics_csv: cannot open ", path);
  std::string line;
  require(bool(std::getline(in, line)), "parse_metrics_csv: empty file ", path);
  require(line == MetricsWriter::header(), "parse_metrics_csv: unexpected header '", line, "'");
  MetricsTable table;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 7) cells.push_back("");
    require(cells.size() == 7, "parse_metrics_csv: line ", line_no, ": expected 7 cells");
    MetricsRow row;
    row.event = cells[0];
    row.step = std::stoll(cells[1]);
    row.epoch = std::stoi(cells[2]);
    row.split = cells[3];
    if (!cells[4].empty()) {
      row.loss = std::stod(cells[4]);
      row.has_loss = true;
    }
    if (!cells[5].empty()) {
      row.accuracy = std::stod(cells[5]);
      row.has_accuracy = true;
    }
    if (!cells[6].empty()) {
      row.lr = std::stod(cells[6]);
      row.has_lr = true;
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

double MetricsTable::best_test_accuracy() const {
  double best = 0;
  for (const auto& r : rows)
    if (r.event == "epoch_eval" && r.split == "test" && r.has_accuracy)
      best = std::max(best, r.accuracy);
  return best;
}

int MetricsTable::best_test_epoch() const {
  double best = -1;
  int epoch = -1;
  for (const auto& r : rows)
    if (r.event == "epoch_eval" && r.split == "test" && r.has_accuracy && r.accuracy > best) {
      best = r.accuracy;
      epoch = r.epoch;
    }
  return epoch;
}

int MetricsTable::first_epoch_at_accuracy(const std::string& split, double threshold) const {
  for (const auto& r : rows)
    if (r.event == "epoch_eval" && r.split == split && r.has_accuracy && r.accuracy >= threshold)
      return r.epoch;
  return -1;
}

std::vector<double> MetricsTable::step_losses() const {
  std::vector<double> out;
  for (const auto& r : rows)
    if (r.event == "train_step" && r.has_loss) out.push_back(r.loss);
  return out;
}

}  // namespace tdaf
