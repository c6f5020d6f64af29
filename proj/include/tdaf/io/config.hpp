#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "tdaf/nn/r2dns.hpp"

namespace tdaf {

/// Flat `section.key = value` text config. `#` starts a comment. Raw entries
/// keep their line numbers so validation errors can cite them.
struct RawConfig {
  struct Entry {
    std::string value;
    int line = 0;
  };
  std::map<std::string, Entry> entries;
  std::string source;
};

RawConfig parse_raw_config(const std::string& text, const std::string& source);
RawConfig load_raw_config(const std::string& path);

/// Keys present in exactly one config or with differing values.
std::vector<std::string> config_diff(const RawConfig& a, const RawConfig& b);

struct OptimizerConfig {
  float lr = 0.05f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  float decay_factor = 0.1f;
  std::vector<float> decay_milestones{0.5f, 0.75f};  // fractions of total epochs
};

struct DataConfig {
  std::string dataset = "synthetic";  // synthetic | cifar10
  std::string dir;                    // cifar10 batch directory
  int train_samples = 5000;           // synthetic
  int test_samples = 1000;            // synthetic
  int num_classes = 4;                // synthetic
  std::uint64_t seed = 1234;          // dataset stream, independent of the run seed
  bool augment = false;               // flip + pad-4 random crop
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.29f, 0.29f, 0.29f};
};

struct RunConfig {
  BackboneSpec backbone;
  AnarConfig anar;
  int flows = 3;
  float eta = 0.5f;
  RunMode mode = RunMode::attention;
  OptimizerConfig optimizer;
  int epochs = 30;
  int batch_size = 64;
  bool eval_train = false;  // additionally run an eval-mode pass over the train set each epoch
  DataConfig data;
  std::uint64_t seed = 1;
  int input_size = 32;
};

/// Validates every field and rejects unknown keys, citing line numbers.
RunConfig materialize_config(const RawConfig& raw);
RunConfig load_config(const std::string& path);

/// The default config rendered as config-file text.
std::string render_config(const RunConfig& cfg);

}  // namespace tdaf
