#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tdaf/core/rng.hpp"
#include "tdaf/core/tensor.hpp"
#include "tdaf/io/config.hpp"

namespace tdaf {

/// In-memory image set in the CIFAR binary layout: per record one label byte
/// followed by 3072 channel-planar RGB bytes (32x32).
struct Dataset {
  int n = 0;
  int channels = 3;
  int height = 32;
  int width = 32;
  int num_classes = 10;
  std::vector<std::uint8_t> pixels;  // n * 3072
  std::vector<std::uint8_t> labels;  // n
  std::vector<std::array<int, 2>> patch_pos;  // synthetic only: (y, x) of the 8x8 patch
};

/// One standard binary batch file: N records of 3073 bytes each.
Dataset load_cifar10_file(const std::string& path);
/// data_batch_1..5.bin concatenated.
Dataset load_cifar10_train(const std::string& dir);
/// test_batch.bin.
Dataset load_cifar10_test(const std::string& dir);

/// Deterministic synthetic saliency set: uniform-noise background plus one
/// 8x8 class-determined shape patch (solid square / hollow square / diagonal
/// cross / disk) at a random 2px-grid-aligned position. Labels are assigned
/// round-robin; a per-class patch background byte balances the patch sum so
/// total ink is class-independent (a raw-pixel linear readout stays near chance).
Dataset gen_synthetic_saliency(std::uint64_t seed, int n_samples, int num_classes = 4);

/// Train/test splits draw from independent streams of the same seed.
Dataset make_synthetic_split(std::uint64_t seed, const std::string& split, int n_samples,
                             int num_classes = 4);

void write_cifar_records(const Dataset& ds, const std::string& path);
void write_patch_meta_csv(const Dataset& ds, const std::string& path);

Dataset load_train_split(const RunConfig& cfg);
Dataset load_test_split(const RunConfig& cfg);

struct BatchOptions {
  bool augment = false;
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.29f, 0.29f, 0.29f};
};

/// Scales bytes to [0,1], optionally applies horizontal flip + pad-4 random
/// crop (3 draws per sample from `augment_rng`, consumed in index order),
/// then standardizes per channel.
TensorPtr<float> assemble_batch(const Dataset& ds, const std::vector<int>& indices,
                                const BatchOptions& opt, Rng* augment_rng,
                                std::vector<int>& labels_out);

}  // namespace tdaf
