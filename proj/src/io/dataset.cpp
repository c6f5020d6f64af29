#include "tdaf/io/dataset.hpp"

#include <cmath>
#include <fstream>

namespace tdaf {

namespace {

constexpr int kImageBytes = 3 * 32 * 32;
constexpr int kRecordBytes = kImageBytes + 1;

void append_records(Dataset& ds, const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  require(in.good(), "load_cifar10: cannot open ", path);
  const std::int64_t size = in.tellg();
  require(size > 0 && size % kRecordBytes == 0, "load_cifar10: ", path, " has ", size,
          " bytes, not a multiple of ", kRecordBytes);
  in.seekg(0);
  const int count = int(size / kRecordBytes);
  std::vector<std::uint8_t> record(kRecordBytes);
  for (int i = 0; i < count; ++i) {
    in.read(reinterpret_cast<char*>(record.data()), kRecordBytes);
    require(in.gcount() == kRecordBytes, "load_cifar10: short read in ", path);
    require(record[0] <= 9, "load_cifar10: label ", int(record[0]), " > 9 at record ", ds.n,
            " in ", path);
    ds.labels.push_back(record[0]);
    ds.pixels.insert(ds.pixels.end(), record.begin() + 1, record.end());
    ++ds.n;
  }
}

// 8x8 patch masks: shape pixels are drawn at byte 152 and the rest of the
// patch at a per-class background byte chosen so that every class's patch
// sums to exactly 7712 per channel (36*152+28*80 = 28*152+36*96 =
// 16*152+48*110 = 32*152+32*89). A raw-pixel linear readout therefore gets
// no total-intensity cue, only position-diluted templates.
//
// The patch is alpha-blended onto the noise at a per-image opacity drawn
// uniformly from [1/2, 1]: strong-contrast samples are easy, while the faint
// tail keeps the class decision hard for the whole training run, so the
// training signal never collapses. Opacity is independent of the class, so
// the expected ink stays class-independent.
struct ShapeMask {
  bool on[8][8] = {};
  std::uint8_t foreground = 152;
  std::uint8_t background = 0;
};

const std::array<ShapeMask, 4>& shape_masks() {
  static const std::array<ShapeMask, 4> masks = [] {
    std::array<ShapeMask, 4> m{};
    // class 0: solid square (6x6 centered, 36 px)
    for (int y = 1; y <= 6; ++y)
      for (int x = 1; x <= 6; ++x) m[0].on[y][x] = true;
    m[0].background = 80;
    // class 1: hollow square (full border, width 1, 28 px)
    for (int i = 0; i < 8; ++i) {
      m[1].on[0][i] = m[1].on[7][i] = true;
      m[1].on[i][0] = m[1].on[i][7] = true;
    }
    m[1].background = 96;
    // class 2: diagonal cross (16 px)
    for (int i = 0; i < 8; ++i) {
      m[2].on[i][i] = true;
      m[2].on[i][7 - i] = true;
    }
    m[2].background = 110;
    // class 3: disk, radius^2 = 13 (32 px)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const double dy = y - 3.5, dx = x - 3.5;
        if (dy * dy + dx * dx <= 13.0) m[3].on[y][x] = true;
      }
    m[3].background = 89;
    return m;
  }();
  return masks;
}

}  // namespace

Dataset load_cifar10_file(const std::string& path) {
  Dataset ds;
  append_records(ds, path);
  return ds;
}

Dataset load_cifar10_train(const std::string& dir) {
  Dataset ds;
  for (int i = 1; i <= 5; ++i) append_records(ds, dir + "/data_batch_" + std::to_string(i) + ".bin");
  return ds;
}

Dataset load_cifar10_test(const std::string& dir) {
  Dataset ds;
  append_records(ds, dir + "/test_batch.bin");
  return ds;
}

Dataset gen_synthetic_saliency(std::uint64_t seed, int n_samples, int num_classes) {
  require(n_samples >= 1, "gen_synthetic_saliency: n_samples must be >= 1");
  require(num_classes >= 2 && num_classes <= 4, "gen_synthetic_saliency: num_classes must lie in "
          "[2,4], got ", num_classes);
  Dataset ds;
  ds.num_classes = num_classes;
  ds.n = n_samples;
  ds.pixels.resize(std::size_t(n_samples) * kImageBytes);
  ds.labels.resize(n_samples);
  ds.patch_pos.resize(n_samples);
  Rng rng = Rng::stream(seed, "synthetic");
  const auto& masks = shape_masks();
  for (int i = 0; i < n_samples; ++i) {
    const int cls = i % num_classes;
    ds.labels[i] = std::uint8_t(cls);
    const int py = 2 * int(rng.uniform_index(13));
    const int px = 2 * int(rng.uniform_index(13));
    ds.patch_pos[i] = {py, px};
    std::uint8_t* img = ds.pixels.data() + std::size_t(i) * kImageBytes;
    for (int b = 0; b < kImageBytes; ++b) img[b] = std::uint8_t(rng.uniform_index(256));
    const int alpha = 128 + int(rng.uniform_index(129));  // opacity * 256
    const auto& mask = masks[cls];
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const int v = mask.on[y][x] ? mask.foreground : mask.background;
        for (int c = 0; c < 3; ++c) {
          std::uint8_t& px_ref = img[c * 1024 + (py + y) * 32 + (px + x)];
          px_ref = std::uint8_t((alpha * v + (256 - alpha) * int(px_ref) + 128) >> 8);
        }
      }
  }
  return ds;
}

Dataset make_synthetic_split(std::uint64_t seed, const std::string& split, int n_samples,
                             int num_classes) {
  return gen_synthetic_saliency(splitmix64(seed ^ fnv1a64(split)), n_samples, num_classes);
}

void write_cifar_records(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "write_cifar_records: cannot open ", path);
  for (int i = 0; i < ds.n; ++i) {
    out.put(char(ds.labels[i]));
    out.write(reinterpret_cast<const char*>(ds.pixels.data() + std::size_t(i) * kImageBytes),
              kImageBytes);
  }
  require(out.good(), "write_cifar_records: write failed for ", path);
}

void write_patch_meta_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "write_patch_meta_csv: cannot open ", path);
  out << "index,label,patch_y,patch_x\n";
  for (int i = 0; i < ds.n; ++i) {
    const auto pos = ds.patch_pos.empty() ? std::array<int, 2>{-1, -1} : ds.patch_pos[i];
    out << i << "," << int(ds.labels[i]) << "," << pos[0] << "," << pos[1] << "\n";
  }
}

Dataset load_train_split(const RunConfig& cfg) {
  if (cfg.data.dataset == "cifar10") return load_cifar10_train(cfg.data.dir);
  return make_synthetic_split(cfg.data.seed, "train", cfg.data.train_samples,
                              cfg.data.num_classes);
}

Dataset load_test_split(const RunConfig& cfg) {
  if (cfg.data.dataset == "cifar10") return load_cifar10_test(cfg.data.dir);
  if (cfg.data.test_samples == 0) {
    Dataset empty;
    empty.num_classes = cfg.data.num_classes;
    return empty;
  }
  return make_synthetic_split(cfg.data.seed, "test", cfg.data.test_samples,
                              cfg.data.num_classes);
}

TensorPtr<float> assemble_batch(const Dataset& ds, const std::vector<int>& indices,
                                const BatchOptions& opt, Rng* augment_rng,
                                std::vector<int>& labels_out) {
  require(!indices.empty(), "assemble_batch: empty index list");
  const int nb = int(indices.size());
  auto batch = make_tensor<float>(Shape(nb, ds.channels, ds.height, ds.width));
  labels_out.resize(nb);
  const int hw = ds.height * ds.width;
  std::vector<float> plane(std::size_t(ds.channels) * hw);
  for (int bi = 0; bi < nb; ++bi) {
    const int idx = indices[bi];
    require(idx >= 0 && idx < ds.n, "assemble_batch: index ", idx, " out of range [0,", ds.n,
            ")");
    labels_out[bi] = ds.labels[idx];
    const std::uint8_t* img = ds.pixels.data() + std::size_t(idx) * ds.channels * hw;
    for (std::size_t j = 0; j < plane.size(); ++j) plane[j] = float(img[j]) / 255.0f;
    bool flip = false;
    int dy = 4, dx = 4;  // offsets into the 4px zero padding; 4 = identity crop
    if (opt.augment) {
      require(augment_rng != nullptr, "assemble_batch: augment requires an rng");
      flip = augment_rng->uniform() < 0.5;
      dy = int(augment_rng->uniform_index(9));
      dx = int(augment_rng->uniform_index(9));
    }
    float* dst = batch->values.data() + std::int64_t(bi) * ds.channels * hw;
    for (int c = 0; c < ds.channels; ++c) {
      const float* src = plane.data() + std::size_t(c) * hw;
      const float inv_std = 1.0f / opt.stddev[c];
      for (int y = 0; y < ds.height; ++y)
        for (int x = 0; x < ds.width; ++x) {
          float v = 0.0f;
          if (opt.augment) {
            const int sy = y + dy - 4;
            int sx = x + dx - 4;
            if (flip) sx = ds.width - 1 - sx;
            if (sy >= 0 && sy < ds.height && sx >= 0 && sx < ds.width) v = src[sy * ds.width + sx];
          } else {
            v = src[y * ds.width + x];
          }
          dst[(std::int64_t(c) * ds.height + y) * ds.width + x] = (v - opt.mean[c]) * inv_std;
        }
    }
  }
  return batch;
}

}  // namespace tdaf
