#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tdaf/nn/mfbn.hpp"

namespace tdaf {

/// Hourglass attention module settings. The variant names the layer count:
/// 3, 5 or 7 conv/deconv layers. `interpolation_upsample` swaps the single
/// deconv of the 3-layer module for parameter-free nearest-neighbor 2x
/// interpolation (the "2-layer" variant).
struct AnarConfig {
  int variant = 3;
  int in_channels = 0;
  bool interpolation_upsample = false;
};

inline void validate_anar_config(const AnarConfig& cfg) {
  require(cfg.variant == 3 || cfg.variant == 5 || cfg.variant == 7, "AnarConfig: variant ",
          cfg.variant, " not in {3,5,7}");
  require(cfg.in_channels >= 32 && cfg.in_channels % 32 == 0,
          "AnarConfig: in_channels must be a positive multiple of 32, got ", cfg.in_channels);
  require(!cfg.interpolation_upsample || cfg.variant == 3,
          "AnarConfig: interpolation_upsample is only valid with variant 3");
}

inline int anar_down_blocks(const AnarConfig& cfg) {
  return cfg.variant == 7 ? 2 : (cfg.variant == 5 ? 1 : 0);
}

/// Closed-form learnable parameter count (conv/deconv weights and biases,
/// shared batch-norm affine pairs, skip convs). Must equal the constructed
/// module's total.
inline std::int64_t anar_param_count(const AnarConfig& cfg) {
  validate_anar_config(cfg);
  const std::int64_t c = cfg.in_channels;
  const std::int64_t c4 = c / 4, c8 = c / 8, c16 = c / 16, c32 = c / 32;
  auto conv = [](std::int64_t ci, std::int64_t co, std::int64_t k) { return k * k * ci * co + co; };
  auto bn = [](std::int64_t ch) { return 2 * ch; };
  if (cfg.variant == 3 && cfg.interpolation_upsample)
    return conv(c, c8, 1) + bn(c8) + conv(c8, 1, 1);
  if (cfg.variant == 3)
    return conv(c, c8, 1) + bn(c8) + conv(c8, c32, 4) + bn(c32) + conv(c32, 1, 1);
  if (cfg.variant == 5)
    return conv(c, c4, 1) + bn(c4) + conv(c4, c8, 3) + bn(c8) + conv(c8, c16, 4) + bn(c16) +
           conv(c4, c16, 1) + conv(c16, c32, 4) + bn(c32) + conv(c32, 1, 1);
  return conv(c, c4, 1) + bn(c4) + conv(c4, c8, 3) + bn(c8) + conv(c8, c8, 3) + bn(c8) +
         conv(c8, c16, 4) + bn(c16) + conv(c8, c16, 1) + conv(c16, c16, 4) + bn(c16) +
         conv(c4, c16, 1) + conv(c16, c32, 4) + bn(c32) + conv(c32, 1, 1);
}

/// The attention network: shrinks resolution to gather context, expands back
/// past the input size, and emits a single-channel sigmoid map at exactly
/// twice the input resolution. Skip convs ("SC") bridge the down/up points
/// of equal resolution; their output is added after the deconv's norm,
/// before the block's relu.
template <typename Scalar>
class AnarModule {
 public:
  AnarModule(const AnarConfig& cfg, int num_flows, ParameterStore<Scalar>& store,
             const std::string& prefix, std::uint64_t seed)
      : cfg_(cfg), prefix_(prefix) {
    validate_anar_config(cfg);
    const int c = cfg.in_channels;
    auto add_conv = [&](const std::string& name, BlockKind kind, int ci, int co, int k,
                        bool with_bn) {
      Block blk;
      blk.kind = kind;
      blk.name = name;
      blk.w = store.add(prefix + "." + name + ".weight",
                        kind == BlockKind::up ? Shape(ci, co, k, k) : Shape(co, ci, k, k));
      init_kaiming(blk.w, std::int64_t(ci) * k * k, seed, prefix + "." + name + ".weight");
      blk.b = store.add(prefix + "." + name + ".bias", Shape(1, co, 1, 1));
      if (with_bn)
        blk.bn = std::make_unique<MfbnLayer<Scalar>>(co, num_flows, store,
                                                     prefix + "." + name + ".bn");
      blocks_.push_back(std::move(blk));
    };
    auto add_skip = [&](int up_block, int from_block) {
      Block& up = blocks_[up_block];
      const int ci = out_channels_of(from_block);
      const int co = up.w->shape.c;  // deconv weight is (C_in, C_out, 4, 4)
      up.skip_from = from_block;
      up.skip_w = store.add(prefix + "." + up.name + ".skip.weight", Shape(co, ci, 1, 1));
      init_kaiming(up.skip_w, ci, seed, prefix + "." + up.name + ".skip.weight");
      up.skip_b = store.add(prefix + "." + up.name + ".skip.bias", Shape(1, co, 1, 1));
    };

    if (cfg.variant == 3 && cfg.interpolation_upsample) {
      add_conv("trans_in", BlockKind::trans_in, c, c / 8, 1, true);
      Block up;
      up.kind = BlockKind::upsample;
      up.name = "up1";
      blocks_.push_back(std::move(up));
      add_conv("trans_out", BlockKind::trans_out, c / 8, 1, 1, false);
    } else if (cfg.variant == 3) {
      add_conv("trans_in", BlockKind::trans_in, c, c / 8, 1, true);
      add_conv("up1", BlockKind::up, c / 8, c / 32, 4, true);
      add_conv("trans_out", BlockKind::trans_out, c / 32, 1, 1, false);
    } else if (cfg.variant == 5) {
      add_conv("trans_in", BlockKind::trans_in, c, c / 4, 1, true);
      add_conv("down1", BlockKind::down, c / 4, c / 8, 3, true);
      add_conv("up1", BlockKind::up, c / 8, c / 16, 4, true);
      add_conv("up2", BlockKind::up, c / 16, c / 32, 4, true);
      add_conv("trans_out", BlockKind::trans_out, c / 32, 1, 1, false);
      add_skip(2, 0);
    } else {
      add_conv("trans_in", BlockKind::trans_in, c, c / 4, 1, true);
      add_conv("down1", BlockKind::down, c / 4, c / 8, 3, true);
      add_conv("down2", BlockKind::down, c / 8, c / 8, 3, true);
      add_conv("up1", BlockKind::up, c / 8, c / 16, 4, true);
      add_conv("up2", BlockKind::up, c / 16, c / 16, 4, true);
      add_conv("up3", BlockKind::up, c / 16, c / 32, 4, true);
      add_conv("trans_out", BlockKind::trans_out, c / 32, 1, 1, false);
      add_skip(3, 1);
      add_skip(4, 0);
    }
  }

  AnarModule(AnarModule&&) = default;
  AnarModule& operator=(AnarModule&&) = default;

  /// Input (N, c, H, W) -> attention map (N, 1, 2H, 2W), values strictly in
  /// (0, 1). Norm layers are addressed with the caller's flow index.
  TensorPtr<Scalar> forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& x, int flow_id) {
    const int down = anar_down_blocks(cfg_);
    const int div = 1 << down;
    require(x->shape.h % div == 0 && x->shape.w % div == 0, "anar_forward: input ",
            x->shape.str(), " not divisible by 2^", down, " (variant ", cfg_.variant, ")");
    require(x->shape.c == cfg_.in_channels, "anar_forward: input channels ", x->shape.c,
            " != configured ", cfg_.in_channels);
    std::vector<TensorPtr<Scalar>> saved;
    TensorPtr<Scalar> cur = x;
    for (auto& blk : blocks_) {
      switch (blk.kind) {
        case BlockKind::trans_in:
          cur = relu(tape, mfbn_forward(tape, conv2d(tape, cur, blk.w, blk.b, 1, 0), flow_id,
                                        *blk.bn));
          break;
        case BlockKind::down:
          cur = relu(tape, mfbn_forward(tape, conv2d(tape, cur, blk.w, blk.b, 2, 1), flow_id,
                                        *blk.bn));
          break;
        case BlockKind::up: {
          auto main = mfbn_forward(tape, deconv2d(tape, cur, blk.w, blk.b), flow_id, *blk.bn);
          if (blk.skip_from >= 0) {
            auto sc = conv2d(tape, saved[blk.skip_from], blk.skip_w, blk.skip_b, 1, 0);
            main = add(tape, main, sc);
          }
          cur = relu(tape, main);
          break;
        }
        case BlockKind::upsample:
          cur = nn_upsample_2x(tape, cur);
          break;
        case BlockKind::trans_out:
          cur = sigmoid(tape, conv2d(tape, cur, blk.w, blk.b, 1, 0));
          break;
      }
      saved.push_back(cur);
    }
    return cur;
  }

  void set_train(bool train) {
    for (auto& blk : blocks_)
      if (blk.bn) blk.bn->train_mode = train;
  }

  void collect_bn(std::vector<std::pair<std::string, MfbnLayer<Scalar>*>>& out) {
    for (auto& blk : blocks_)
      if (blk.bn) out.emplace_back(blk.bn->name(), blk.bn.get());
  }

  /// Total size of the constructed learnable tensors.
  std::int64_t param_count() const {
    std::int64_t total = 0;
    for (const auto& blk : blocks_) {
      if (blk.w) total += blk.w->shape.numel() + blk.b->shape.numel();
      if (blk.bn) total += blk.bn->gamma()->shape.numel() + blk.bn->alpha()->shape.numel();
      if (blk.skip_w) total += blk.skip_w->shape.numel() + blk.skip_b->shape.numel();
    }
    return total;
  }

  const AnarConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

 private:
  enum class BlockKind { trans_in, down, up, upsample, trans_out };
  struct Block {
    BlockKind kind;
    std::string name;
    TensorPtr<Scalar> w, b;
    std::unique_ptr<MfbnLayer<Scalar>> bn;
    int skip_from = -1;
    TensorPtr<Scalar> skip_w, skip_b;
  };
  int out_channels_of(int block_idx) const {
    const Block& blk = blocks_[block_idx];
    return blk.kind == BlockKind::up ? blk.w->shape.c : blk.w->shape.n;
  }

  AnarConfig cfg_;
  std::string prefix_;
  std::vector<Block> blocks_;
};

}  // namespace tdaf
