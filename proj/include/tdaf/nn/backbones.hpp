#pragma once

#include <memory>
#include <string>
#include <vector>

#include "tdaf/nn/mfbn.hpp"

namespace tdaf {

struct BackboneSpec {
  std::string name = "tiny_resnet";  // tiny_vgg | tiny_resnet
  std::vector<int> stage_channels;   // defaults to {32,64,128,256} truncated to num_stages
  int num_stages = 4;
  int num_classes = 10;
  int in_channels = 3;
};

inline void validate_backbone_spec(BackboneSpec& spec) {
  require(spec.name == "tiny_vgg" || spec.name == "tiny_resnet", "BackboneSpec: unknown name '",
          spec.name, "'");
  require(spec.num_stages >= 1, "BackboneSpec: num_stages must be >= 1, got ", spec.num_stages);
  require(spec.num_classes >= 2, "BackboneSpec: num_classes must be >= 2, got ",
          spec.num_classes);
  require(spec.in_channels >= 1, "BackboneSpec: in_channels must be >= 1");
  if (spec.stage_channels.empty()) {
    const std::vector<int> defaults{32, 64, 128, 256};
    require(spec.num_stages <= int(defaults.size()),
            "BackboneSpec: num_stages > 4 requires explicit stage_channels");
    spec.stage_channels.assign(defaults.begin(), defaults.begin() + spec.num_stages);
  }
  require(int(spec.stage_channels.size()) == spec.num_stages, "BackboneSpec: ",
          spec.stage_channels.size(), " stage_channels for ", spec.num_stages, " stages");
  for (int c : spec.stage_channels)
    require(c >= 32 && c % 32 == 0, "BackboneSpec: stage channels must be positive multiples of "
            "32, got ", c);
}

/// Static description of one stage, used for symbolic shape propagation.
/// Every stage applies exactly one x2 spatial reduction.
struct StageSpec {
  int index = 1;  // 1-based
  std::string kind;
  int in_channels = 0;
  int out_channels = 0;
  int stride = 2;
  int cumulative_stride = 2;
};

inline std::vector<StageSpec> make_stage_specs(const BackboneSpec& spec) {
  std::vector<StageSpec> out;
  int cum = 1;
  for (int l = 0; l < spec.num_stages; ++l) {
    StageSpec s;
    s.index = l + 1;
    s.kind = spec.name;
    s.in_channels = l == 0 ? spec.in_channels : spec.stage_channels[l - 1];
    s.out_channels = spec.stage_channels[l];
    s.stride = 2;
    cum *= s.stride;
    s.cumulative_stride = cum;
    out.push_back(s);
  }
  return out;
}

inline std::vector<StageSpec> make_tiny_vgg(BackboneSpec spec) {
  spec.name = "tiny_vgg";
  validate_backbone_spec(spec);
  return make_stage_specs(spec);
}

inline std::vector<StageSpec> make_tiny_resnet(BackboneSpec spec) {
  spec.name = "tiny_resnet";
  validate_backbone_spec(spec);
  return make_stage_specs(spec);
}

/// One stage of the shared vertical stack. Forward takes the flow index so
/// the norm layers can address per-flow statistics; the weights themselves
/// are shared across flows.
template <typename Scalar>
class StageModule {
 public:
  virtual ~StageModule() = default;
  virtual TensorPtr<Scalar> forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& x, int flow) = 0;
  virtual void set_train(bool train) = 0;
  virtual void collect_bn(std::vector<std::pair<std::string, MfbnLayer<Scalar>*>>& out) = 0;
};

/// [3x3 conv -> norm -> relu] x2 followed by 2x2 max pooling.
template <typename Scalar>
class VggStage : public StageModule<Scalar> {
 public:
  VggStage(const StageSpec& spec, int num_flows, ParameterStore<Scalar>& store,
           const std::string& prefix, std::uint64_t seed) {
    const int ci = spec.in_channels, co = spec.out_channels;
    w0_ = store.add(prefix + ".conv0.weight", Shape(co, ci, 3, 3));
    init_kaiming(w0_, std::int64_t(ci) * 9, seed, prefix + ".conv0.weight");
    b0_ = store.add(prefix + ".conv0.bias", Shape(1, co, 1, 1));
    bn0_ = std::make_unique<MfbnLayer<Scalar>>(co, num_flows, store, prefix + ".bn0");
    w1_ = store.add(prefix + ".conv1.weight", Shape(co, co, 3, 3));
    init_kaiming(w1_, std::int64_t(co) * 9, seed, prefix + ".conv1.weight");
    b1_ = store.add(prefix + ".conv1.bias", Shape(1, co, 1, 1));
    bn1_ = std::make_unique<MfbnLayer<Scalar>>(co, num_flows, store, prefix + ".bn1");
  }

  TensorPtr<Scalar> forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& x, int flow) override {
    auto h = relu(tape, mfbn_forward(tape, conv2d(tape, x, w0_, b0_, 1, 1), flow, *bn0_));
    h = relu(tape, mfbn_forward(tape, conv2d(tape, h, w1_, b1_, 1, 1), flow, *bn1_));
    return max_pool_2x2(tape, h);
  }

  void set_train(bool train) override {
    bn0_->train_mode = train;
    bn1_->train_mode = train;
  }
  void collect_bn(std::vector<std::pair<std::string, MfbnLayer<Scalar>*>>& out) override {
    out.emplace_back(bn0_->name(), bn0_.get());
    out.emplace_back(bn1_->name(), bn1_.get());
  }

 private:
  TensorPtr<Scalar> w0_, b0_, w1_, b1_;
  std::unique_ptr<MfbnLayer<Scalar>> bn0_, bn1_;
};

/// Residual stage: 3x3/2 conv -> norm -> relu -> 3x3 conv -> norm, added to
/// a 1x1/2 projection of the input, then relu.
template <typename Scalar>
class ResnetStage : public StageModule<Scalar> {
 public:
  ResnetStage(const StageSpec& spec, int num_flows, ParameterStore<Scalar>& store,
              const std::string& prefix, std::uint64_t seed) {
    const int ci = spec.in_channels, co = spec.out_channels;
    w0_ = store.add(prefix + ".conv0.weight", Shape(co, ci, 3, 3));
    init_kaiming(w0_, std::int64_t(ci) * 9, seed, prefix + ".conv0.weight");
    b0_ = store.add(prefix + ".conv0.bias", Shape(1, co, 1, 1));
    bn0_ = std::make_unique<MfbnLayer<Scalar>>(co, num_flows, store, prefix + ".bn0");
    w1_ = store.add(prefix + ".conv1.weight", Shape(co, co, 3, 3));
    init_kaiming(w1_, std::int64_t(co) * 9, seed, prefix + ".conv1.weight");
    b1_ = store.add(prefix + ".conv1.bias", Shape(1, co, 1, 1));
    bn1_ = std::make_unique<MfbnLayer<Scalar>>(co, num_flows, store, prefix + ".bn1");
    wp_ = store.add(prefix + ".proj.weight", Shape(co, ci, 1, 1));
    init_kaiming(wp_, ci, seed, prefix + ".proj.weight");
    bp_ = store.add(prefix + ".proj.bias", Shape(1, co, 1, 1));
  }

  TensorPtr<Scalar> forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& x, int flow) override {
    auto h = relu(tape, mfbn_forward(tape, conv2d(tape, x, w0_, b0_, 2, 1), flow, *bn0_));
    h = mfbn_forward(tape, conv2d(tape, h, w1_, b1_, 1, 1), flow, *bn1_);
    auto p = conv2d(tape, x, wp_, bp_, 2, 0);
    return relu(tape, add(tape, h, p));
  }

  void set_train(bool train) override {
    bn0_->train_mode = train;
    bn1_->train_mode = train;
  }
  void collect_bn(std::vector<std::pair<std::string, MfbnLayer<Scalar>*>>& out) override {
    out.emplace_back(bn0_->name(), bn0_.get());
    out.emplace_back(bn1_->name(), bn1_.get());
  }

 private:
  TensorPtr<Scalar> w0_, b0_, w1_, b1_, wp_, bp_;
  std::unique_ptr<MfbnLayer<Scalar>> bn0_, bn1_;
};

template <typename Scalar>
std::unique_ptr<StageModule<Scalar>> make_stage(const StageSpec& spec, int num_flows,
                                                ParameterStore<Scalar>& store,
                                                const std::string& prefix, std::uint64_t seed) {
  if (spec.kind == "tiny_vgg")
    return std::make_unique<VggStage<Scalar>>(spec, num_flows, store, prefix, seed);
  if (spec.kind == "tiny_resnet")
    return std::make_unique<ResnetStage<Scalar>>(spec, num_flows, store, prefix, seed);
  fail("make_stage: unknown stage kind '", spec.kind, "'");
}

/// Learnable parameter count of one stage, for audit cross-checks.
inline std::int64_t stage_param_count(const StageSpec& spec) {
  const std::int64_t ci = spec.in_channels, co = spec.out_channels;
  std::int64_t total = 9 * ci * co + co + 2 * co;  // conv0 + bn0
  total += 9 * co * co + co + 2 * co;              // conv1 + bn1
  if (spec.kind == "tiny_resnet") total += ci * co + co;  // projection
  return total;
}

}  // namespace tdaf
