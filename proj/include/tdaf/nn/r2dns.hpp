#pragma once

#include <memory>
#include <string>
#include <vector>

#include "tdaf/nn/anar.hpp"
#include "tdaf/nn/backbones.hpp"

namespace tdaf {

enum class RunMode { attention, multiscale_concat, baseline };

inline std::string run_mode_name(RunMode m) {
  switch (m) {
    case RunMode::attention: return "attention";
    case RunMode::multiscale_concat: return "multiscale_concat";
    case RunMode::baseline: return "baseline";
  }
  return "?";
}

/// Asymmetric flow schedule: flow n (1-based) runs the first
/// L - (N - n) stages, so earlier (coarser-input) flows are shorter and the
/// last flow runs the full stack.
struct FlowPlan {
  int num_flows = 1;
  int num_stages = 1;

  int stage_count(int flow) const {
    require(flow >= 1 && flow <= num_flows, "flow_stage_count: flow ", flow,
            " out of range [1,", num_flows, "]");
    return num_stages - (num_flows - flow);
  }
};

inline int flow_stage_count(const FlowPlan& plan, int flow) { return plan.stage_count(flow); }

inline void validate_flow_plan(const FlowPlan& plan) {
  require(plan.num_flows >= 1, "FlowPlan: num_flows must be >= 1, got ", plan.num_flows);
  require(plan.num_flows <= plan.num_stages, "FlowPlan: num_flows ", plan.num_flows,
          " exceeds num_stages ", plan.num_stages);
}

/// Number of attention maps a forward pass produces: one per junction.
inline int attention_map_count(const FlowPlan& plan) {
  int total = 0;
  for (int n = 2; n <= plan.num_flows; ++n) total += plan.stage_count(n - 1);
  return total;
}

/// Input pyramid: element N (1-based) is x itself, element n is a 2x2
/// average-pool of element n+1, so the first flow sees the coarsest view.
template <typename Scalar>
std::vector<TensorPtr<Scalar>> build_input_pyramid(Tape<Scalar>* tape, const TensorPtr<Scalar>& x,
                                                   int num_flows) {
  require(num_flows >= 1, "build_input_pyramid: num_flows must be >= 1");
  const int div = 1 << (num_flows - 1);
  require(x->shape.h % div == 0 && x->shape.w % div == 0, "build_input_pyramid: input ",
          x->shape.str(), " not divisible by 2^(N-1) = ", div);
  std::vector<TensorPtr<Scalar>> levels(num_flows);
  levels[num_flows - 1] = x;
  for (int f = num_flows - 2; f >= 0; --f) levels[f] = avg_pool_2x2(tape, levels[f + 1]);
  return levels;
}

struct AlignmentIssue {
  int flow = 0;   // 1-based, 0 when not flow-specific
  int stage = 0;  // 1-based
  std::string detail;
};

struct AlignmentReport {
  bool ok = true;
  std::vector<AlignmentIssue> issues;
};

/// Symbolic shape propagation for a nominal input: verifies the pyramid
/// divides cleanly, every flow survives its stage count, and (in attention
/// mode) every junction's attention input is exactly half the spatial size of
/// the stage output it gates, so the module's x2 output closes the gap.
inline AlignmentReport junction_alignment_check(const std::vector<StageSpec>& stages,
                                                const FlowPlan& plan, const AnarConfig& anar,
                                                RunMode mode, int input_h, int input_w) {
  AlignmentReport report;
  auto issue = [&](int flow, int stage, std::string detail) {
    report.ok = false;
    report.issues.push_back({flow, stage, std::move(detail)});
  };
  validate_flow_plan(plan);
  require(int(stages.size()) == plan.num_stages, "junction_alignment_check: ", stages.size(),
          " stages for plan of ", plan.num_stages);

  for (const auto& s : stages)
    if (s.stride != 2)
      issue(0, s.index, "stage stride " + std::to_string(s.stride) +
                            " breaks power-of-two alignment");

  const int pyr_div = 1 << (plan.num_flows - 1);
  if (input_h % pyr_div != 0 || input_w % pyr_div != 0)
    issue(0, 0, "input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                    " not divisible by 2^(N-1) = " + std::to_string(pyr_div));
  if (!report.ok) return report;

  const int anar_div = 1 << anar_down_blocks(anar);
  for (int n = 1; n <= plan.num_flows; ++n) {
    int h = input_h / (1 << (plan.num_flows - n));
    int w = input_w / (1 << (plan.num_flows - n));
    for (int l = 1; l <= plan.stage_count(n); ++l) {
      if (h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2) {
        issue(n, l, "flow input exhausted: " + std::to_string(h) + "x" + std::to_string(w) +
                        " cannot pass a x2 reduction");
        return report;
      }
      h /= 2;
      w /= 2;
      if (mode == RunMode::attention && n > 1 && l <= plan.stage_count(n - 1)) {
        // Junction into flow n at stage l gates a (h, w) stage output with
        // the x2-upscaled map of flow n-1's stage-l output.
        const int src_h = h / 2, src_w = w / 2;
        if (src_h * 2 != h || src_w * 2 != w || src_h < 1)
          issue(n, l, "attention source cannot be half of " + std::to_string(h) + "x" +
                          std::to_string(w));
        if (src_h % anar_div != 0 || src_w % anar_div != 0)
          issue(n, l, "attention input " + std::to_string(src_h) + "x" + std::to_string(src_w) +
                          " not divisible by the module's 2^" +
                          std::to_string(anar_down_blocks(anar)) + " reduction");
        if (stages[l - 1].out_channels % 32 != 0)
          issue(n, l, "stage output channels " + std::to_string(stages[l - 1].out_channels) +
                          " not divisible by 32");
      }
    }
  }
  return report;
}

template <typename Scalar>
struct AttentionMapEntry {
  int flow = 0;   // 1-based flow the map was applied to
  int stage = 0;  // 1-based stage
  TensorPtr<Scalar> map;
};

template <typename Scalar>
struct JunctionRecord {
  int flow = 0;
  int stage = 0;
  TensorPtr<Scalar> stage_out;  // a = h_l(x)
  TensorPtr<Scalar> map;        // attention in (0,1)
  TensorPtr<Scalar> joined;     // a * (map + eta)
};

template <typename Scalar>
struct ForwardResult {
  TensorPtr<Scalar> features;  // pre-head features
  TensorPtr<Scalar> logits;
  std::vector<AttentionMapEntry<Scalar>> maps;
  std::vector<JunctionRecord<Scalar>> junctions;  // only when requested
};

/// The full model: weight-shared stages h_1..h_L, attention modules
/// g_1..g_{L-1} (attention mode), flow plan, and classifier head. g_L never
/// exists: no flow can supply a deeper predecessor feature.
template <typename Scalar>
class R2dnsModel {
 public:
  R2dnsModel(BackboneSpec backbone_spec, AnarConfig anar_cfg, int flows, Scalar eta_value,
             RunMode run_mode, std::uint64_t seed, int input_size = 32)
      : backbone(std::move(backbone_spec)), anar(anar_cfg), eta(eta_value), mode(run_mode) {
    validate_backbone_spec(backbone);
    require(eta >= Scalar(0) && eta <= Scalar(1), "R2dnsModel: eta must lie in [0,1]");
    if (mode == RunMode::baseline)
      require(flows == 1, "R2dnsModel: baseline mode requires flows=1, got ", flows);
    plan = FlowPlan{flows, backbone.num_stages};
    validate_flow_plan(plan);
    stage_specs = make_stage_specs(backbone);

    const int num_flows = plan.num_flows;
    for (const auto& s : stage_specs) {
      const std::string prefix = "stage" + std::to_string(s.index);
      stages.push_back(make_stage<Scalar>(s, num_flows, params, prefix, seed));
    }
    if (mode == RunMode::attention) {
      for (int l = 1; l <= plan.num_stages - 1; ++l) {
        AnarConfig cfg = anar;
        cfg.in_channels = stage_specs[l - 1].out_channels;
        attentions.emplace_back(cfg, num_flows, params, "g" + std::to_string(l), seed);
      }
    }

    head_in_channels = 0;
    if (mode == RunMode::multiscale_concat) {
      for (int n = 1; n <= num_flows; ++n)
        head_in_channels += stage_specs[plan.stage_count(n) - 1].out_channels;
    } else {
      head_in_channels = stage_specs.back().out_channels;
    }
    head_w = params.add("head.fc.weight", Shape(backbone.num_classes, head_in_channels, 1, 1));
    init_kaiming(head_w, head_in_channels, seed, "head.fc.weight");
    head_b = params.add("head.fc.bias", Shape(1, backbone.num_classes, 1, 1));

    auto report = junction_alignment_check(stage_specs, plan, anar, mode, input_size, input_size);
    if (!report.ok) {
      std::string msg = "R2dnsModel: junction alignment failed:";
      for (const auto& i : report.issues)
        msg += " [flow " + std::to_string(i.flow) + " stage " + std::to_string(i.stage) + "] " +
               i.detail + ";";
      fail(msg);
    }
  }

  R2dnsModel(const R2dnsModel&) = delete;
  R2dnsModel& operator=(const R2dnsModel&) = delete;

  ForwardResult<Scalar> forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& x,
                                bool collect_junctions = false) {
    switch (mode) {
      case RunMode::attention: return attention_forward(tape, x, collect_junctions);
      case RunMode::multiscale_concat: return ablation_forward(tape, x);
      case RunMode::baseline: return baseline_forward(tape, x);
    }
    fail("forward: bad mode");
  }

  /// Schedule per flow n, stage l: a = h_l(x); the junction into flow n at
  /// stage l exists iff flow n-1 computed stage l, in which case
  /// x_{l+1} = a * (g_l(prev) + eta); otherwise the multiplier is exactly 1.
  ForwardResult<Scalar> attention_forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& x,
                                          bool collect_junctions = false) {
    require(mode == RunMode::attention, "attention_forward: model is in ", run_mode_name(mode),
            " mode");
    ForwardResult<Scalar> result;
    auto pyramid = build_input_pyramid(tape, x, plan.num_flows);
    std::vector<std::vector<TensorPtr<Scalar>>> outs(plan.num_flows);
    for (int f = 0; f < plan.num_flows; ++f) {
      const int s_f = plan.stage_count(f + 1);
      TensorPtr<Scalar> cur = pyramid[f];
      outs[f].resize(s_f);
      for (int l = 0; l < s_f; ++l) {
        auto a = stages[l]->forward(tape, cur, f);
        if (f > 0 && l < s_f - 1) {
          auto src = outs[f - 1][l];
          auto map = attentions[l].forward(tape, src, f - 1);
          require(map->shape.h == a->shape.h && map->shape.w == a->shape.w,
                  "attention_forward: junction mismatch at flow ", f + 1, " stage ", l + 1, ": ",
                  map->shape.str(), " vs ", a->shape.str());
          cur = eltwise_mul_add(tape, a, map, eta);
          result.maps.push_back({f + 1, l + 1, map});
          if (collect_junctions) result.junctions.push_back({f + 1, l + 1, a, map, cur});
        } else {
          cur = a;
        }
        outs[f][l] = cur;
      }
    }
    result.features = outs[plan.num_flows - 1].back();
    result.logits = head_forward(tape, global_avg_pool(tape, result.features));
    return result;
  }

  /// Multi-scale ablation: the same flow plan with no junctions; each flow's
  /// final feature is average-pooled and the pooled vectors are concatenated
  /// for the head.
  ForwardResult<Scalar> ablation_forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& x) {
    require(mode == RunMode::multiscale_concat, "ablation_forward: model is in ",
            run_mode_name(mode), " mode");
    ForwardResult<Scalar> result;
    auto pyramid = build_input_pyramid(tape, x, plan.num_flows);
    std::vector<TensorPtr<Scalar>> pooled;
    for (int f = 0; f < plan.num_flows; ++f) {
      TensorPtr<Scalar> cur = pyramid[f];
      const int s_f = plan.stage_count(f + 1);
      for (int l = 0; l < s_f; ++l) cur = stages[l]->forward(tape, cur, f);
      pooled.push_back(global_avg_pool(tape, cur));
    }
    result.features = concat_channels(tape, pooled);
    result.logits = head_forward(tape, result.features);
    return result;
  }

  /// The bare stage stack: no pyramid, no attention modules.
  ForwardResult<Scalar> baseline_forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& x) {
    require(mode == RunMode::baseline, "baseline_forward: model is in ", run_mode_name(mode),
            " mode");
    ForwardResult<Scalar> result;
    TensorPtr<Scalar> cur = x;
    for (auto& stage : stages) cur = stage->forward(tape, cur, 0);
    result.features = cur;
    result.logits = head_forward(tape, global_avg_pool(tape, cur));
    return result;
  }

  TensorPtr<Scalar> head_forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& pooled) {
    require(pooled->shape.c == head_in_channels, "head_forward: ", pooled->shape.c,
            " channels for a head configured with ", head_in_channels);
    return linear(tape, pooled, head_w, head_b);
  }

  void set_train(bool train) {
    train_mode = train;
    for (auto& s : stages) s->set_train(train);
    for (auto& g : attentions) g.set_train(train);
  }

  std::vector<std::pair<std::string, MfbnLayer<Scalar>*>> collect_bn() {
    std::vector<std::pair<std::string, MfbnLayer<Scalar>*>> out;
    for (auto& s : stages) s->collect_bn(out);
    for (auto& g : attentions) g.collect_bn(out);
    return out;
  }

  std::int64_t stage_param_total() const { return prefix_total("stage"); }
  std::int64_t attention_param_total() const { return prefix_total("g"); }
  std::int64_t head_param_total() const { return prefix_total("head"); }

  AlignmentReport check_alignment(int input_h, int input_w) const {
    return junction_alignment_check(stage_specs, plan, anar, mode, input_h, input_w);
  }

  BackboneSpec backbone;
  AnarConfig anar;
  std::vector<StageSpec> stage_specs;
  FlowPlan plan;
  Scalar eta;
  RunMode mode;
  bool train_mode = true;
  ParameterStore<Scalar> params;
  std::vector<std::unique_ptr<StageModule<Scalar>>> stages;
  std::vector<AnarModule<Scalar>> attentions;
  TensorPtr<Scalar> head_w, head_b;
  int head_in_channels = 0;

 private:
  std::int64_t prefix_total(const std::string& prefix) const {
    std::int64_t total = 0;
    for (const auto& p : params.items())
      if (p.name.rfind(prefix, 0) == 0) total += p.tensor->shape.numel();
    return total;
  }
};

}  // namespace tdaf
