#include "tdaf/train/gradcheck_suite.hpp"

#include <functional>

#include "tdaf/core/grad_check.hpp"
#include "tdaf/core/ops.hpp"
#include "tdaf/nn/r2dns.hpp"

namespace tdaf {

namespace {

TensorPtr<double> rand_tensor(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
  auto t = make_tensor<double>(shape, 0.0, requires_grad);
  for (auto& v : t->values) v = rng.uniform(lo, hi);
  return t;
}

ArrayX<double> rand_probe(std::int64_t n, Rng& rng) {
  ArrayX<double> p(n);
  for (auto& v : p) v = rng.uniform(-1, 1);
  return p;
}

using BlockFn = std::function<GradCheckReport()>;

struct BlockDef {
  std::string name;
  double tolerance;
  BlockFn run;
};

std::vector<BlockDef> suite_blocks() {
  std::vector<BlockDef> defs;
  auto add = [&](std::string name, double tol, BlockFn fn) {
    defs.push_back({std::move(name), tol, std::move(fn)});
  };

  add("conv2d_s1", 1e-6, [] {
    Rng rng(101);
    auto x = rand_tensor(Shape(2, 3, 6, 6), rng, -1, 1, true);
    auto w = rand_tensor(Shape(4, 3, 3, 3), rng, -1, 1, true);
    auto b = rand_tensor(Shape(1, 4, 1, 1), rng, -1, 1, true);
    auto probe = rand_probe(2 * 4 * 6 * 6, rng);
    return grad_check(
        [&](Tape<double>* t) {
          return weighted_sum<double>(t, conv2d<double>(t, x, w, b, 1, 1), probe);
        },
        {{"x", x}, {"w", w}, {"b", b}}, {.tolerance = 1e-6});
  });

  add("conv2d_s2", 1e-6, [] {
    Rng rng(102);
    auto x = rand_tensor(Shape(2, 3, 8, 8), rng, -1, 1, true);
    auto w = rand_tensor(Shape(4, 3, 3, 3), rng, -1, 1, true);
    auto b = rand_tensor(Shape(1, 4, 1, 1), rng, -1, 1, true);
    auto probe = rand_probe(2 * 4 * 4 * 4, rng);
    return grad_check(
        [&](Tape<double>* t) {
          return weighted_sum<double>(t, conv2d<double>(t, x, w, b, 2, 1), probe);
        },
        {{"x", x}, {"w", w}, {"b", b}}, {.tolerance = 1e-6});
  });

  add("deconv2d", 1e-6, [] {
    Rng rng(103);
    auto x = rand_tensor(Shape(2, 3, 4, 4), rng, -1, 1, true);
    auto w = rand_tensor(Shape(3, 2, 4, 4), rng, -1, 1, true);
    auto b = rand_tensor(Shape(1, 2, 1, 1), rng, -1, 1, true);
    auto probe = rand_probe(2 * 2 * 8 * 8, rng);
    return grad_check(
        [&](Tape<double>* t) {
          return weighted_sum<double>(t, deconv2d<double>(t, x, w, b), probe);
        },
        {{"x", x}, {"w", w}, {"b", b}}, {.tolerance = 1e-6});
  });

  add("relu", 1e-6, [] {
    Rng rng(104);
    auto x = rand_tensor(Shape(2, 4, 5, 5), rng, -1, 1, true);
    auto probe = rand_probe(x->values.size(), rng);
    return grad_check(
        [&](Tape<double>* t) { return weighted_sum<double>(t, relu<double>(t, x), probe); },
        {{"x", x}}, {.tolerance = 1e-6});
  });

  add("sigmoid", 1e-6, [] {
    Rng rng(105);
    auto x = rand_tensor(Shape(2, 4, 5, 5), rng, -3, 3, true);
    auto probe = rand_probe(x->values.size(), rng);
    return grad_check(
        [&](Tape<double>* t) { return weighted_sum<double>(t, sigmoid<double>(t, x), probe); },
        {{"x", x}}, {.tolerance = 1e-6});
  });

  add("eltwise_mul_add", 1e-6, [] {
    Rng rng(106);
    auto a = rand_tensor(Shape(2, 4, 4, 4), rng, -1, 1, true);
    auto b = rand_tensor(Shape(2, 1, 4, 4), rng, 0, 1, true);
    auto probe = rand_probe(a->values.size(), rng);
    return grad_check(
        [&](Tape<double>* t) {
          return weighted_sum<double>(t, eltwise_mul_add<double>(t, a, b, 0.5), probe);
        },
        {{"a", a}, {"b", b}}, {.tolerance = 1e-6});
  });

  add("avg_pool_2x2", 1e-6, [] {
    Rng rng(107);
    auto x = rand_tensor(Shape(2, 3, 6, 6), rng, -1, 1, true);
    auto probe = rand_probe(2 * 3 * 3 * 3, rng);
    return grad_check(
        [&](Tape<double>* t) { return weighted_sum<double>(t, avg_pool_2x2<double>(t, x), probe); },
        {{"x", x}}, {.tolerance = 1e-6});
  });

  add("max_pool_2x2", 1e-6, [] {
    Rng rng(108);
    auto x = rand_tensor(Shape(2, 3, 6, 6), rng, -1, 1, true);
    auto probe = rand_probe(2 * 3 * 3 * 3, rng);
    return grad_check(
        [&](Tape<double>* t) { return weighted_sum<double>(t, max_pool_2x2<double>(t, x), probe); },
        {{"x", x}}, {.tolerance = 1e-6});
  });

  add("global_avg_pool", 1e-6, [] {
    Rng rng(109);
    auto x = rand_tensor(Shape(3, 5, 4, 4), rng, -1, 1, true);
    auto probe = rand_probe(3 * 5, rng);
    return grad_check(
        [&](Tape<double>* t) {
          return weighted_sum<double>(t, global_avg_pool<double>(t, x), probe);
        },
        {{"x", x}}, {.tolerance = 1e-6});
  });

  add("nn_upsample_2x", 1e-6, [] {
    Rng rng(110);
    auto x = rand_tensor(Shape(2, 3, 3, 3), rng, -1, 1, true);
    auto probe = rand_probe(2 * 3 * 6 * 6, rng);
    return grad_check(
        [&](Tape<double>* t) {
          return weighted_sum<double>(t, nn_upsample_2x<double>(t, x), probe);
        },
        {{"x", x}}, {.tolerance = 1e-6});
  });

  add("linear", 1e-6, [] {
    Rng rng(111);
    auto x = rand_tensor(Shape(4, 6, 1, 1), rng, -1, 1, true);
    auto w = rand_tensor(Shape(5, 6, 1, 1), rng, -1, 1, true);
    auto b = rand_tensor(Shape(1, 5, 1, 1), rng, -1, 1, true);
    auto probe = rand_probe(4 * 5, rng);
    return grad_check(
        [&](Tape<double>* t) { return weighted_sum<double>(t, linear<double>(t, x, w, b), probe); },
        {{"x", x}, {"w", w}, {"b", b}}, {.tolerance = 1e-6});
  });

  add("softmax_cross_entropy", 1e-6, [] {
    Rng rng(112);
    auto logits = rand_tensor(Shape(4, 6, 1, 1), rng, -2, 2, true);
    std::vector<int> labels{0, 5, 2, 3};
    return grad_check(
        [&](Tape<double>* t) { return softmax_cross_entropy<double>(t, logits, labels); },
        {{"logits", logits}}, {.tolerance = 1e-6});
  });

  add("mfbn_train", 1e-6, [] {
    Rng rng(113);
    ParameterStore<double> store;
    MfbnLayer<double> bn(3, 2, store, "bn");
    auto x = rand_tensor(Shape(4, 3, 3, 3), rng, -1, 1, true);
    auto probe = rand_probe(x->values.size(), rng);
    return grad_check(
        [&](Tape<double>* t) {
          return weighted_sum<double>(t, mfbn_forward<double>(t, x, 1, bn), probe);
        },
        {{"x", x}, {"gamma", bn.gamma()}, {"alpha", bn.alpha()}}, {.tolerance = 1e-6});
  });

  add("anar3_block", 1e-5, [] {
    Rng rng(114);
    ParameterStore<double> store;
    AnarModule<double> g({.variant = 3, .in_channels = 32}, 1, store, "g", 301);
    auto x = rand_tensor(Shape(2, 32, 4, 4), rng, -1, 1, true);
    auto probe = rand_probe(2 * 8 * 8, rng);
    std::vector<Parameter<double>> blocks = store.items();
    blocks.push_back({"input", x});
    return grad_check(
        [&](Tape<double>* t) { return weighted_sum<double>(t, g.forward(t, x, 0), probe); },
        blocks, {.tolerance = 1e-5});
  });

  add("composed_model", 1e-5, [] {
    BackboneSpec spec;
    spec.name = "tiny_resnet";
    spec.num_stages = 2;
    spec.stage_channels = {32, 32};
    spec.num_classes = 4;
    spec.in_channels = 1;
    R2dnsModel<double> model(spec, {.variant = 3}, 2, 0.5, RunMode::attention, 302, 8);
    Rng rng(115);
    auto x = rand_tensor(Shape(2, 1, 8, 8), rng, -1, 1, false);
    std::vector<int> labels{1, 3};
    return grad_check(
        [&](Tape<double>* t) {
          return softmax_cross_entropy<double>(t, model.forward(t, x).logits, labels);
        },
        model.params.items(),
        {.tolerance = 1e-5, .max_probes_per_block = 16, .seed = 303});
  });

  return defs;
}

}  // namespace

GradSuiteReport run_gradient_suite(const std::vector<std::string>& filter) {
  GradSuiteReport report;
  report.pass = true;
  for (auto& def : suite_blocks()) {
    if (!filter.empty()) {
      bool match = false;
      for (const auto& f : filter) match = match || def.name.find(f) != std::string::npos;
      if (!match) continue;
    }
    auto result = def.run();
    GradSuiteBlock block;
    block.name = def.name;
    block.tolerance = def.tolerance;
    block.rel_err = result.max_rel_err;
    block.failure = result.failure;
    for (const auto& b : result.blocks) block.probes += b.probes;
    block.pass = result.failure.empty() && result.max_rel_err < def.tolerance;
    report.pass = report.pass && block.pass;
    report.worst_rel_err = std::max(report.worst_rel_err, block.rel_err);
    report.blocks.push_back(std::move(block));
  }
  require(!report.blocks.empty(), "run_gradient_suite: filter matched no blocks");
  return report;
}

}  // namespace tdaf
