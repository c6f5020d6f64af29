// Acceptance criteria that run in seconds to a couple of minutes:
//   1  gradient suite        5  multi-flow normalization
//   2  baseline equivalence  6  weight-sharing oracle
//   3  junction bounds       10 determinism & persistence
//   4  attention-module contracts

#include <chrono>
#include <filesystem>
#include <fstream>

#include <tdaf/core/sgd.hpp>
#include <tdaf/train/gradcheck_suite.hpp>
#include <tdaf/train/trainer.hpp>

#include "accept.hpp"

using namespace tdaf;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  accept::check(in.good(), "cannot open ", path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::filesystem::path work_dir() {
  auto dir = std::filesystem::temp_directory_path() / "tdaf_acceptance_fast";
  std::filesystem::create_directories(dir);
  return dir;
}

TensorPtr<float> random_images(Shape shape, Rng& rng) {
  auto t = make_tensor<float>(shape);
  for (auto& v : t->values) v = float(rng.uniform(-1, 1));
  return t;
}

void criterion_gradients(std::string& note) {
  const auto t0 = std::chrono::steady_clock::now();
  auto report = run_gradient_suite();
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& b : report.blocks)
    accept::check(b.pass, "block ", b.name, " rel_err ", b.rel_err, " vs tol ", b.tolerance,
                  b.failure.empty() ? "" : " (" + b.failure + ")");
  accept::check(secs < 120.0, "gradient suite took ", secs, "s, budget is 120s");
  std::ostringstream os;
  os << report.blocks.size() << " blocks, worst rel err " << report.worst_rel_err << ", "
     << int(secs) << "s";
  note = os.str();
}

void criterion_baseline_equivalence(std::string& note) {
  RunConfig cfg;  // default tiny_resnet L=4, channels 32..256
  cfg.backbone.num_classes = 4;
  cfg.seed = 7;
  cfg.flows = 1;
  RunConfig base = cfg;
  base.mode = RunMode::baseline;

  auto tdaf_model = build_model(cfg);
  auto bare_model = build_model(base);
  SgdOptimizer<float> opt_a(tdaf_model->params), opt_b(bare_model->params);

  Dataset data = make_synthetic_split(1234, "train", 640, 4);
  BatchOptions batch_opt;
  std::vector<int> labels;
  for (int step = 0; step < 20; ++step) {
    std::vector<int> idx(32);
    for (int i = 0; i < 32; ++i) idx[i] = (step * 32 + i) % data.n;
    auto x = assemble_batch(data, idx, batch_opt, nullptr, labels);
    Tape<float> ta, tb;
    auto la = softmax_cross_entropy<float>(&ta, tdaf_model->forward(&ta, x).logits, labels);
    auto lb = softmax_cross_entropy<float>(&tb, bare_model->forward(&tb, x).logits, labels);
    accept::check(la->values[0] == lb->values[0], "loss diverged at step ", step, ": ",
                  la->values[0], " vs ", lb->values[0]);
    ta.backward(la);
    tb.backward(lb);
    opt_a.step(tdaf_model->params, 0.05f, 0.9f, 5e-4f);
    opt_b.step(bare_model->params, 0.05f, 0.9f, 5e-4f);
  }
  for (const auto& p : bare_model->params.items()) {
    auto q = tdaf_model->params.find(p.name);
    accept::check(q != nullptr, "missing shared parameter ", p.name);
    accept::check((q->values == p.tensor->values).all(),
                  "parameter bytes diverged after 20 steps: ", p.name);
  }
  note = "20 steps, losses and every shared parameter bit-identical";
}

void criterion_junction_bounds(std::string& note) {
  BackboneSpec spec;  // tiny_resnet L=4
  spec.num_classes = 4;
  R2dnsModel<float> model(spec, {.variant = 3}, 3, 0.5f, RunMode::attention, 23);
  Rng rng(29);
  long long checked = 0;
  for (int batch = 0; batch < 20; ++batch) {
    auto x = random_images(Shape(50, 3, 32, 32), rng);
    auto result = model.forward(nullptr, x, /*collect_junctions=*/true);
    accept::check(result.junctions.size() == 5, "expected 5 junctions, got ",
                  result.junctions.size());
    for (const auto& j : result.junctions) {
      accept::check(j.map->values.minCoeff() > 0.0f && j.map->values.maxCoeff() < 1.0f,
                    "attention map escaped (0,1) at flow ", j.flow, " stage ", j.stage);
      const auto& a = j.stage_out->values;
      const auto& out = j.joined->values;
      for (std::int64_t i = 0; i < a.size(); ++i) {
        if (a[i] == 0.0f) {
          accept::check(out[i] == 0.0f, "zero stage output not preserved at flow ", j.flow);
        } else {
          const float lo = 0.5f * std::abs(a[i]), hi = 1.5f * std::abs(a[i]);
          accept::check(std::abs(out[i]) > lo && std::abs(out[i]) < hi &&
                            std::signbit(out[i]) == std::signbit(a[i]),
                        "band violation at flow ", j.flow, " stage ", j.stage, " elem ", i,
                        ": a=", a[i], " out=", out[i]);
        }
        ++checked;
      }
    }
  }
  std::ostringstream os;
  os << "1000 inputs, " << checked << " elements, zero violations";
  note = os.str();
}

void criterion_anar_contracts(std::string& note) {
  Rng rng(31);
  for (int variant : {3, 5, 7})
    for (int c : {32, 64, 128, 256}) {
      ParameterStore<float> store;
      AnarConfig cfg{.variant = variant, .in_channels = c};
      AnarModule<float> g(cfg, 2, store, "g", 37);
      accept::check(anar_param_count(cfg) == g.param_count(), "param formula mismatch: variant ",
                    variant, " c ", c, ": ", anar_param_count(cfg), " vs ", g.param_count());
      auto x = make_tensor<float>(Shape(2, c, 8, 8));
      for (auto& v : x->values) v = float(rng.uniform(-1, 1));
      auto m = g.forward(nullptr, x, 0);
      accept::check(m->shape == Shape(2, 1, 16, 16), "variant ", variant, " c ", c,
                    ": output dims ", m->shape.str());
      accept::check(m->values.minCoeff() > 0.0f && m->values.maxCoeff() < 1.0f, "variant ",
                    variant, " c ", c, ": values escape (0,1)");
    }
  // Attention-map inventory for the (L=4, N=3) plan.
  BackboneSpec spec;
  spec.num_classes = 4;
  R2dnsModel<float> model(spec, {.variant = 3}, 3, 0.5f, RunMode::attention, 41);
  auto x = random_images(Shape(1, 3, 32, 32), rng);
  auto result = model.forward(nullptr, x);
  accept::check(result.maps.size() == 5, "expected 5 maps for (L=4,N=3), got ",
                result.maps.size());
  note = "12 variant/width combinations plus the 5-map inventory";
}

void criterion_mfbn(std::string& note) {
  // Normalized activations.
  {
    Rng rng(43);
    ParameterStore<double> store;
    MfbnLayer<double> bn(4, 1, store, "bn");
    auto x = make_tensor<double>(Shape(16, 4, 6, 6));
    for (auto& v : x->values) v = 1.7 + 2.3 * rng.normal();
    auto y = mfbn_forward<double>(nullptr, x, 0, bn);
    const std::int64_t hw = 36;
    for (int c = 0; c < 4; ++c) {
      double sum = 0, sq = 0;
      for (int n = 0; n < 16; ++n) sum += y->values.segment((n * 4 + c) * hw, hw).sum();
      const double mean = sum / (16 * hw);
      for (int n = 0; n < 16; ++n)
        sq += (y->values.segment((n * 4 + c) * hw, hw) - mean).square().sum();
      const double var = sq / (16 * hw);
      accept::check(std::abs(mean) < 1e-5, "channel ", c, " mean ", mean);
      accept::check(std::abs(var - 1.0) < 1e-3, "channel ", c, " var ", var);
    }
  }
  // Two-flow separation.
  {
    Rng rng(47);
    ParameterStore<float> store;
    MfbnLayer<float> bn(4, 2, store, "bn");
    for (int step = 0; step < 100; ++step) {
      auto x0 = make_tensor<float>(Shape(16, 4, 4, 4));
      auto x1 = make_tensor<float>(Shape(16, 4, 4, 4));
      for (auto& v : x0->values) v = float(rng.normal());
      for (auto& v : x1->values) v = float(5.0 + rng.normal());
      mfbn_forward<float>(nullptr, x0, 0, bn);
      mfbn_forward<float>(nullptr, x1, 1, bn);
    }
    for (int c = 0; c < 4; ++c) {
      accept::check(std::abs(bn.running_mean()(0, c) - 0.0f) < 0.2f, "flow 0 mean ",
                    bn.running_mean()(0, c));
      accept::check(std::abs(bn.running_mean()(1, c) - 5.0f) < 0.2f, "flow 1 mean ",
                    bn.running_mean()(1, c));
    }
    accept::check(store.items().size() == 2 && store.items()[0].name == "bn.gamma" &&
                      store.items()[1].name == "bn.alpha",
                  "affine parameters are not a single shared gamma/alpha pair");
  }
  // Shared affine in a full multi-flow model: one gamma per norm layer.
  {
    BackboneSpec spec;
    spec.num_classes = 4;
    R2dnsModel<float> model(spec, {.variant = 3}, 3, 0.5f, RunMode::attention, 53);
    int gamma_count = 0;
    for (const auto& p : model.params.items())
      if (p.name.find("bn0.gamma") != std::string::npos &&
          p.name.rfind("stage", 0) == 0)
        ++gamma_count;
    accept::check(gamma_count == 4, "expected one bn0.gamma per stage, found ", gamma_count);
  }
  note = "stats normalized, flows separate to 0/5 within 0.2, affine shared by name";
}

void criterion_sharing_oracle(std::string& note) {
  BackboneSpec spec;
  spec.name = "tiny_resnet";
  spec.num_stages = 2;
  spec.stage_channels = {32, 32};
  spec.num_classes = 4;
  spec.in_channels = 1;
  const std::uint64_t seed = 59;
  R2dnsModel<double> shared(spec, {.variant = 3}, 2, 0.5, RunMode::attention, seed, 8);
  R2dnsModel<double> site_a(spec, {.variant = 3}, 2, 0.5, RunMode::attention, seed, 8);
  R2dnsModel<double> site_b(spec, {.variant = 3}, 2, 0.5, RunMode::attention, seed, 8);

  Rng rng(61);
  auto x = make_tensor<double>(Shape(2, 1, 8, 8));
  for (auto& v : x->values) v = rng.uniform(-1, 1);
  std::vector<int> labels{1, 3};

  Tape<double> ts;
  auto ls = softmax_cross_entropy<double>(&ts, shared.forward(&ts, x).logits, labels);
  ts.backward(ls);

  Tape<double> tc;
  auto pyramid = build_input_pyramid<double>(&tc, x, 2);
  auto o11 = site_a.stages[0]->forward(&tc, pyramid[0], 0);
  auto a = site_b.stages[0]->forward(&tc, pyramid[1], 1);
  auto map = site_a.attentions[0].forward(&tc, o11, 0);
  auto joined = eltwise_mul_add<double>(&tc, a, map, 0.5);
  auto feat = site_a.stages[1]->forward(&tc, joined, 1);
  auto lc = softmax_cross_entropy<double>(
      &tc, site_a.head_forward(&tc, global_avg_pool(&tc, feat)), labels);
  accept::check(lc->values[0] == ls->values[0], "clone loss differs: ", lc->values[0], " vs ",
                ls->values[0]);
  tc.backward(lc);

  double worst = 0;
  for (const auto& p : shared.params.items()) {
    if (!p.tensor->has_grad()) continue;
    ArrayX<double> expected;
    if (p.name.rfind("stage1.", 0) == 0) {
      auto ga = site_a.params.find(p.name);
      auto gb = site_b.params.find(p.name);
      accept::check(ga->has_grad() && gb->has_grad(), "clone sites missing grads for ", p.name);
      expected = ga->grad + gb->grad;
    } else {
      auto ga = site_a.params.find(p.name);
      if (!ga->has_grad()) continue;
      expected = ga->grad;
    }
    const double denom =
        std::max({expected.matrix().norm(), p.tensor->grad.matrix().norm(), 1e-300});
    const double rel = (p.tensor->grad - expected).matrix().norm() / denom;
    worst = std::max(worst, rel);
    accept::check(rel < 1e-10, "shared grad of ", p.name, " deviates from clone sum by ", rel);
  }
  std::ostringstream os;
  os << "worst relative deviation " << worst;
  note = os.str();
}

void criterion_determinism_persistence(std::string& note) {
  auto dir = work_dir();
  RunConfig cfg;
  cfg.backbone.num_stages = 3;
  cfg.backbone.stage_channels = {32, 64, 128};
  cfg.backbone.num_classes = 4;
  cfg.flows = 3;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.data.train_samples = 128;
  cfg.data.test_samples = 96;
  cfg.seed = 67;

  auto r1 = train_run(cfg, (dir / "run_a").string());
  auto r2 = train_run(cfg, (dir / "run_b").string());
  accept::check(read_file(r1.metrics_path) == read_file(r2.metrics_path),
                "same-seed metrics CSVs differ");
  accept::check(read_file(r1.best_checkpoint) == read_file(r2.best_checkpoint),
                "same-seed best checkpoints differ");

  // Checkpoint round trip: load then re-save must be byte-identical.
  auto model = load_model(cfg, r1.final_checkpoint);
  const std::string resaved = (dir / "resaved.ckpt").string();
  save_checkpoint(resaved, model_state_entries(*model));
  accept::check(read_file(r1.final_checkpoint) == read_file(resaved),
                "checkpoint save/load/save is not byte-identical");

  // evaluate() reproduces the logged best accuracy exactly.
  auto table = parse_metrics_csv(r1.metrics_path);
  auto eval = evaluate_checkpoint(cfg, r1.best_checkpoint);
  accept::check(eval.accuracy == table.best_test_accuracy(), "evaluate gives ", eval.accuracy,
                ", log says ", table.best_test_accuracy());
  accept::check(eval.accuracy == r1.best_test_accuracy, "evaluate gives ", eval.accuracy,
                ", train result says ", r1.best_test_accuracy);

  // Cross-mode rejection.
  RunConfig base = cfg;
  base.mode = RunMode::baseline;
  base.flows = 1;
  auto bare = build_model(base);
  bool rejected = false;
  try {
    load_checkpoint(r1.best_checkpoint, model_state_entries(*bare));
  } catch (const std::exception&) {
    rejected = true;
  }
  accept::check(rejected, "attention checkpoint loaded into a baseline model");
  note = "CSV and checkpoints bit-stable, eval matches log, cross-mode load rejected";
}

}  // namespace

int main() {
  return accept::run_criteria({
      {1, "gradient suite (< 1e-6 ops, < 1e-5 composed, < 2 min)", criterion_gradients},
      {2, "baseline equivalence of the N=1 model", criterion_baseline_equivalence},
      {3, "junction outputs inside the strict (0.5, 1.5)|a| band", criterion_junction_bounds},
      {4, "attention-module contracts and map inventory", criterion_anar_contracts},
      {5, "multi-flow normalization statistics and shared affine", criterion_mfbn},
      {6, "weight-sharing gradients equal unshared-clone sums", criterion_sharing_oracle},
      {10, "determinism and persistence", criterion_determinism_persistence},
  });
}
