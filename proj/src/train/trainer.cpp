#include "tdaf/train/trainer.hpp"

#include <chrono>
#include <filesystem>

#include "tdaf/core/sgd.hpp"
#include "tdaf/io/pgm.hpp"

namespace tdaf {

namespace {

BatchOptions batch_options(const RunConfig& cfg, bool augment) {
  return BatchOptions{augment, cfg.data.mean, cfg.data.stddev};
}

int argmax_row(const float* row, int k) {
  int best = 0;
  for (int j = 1; j < k; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

float lr_at_epoch(const OptimizerConfig& opt, int epoch, int total_epochs) {
  float lr = opt.lr;
  for (float frac : opt.decay_milestones)
    if (epoch >= int(frac * total_epochs)) lr *= opt.decay_factor;
  return lr;
}

void check_dataset(const RunConfig& cfg, const Dataset& ds) {
  require(ds.height == cfg.input_size && ds.width == cfg.input_size, "dataset images are ",
          ds.height, "x", ds.width, ", config expects ", cfg.input_size);
  require(ds.num_classes == cfg.backbone.num_classes, "dataset has ", ds.num_classes,
          " classes, head is configured for ", cfg.backbone.num_classes);
}

}  // namespace

std::unique_ptr<R2dnsModel<float>> build_model(const RunConfig& cfg) {
  return std::make_unique<R2dnsModel<float>>(cfg.backbone, cfg.anar, cfg.flows, cfg.eta,
                                             cfg.mode, cfg.seed, cfg.input_size);
}

std::unique_ptr<R2dnsModel<float>> load_model(const RunConfig& cfg,
                                              const std::string& checkpoint_path) {
  auto model = build_model(cfg);
  load_checkpoint(checkpoint_path, model_state_entries(*model));
  return model;
}

EvalResult evaluate_model(R2dnsModel<float>& model, const Dataset& ds, const RunConfig& cfg) {
  model.set_train(false);
  EvalResult result;
  result.samples = ds.n;
  if (ds.n == 0) return result;
  const auto opt = batch_options(cfg, /*augment=*/false);
  double loss_sum = 0;
  long long correct = 0;
  std::vector<int> labels;
  for (int start = 0; start < ds.n; start += cfg.batch_size) {
    const int count = std::min(cfg.batch_size, ds.n - start);
    std::vector<int> idx(count);
    for (int i = 0; i < count; ++i) idx[i] = start + i;
    auto x = assemble_batch(ds, idx, opt, nullptr, labels);
    auto out = model.forward(nullptr, x);
    auto loss = softmax_cross_entropy<float>(nullptr, out.logits, labels);
    loss_sum += double(loss->values[0]) * count;
    const int k = out.logits->shape.c;
    for (int i = 0; i < count; ++i)
      if (argmax_row(out.logits->values.data() + std::int64_t(i) * k, k) == labels[i]) ++correct;
  }
  result.mean_loss = loss_sum / ds.n;
  result.accuracy = double(correct) / ds.n;
  return result;
}

EvalResult evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path) {
  auto model = load_model(cfg, checkpoint_path);
  Dataset test = load_test_split(cfg);
  check_dataset(cfg, test);
  return evaluate_model(*model, test, cfg);
}

TrainResult train_run(const RunConfig& cfg, const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::create_directories(out_dir);

  Dataset train_set = load_train_split(cfg);
  Dataset test_set = load_test_split(cfg);
  check_dataset(cfg, train_set);
  if (test_set.n > 0) check_dataset(cfg, test_set);

  auto model = build_model(cfg);
  SgdOptimizer<float> optimizer(model->params);

  TrainResult result;
  result.out_dir = out_dir;
  result.metrics_path = out_dir + "/metrics.csv";
  result.final_checkpoint = out_dir + "/final.ckpt";
  result.best_checkpoint = out_dir + "/best.ckpt";
  MetricsWriter metrics(result.metrics_path);

  const auto train_opt = batch_options(cfg, cfg.data.augment);
  long long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const float lr = lr_at_epoch(cfg.optimizer, epoch, cfg.epochs);
    std::vector<int> order(train_set.n);
    for (int i = 0; i < train_set.n; ++i) order[i] = i;
    Rng shuffle_rng = Rng::stream(cfg.seed, "shuffle.epoch" + std::to_string(epoch));
    shuffle_rng.shuffle(order);
    Rng augment_rng = Rng::stream(cfg.seed, "augment.epoch" + std::to_string(epoch));

    model->set_train(true);
    double loss_sum = 0;
    long long seen = 0, correct = 0;
    std::vector<int> labels;
    for (int start = 0; start < train_set.n; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, train_set.n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + count);
      auto x = assemble_batch(train_set, idx, train_opt,
                              cfg.data.augment ? &augment_rng : nullptr, labels);
      Tape<float> tape;
      auto out = model->forward(&tape, x);
      auto loss = softmax_cross_entropy<float>(&tape, out.logits, labels);
      const float loss_value = loss->values[0];
      if (!std::isfinite(loss_value)) {
        tape.backward(loss);
        double max_grad = 0;
        bool non_finite_grad = false;
        for (const auto& p : model->params.items())
          if (p.tensor->has_grad())
            for (std::int64_t i = 0; i < p.tensor->grad.size(); ++i) {
              const double g = p.tensor->grad[i];
              if (!std::isfinite(g)) non_finite_grad = true;
              else max_grad = std::max(max_grad, std::abs(g));
            }
        fail("train_run: non-finite loss ", loss_value, " at step ", step, " (epoch ", epoch,
             ", lr ", lr, ", max finite |grad| ", max_grad,
             non_finite_grad ? ", gradients contain non-finite values)" : ")");
      }
      tape.backward(loss);
      optimizer.step(model->params, lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
      tape.clear();

      const int k = out.logits->shape.c;
      for (int i = 0; i < count; ++i)
        if (argmax_row(out.logits->values.data() + std::int64_t(i) * k, k) == labels[i])
          ++correct;
      loss_sum += double(loss_value) * count;
      seen += count;
      ++step;
      metrics.train_step(step, epoch, loss_value, lr);
      result.final_train_loss = loss_value;
    }
    metrics.epoch_eval(step, epoch, "train", loss_sum / double(seen),
                       double(correct) / double(seen));

    if (cfg.eval_train) {
      auto train_eval = evaluate_model(*model, train_set, cfg);
      metrics.epoch_eval(step, epoch, "train_eval", train_eval.mean_loss, train_eval.accuracy);
    }
    if (test_set.n > 0) {
      auto test_eval = evaluate_model(*model, test_set, cfg);
      metrics.epoch_eval(step, epoch, "test", test_eval.mean_loss, test_eval.accuracy);
      if (cfg.mode == RunMode::attention && cfg.flows >= 2 && !test_set.patch_pos.empty()) {
        const double score = attention_localization_score_model(*model, test_set, cfg);
        metrics.epoch_eval(step, epoch, "localization", 0.0, score);
      }
      if (test_eval.accuracy > result.best_test_accuracy || result.best_epoch < 0) {
        result.best_test_accuracy = test_eval.accuracy;
        result.best_epoch = epoch;
        save_checkpoint(result.best_checkpoint, model_state_entries(*model));
        metrics.best(step, epoch, test_eval.accuracy);
      }
    }
  }
  result.steps = step;
  save_checkpoint(result.final_checkpoint, model_state_entries(*model));
  if (test_set.n == 0) {
    save_checkpoint(result.best_checkpoint, model_state_entries(*model));
    result.best_epoch = cfg.epochs - 1;
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream timing(out_dir + "/timing.txt");
  timing << "wall_seconds " << result.wall_seconds << "\n";
  return result;
}

int export_attention(const RunConfig& cfg, const std::string& checkpoint_path, int sample_index,
                     const std::string& out_dir) {
  require(cfg.mode == RunMode::attention, "export_attention: mode '", run_mode_name(cfg.mode),
          "' produces no attention maps");
  auto model = load_model(cfg, checkpoint_path);
  Dataset test = load_test_split(cfg);
  check_dataset(cfg, test);
  require(sample_index >= 0 && sample_index < test.n, "export_attention: sample index ",
          sample_index, " out of range [0,", test.n, ")");

  model->set_train(false);
  std::vector<int> labels;
  auto x = assemble_batch(test, {sample_index}, batch_options(cfg, false), nullptr, labels);
  auto out = model->forward(nullptr, x);

  std::filesystem::create_directories(out_dir);
  std::ofstream index(out_dir + "/index.txt");
  require(index.good(), "export_attention: cannot open ", out_dir, "/index.txt");
  for (const auto& m : out.maps) {
    const int h = m.map->shape.h, w = m.map->shape.w;
    std::vector<std::uint8_t> img(std::size_t(h) * w);
    for (std::int64_t i = 0; i < std::int64_t(h) * w; ++i)
      img[i] = std::uint8_t(std::min(255.0f, std::floor(m.map->values[i] * 255.0f + 0.5f)));
    const std::string name =
        "attn_f" + std::to_string(m.flow) + "_s" + std::to_string(m.stage) + ".pgm";
    write_pgm(out_dir + "/" + name, w, h, img);
    index << name << " " << w << " " << h << "\n";
  }
  return int(out.maps.size());
}

double attention_localization_score_model(R2dnsModel<float>& model, const Dataset& ds,
                                          const RunConfig& cfg) {
  require(model.mode == RunMode::attention, "attention_localization_score: attention mode only");
  require(model.plan.num_flows >= 2, "attention_localization_score: needs at least two flows");
  require(!ds.patch_pos.empty(), "attention_localization_score: dataset has no patch metadata");
  model.set_train(false);
  const auto opt = batch_options(cfg, false);
  double score_sum = 0;
  long long counted = 0;
  std::vector<int> labels;
  for (int start = 0; start < ds.n; start += cfg.batch_size) {
    const int count = std::min(cfg.batch_size, ds.n - start);
    std::vector<int> idx(count);
    for (int i = 0; i < count; ++i) idx[i] = start + i;
    auto x = assemble_batch(ds, idx, opt, nullptr, labels);
    auto out = model.forward(nullptr, x);
    const TensorPtr<float>* target = nullptr;
    for (const auto& m : out.maps)
      if (m.flow == model.plan.num_flows && m.stage == 1) target = &m.map;
    require(target != nullptr, "attention_localization_score: last-flow stage-1 map not found");
    const auto& map = **target;
    const int mh = map.shape.h, mw = map.shape.w;
    const int scale = ds.height / mh;  // patch coords -> map coords
    require(scale >= 1 && 8 % scale == 0, "attention_localization_score: map scale ", scale,
            " incompatible with the 8x8 patch");
    const int patch = 8 / scale;
    for (int i = 0; i < count; ++i) {
      const auto pos = ds.patch_pos[start + i];
      const int y0 = pos[0] / scale, x0 = pos[1] / scale;
      double inside = 0, total = 0;
      const float* mv = map.values.data() + std::int64_t(i) * mh * mw;
      for (int y = 0; y < mh; ++y)
        for (int xx = 0; xx < mw; ++xx) total += mv[y * mw + xx];
      for (int y = y0; y < y0 + patch; ++y)
        for (int xx = x0; xx < x0 + patch; ++xx) inside += mv[y * mw + xx];
      const double mean_inside = inside / (double(patch) * patch);
      const double mean_total = total / (double(mh) * mw);
      score_sum += mean_inside / mean_total;
      ++counted;
    }
  }
  return score_sum / double(counted);
}

double attention_localization_score(const RunConfig& cfg, const std::string& checkpoint_path) {
  require(cfg.data.dataset == "synthetic",
          "attention_localization_score: requires the synthetic dataset");
  auto model = load_model(cfg, checkpoint_path);
  Dataset test = load_test_split(cfg);
  check_dataset(cfg, test);
  return attention_localization_score_model(*model, test, cfg);
}

ParamAudit audit_params(const RunConfig& cfg) {
  ParamAudit audit;
  auto model = build_model(cfg);
  audit.total = model->params.total_count();
  audit.stage_total = model->stage_param_total();
  audit.attention_total = model->attention_param_total();
  audit.head_total = model->head_param_total();

  RunConfig base = cfg;
  base.mode = RunMode::baseline;
  base.flows = 1;
  auto baseline = build_model(base);
  audit.baseline_total = baseline->params.total_count();
  audit.overhead_pct =
      100.0 * double(audit.total - audit.baseline_total) / double(audit.baseline_total);

  audit.anar_formula_matches = true;
  for (const auto& g : model->attentions) {
    const std::int64_t formula = anar_param_count(g.config());
    audit.anar_formula_per_module.push_back(formula);
    if (formula != g.param_count()) audit.anar_formula_matches = false;
  }
  return audit;
}

}  // namespace tdaf
