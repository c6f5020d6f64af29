#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <tdaf/core/sgd.hpp>
#include <tdaf/io/pgm.hpp>
#include <tdaf/train/trainer.hpp>

using namespace tdaf;

namespace {

std::filesystem::path temp_root() {
  auto dir = std::filesystem::temp_directory_path() / "tdaf_harness_test";
  std::filesystem::create_directories(dir);
  return dir;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

RunConfig quick_config() {
  RunConfig cfg;
  cfg.backbone.num_stages = 3;
  cfg.backbone.stage_channels = {32, 64, 128};
  cfg.backbone.num_classes = 4;
  cfg.flows = 2;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.data.train_samples = 96;
  cfg.data.test_samples = 64;
  cfg.seed = 5;
  return cfg;
}

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

CommandResult run_command(const std::string& cmd) {
  CommandResult result;
  FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe)) result.output += buf;
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

const std::string cli = TDAF_CLI_PATH;

}  // namespace

TEST_CASE("same-seed training runs produce identical metrics and checkpoints") {
  auto root = temp_root();
  auto cfg = quick_config();
  auto r1 = train_run(cfg, (root / "det_a").string());
  auto r2 = train_run(cfg, (root / "det_b").string());
  CHECK(read_file(r1.metrics_path) == read_file(r2.metrics_path));
  CHECK(read_file(r1.best_checkpoint) == read_file(r2.best_checkpoint));
  CHECK(read_file(r1.final_checkpoint) == read_file(r2.final_checkpoint));

  auto cfg2 = cfg;
  cfg2.seed = 6;
  auto r3 = train_run(cfg2, (root / "det_c").string());
  CHECK(read_file(r1.metrics_path) != read_file(r3.metrics_path));
}

TEST_CASE("lr = 0 leaves every parameter unchanged after an epoch") {
  auto root = temp_root();
  auto cfg = quick_config();
  cfg.optimizer.lr = 0.0f;
  cfg.epochs = 1;
  auto result = train_run(cfg, (root / "lr0").string());

  auto fresh = build_model(cfg);
  auto trained = load_model(cfg, result.final_checkpoint);
  for (const auto& p : fresh->params.items()) {
    auto q = trained->params.find(p.name);
    REQUIRE(q != nullptr);
    CHECK((p.tensor->values == q->values).all());
  }
}

TEST_CASE("evaluate on the best checkpoint reproduces the logged best accuracy exactly") {
  auto root = temp_root();
  auto cfg = quick_config();
  auto result = train_run(cfg, (root / "best").string());
  auto table = parse_metrics_csv(result.metrics_path);
  const double logged = table.best_test_accuracy();
  auto eval1 = evaluate_checkpoint(cfg, result.best_checkpoint);
  auto eval2 = evaluate_checkpoint(cfg, result.best_checkpoint);
  CHECK(eval1.accuracy == logged);
  CHECK(eval1.accuracy == result.best_test_accuracy);
  CHECK(eval1.accuracy == eval2.accuracy);  // idempotent
  CHECK(eval1.mean_loss == eval2.mean_loss);
}

TEST_CASE("a freshly initialized model scores chance-level accuracy") {
  auto root = temp_root();
  RunConfig cfg = quick_config();
  cfg.data.test_samples = 1000;
  auto model = build_model(cfg);
  const std::string path = (root / "fresh.ckpt").string();
  save_checkpoint(path, model_state_entries(*model));
  auto eval = evaluate_checkpoint(cfg, path);
  CHECK(eval.accuracy > 0.20);
  CHECK(eval.accuracy < 0.30);
}

TEST_CASE("training aborts on a non-finite loss with diagnostics") {
  auto root = temp_root();
  auto cfg = quick_config();
  cfg.optimizer.lr = 1e8f;
  CHECK_THROWS_WITH_AS(train_run(cfg, (root / "blowup").string()),
                       doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("attention export: file inventory, quantization, pyramid geometry") {
  auto root = temp_root();
  RunConfig cfg;  // default tiny_resnet L=4, N=3
  cfg.backbone.num_classes = 4;
  cfg.data.test_samples = 16;
  cfg.seed = 11;
  auto model = build_model(cfg);
  for (int l = 1; l <= 3; ++l) {
    model->params.find("g" + std::to_string(l) + ".trans_out.weight")->values.setZero();
    model->params.find("g" + std::to_string(l) + ".trans_out.bias")->values.setZero();
  }
  const std::string ckpt = (root / "export.ckpt").string();
  save_checkpoint(ckpt, model_state_entries(*model));

  const std::string out = (root / "attn").string();
  const int files = export_attention(cfg, ckpt, 0, out);
  CHECK(files == 5);
  for (const char* name : {"attn_f2_s1.pgm", "attn_f2_s2.pgm", "attn_f3_s1.pgm",
                           "attn_f3_s2.pgm", "attn_f3_s3.pgm"})
    CHECK(std::filesystem::exists(out + "/" + name));

  // Zeroed final convs give maps of exactly 0.5 -> pixel 128 (round half up).
  auto f3s1 = read_pgm(out + "/attn_f3_s1.pgm");
  for (auto px : f3s1.pixels) CHECK(int(px) == 128);

  auto f2s1 = read_pgm(out + "/attn_f2_s1.pgm");
  CHECK(f2s1.width * 2 == f3s1.width);
  CHECK(f2s1.height * 2 == f3s1.height);

  const std::string index = read_file(out + "/index.txt");
  CHECK(index.find("attn_f3_s3.pgm") != std::string::npos);
}

TEST_CASE("export is rejected when the mode produces no maps") {
  auto root = temp_root();
  RunConfig cfg = quick_config();
  cfg.mode = RunMode::baseline;
  cfg.flows = 1;
  auto model = build_model(cfg);
  const std::string ckpt = (root / "bare.ckpt").string();
  save_checkpoint(ckpt, model_state_entries(*model));
  CHECK_THROWS_WITH_AS(export_attention(cfg, ckpt, 0, (root / "no").string()),
                       doctest::Contains("no attention maps"), std::runtime_error);
}

TEST_CASE("localization score: uniform maps give exactly 1, fresh models stay near 1") {
  auto root = temp_root();
  RunConfig cfg = quick_config();
  cfg.data.test_samples = 200;
  auto model = build_model(cfg);
  Dataset test = load_test_split(cfg);

  SUBCASE("uniform 0.5 maps") {
    for (int l = 1; l <= 2; ++l) {
      model->params.find("g" + std::to_string(l) + ".trans_out.weight")->values.setZero();
      model->params.find("g" + std::to_string(l) + ".trans_out.bias")->values.setZero();
    }
    CHECK(attention_localization_score_model(*model, test, cfg) == 1.0);
  }
  SUBCASE("freshly initialized model") {
    const double score = attention_localization_score_model(*model, test, cfg);
    CHECK(score > 0.9);
    CHECK(score < 1.1);
  }
}

TEST_CASE("a linear probe on raw pixels stays near chance on the synthetic set") {
  // Position randomization and ink-normalized shapes leave a linear readout
  // with no reliable first-order cue.
  auto train = make_synthetic_split(1234, "train", 2000, 4);
  auto test = make_synthetic_split(1234, "test", 1000, 4);
  BatchOptions opt;  // synthetic defaults

  ParameterStore<float> store;
  auto w = store.add("probe.weight", Shape(4, 3072, 1, 1));
  auto b = store.add("probe.bias", Shape(1, 4, 1, 1));
  SgdOptimizer<float> optimizer(store);

  auto flatten = [](const TensorPtr<float>& batch) {
    auto flat = make_tensor<float>(Shape(batch->shape.n, 3072, 1, 1));
    flat->values = batch->values;
    return flat;
  };

  Rng shuffle_rng = Rng::stream(3, "probe.shuffle");
  std::vector<int> order(train.n);
  for (int i = 0; i < train.n; ++i) order[i] = i;
  std::vector<int> labels;
  for (int epoch = 0; epoch < 20; ++epoch) {
    shuffle_rng.shuffle(order);
    for (int start = 0; start < train.n; start += 100) {
      const int count = std::min(100, train.n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + count);
      auto x = flatten(assemble_batch(train, idx, opt, nullptr, labels));
      Tape<float> tape;
      auto loss = softmax_cross_entropy<float>(&tape, linear<float>(&tape, x, w, b), labels);
      tape.backward(loss);
      optimizer.step(store, 0.05f, 0.9f, 1e-4f);
    }
  }

  long long correct = 0;
  for (int start = 0; start < test.n; start += 100) {
    const int count = std::min(100, test.n - start);
    std::vector<int> idx(count);
    for (int i = 0; i < count; ++i) idx[i] = start + i;
    auto x = flatten(assemble_batch(test, idx, opt, nullptr, labels));
    auto logits = linear<float>(nullptr, x, w, b);
    for (int i = 0; i < count; ++i) {
      const float* row = logits->values.data() + std::int64_t(i) * 4;
      int best = 0;
      for (int j = 1; j < 4; ++j)
        if (row[j] > row[best]) best = j;
      if (best == labels[i]) ++correct;
    }
  }
  const double accuracy = double(correct) / test.n;
  MESSAGE("linear probe accuracy: ", accuracy);
  CHECK(accuracy <= 0.35);
}

TEST_CASE("cli: usage errors exit nonzero") {
  auto bad = run_command(cli + " frobnicate");
  CHECK(bad.exit_code != 0);
  auto noargs = run_command(cli);
  CHECK(noargs.exit_code != 0);
  auto badflag = run_command(cli + " gradcheck --frotz");
  CHECK(badflag.exit_code != 0);
}

TEST_CASE("cli: config errors cite the line number") {
  auto root = temp_root();
  const std::string path = (root / "bad.conf").string();
  std::ofstream(path) << "flows = 2\n\nbogus.key = 1\n";
  auto result = run_command(cli + " params --config " + path);
  CHECK(result.exit_code != 0);
  CHECK(result.output.find(":3") != std::string::npos);
  CHECK(result.output.find("bogus.key") != std::string::npos);
}

TEST_CASE("cli: gen-data is deterministic and gradcheck filter passes") {
  auto root = temp_root();
  const std::string conf = (root / "gen.conf").string();
  std::ofstream(conf) << "data.train_samples = 40\ndata.test_samples = 20\n";
  auto g1 = run_command(cli + " gen-data --config " + conf + " --out " + (root / "d1").string());
  auto g2 = run_command(cli + " gen-data --config " + conf + " --out " + (root / "d2").string());
  CHECK(g1.exit_code == 0);
  CHECK(g1.output.find("TDAF gen-data ok train=40 test=20") != std::string::npos);
  CHECK(read_file((root / "d1/train.bin").string()) ==
        read_file((root / "d2/train.bin").string()));
  CHECK(read_file((root / "d1/meta_test.csv").string()) ==
        read_file((root / "d2/meta_test.csv").string()));

  auto gc = run_command(cli + " gradcheck --ops sigmoid");
  CHECK(gc.exit_code == 0);
  CHECK(gc.output.find("TDAF gradcheck ok") != std::string::npos);
}

TEST_CASE("cli: train then eval round trip with params audit") {
  auto root = temp_root();
  const std::string conf = (root / "run.conf").string();
  std::ofstream(conf) << "backbone.num_stages = 3\n"
                      << "backbone.stage_channels = 32,64,128\n"
                      << "flows = 2\n"
                      << "train.epochs = 1\n"
                      << "train.batch_size = 32\n"
                      << "data.train_samples = 64\n"
                      << "data.test_samples = 32\n"
                      << "seed = 9\n";
  const std::string out = (root / "cli_run").string();
  auto tr = run_command(cli + " train --config " + conf + " --out " + out);
  CHECK(tr.exit_code == 0);
  CHECK(tr.output.find("TDAF train ok") != std::string::npos);

  auto ev = run_command(cli + " eval --config " + conf + " --ckpt " + out + "/best.ckpt");
  CHECK(ev.exit_code == 0);
  CHECK(ev.output.find("TDAF eval ok samples=32") != std::string::npos);
  CHECK(ev.output.find("localization=") != std::string::npos);

  auto pa = run_command(cli + " params --config " + conf);
  CHECK(pa.exit_code == 0);
  CHECK(pa.output.find("anar_formula_match=true") != std::string::npos);
  // Attention adds parameters on top of the bare backbone.
  const auto pos = pa.output.find("overhead_pct=");
  REQUIRE(pos != std::string::npos);
  CHECK(std::stod(pa.output.substr(pos + 13)) > 0.0);
  // The audit's totals line up with the analytic per-module formula.
  auto cfg_parsed = load_config(conf);
  auto audit = audit_params(cfg_parsed);
  std::int64_t formula_sum = 0;
  for (auto v : audit.anar_formula_per_module) formula_sum += v;
  CHECK(audit.attention_total == formula_sum);
  CHECK(audit.total == audit.stage_total + audit.attention_total + audit.head_total);

  auto ex = run_command(cli + " export-attn --config " + conf + " --ckpt " + out +
                        "/best.ckpt --index 1 --out " + (root / "cli_attn").string());
  CHECK(ex.exit_code == 0);
  CHECK(ex.output.find("TDAF export-attn ok files=2") != std::string::npos);
}
