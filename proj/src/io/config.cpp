#include "tdaf/io/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace tdaf {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "backbone.name",       "backbone.num_stages",     "backbone.num_classes",
      "backbone.stage_channels",
      "anar.variant",        "anar.interpolation",
      "flows",               "eta",                     "mode",
      "seed",                "input_size",
      "optimizer.lr",        "optimizer.momentum",      "optimizer.weight_decay",
      "optimizer.decay_factor", "optimizer.decay_milestones",
      "train.epochs",        "train.batch_size",        "train.eval_train",
      "data.dataset",        "data.dir",                "data.train_samples",
      "data.test_samples",   "data.num_classes",        "data.seed",
      "data.augment",        "data.mean",               "data.std",
  };
  return keys;
}

struct Reader {
  const RawConfig& raw;
  std::set<std::string> seen;

  bool has(const std::string& key) { return raw.entries.count(key) > 0; }

  const RawConfig::Entry* take(const std::string& key) {
    auto it = raw.entries.find(key);
    if (it == raw.entries.end()) return nullptr;
    seen.insert(key);
    return &it->second;
  }

  [[noreturn]] void fail_at(const RawConfig::Entry& e, const std::string& key,
                            const std::string& what) {
    fail(raw.source, ":", e.line, ": ", key, ": ", what, " (value '", e.value, "')");
  }

  std::string str(const std::string& key, const std::string& fallback) {
    auto* e = take(key);
    return e ? e->value : fallback;
  }

  long long integer(const std::string& key, long long fallback) {
    auto* e = take(key);
    if (!e) return fallback;
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(e->value, &pos);
      if (pos != e->value.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (...) {
      fail_at(*e, key, "expected an integer");
    }
  }

  double number(const std::string& key, double fallback) {
    auto* e = take(key);
    if (!e) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(e->value, &pos);
      if (pos != e->value.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (...) {
      fail_at(*e, key, "expected a number");
    }
  }

  bool boolean(const std::string& key, bool fallback) {
    auto* e = take(key);
    if (!e) return fallback;
    if (e->value == "true" || e->value == "1") return true;
    if (e->value == "false" || e->value == "0") return false;
    fail_at(*e, key, "expected true/false");
  }

  template <typename T, typename Parse>
  std::vector<T> list(const std::string& key, Parse parse, std::vector<T> fallback) {
    auto* e = take(key);
    if (!e) return fallback;
    std::vector<T> out;
    std::stringstream ss(e->value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) fail_at(*e, key, "empty list element");
      try {
        out.push_back(parse(item));
      } catch (...) {
        fail_at(*e, key, "bad list element '" + item + "'");
      }
    }
    if (out.empty()) fail_at(*e, key, "empty list");
    return out;
  }
};

}  // namespace

RawConfig parse_raw_config(const std::string& text, const std::string& source) {
  RawConfig raw;
  raw.source = source;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, source, ":", line_no, ": expected 'key = value', got '",
            line, "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    require(!key.empty(), source, ":", line_no, ": empty key");
    auto prior = raw.entries.find(key);
    if (prior != raw.entries.end())
      fail(source, ":", line_no, ": duplicate key '", key, "' (first at line ",
           prior->second.line, ")");
    raw.entries[key] = {value, line_no};
  }
  return raw;
}

RawConfig load_raw_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "config: cannot open ", path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_raw_config(buf.str(), path);
}

std::vector<std::string> config_diff(const RawConfig& a, const RawConfig& b) {
  std::vector<std::string> keys;
  for (const auto& [k, v] : a.entries) {
    auto it = b.entries.find(k);
    if (it == b.entries.end() || it->second.value != v.value) keys.push_back(k);
  }
  for (const auto& [k, v] : b.entries)
    if (a.entries.find(k) == a.entries.end()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  return keys;
}

RunConfig materialize_config(const RawConfig& raw) {
  for (const auto& [key, entry] : raw.entries)
    require(known_keys().count(key) > 0, raw.source, ":", entry.line, ": unknown key '", key,
            "'");

  Reader r{raw, {}};
  RunConfig cfg;

  cfg.data.dataset = r.str("data.dataset", "synthetic");
  require(cfg.data.dataset == "synthetic" || cfg.data.dataset == "cifar10",
          raw.source, ": data.dataset must be synthetic or cifar10, got '", cfg.data.dataset,
          "'");
  const bool cifar = cfg.data.dataset == "cifar10";
  cfg.data.dir = r.str("data.dir", "");
  cfg.data.train_samples = int(r.integer("data.train_samples", 5000));
  cfg.data.test_samples = int(r.integer("data.test_samples", 1000));
  cfg.data.num_classes = int(r.integer("data.num_classes", 4));
  cfg.data.seed = std::uint64_t(r.integer("data.seed", 1234));
  cfg.data.augment = r.boolean("data.augment", cifar);
  {
    auto parse_f = [](const std::string& s) { return std::stof(s); };
    const std::vector<float> def_mean =
        cifar ? std::vector<float>{0.4914f, 0.4822f, 0.4465f} : std::vector<float>{0.5f, 0.5f, 0.5f};
    const std::vector<float> def_std =
        cifar ? std::vector<float>{0.2470f, 0.2435f, 0.2616f} : std::vector<float>{0.29f, 0.29f, 0.29f};
    auto mean = r.list<float>("data.mean", parse_f, def_mean);
    auto stddev = r.list<float>("data.std", parse_f, def_std);
    require(mean.size() == 3 && stddev.size() == 3, raw.source,
            ": data.mean/data.std need exactly 3 values");
    for (int i = 0; i < 3; ++i) {
      cfg.data.mean[i] = mean[i];
      cfg.data.stddev[i] = stddev[i];
      require(cfg.data.stddev[i] > 0, raw.source, ": data.std entries must be positive");
    }
  }
  require(cfg.data.train_samples >= 1, raw.source, ": data.train_samples must be >= 1");
  require(cfg.data.test_samples >= 0, raw.source, ": data.test_samples must be >= 0");
  require(cfg.data.num_classes >= 2 && cfg.data.num_classes <= 4, raw.source,
          ": data.num_classes must lie in [2,4]");
  if (cifar) require(!cfg.data.dir.empty(), raw.source, ": data.dir is required for cifar10");

  cfg.backbone.name = r.str("backbone.name", "tiny_resnet");
  cfg.backbone.num_stages = int(r.integer("backbone.num_stages", 4));
  const int default_classes = cifar ? 10 : cfg.data.num_classes;
  cfg.backbone.num_classes = int(r.integer("backbone.num_classes", default_classes));
  cfg.backbone.stage_channels =
      r.list<int>("backbone.stage_channels", [](const std::string& s) { return std::stoi(s); },
                  {});
  cfg.backbone.in_channels = 3;
  validate_backbone_spec(cfg.backbone);
  require(cfg.backbone.num_classes == (cifar ? 10 : cfg.data.num_classes), raw.source,
          ": backbone.num_classes (", cfg.backbone.num_classes,
          ") must match the dataset's class count");

  cfg.anar.variant = int(r.integer("anar.variant", 3));
  cfg.anar.interpolation_upsample = r.boolean("anar.interpolation", false);
  cfg.anar.in_channels = 32;  // nominal; the model substitutes per-stage widths
  validate_anar_config(cfg.anar);

  cfg.flows = int(r.integer("flows", 3));
  cfg.eta = float(r.number("eta", 0.5));
  require(cfg.eta >= 0.0f && cfg.eta <= 1.0f, raw.source, ": eta must lie in [0,1]");
  const std::string mode = r.str("mode", "attention");
  if (mode == "attention") cfg.mode = RunMode::attention;
  else if (mode == "multiscale_concat") cfg.mode = RunMode::multiscale_concat;
  else if (mode == "baseline") cfg.mode = RunMode::baseline;
  else fail(raw.source, ": mode must be attention|multiscale_concat|baseline, got '", mode, "'");
  if (cfg.mode == RunMode::baseline)
    require(cfg.flows == 1, raw.source, ": baseline mode requires flows = 1");
  validate_flow_plan(FlowPlan{cfg.flows, cfg.backbone.num_stages});

  cfg.optimizer.lr = float(r.number("optimizer.lr", 0.05));
  cfg.optimizer.momentum = float(r.number("optimizer.momentum", 0.9));
  cfg.optimizer.weight_decay = float(r.number("optimizer.weight_decay", 5e-4));
  cfg.optimizer.decay_factor = float(r.number("optimizer.decay_factor", 0.1));
  cfg.optimizer.decay_milestones = r.list<float>(
      "optimizer.decay_milestones", [](const std::string& s) { return std::stof(s); },
      {0.5f, 0.75f});
  require(cfg.optimizer.lr >= 0, raw.source, ": optimizer.lr must be non-negative");
  for (float m : cfg.optimizer.decay_milestones)
    require(m > 0 && m < 1, raw.source, ": decay milestones must lie in (0,1)");

  cfg.epochs = int(r.integer("train.epochs", 30));
  cfg.batch_size = int(r.integer("train.batch_size", 64));
  cfg.eval_train = r.boolean("train.eval_train", false);
  require(cfg.epochs >= 1, raw.source, ": train.epochs must be >= 1");
  require(cfg.batch_size >= 2, raw.source, ": train.batch_size must be >= 2");

  cfg.seed = std::uint64_t(r.integer("seed", 1));
  cfg.input_size = int(r.integer("input_size", 32));
  require(cfg.input_size == 32, raw.source, ": input_size must be 32 (CIFAR-scale images)");
  return cfg;
}

RunConfig load_config(const std::string& path) { return materialize_config(load_raw_config(path)); }

std::string render_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "backbone.name = " << cfg.backbone.name << "\n";
  os << "backbone.num_stages = " << cfg.backbone.num_stages << "\n";
  os << "backbone.num_classes = " << cfg.backbone.num_classes << "\n";
  os << "backbone.stage_channels = ";
  for (std::size_t i = 0; i < cfg.backbone.stage_channels.size(); ++i)
    os << (i ? "," : "") << cfg.backbone.stage_channels[i];
  os << "\n";
  os << "anar.variant = " << cfg.anar.variant << "\n";
  os << "anar.interpolation = " << (cfg.anar.interpolation_upsample ? "true" : "false") << "\n";
  os << "flows = " << cfg.flows << "\n";
  os << "eta = " << cfg.eta << "\n";
  os << "mode = " << run_mode_name(cfg.mode) << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "optimizer.lr = " << cfg.optimizer.lr << "\n";
  os << "optimizer.momentum = " << cfg.optimizer.momentum << "\n";
  os << "optimizer.weight_decay = " << cfg.optimizer.weight_decay << "\n";
  os << "optimizer.decay_factor = " << cfg.optimizer.decay_factor << "\n";
  os << "optimizer.decay_milestones = ";
  for (std::size_t i = 0; i < cfg.optimizer.decay_milestones.size(); ++i)
    os << (i ? "," : "") << cfg.optimizer.decay_milestones[i];
  os << "\n";
  os << "train.epochs = " << cfg.epochs << "\n";
  os << "train.batch_size = " << cfg.batch_size << "\n";
  os << "train.eval_train = " << (cfg.eval_train ? "true" : "false") << "\n";
  os << "data.dataset = " << cfg.data.dataset << "\n";
  if (!cfg.data.dir.empty()) os << "data.dir = " << cfg.data.dir << "\n";
  os << "data.train_samples = " << cfg.data.train_samples << "\n";
  os << "data.test_samples = " << cfg.data.test_samples << "\n";
  os << "data.num_classes = " << cfg.data.num_classes << "\n";
  os << "data.seed = " << cfg.data.seed << "\n";
  os << "data.augment = " << (cfg.data.augment ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace tdaf
