#include "cli_config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace lmrc::cli {

namespace {

const std::set<std::string> kKnownKeys = {
    "method",       "dataset",    "preset",          "epsilon",    "alpha",
    "train_steps",  "eval_steps", "cca_steps",       "gamma",      "k",
    "delta",        "epochs",     "lr",              "momentum",   "weight_decay",
    "lr_step_epochs", "batch_size", "seed",          "validation_size", "out_dir",
};

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

int parse_int_value(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid integer for key '" + key + "': " + text);
  }
}

std::uint64_t parse_u64_value(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid unsigned integer for key '" + key + "': " + text);
  }
}

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, sep)) out.push_back(trim(part));
  if (out.empty()) out.push_back("");
  return out;
}

}  // namespace

float parse_float_value(const std::string& key, const std::string& text) {
  const auto slash = text.find('/');
  try {
    if (slash != std::string::npos) {
      const float num = std::stof(text.substr(0, slash));
      const float den = std::stof(text.substr(slash + 1));
      if (den == 0.0f) throw std::invalid_argument(text);
      return num / den;
    }
    std::size_t used = 0;
    const float v = std::stof(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid number for key '" + key + "': " + text);
  }
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + " is not 'key = value': " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!kKnownKeys.count(key))
      throw ConfigError("unknown config key '" + key + "' on line " + std::to_string(lineno));
    if (out.count(key)) throw ConfigError("duplicate config key '" + key + "'");
    out[key] = value;
  }
  return out;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

namespace {

struct Preset {
  std::string dataset;
  ArchConfig arch;
  Method method = Method::Sat;
  float epsilon, alpha;
  int train_steps, eval_steps, cca_steps;
  float gamma = 0.0f;
  int k = -1;
  float delta = 0.0f;
  int epochs;
  float lr = 0.1f, momentum = 0.9f, weight_decay = 5e-4f;
  std::vector<int> lr_step_epochs;  // empty => 60%/80% of the resolved epoch count
  int batch_size;
  std::uint64_t seed = 1;
  int validation_size;
  bool augment = false;
};

Preset preset_by_name(const std::string& name) {
  Preset p;
  if (name == "mnist-small") {
    p.dataset = "mnist";
    p.arch = ArchConfig::small_cnn(1, 28, 10);
    p.epsilon = 0.3f;
    p.alpha = 0.075f;
    p.train_steps = 10;
    p.eval_steps = 20;
    p.cca_steps = 10;
    p.epochs = 8;
    p.batch_size = 64;
    p.validation_size = 500;
    p.augment = false;
  } else if (name == "cifar-slim") {
    p.dataset = "cifar10";
    p.arch = ArchConfig::slim_resnet(3, 32, 10, 32, 1);
    p.epsilon = 8.0f / 255.0f;
    p.alpha = 2.0f / 255.0f;
    p.train_steps = 10;
    p.eval_steps = 20;
    p.cca_steps = 10;
    p.epochs = 20;
    p.batch_size = 128;
    p.validation_size = 1000;
    p.augment = true;
  } else if (name == "paper-cifar10") {
    p.dataset = "cifar10";
    p.arch = ArchConfig::slim_resnet(3, 32, 10, 128, 2);
    p.epsilon = 8.0f / 255.0f;
    p.alpha = 2.0f / 255.0f;
    p.train_steps = 10;
    p.eval_steps = 20;
    p.cca_steps = 10;
    p.epochs = 120;
    p.batch_size = 128;
    p.validation_size = 1000;
    p.lr_step_epochs = {75, 90};
    p.augment = true;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return p;
}

std::vector<int> default_schedule(int epochs) {
  if (epochs <= 2) return {};
  const int a = std::max(1, static_cast<int>(std::lround(0.6 * epochs)));
  int b = std::max(a + 1, static_cast<int>(std::lround(0.8 * epochs)));
  if (b >= epochs) b = epochs - 1;
  if (a >= b) return {b};
  return {a, b};
}

}  // namespace

std::string ResolvedRun::canonical_text() const {
  std::ostringstream os;
  os << "preset = " << preset << '\n';
  os << "dataset = " << dataset << '\n';
  os << "method = " << method_name(run.method) << '\n';
  os << "epsilon = " << fmt(run.train_attack.epsilon) << '\n';
  os << "alpha = " << fmt(run.train_attack.alpha) << '\n';
  os << "train_steps = " << run.train_attack.steps << '\n';
  os << "eval_steps = " << run.eval_attack.steps << '\n';
  os << "cca_steps = " << run.cca_attack.steps << '\n';
  os << "gamma = " << fmt(run.gamma) << '\n';
  os << "k = " << run.k << '\n';
  os << "delta = " << fmt(run.delta) << '\n';
  os << "epochs = " << run.epochs << '\n';
  os << "lr = " << fmt(run.optimizer.lr) << '\n';
  os << "momentum = " << fmt(run.optimizer.momentum) << '\n';
  os << "weight_decay = " << fmt(run.optimizer.weight_decay) << '\n';
  os << "lr_step_epochs = ";
  for (std::size_t i = 0; i < run.optimizer.lr_step_epochs.size(); ++i)
    os << (i ? "," : "") << run.optimizer.lr_step_epochs[i];
  os << '\n';
  os << "batch_size = " << run.batch_size << '\n';
  os << "seed = " << run.seed << '\n';
  os << "validation_size = " << run.validation_size << '\n';
  os << "out_dir = " << out_dir << '\n';
  os << "arch = " << arch.descriptor() << '\n';
  return os.str();
}

std::vector<ResolvedRun> resolve_config(const std::map<std::string, std::string>& file) {
  auto get = [&file](const char* key) -> const std::string* {
    auto it = file.find(key);
    return it == file.end() ? nullptr : &it->second;
  };

  const std::string preset_name = get("preset") ? *get("preset") : "mnist-small";
  const Preset preset = preset_by_name(preset_name);

  ResolvedRun base;
  base.preset = preset_name;
  base.dataset = get("dataset") ? *get("dataset") : preset.dataset;
  base.out_dir = get("out_dir") ? *get("out_dir") : "runs/out";
  base.arch = preset.arch;

  RunConfig& rc = base.run;
  rc.method = method_from_name(get("method") ? *get("method") : method_name(preset.method));
  rc.train_attack.epsilon = rc.eval_attack.epsilon = rc.cca_attack.epsilon =
      get("epsilon") ? parse_float_value("epsilon", *get("epsilon")) : preset.epsilon;
  rc.train_attack.alpha = rc.eval_attack.alpha = rc.cca_attack.alpha =
      get("alpha") ? parse_float_value("alpha", *get("alpha")) : preset.alpha;
  rc.train_attack.steps =
      get("train_steps") ? parse_int_value("train_steps", *get("train_steps")) : preset.train_steps;
  rc.eval_attack.steps =
      get("eval_steps") ? parse_int_value("eval_steps", *get("eval_steps")) : preset.eval_steps;
  rc.cca_attack.steps =
      get("cca_steps") ? parse_int_value("cca_steps", *get("cca_steps")) : preset.cca_steps;
  rc.train_attack.random_start = true;
  rc.eval_attack.random_start = true;
  rc.cca_attack.random_start = false;
  rc.epochs = get("epochs") ? parse_int_value("epochs", *get("epochs")) : preset.epochs;
  rc.optimizer.lr = get("lr") ? parse_float_value("lr", *get("lr")) : preset.lr;
  rc.optimizer.momentum =
      get("momentum") ? parse_float_value("momentum", *get("momentum")) : preset.momentum;
  rc.optimizer.weight_decay = get("weight_decay")
                                  ? parse_float_value("weight_decay", *get("weight_decay"))
                                  : preset.weight_decay;
  if (get("lr_step_epochs")) {
    rc.optimizer.lr_step_epochs.clear();
    for (const std::string& part : split_list(*get("lr_step_epochs"), ','))
      if (!part.empty())
        rc.optimizer.lr_step_epochs.push_back(parse_int_value("lr_step_epochs", part));
  } else if (!preset.lr_step_epochs.empty() && rc.epochs == preset.epochs) {
    rc.optimizer.lr_step_epochs = preset.lr_step_epochs;
  } else {
    rc.optimizer.lr_step_epochs = default_schedule(rc.epochs);
  }
  rc.batch_size =
      get("batch_size") ? parse_int_value("batch_size", *get("batch_size")) : preset.batch_size;
  rc.seed = get("seed") ? parse_u64_value("seed", *get("seed")) : preset.seed;
  rc.validation_size = get("validation_size")
                           ? parse_int_value("validation_size", *get("validation_size"))
                           : preset.validation_size;
  if (preset.augment) {
    rc.augment.horizontal_flip = true;
    rc.augment.crop_pad = 4;
  }

  // gamma/k/delta may carry sweep lists
  const std::vector<std::string> gammas =
      get("gamma") ? split_list(*get("gamma"), ',') : std::vector<std::string>{fmt(preset.gamma)};
  const std::vector<std::string> ks =
      get("k") ? split_list(*get("k"), ',') : std::vector<std::string>{std::to_string(preset.k)};
  const std::vector<std::string> deltas =
      get("delta") ? split_list(*get("delta"), ',') : std::vector<std::string>{fmt(preset.delta)};
  const bool sweeping = gammas.size() > 1 || ks.size() > 1 || deltas.size() > 1;

  std::vector<ResolvedRun> runs;
  for (const std::string& g : gammas)
    for (const std::string& kv : ks)
      for (const std::string& dv : deltas) {
        ResolvedRun r = base;
        r.run.gamma = parse_float_value("gamma", g);
        r.run.k = parse_int_value("k", kv);
        if (r.run.k < 0) r.run.k = r.run.resolved_k(base.arch.penultimate_dim);
        r.run.delta = parse_float_value("delta", dv);
        if (sweeping) {
          char g_buf[32], d_buf[32];
          std::snprintf(g_buf, sizeof(g_buf), "%.6g", static_cast<double>(r.run.gamma));
          std::snprintf(d_buf, sizeof(d_buf), "%.6g", static_cast<double>(r.run.delta));
          std::ostringstream sub;
          sub << "g" << g_buf << "_k" << r.run.k << "_d" << d_buf;
          r.out_dir = base.out_dir + "/" + sub.str();
        }
        runs.push_back(std::move(r));
      }
  return runs;
}

namespace {

std::pair<std::string, std::string> split_id(const std::string& id) {
  const auto colon = id.find(':');
  if (colon == std::string::npos) return {id, ""};
  return {id.substr(0, colon), id.substr(colon + 1)};
}

}  // namespace

LoadedData load_dataset(const std::string& id) {
  const auto [kind, arg] = split_id(id);
  LoadedData out;
  if (kind == "synth") {
    int train_n = 3000, test_n = 1000;
    if (!arg.empty()) {
      const auto slash = arg.find('/');
      if (slash == std::string::npos) {
        train_n = parse_int_value("dataset", arg);
        test_n = std::max(100, train_n / 3);
      } else {
        train_n = parse_int_value("dataset", arg.substr(0, slash));
        test_n = parse_int_value("dataset", arg.substr(slash + 1));
      }
    }
    out.train = make_synthetic_digits(train_n, 0xDA7A5EEDULL, Split::Train);
    out.test = make_synthetic_digits(test_n, 0x7E575EEDULL, Split::Test);
    out.classes = 10;
  } else if (kind == "mnist") {
    const std::string dir = arg.empty() ? "data/mnist" : arg;
    out.train = load_mnist(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte");
    out.test = load_mnist(dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte");
    out.test.split = Split::Test;
    out.classes = 10;
  } else if (kind == "cifar10") {
    const std::string dir = arg.empty() ? "data/cifar10" : arg;
    std::vector<std::string> train_paths;
    for (int i = 1; i <= 5; ++i)
      train_paths.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
    out.train = load_cifar_binary(train_paths, CifarVariant::Cifar10);
    out.test = load_cifar_binary({dir + "/test_batch.bin"}, CifarVariant::Cifar10);
    out.test.split = Split::Test;
    out.classes = 10;
  } else if (kind == "cifar100") {
    const std::string dir = arg.empty() ? "data/cifar100" : arg;
    out.train = load_cifar_binary({dir + "/train.bin"}, CifarVariant::Cifar100);
    out.test = load_cifar_binary({dir + "/test.bin"}, CifarVariant::Cifar100);
    out.test.split = Split::Test;
    out.classes = 100;
  } else {
    throw ConfigError("unknown value for key 'dataset': " + id);
  }
  return out;
}

void fit_arch_to_data(ArchConfig& arch, const LoadedData& data) {
  if (data.train.size() == 0) return;
  arch.in_channels = data.train.channels();
  arch.in_h = data.train.height();
  arch.in_w = data.train.width();
  arch.classes = data.classes;
}

}  // namespace lmrc::cli
