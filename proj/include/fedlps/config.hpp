#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedlps/common.hpp"
#include "fedlps/localtrain.hpp"

// Flat key=value run configuration. Every tunable in the simulator has exactly
// one key; unknown keys are rejected so typos cannot silently fall back to
// defaults.

namespace fedlps {

enum class PatternKind { learnable, random, ordered, magnitude };
enum class RatioRule { pucbv, rcr, fixed };
enum class Precision { f32, f64 };
enum class DatasetKind { synthetic, idx };

struct RunConfig {
  std::string name = "run";
  uint64_t seed = 1;
  unsigned threads = 1;  // 0 = hardware concurrency
  Precision precision = Precision::f64;

  DatasetKind dataset = DatasetKind::synthetic;
  std::string idx_images;
  std::string idx_labels;
  int classes = 10;
  int feature_dim = 32;
  int per_class = 200;
  double separation = 6.0;

  int clients = 20;             // K
  int classes_per_client = 2;   // c
  double test_fraction = 0.2;
  std::vector<int> hidden = {24, 24};

  int rounds = 100;             // R
  double select_fraction = 0.1; // epsilon
  int local_iters = 5;          // E
  int batch_size = 20;
  double lr = 0.1;
  double mu = 1.0;
  double lambda = 1.0;
  std::optional<double> grad_clip;
  QGradMode q_grad = QGradMode::ste;
  bool acc_probe = false;

  double s_min = kDefaultSMin;
  PatternKind pattern = PatternKind::learnable;
  RatioRule ratio_rule = RatioRule::pucbv;
  double fixed_ratio = 0.5;

  int partitions = 4;  // I_0
  double rho = 0.5;
  double delta = 0.0;
  bool eliminate_lower = true;
  bool split_stats_inherit = true;

  double alpha = 1.0;
  double base_flops = 727e9;
  double base_bandwidth = 1e6;
  std::vector<double> capability_levels = {1.0, 0.5, 0.25, 0.125, 0.0625};
  bool capability_jitter = false;

  int checkpoint_every = 0;  // 0 = only the final checkpoint
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_num(const std::string& key, const std::string& v) {
  try {
    if constexpr (std::is_same_v<T, double>) return std::stod(v);
    else if constexpr (std::is_same_v<T, int>) return std::stoi(v);
    else if constexpr (std::is_same_v<T, unsigned>) return unsigned(std::stoul(v));
    else return T(std::stoull(v));
  } catch (...) {
    throw ConfigError(strf("config key '%s': cannot parse '%s'", key.c_str(), v.c_str()));
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(strf("config key '%s': expected a boolean, got '%s'", key.c_str(), v.c_str()));
}

}  // namespace detail

inline const char* to_string(PatternKind k) {
  switch (k) {
    case PatternKind::learnable: return "learnable";
    case PatternKind::random: return "random";
    case PatternKind::ordered: return "ordered";
    case PatternKind::magnitude: return "magnitude";
  }
  return "?";
}
inline const char* to_string(RatioRule r) {
  switch (r) {
    case RatioRule::pucbv: return "pucbv";
    case RatioRule::rcr: return "rcr";
    case RatioRule::fixed: return "fixed";
  }
  return "?";
}
inline const char* to_string(Precision p) { return p == Precision::f32 ? "float32" : "float64"; }
inline const char* to_string(DatasetKind d) {
  return d == DatasetKind::synthetic ? "synthetic" : "idx";
}
inline const char* to_string(QGradMode m) { return m == QGradMode::ste ? "ste" : "ir_only"; }

// Applies `key = value` onto cfg; throws ConfigError for unknown keys or bad
// values. The CLI, the sweep driver, and tests all go through here.
inline void apply_config_kv(RunConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_num;
  auto eq = [&](const char* k) { return key == k; };

  if (eq("name")) c.name = value;
  else if (eq("seed")) c.seed = parse_num<uint64_t>(key, value);
  else if (eq("threads")) c.threads = parse_num<unsigned>(key, value);
  else if (eq("precision")) {
    if (value == "float32") c.precision = Precision::f32;
    else if (value == "float64") c.precision = Precision::f64;
    else throw ConfigError("config key 'precision': expected float32|float64");
  } else if (eq("dataset")) {
    if (value == "synthetic") c.dataset = DatasetKind::synthetic;
    else if (value == "idx") c.dataset = DatasetKind::idx;
    else throw ConfigError("config key 'dataset': expected synthetic|idx");
  } else if (eq("idx_images")) c.idx_images = value;
  else if (eq("idx_labels")) c.idx_labels = value;
  else if (eq("classes")) c.classes = parse_num<int>(key, value);
  else if (eq("feature_dim")) c.feature_dim = parse_num<int>(key, value);
  else if (eq("per_class")) c.per_class = parse_num<int>(key, value);
  else if (eq("separation")) c.separation = parse_num<double>(key, value);
  else if (eq("clients")) c.clients = parse_num<int>(key, value);
  else if (eq("classes_per_client")) c.classes_per_client = parse_num<int>(key, value);
  else if (eq("test_fraction")) c.test_fraction = parse_num<double>(key, value);
  else if (eq("hidden")) {
    c.hidden.clear();
    for (const auto& tok : detail::split_csv(value)) c.hidden.push_back(parse_num<int>(key, tok));
  } else if (eq("rounds")) c.rounds = parse_num<int>(key, value);
  else if (eq("select_fraction")) c.select_fraction = parse_num<double>(key, value);
  else if (eq("local_iters")) c.local_iters = parse_num<int>(key, value);
  else if (eq("batch_size")) c.batch_size = parse_num<int>(key, value);
  else if (eq("lr")) c.lr = parse_num<double>(key, value);
  else if (eq("mu")) c.mu = parse_num<double>(key, value);
  else if (eq("lambda")) c.lambda = parse_num<double>(key, value);
  else if (eq("grad_clip")) {
    if (value.empty() || value == "none") c.grad_clip.reset();
    else c.grad_clip = parse_num<double>(key, value);
  } else if (eq("q_grad")) {
    if (value == "ste") c.q_grad = QGradMode::ste;
    else if (value == "ir_only") c.q_grad = QGradMode::ir_only;
    else throw ConfigError("config key 'q_grad': expected ste|ir_only");
  } else if (eq("acc_probe")) c.acc_probe = parse_bool(key, value);
  else if (eq("s_min")) c.s_min = parse_num<double>(key, value);
  else if (eq("pattern")) {
    if (value == "learnable") c.pattern = PatternKind::learnable;
    else if (value == "random") c.pattern = PatternKind::random;
    else if (value == "ordered") c.pattern = PatternKind::ordered;
    else if (value == "magnitude") c.pattern = PatternKind::magnitude;
    else throw ConfigError("config key 'pattern': expected learnable|random|ordered|magnitude");
  } else if (eq("ratio_rule")) {
    if (value == "pucbv") c.ratio_rule = RatioRule::pucbv;
    else if (value == "rcr") c.ratio_rule = RatioRule::rcr;
    else if (value == "fixed") c.ratio_rule = RatioRule::fixed;
    else throw ConfigError("config key 'ratio_rule': expected pucbv|rcr|fixed");
  } else if (eq("fixed_ratio")) c.fixed_ratio = parse_num<double>(key, value);
  else if (eq("partitions")) c.partitions = parse_num<int>(key, value);
  else if (eq("rho")) c.rho = parse_num<double>(key, value);
  else if (eq("delta")) c.delta = parse_num<double>(key, value);
  else if (eq("eliminate")) {
    if (value == "lower") c.eliminate_lower = true;
    else if (value == "upper") c.eliminate_lower = false;
    else throw ConfigError("config key 'eliminate': expected lower|upper");
  } else if (eq("split_stats")) {
    if (value == "inherit") c.split_stats_inherit = true;
    else if (value == "fresh") c.split_stats_inherit = false;
    else throw ConfigError("config key 'split_stats': expected inherit|fresh");
  } else if (eq("alpha")) c.alpha = parse_num<double>(key, value);
  else if (eq("base_flops")) c.base_flops = parse_num<double>(key, value);
  else if (eq("base_bandwidth")) c.base_bandwidth = parse_num<double>(key, value);
  else if (eq("capability_levels")) {
    c.capability_levels.clear();
    for (const auto& tok : detail::split_csv(value))
      c.capability_levels.push_back(parse_num<double>(key, tok));
  } else if (eq("capability_jitter")) c.capability_jitter = parse_bool(key, value);
  else if (eq("checkpoint_every")) c.checkpoint_every = parse_num<int>(key, value);
  else throw ConfigError("unknown config key: " + key);
}

inline void validate_config(const RunConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (c.clients < 1) fail("clients must be >= 1");
  if (c.rounds < 0) fail("rounds must be >= 0");
  if (!(c.select_fraction > 0 && c.select_fraction <= 1))
    fail("select_fraction must be in (0, 1]");
  if (c.local_iters < 1) fail("local_iters must be >= 1");
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (!(c.lr > 0)) fail("lr must be positive");
  if (c.mu < 0 || c.lambda < 0) fail("mu and lambda must be >= 0");
  if (c.grad_clip && !(*c.grad_clip > 0)) fail("grad_clip must be positive when set");
  if (!(c.s_min > 0 && c.s_min < 1)) fail("s_min must be in (0, 1)");
  if (c.ratio_rule == RatioRule::fixed && !(c.fixed_ratio >= c.s_min && c.fixed_ratio <= 1.0))
    fail("fixed_ratio must be in [s_min, 1]");
  if (c.partitions < 1) fail("partitions must be >= 1");
  if (!(c.rho > 0)) fail("rho must be positive");
  if (!(c.alpha >= 0)) fail("alpha must be >= 0");
  if (c.hidden.empty()) fail("hidden must name at least one layer width");
  for (int h : c.hidden)
    if (h < 1) fail("hidden widths must be >= 1");
  if (c.classes < 2) fail("classes must be >= 2");
  if (c.classes_per_client < 1) fail("classes_per_client must be >= 1");
  if (!(c.test_fraction >= 0 && c.test_fraction < 1)) fail("test_fraction must be in [0, 1)");
  if (c.capability_levels.empty()) fail("capability_levels must be non-empty");
  for (double z : c.capability_levels)
    if (!(z > 0 && z <= 1)) fail("capability levels must be in (0, 1]");
  if (c.dataset == DatasetKind::idx && (c.idx_images.empty() || c.idx_labels.empty()))
    fail("dataset=idx requires idx_images and idx_labels");
  if (c.dataset == DatasetKind::synthetic && c.classes > c.feature_dim)
    fail("synthetic dataset requires feature_dim >= classes");
  if (!(c.base_flops > 0 && c.base_bandwidth > 0)) fail("device capacities must be positive");
  if (c.checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const size_t hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(strf("config line %d: expected 'key = value'", lineno));
    apply_config_kv(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  validate_config(c);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

// Key/value echo used for both the INI writer and the manifest config dump.
inline std::vector<std::pair<std::string, std::string>> config_kv(const RunConfig& c) {
  std::vector<std::pair<std::string, std::string>> kv;
  auto add = [&](const char* k, std::string v) { kv.emplace_back(k, std::move(v)); };
  auto num = [](double v) { return strf("%.17g", v); };
  add("name", c.name);
  add("seed", strf("%llu", static_cast<unsigned long long>(c.seed)));
  add("threads", strf("%u", c.threads));
  add("precision", to_string(c.precision));
  add("dataset", to_string(c.dataset));
  if (!c.idx_images.empty()) add("idx_images", c.idx_images);
  if (!c.idx_labels.empty()) add("idx_labels", c.idx_labels);
  add("classes", strf("%d", c.classes));
  add("feature_dim", strf("%d", c.feature_dim));
  add("per_class", strf("%d", c.per_class));
  add("separation", num(c.separation));
  add("clients", strf("%d", c.clients));
  add("classes_per_client", strf("%d", c.classes_per_client));
  add("test_fraction", num(c.test_fraction));
  {
    std::string h;
    for (size_t i = 0; i < c.hidden.size(); ++i) h += (i ? "," : "") + strf("%d", c.hidden[i]);
    add("hidden", h);
  }
  add("rounds", strf("%d", c.rounds));
  add("select_fraction", num(c.select_fraction));
  add("local_iters", strf("%d", c.local_iters));
  add("batch_size", strf("%d", c.batch_size));
  add("lr", num(c.lr));
  add("mu", num(c.mu));
  add("lambda", num(c.lambda));
  add("grad_clip", c.grad_clip ? num(*c.grad_clip) : std::string("none"));
  add("q_grad", to_string(c.q_grad));
  add("acc_probe", c.acc_probe ? "true" : "false");
  add("s_min", num(c.s_min));
  add("pattern", to_string(c.pattern));
  add("ratio_rule", to_string(c.ratio_rule));
  add("fixed_ratio", num(c.fixed_ratio));
  add("partitions", strf("%d", c.partitions));
  add("rho", num(c.rho));
  add("delta", num(c.delta));
  add("eliminate", c.eliminate_lower ? "lower" : "upper");
  add("split_stats", c.split_stats_inherit ? "inherit" : "fresh");
  add("alpha", num(c.alpha));
  add("base_flops", num(c.base_flops));
  add("base_bandwidth", num(c.base_bandwidth));
  {
    std::string z;
    for (size_t i = 0; i < c.capability_levels.size(); ++i)
      z += (i ? "," : "") + strf("%.17g", c.capability_levels[i]);
    add("capability_levels", z);
  }
  add("capability_jitter", c.capability_jitter ? "true" : "false");
  add("checkpoint_every", strf("%d", c.checkpoint_every));
  return kv;
}

inline std::string to_ini(const RunConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_kv(c)) out += k + " = " + v + "\n";
  return out;
}

inline Arch arch_of(const RunConfig& c, int input_dim, int classes) {
  Arch arch;
  int in = input_dim;
  for (int h : c.hidden) {
    arch.push_back({in, h, Activation::relu});
    in = h;
  }
  arch.push_back({in, classes, Activation::softmax_logits});
  validate_arch(arch);
  return arch;
}

}  // namespace fedlps
