#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>

#include "fedlps/selfcheck.hpp"

// Experiment harness: run / sweep / verify. Exit codes: 0 success, 1 check or
// run failure, 2 configuration/IO error.

namespace fedlps {

struct CliOverrides {
  std::optional<uint64_t> seed;
  std::optional<unsigned> threads;
};

inline std::string output_root() {
  if (const char* env = std::getenv("FEDLPS_OUT")) return env;
  return "out";
}

inline RunResult execute_run(const RunConfig& cfg, const std::string& out_dir) {
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  RunResult result;
  if (cfg.precision == Precision::f64) {
    Engine<double> engine(cfg);
    result = engine.run(out_dir);
  } else {
    Engine<float> engine(cfg);
    result = engine.run(out_dir);
  }
  if (!out_dir.empty()) {
    write_text(out_dir + "/metrics.csv", metrics_csv(result.metrics));
    write_text(out_dir + "/manifest.json", manifest_json(cfg, result).dump(2) + "\n");
  }
  return result;
}

inline void apply_overrides(RunConfig& cfg, const CliOverrides& ov) {
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.threads) cfg.threads = *ov.threads;
}

inline int cmd_run(const std::string& config_path, const CliOverrides& ov = {}) {
  try {
    RunConfig cfg = load_config(config_path);
    apply_overrides(cfg, ov);
    const std::string out_dir = output_root() + "/" + cfg.name;
    const RunResult result = execute_run(cfg, out_dir);
    double final_acc = 0;
    for (double a : result.final_client_accuracy) final_acc += a;
    final_acc /= double(result.final_client_accuracy.size());
    std::printf("run '%s': %d rounds, mean test accuracy %.2f%%, cumulative FLOPs %.4g, "
                "simulated time %.4gs\n",
                cfg.name.c_str(), cfg.rounds, final_acc, result.total_flops,
                result.total_sim_time);
    std::printf("artifacts: %s/{metrics.csv, manifest.json}\n", out_dir.c_str());
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "run failed: %s\n", e.what());
    return 1;
  }
}

struct SweepCase {
  std::string label;
  RunConfig cfg;
};

inline std::vector<SweepCase> sweep_cases(const RunConfig& base, const std::string& axis) {
  std::vector<SweepCase> cases;
  auto derived = [&](const std::string& label) {
    RunConfig c = base;
    c.name = base.name + "_" + axis + "_" + label;
    return c;
  };
  if (axis == "ratio") {
    for (double s : {0.2, 0.4, 0.6, 0.8}) {
      SweepCase sc{strf("%.1f", s), derived(strf("%.1f", s))};
      sc.cfg.ratio_rule = RatioRule::fixed;
      sc.cfg.fixed_ratio = s;
      cases.push_back(std::move(sc));
    }
  } else if (axis == "pattern") {
    for (PatternKind k : {PatternKind::learnable, PatternKind::random, PatternKind::ordered,
                          PatternKind::magnitude}) {
      SweepCase sc{to_string(k), derived(to_string(k))};
      sc.cfg.pattern = k;
      sc.cfg.ratio_rule = RatioRule::fixed;
      sc.cfg.fixed_ratio = 0.5;
      cases.push_back(std::move(sc));
    }
  } else if (axis == "heterogeneity") {
    const std::pair<const char*, std::vector<double>> levels[] = {
        {"low", {1.0, 0.5}},
        {"median", {1.0, 0.5, 0.25}},
        {"high", {1.0, 0.5, 0.25, 0.125, 0.0625}},
    };
    for (const auto& [label, z] : levels) {
      SweepCase sc{label, derived(label)};
      sc.cfg.capability_levels = z;
      cases.push_back(std::move(sc));
    }
  } else if (axis == "noniid") {
    for (int c : {2, 4, 6, 8, 10}) {
      if (c > base.classes) continue;
      SweepCase sc{strf("%d", c), derived(strf("%d", c))};
      sc.cfg.classes_per_client = c;
      cases.push_back(std::move(sc));
    }
  } else {
    throw ConfigError("unknown sweep axis '" + axis +
                      "' (expected ratio|pattern|heterogeneity|noniid)");
  }
  return cases;
}

inline int cmd_sweep(const std::string& config_path, const std::string& axis,
                     const CliOverrides& ov = {}) {
  try {
    RunConfig base = load_config(config_path);
    apply_overrides(base, ov);
    const auto cases = sweep_cases(base, axis);
    const std::string sweep_dir = output_root() + "/" + base.name + "_sweep_" + axis;
    std::filesystem::create_directories(sweep_dir);

    std::string combined;
    combined += std::string("# ") + kMetricsSchema + " (sweep)\n";
    combined +=
        "axis,value,round,mean_test_acc,cumulative_flops,cumulative_sim_time,mean_ratio,"
        "mean_reward,eliminated_partitions,mean_l_tr,mean_l_pr,mean_l_ir\n";
    for (const auto& sc : cases) {
      const std::string out_dir = sweep_dir + "/" + sc.cfg.name;
      std::printf("sweep %s = %s\n", axis.c_str(), sc.label.c_str());
      const RunResult result = execute_run(sc.cfg, out_dir);
      for (const auto& r : result.metrics) {
        combined += strf("%s,%s,%d,%.12g,%.12g,%.12g,%.12g,%.12g,%llu,%.12g,%.12g,%.12g\n",
                         axis.c_str(), sc.label.c_str(), r.round, r.mean_test_acc,
                         r.cumulative_flops, r.cumulative_sim_time, r.mean_ratio, r.mean_reward,
                         static_cast<unsigned long long>(r.eliminated_partitions), r.mean_l_tr,
                         r.mean_l_pr, r.mean_l_ir);
      }
    }
    write_text(sweep_dir + "/combined.csv", combined);
    std::printf("sweep complete: %s/combined.csv\n", sweep_dir.c_str());
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "sweep failed: %s\n", e.what());
    return 1;
  }
}

inline int cmd_verify() {
  try {
    const auto checks = run_selfchecks();
    bool all = true;
    std::printf("%-22s %-6s %s\n", "check", "status", "detail");
    for (const auto& c : checks) {
      all = all && c.pass;
      std::printf("%-22s %-6s %s\n", c.name.c_str(), c.pass ? "PASS" : "FAIL", c.detail.c_str());
    }
    return all ? 0 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "verify failed to run: %s\n", e.what());
    return 1;
  }
}

}  // namespace fedlps
