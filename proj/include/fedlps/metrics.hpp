#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "fedlps/orchestrator.hpp"

// Run artifacts: the per-round metrics CSV (fixed schema, replayable
// byte-for-byte for a given config+seed) and the JSON run manifest.

namespace fedlps {

inline constexpr const char* kMetricsSchema = "fedlps-metrics-v1";

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out;
  out += std::string("# ") + kMetricsSchema + "\n";
  out +=
      "round,mean_test_acc,cumulative_flops,cumulative_sim_time,mean_ratio,mean_reward,"
      "eliminated_partitions,mean_l_tr,mean_l_pr,mean_l_ir\n";
  for (const auto& r : rows) {
    out += strf("%d,%.12g,%.12g,%.12g,%.12g,%.12g,%llu,%.12g,%.12g,%.12g\n", r.round,
                r.mean_test_acc, r.cumulative_flops, r.cumulative_sim_time, r.mean_ratio,
                r.mean_reward, static_cast<unsigned long long>(r.eliminated_partitions), r.mean_l_tr,
                r.mean_l_pr, r.mean_l_ir);
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write: " + path);
  f.write(text.data(), std::streamsize(text.size()));
}

inline nlohmann::json manifest_json(const RunConfig& cfg, const RunResult& result) {
  nlohmann::json j;
  j["schema"] = "fedlps-manifest-v1";
  j["seed"] = cfg.seed;
  nlohmann::json conf = nlohmann::json::object();
  for (const auto& [k, v] : config_kv(cfg)) conf[k] = v;
  j["config"] = conf;

  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& led : result.ledgers) {
    nlohmann::json r;
    r["round"] = led.round;
    r["global_cost"] = led.global_cost;
    r["params_digest"] = led.params_digest;
    nlohmann::json cl = nlohmann::json::array();
    for (const auto& c : led.clients) {
      cl.push_back({{"id", c.client_id},
                    {"ratio_sampled", c.ratio_sampled},
                    {"ratio_effective", c.ratio_effective},
                    {"cost", c.cost},
                    {"accuracy", c.accuracy},
                    {"reward", c.reward}});
    }
    r["clients"] = std::move(cl);
    rounds.push_back(std::move(r));
  }
  j["rounds"] = std::move(rounds);
  j["final_client_accuracy"] = result.final_client_accuracy;
  j["total_sim_time"] = result.total_sim_time;
  j["total_flops"] = result.total_flops;
  j["ucbv_log_floor_count"] = result.ucbv_log_floor_count;
  j["checkpoints"] = result.checkpoints;

  nlohmann::json agents = nlohmann::json::array();
  for (const auto& a : result.agents) {
    nlohmann::json parts = nlohmann::json::array();
    for (const auto& p : a.partitions) {
      parts.push_back({{"lo", p.lo},
                       {"hi", p.hi},
                       {"pulls", p.pulls},
                       {"reward_sum", p.reward_sum},
                       {"reward_sumsq", p.reward_sumsq}});
    }
    agents.push_back({{"client", a.client_id}, {"eps", a.eps}, {"partitions", std::move(parts)}});
  }
  j["bandit_agents"] = std::move(agents);
  return j;
}

}  // namespace fedlps
