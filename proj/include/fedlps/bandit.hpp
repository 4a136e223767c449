#pragma once

#include <cmath>
#include <vector>

#include "fedlps/common.hpp"
#include "fedlps/rng.hpp"
#include "fedlps/sparsity.hpp"

// P-UCBV: per-client bandit over the continuous sparse-ratio space. The agent
// keeps an ordered set of disjoint ratio partitions; each update splits the
// partition that produced the last ratio, optionally eliminates the side that
// deteriorated accuracy, scores every partition by mean reward plus a
// variance-aware exploration bonus, and samples the next ratio from the
// argmax partition.

namespace fedlps {

inline double utility(double accuracy_percent) {
  return 10.0 - 20.0 / (1.0 + std::exp(0.35 * accuracy_percent));
}

inline double reward(double acc, double acc_prev, double t_cost) {
  if (t_cost <= 0) throw ConfigError("reward: local cost must be positive");
  return (utility(acc) - utility(acc_prev)) / t_cost;
}

struct Partition {
  double lo = 0;
  double hi = 1;                 // half-open [lo, hi)
  std::vector<double> rewards;   // one entry per pull credited to this partition
  int pulls() const { return int(rewards.size()); }
};

struct PartitionScore {
  double lo = 0, hi = 0;
  int pulls = 0;
  double mean = 0;
  double variance = 0;  // population variance
  double score = 0;     // UCBV value
};

struct BanditOptions {
  bool eliminate_lower = true;  // which split half is dropped on accuracy loss
  bool inherit_stats = true;    // children copy the parent's reward list on split
};

struct BanditAgent {
  std::vector<Partition> partitions;
  double eps = 1.0;  // halves on every update
  double xi = 0;
  double psi = 0;
  double rho = 0.5;
  double last_ratio = 0;     // sampled (pre-clamp) ratio driving the next split
  double last_accuracy = 0;  // a^{r-1}
  BanditOptions options;
  uint64_t log_floor_warnings = 0;
  uint64_t eliminations = 0;

  int partition_count() const { return int(partitions.size()); }
};

struct BanditUpdate {
  SparseRatio next_ratio;
  int selected_index = 0;
  bool split_occurred = false;
  bool eliminated = false;
  double reward_value = 0;
  std::vector<PartitionScore> scores;
};

inline BanditAgent init_agent(int initial_partitions, double s_min, int total_rounds, int clients,
                              double select_fraction, double rho, Rng& rng,
                              BanditOptions options = {}) {
  if (initial_partitions < 1) throw ConfigError("init_agent: need at least one partition");
  if (!(s_min > 0 && s_min < 1)) throw ConfigError("init_agent: s_min out of range");
  if (!(select_fraction > 0)) throw ConfigError("init_agent: select fraction must be positive");
  BanditAgent agent;
  agent.rho = rho;
  agent.options = options;
  agent.xi = double(total_rounds) / (double(clients) * select_fraction);
  agent.psi = agent.xi / (double(initial_partitions) * double(initial_partitions));
  const double width = (1.0 - s_min) / initial_partitions;
  for (int i = 0; i < initial_partitions; ++i) {
    Partition p;
    p.lo = s_min + i * width;
    p.hi = (i + 1 == initial_partitions) ? 1.0 : s_min + (i + 1) * width;
    agent.partitions.push_back(std::move(p));
  }
  const auto first = size_t(rng.next_below(uint64_t(initial_partitions)));
  agent.last_ratio = rng.uniform(agent.partitions[first].lo, agent.partitions[first].hi);
  return agent;
}

namespace detail {
inline PartitionScore score_partition(const Partition& p, double rho, double log_arg,
                                      uint64_t* floor_warnings) {
  PartitionScore s;
  s.lo = p.lo;
  s.hi = p.hi;
  s.pulls = p.pulls();
  if (s.pulls > 0) {
    double sum = 0;
    for (double g : p.rewards) sum += g;
    s.mean = sum / s.pulls;
    double sq = 0;
    for (double g : p.rewards) sq += (g - s.mean) * (g - s.mean);
    s.variance = sq / s.pulls;
  }
  const double inner = std::log(log_arg);
  if (inner < 0) {
    if (floor_warnings) ++*floor_warnings;
    s.score = s.mean;
  } else {
    s.score = s.mean + std::sqrt(rho * (s.variance + 2.0) * inner / (4.0 * (s.pulls + 1)));
  }
  return s;
}
}  // namespace detail

inline BanditUpdate update_and_select(BanditAgent& agent, double train_accuracy,
                                      double t_cost, double delta, Rng& rng) {
  BanditUpdate out;
  auto& parts = agent.partitions;

  // 1. locate and split the partition holding the last sampled ratio
  size_t u = parts.size();
  for (size_t i = 0; i < parts.size(); ++i) {
    if (agent.last_ratio >= parts[i].lo && agent.last_ratio < parts[i].hi) {
      u = i;
      break;
    }
  }
  if (u == parts.size())
    throw std::logic_error(strf("bandit: ratio %.6f not inside any partition", agent.last_ratio));

  const double sr = agent.last_ratio;
  size_t lower_idx = u, upper_idx = u;
  if (sr > parts[u].lo) {  // degenerate boundary hit: no split
    Partition lower, upper;
    lower.lo = parts[u].lo;
    lower.hi = sr;
    upper.lo = sr;
    upper.hi = parts[u].hi;
    if (agent.options.inherit_stats) {
      lower.rewards = parts[u].rewards;
      upper.rewards = parts[u].rewards;
    }
    parts[u] = std::move(lower);
    parts.insert(parts.begin() + long(u) + 1, std::move(upper));
    upper_idx = u + 1;
    out.split_occurred = true;
  }

  // 2. accuracy-dominated arm elimination of the configured split half
  long target = -1;    // S_u': the half elimination may remove (absent without a split)
  long survivor;       // S_u'': always survives and is credited
  if (out.split_occurred) {
    target = agent.options.eliminate_lower ? long(lower_idx) : long(upper_idx);
    survivor = agent.options.eliminate_lower ? long(upper_idx) : long(lower_idx);
  } else {
    survivor = long(u);
  }
  if (train_accuracy - agent.last_accuracy < delta && target >= 0 && parts.size() >= 2) {
    parts.erase(parts.begin() + target);
    if (survivor > target) --survivor;
    target = -1;
    out.eliminated = true;
    ++agent.eliminations;
  }

  // 3. bookkeeping: epsilon halves, psi tracks the partition count
  agent.eps /= 2.0;
  agent.psi = agent.xi / (double(parts.size()) * double(parts.size()));

  // 4. reward credited to both split halves (where they survive)
  out.reward_value = reward(train_accuracy, agent.last_accuracy, t_cost);
  parts[size_t(survivor)].rewards.push_back(out.reward_value);
  if (target >= 0) parts[size_t(target)].rewards.push_back(out.reward_value);

  // 5. UCBV scores and argmax selection (ties toward the lower index)
  const double log_arg = agent.xi * agent.psi * agent.eps;
  uint64_t floored = 0;
  out.scores.reserve(parts.size());
  for (const auto& p : parts)
    out.scores.push_back(detail::score_partition(p, agent.rho, log_arg, &floored));
  if (floored > 0) ++agent.log_floor_warnings;
  size_t best = 0;
  for (size_t i = 1; i < out.scores.size(); ++i)
    if (out.scores[i].score > out.scores[best].score) best = i;
  out.selected_index = int(best);
  agent.last_ratio = rng.uniform(parts[best].lo, parts[best].hi);
  agent.last_accuracy = train_accuracy;
  out.next_ratio = SparseRatio{agent.last_ratio};
  return out;
}

}  // namespace fedlps
