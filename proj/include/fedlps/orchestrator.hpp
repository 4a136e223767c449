#pragma once

#include <mutex>
#include <numeric>

#include "fedlps/bandit.hpp"
#include "fedlps/baselines.hpp"
#include "fedlps/config.hpp"
#include "fedlps/localtrain.hpp"

// Server loop: client sampling, broadcast, parallel client updates, weighted
// aggregation, bandit updates, and ledger recording. All client work is a
// pure function of (state, broadcast, per-(client,round) rng streams), so the
// trajectory does not depend on the thread count.

namespace fedlps {

inline std::vector<int> select_clients(int total, double fraction, Rng& rng) {
  if (!(fraction > 0 && fraction <= 1)) throw ConfigError("select_clients: fraction out of range");
  const int c = std::max(int(fraction * total), 1);
  std::vector<int> ids(static_cast<size_t>(total));
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < c; ++i) {
    const size_t j = size_t(i) + size_t(rng.next_below(uint64_t(total - i)));
    std::swap(ids[size_t(i)], ids[j]);
  }
  ids.resize(size_t(c));
  std::sort(ids.begin(), ids.end());
  return ids;
}

// omega^{r+1} = sum_k |D_k| (omega^r - w_hat_k) / sum_k |D_k|, evaluated in
// the residual-average form omega^r - sum_k (|D_k|/W) w_hat_k so that all-zero
// residuals leave the global model bit-identical. Accumulation runs in the
// caller-provided (sorted) report order so the reduction is reproducible.
template <Scalar T>
ParamSet<T> aggregate(const ParamSet<T>& global, const std::vector<const GradSet<T>*>& residuals,
                      const std::vector<int>& sample_counts) {
  if (residuals.empty()) throw ConfigError("aggregate: no reports");
  if (residuals.size() != sample_counts.size())
    throw std::logic_error("aggregate: report/weight length mismatch");
  long long total = 0;
  for (int n : sample_counts) total += n;
  if (total <= 0) throw ConfigError("aggregate: zero total samples");
  std::vector<T> coef(residuals.size());
  for (size_t k = 0; k < residuals.size(); ++k)
    coef[k] = T(double(sample_counts[k]) / double(total));

  ParamSet<T> next = global;
  for (size_t k = 0; k < residuals.size(); ++k) {
    const auto& res = *residuals[k];
    for (size_t l = 0; l < global.layers.size(); ++l) {
      for (size_t i = 0; i < next.layers[l].w.size(); ++i)
        next.layers[l].w[i] -= coef[k] * res.layers[l].w[i];
      for (size_t i = 0; i < next.layers[l].b.size(); ++i)
        next.layers[l].b[i] -= coef[k] * res.layers[l].b[i];
    }
  }
  return next;
}

struct LedgerClientRow {
  int client_id = 0;
  double ratio_sampled = 0;
  double ratio_effective = 0;
  double cost = 0;      // T_k^r
  double accuracy = 0;  // a_k^r
  double reward = 0;    // G
};

struct RoundLedger {
  int round = 0;
  std::vector<LedgerClientRow> clients;
  double global_cost = 0;
  std::string params_digest;
};

struct MetricsRow {
  int round = 0;
  double mean_test_acc = 0;
  double cumulative_flops = 0;
  double cumulative_sim_time = 0;
  double mean_ratio = 0;
  double mean_reward = 0;
  uint64_t eliminated_partitions = 0;  // cumulative across agents
  double mean_l_tr = 0, mean_l_pr = 0, mean_l_ir = 0;
};

struct AgentSnapshot {
  int client_id = 0;
  double eps = 0;
  struct Part {
    double lo = 0, hi = 0;
    int pulls = 0;
    double reward_sum = 0, reward_sumsq = 0;
  };
  std::vector<Part> partitions;
};

struct RunResult {
  Arch arch;
  std::vector<RoundLedger> ledgers;
  std::vector<MetricsRow> metrics;
  std::vector<double> final_client_accuracy;
  double total_sim_time = 0;
  double total_flops = 0;
  uint64_t ucbv_log_floor_count = 0;
  std::vector<AgentSnapshot> agents;
  ParamSet<double> final_params;
  std::vector<std::string> checkpoints;  // paths written, in round order
};

// Common experiment fixture: dataset, partition, capabilities, architecture.
struct RunSetup {
  Dataset data;
  PartitionPlan plan;
  std::vector<double> capabilities;
  Arch arch;
};

inline RunSetup build_setup(const RunConfig& cfg) {
  RunSetup s;
  if (cfg.dataset == DatasetKind::synthetic) {
    Rng rng = stream(cfg.seed, StreamKind::synth);
    s.data = synth_dataset(cfg.classes, cfg.feature_dim, cfg.per_class, cfg.separation, rng);
  } else {
    s.data = load_idx(cfg.idx_images, cfg.idx_labels);
  }
  Rng part_rng = stream(cfg.seed, StreamKind::partition);
  s.plan = pathological_partition(s.data, cfg.clients, cfg.classes_per_client, cfg.test_fraction,
                                  part_rng);
  Rng cap_rng = stream(cfg.seed, StreamKind::capability);
  s.capabilities = assign_capabilities(cfg.clients, cfg.capability_levels, cap_rng);
  s.arch = arch_of(cfg, s.data.dim, s.data.class_count);
  return s;
}

template <Scalar T>
class Engine {
 public:
  Engine(RunConfig cfg, RunSetup setup) : cfg_(std::move(cfg)), setup_(std::move(setup)) {
    init();
  }

  explicit Engine(RunConfig cfg) : Engine(cfg, build_setup(cfg)) {}

  RunResult run(const std::string& out_dir = "") {
    RunResult result;
    result.arch = setup_.arch;
    double cum_flops = 0, cum_time = 0;
    uint64_t cum_elim = 0;

    for (int r = 0; r < cfg_.rounds; ++r) {
      Rng sel_rng = stream(cfg_.seed, StreamKind::client_select, uint64_t(r));
      const std::vector<int> sel = select_clients(cfg_.clients, cfg_.select_fraction, sel_rng);

      std::vector<ClientOutcome<T>> outcomes(sel.size());
      std::string round_error;
      std::mutex err_mu;
      parallel_for(sel.size(), cfg_.threads, [&](size_t i) {
        try {
          outcomes[i] = run_client(sel[size_t(i)], r);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (round_error.empty()) round_error = strf("round %d: %s", r, e.what());
        }
      });
      if (!round_error.empty()) throw RunError(round_error);

      std::vector<const GradSet<T>*> residuals;
      std::vector<int> weights;
      for (const auto& oc : outcomes) {
        residuals.push_back(&oc.report.residual);
        weights.push_back(oc.report.sample_count);
      }
      global_ = aggregate(global_, residuals, weights);

      RoundLedger ledger;
      ledger.round = r;
      MetricsRow row;
      row.round = r;
      for (size_t i = 0; i < sel.size(); ++i) {
        const int k = sel[i];
        const auto& oc = outcomes[i];
        LedgerClientRow lc;
        lc.client_id = k;
        lc.ratio_sampled = oc.ratio_sampled;
        lc.ratio_effective = oc.ratio_effective;
        lc.cost = oc.report.local_cost;
        lc.accuracy = oc.report.train_accuracy;

        if (cfg_.ratio_rule == RatioRule::pucbv) {
          Rng brng = stream(cfg_.seed, StreamKind::bandit_sample, uint64_t(k), uint64_t(r));
          BanditUpdate upd = update_and_select(agents_[size_t(k)], oc.report.train_accuracy,
                                               oc.report.local_cost, cfg_.delta, brng);
          ratios_[size_t(k)] = upd.next_ratio.value;
          lc.reward = upd.reward_value;
        } else {
          lc.reward = reward(oc.report.train_accuracy, clients_[size_t(k)].last_accuracy,
                             oc.report.local_cost);
        }

        clients_[size_t(k)].q = oc.q_final;
        clients_[size_t(k)].last_accuracy = oc.report.train_accuracy;
        personal_[size_t(k)] = oc.personal;
        has_personal_[size_t(k)] = true;

        cum_flops += oc.cost.flops;
        row.mean_ratio += oc.ratio_effective;
        row.mean_reward += lc.reward;
        row.mean_l_tr += oc.mean_l_tr;
        row.mean_l_pr += oc.mean_l_pr;
        row.mean_l_ir += oc.mean_l_ir;
        ledger.clients.push_back(lc);
      }
      std::vector<double> times;
      for (const auto& oc : outcomes) times.push_back(oc.report.local_cost);
      ledger.global_cost = global_cost(times);
      cum_time += ledger.global_cost;
      ledger.params_digest = hex64(digest_params(global_));

      const double n = double(sel.size());
      row.mean_ratio /= n;
      row.mean_reward /= n;
      row.mean_l_tr /= n;
      row.mean_l_pr /= n;
      row.mean_l_ir /= n;
      row.cumulative_flops = cum_flops;
      row.cumulative_sim_time = cum_time;
      cum_elim = 0;
      for (const auto& a : agents_) cum_elim += a.eliminations;
      row.eliminated_partitions = cum_elim;
      row.mean_test_acc = mean_test_accuracy();

      result.ledgers.push_back(std::move(ledger));
      result.metrics.push_back(row);

      if (!out_dir.empty() && cfg_.checkpoint_every > 0 && (r + 1) % cfg_.checkpoint_every == 0) {
        const std::string path = out_dir + strf("/ckpt_%06d.bin", r + 1);
        save_checkpoint(path, setup_.arch, global_);
        result.checkpoints.push_back(path);
      }
    }

    result.final_client_accuracy = per_client_accuracy();
    result.total_sim_time = cum_time;
    result.total_flops = cum_flops;
    for (const auto& a : agents_) result.ucbv_log_floor_count += a.log_floor_warnings;
    for (int k = 0; k < cfg_.clients; ++k) {
      if (agents_.empty()) break;
      AgentSnapshot snap;
      snap.client_id = k;
      snap.eps = agents_[size_t(k)].eps;
      for (const auto& p : agents_[size_t(k)].partitions) {
        AgentSnapshot::Part part;
        part.lo = p.lo;
        part.hi = p.hi;
        part.pulls = p.pulls();
        for (double g : p.rewards) {
          part.reward_sum += g;
          part.reward_sumsq += g * g;
        }
        snap.partitions.push_back(part);
      }
      result.agents.push_back(std::move(snap));
    }
    result.final_params = params_as_double();
    if (!out_dir.empty()) {
      const std::string path = out_dir + "/ckpt_final.bin";
      save_checkpoint(path, setup_.arch, global_);
      result.checkpoints.push_back(path);
    }
    return result;
  }

  const ParamSet<T>& global_params() const { return global_; }
  const RunSetup& setup() const { return setup_; }
  const std::vector<double>& ratios() const { return ratios_; }
  const std::vector<ClientState<T>>& clients() const { return clients_; }
  const std::vector<BanditAgent>& agents() const { return agents_; }

  ParamSet<double> params_as_double() const {
    ParamSet<double> out;
    out.layers.resize(global_.layers.size());
    for (size_t l = 0; l < global_.layers.size(); ++l) {
      out.layers[l].w.assign(global_.layers[l].w.begin(), global_.layers[l].w.end());
      out.layers[l].b.assign(global_.layers[l].b.begin(), global_.layers[l].b.end());
    }
    return out;
  }

 private:
  void init() {
    validate_config(cfg_);
    global_ = init_params<T>(setup_.arch, cfg_.seed);

    // Q_k^s starts at sigma(|omega^0|_J): the importance regularizer is zero
    // at round zero, so no unit starts with a pruning bias.
    ImportanceIndicator<T> q0;
    for (T m : magnitude_summary(global_, setup_.arch)) q0.scores.push_back(T(sigmoid(double(m))));

    clients_.resize(size_t(cfg_.clients));
    personal_.resize(size_t(cfg_.clients));
    has_personal_.assign(size_t(cfg_.clients), 0);
    ratios_.assign(size_t(cfg_.clients), 1.0);
    for (int k = 0; k < cfg_.clients; ++k) {
      auto& st = clients_[size_t(k)];
      st.client_id = k;
      st.q = q0;
      st.capability = setup_.capabilities[size_t(k)];
      st.data = &setup_.data;
      st.split = &setup_.plan.clients[size_t(k)];
      st.last_accuracy = evaluate(setup_.arch, global_, setup_.data, st.split->test);
    }

    switch (cfg_.ratio_rule) {
      case RatioRule::pucbv: {
        BanditOptions opt{cfg_.eliminate_lower, cfg_.split_stats_inherit};
        for (int k = 0; k < cfg_.clients; ++k) {
          Rng rng = stream(cfg_.seed, StreamKind::bandit_init, uint64_t(k));
          BanditAgent agent = init_agent(cfg_.partitions, cfg_.s_min, cfg_.rounds, cfg_.clients,
                                         cfg_.select_fraction, cfg_.rho, rng, opt);
          agent.last_accuracy = clients_[size_t(k)].last_accuracy;
          ratios_[size_t(k)] = agent.last_ratio;
          agents_.push_back(std::move(agent));
        }
        break;
      }
      case RatioRule::rcr:
        for (int k = 0; k < cfg_.clients; ++k)
          ratios_[size_t(k)] = rcr_ratio(setup_.capabilities[size_t(k)], cfg_.s_min).value;
        break;
      case RatioRule::fixed:
        for (auto& s : ratios_) s = cfg_.fixed_ratio;
        break;
    }
  }

  ClientOutcome<T> run_client(int k, int round) {
    const auto& st = clients_[size_t(k)];
    DeviceProfile profile = profile_for(st.capability, cfg_.base_flops, cfg_.base_bandwidth);
    if (cfg_.capability_jitter) {
      Rng jr = stream(cfg_.seed, StreamKind::cap_jitter, uint64_t(k), uint64_t(round));
      const double f = jr.uniform(0.8, 1.2);
      profile.flops_capacity *= f;
      profile.bandwidth_capacity *= f;
    }
    LossConfig lcfg;
    lcfg.mu = cfg_.mu;
    lcfg.lambda = cfg_.lambda;
    lcfg.lr = cfg_.lr;
    lcfg.local_iters = cfg_.local_iters;
    lcfg.batch_size = cfg_.batch_size;
    lcfg.grad_clip = cfg_.grad_clip;
    lcfg.q_grad = cfg_.q_grad;
    lcfg.acc_probe = cfg_.acc_probe;

    Rng batch_rng = stream(cfg_.seed, StreamKind::batch, uint64_t(k), uint64_t(round));
    const SparseRatio s{ratios_[size_t(k)]};
    if (cfg_.pattern == PatternKind::learnable) {
      return client_update_learnable(setup_.arch, st, global_, s, lcfg, profile, cfg_.alpha,
                                     cfg_.s_min, batch_rng);
    }
    // Heuristic patterns re-derive from a fixed per-(client, round) seed, so
    // the random strategy keeps one pattern for the whole round.
    const uint64_t pseed = derive_seed(cfg_.seed, StreamKind::pattern_random, uint64_t(k),
                                       uint64_t(round));
    const PatternKind kind = cfg_.pattern;
    const Arch& arch = setup_.arch;
    return client_update(arch, st, global_, s, lcfg, profile, cfg_.alpha, cfg_.s_min, batch_rng,
                         [&, pseed, kind](const ParamSet<T>& params, const ImportanceIndicator<T>&,
                                          SparseRatio sr) {
                           return heuristic_pattern(kind, params, arch, sr, Rng(pseed));
                         });
  }

  double mean_test_accuracy() const {
    std::vector<double> accs = per_client_accuracy();
    double sum = 0;
    for (double a : accs) sum += a;
    return sum / double(accs.size());
  }

  std::vector<double> per_client_accuracy() const {
    std::vector<double> accs(size_t(cfg_.clients), 0.0);
    parallel_for(size_t(cfg_.clients), cfg_.threads, [&](size_t k) {
      const auto& st = clients_[k];
      const ParamSet<T>& model = has_personal_[k] ? personal_[k] : global_;
      accs[k] = evaluate(setup_.arch, model, setup_.data, st.split->test);
    });
    return accs;
  }

  RunConfig cfg_;
  RunSetup setup_;
  ParamSet<T> global_;
  std::vector<ClientState<T>> clients_;
  std::vector<BanditAgent> agents_;
  std::vector<double> ratios_;
  std::vector<ParamSet<T>> personal_;
  std::vector<uint8_t> has_personal_;
};

// Plain FedAvg on the shared primitives: dense local SGD, unmasked residuals,
// the same aggregation and rng streams. Used as the reference trajectory for
// the dense-equivalence check and as the conventional-FL baseline.
template <Scalar T>
struct FedAvgResult {
  std::vector<std::string> digests;
  ParamSet<T> final_params;
};

template <Scalar T>
FedAvgResult<T> fedavg_reference(const RunConfig& cfg, const RunSetup& setup) {
  validate_config(cfg);
  ParamSet<T> global = init_params<T>(setup.arch, cfg.seed);
  const UnitMask ones = UnitMask::all_ones(setup.arch);
  FedAvgResult<T> out;
  for (int r = 0; r < cfg.rounds; ++r) {
    Rng sel_rng = stream(cfg.seed, StreamKind::client_select, uint64_t(r));
    const std::vector<int> sel = select_clients(cfg.clients, cfg.select_fraction, sel_rng);
    std::vector<GradSet<T>> residuals(sel.size());
    std::vector<int> weights(sel.size());
    for (size_t i = 0; i < sel.size(); ++i) {
      const int k = sel[i];
      const auto& split = setup.plan.clients[size_t(k)];
      Rng batch_rng = stream(cfg.seed, StreamKind::batch, uint64_t(k), uint64_t(r));
      ParamSet<T> local = global;
      for (int it = 0; it < cfg.local_iters; ++it) {
        const Batch<T> batch = sample_batch<T>(setup.data, split.train, cfg.batch_size, batch_rng);
        auto cache = forward(setup.arch, local, ones, batch);
        auto bwd = backward(setup.arch, local, ones, batch, cache);
        sgd_step(local, bwd.grads, cfg.lr, cfg.grad_clip);
      }
      residuals[i] = GradSet<T>::zeros(setup.arch);
      zip_params(residuals[i], global, [](T& d, const T& g) { d = g; });
      zip_params(residuals[i], local, [](T& d, const T& l) { d -= l; });
      weights[i] = int(split.train.size());
    }
    std::vector<const GradSet<T>*> rptrs;
    for (const auto& g : residuals) rptrs.push_back(&g);
    global = aggregate(global, rptrs, weights);
    out.digests.push_back(hex64(digest_params(global)));
  }
  out.final_params = std::move(global);
  return out;
}

template <Scalar T>
FedAvgResult<T> fedavg_reference(const RunConfig& cfg) {
  return fedavg_reference<T>(cfg, build_setup(cfg));
}

}  // namespace fedlps
