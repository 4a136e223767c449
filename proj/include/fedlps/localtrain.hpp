#pragma once

#include <functional>
#include <optional>

#include "fedlps/costmodel.hpp"
#include "fedlps/datahetero.hpp"
#include "fedlps/netcore.hpp"
#include "fedlps/sparsity.hpp"

// Client-side personalized training: the three-term importance-associated
// loss, joint parameter/importance SGD, and residual construction.

namespace fedlps {

enum class QGradMode { ste, ir_only };

struct LossConfig {
  double mu = 1.0;
  double lambda = 1.0;
  double lr = 0.1;
  int local_iters = 5;   // E
  int batch_size = 20;
  std::optional<double> grad_clip;
  QGradMode q_grad = QGradMode::ste;
  bool acc_probe = false;  // report held-out accuracy instead of training accuracy
};

template <Scalar T>
struct ClientState {
  int client_id = 0;
  ImportanceIndicator<T> q;  // persisted Q_k^s
  double capability = 1.0;   // z_k
  const Dataset* data = nullptr;
  const ClientSplit* split = nullptr;
  double last_accuracy = 0;  // a_k^{r-1}, percent
};

template <Scalar T>
struct ClientReport {
  GradSet<T> residual;  // (global - local) o mask; exactly zero at masked slots
  SparsePattern pattern;
  int sample_count = 0;
  double local_cost = 0;      // T_k^r
  double train_accuracy = 0;  // a_k^r, percent
};

template <Scalar T>
struct LossGrads {
  GradSet<T> grads_w;
  std::vector<T> grads_q;
  double l_tr = 0, l_pr = 0, l_ir = 0;
  double batch_accuracy = 0;
};

namespace detail {
template <Scalar T>
T sgn(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

// Incidence walk shared by the l_ir gradient and the STE route: visits every
// parameter incident to each hidden unit (incoming row, bias, outgoing column).
template <Scalar T, class Fn>
void for_each_incident(const Arch& arch, const UnitLayout& layout, Fn&& fn) {
  for (size_t l = 0; l < layout.widths.size(); ++l) {
    const int width = layout.widths[l], off = layout.offsets[l];
    const int in = arch[l].in_dim;
    const int out_next = arch[l + 1].out_dim;
    for (int u = 0; u < width; ++u) {
      const int j = off + u;
      for (int col = 0; col < in; ++col) fn(j, l, size_t(u) * in + col, false);
      fn(j, l, size_t(u), true);
      for (int i = 0; i < out_next; ++i) fn(j, l + 1, size_t(i) * width + u, false);
    }
  }
}
}  // namespace detail

// Composite loss and gradients against an explicit mask (the learnable path
// derives it from Q; baselines inject heuristic patterns).
template <Scalar T>
LossGrads<T> loss_and_grads_masked(const Arch& arch, const ParamSet<T>& params,
                                   const ImportanceIndicator<T>& q,
                                   const ParamSet<T>& global_params, const Batch<T>& batch,
                                   const LossConfig& cfg, const UnitMask& mask) {
  const UnitLayout layout = UnitLayout::of(arch);
  LossGrads<T> out;
  auto cache = forward(arch, params, mask, batch);
  auto bwd = backward(arch, params, mask, batch, cache);
  out.grads_w = std::move(bwd.grads);
  out.l_tr = bwd.task_loss;
  out.batch_accuracy = bwd.batch_accuracy;

  // STE route for dL_tr/dQ: the step function is treated as identity, so each
  // unit collects task-gradient * parameter over its incident parameters.
  // It must read the pure task gradient, before regularizer terms land.
  out.grads_q.assign(size_t(layout.total), T(0));
  if (cfg.q_grad == QGradMode::ste) {
    detail::for_each_incident<T>(arch, layout, [&](int j, size_t l, size_t idx, bool is_bias) {
      const T g = is_bias ? out.grads_w.layers[l].b[idx] : out.grads_w.layers[l].w[idx];
      const T w = is_bias ? params.layers[l].b[idx] : params.layers[l].w[idx];
      out.grads_q[size_t(j)] += g * w;
    });
  }

  if (cfg.mu != 0) {
    double l_pr = 0;
    for (size_t l = 0; l < arch.size(); ++l) {
      auto& gw = out.grads_w.layers[l].w;
      auto& gb = out.grads_w.layers[l].b;
      const auto& pw = params.layers[l].w;
      const auto& pb = params.layers[l].b;
      const auto& rw = global_params.layers[l].w;
      const auto& rb = global_params.layers[l].b;
      for (size_t i = 0; i < pw.size(); ++i) {
        const T d = pw[i] - rw[i];
        l_pr += double(d) * double(d);
        gw[i] += T(cfg.mu) * T(2) * d;
      }
      for (size_t i = 0; i < pb.size(); ++i) {
        const T d = pb[i] - rb[i];
        l_pr += double(d) * double(d);
        gb[i] += T(cfg.mu) * T(2) * d;
      }
    }
    out.l_pr = l_pr;
  } else {
    double l_pr = 0;
    zip_params(params, global_params, [&](const T& p, const T& r) {
      const double d = double(p) - double(r);
      l_pr += d * d;
    });
    out.l_pr = l_pr;
  }

  const std::vector<T> mag = magnitude_summary(params, arch);
  std::vector<T> sig(mag.size());
  double l_ir = 0;
  for (size_t j = 0; j < mag.size(); ++j) {
    sig[j] = T(sigmoid(double(mag[j])));
    const double d = double(q.scores[j]) - double(sig[j]);
    l_ir += d * d;
  }
  out.l_ir = l_ir;
  if (cfg.lambda != 0) {
    // d l_ir / d w: each incident parameter moves its unit's magnitude sum by
    // sign(w), scaled through the sigmoid.
    std::vector<T> coef(mag.size());
    for (size_t j = 0; j < mag.size(); ++j) {
      const T s = sig[j];
      coef[j] = T(cfg.lambda) * T(-2) * (q.scores[j] - s) * s * (T(1) - s);
    }
    detail::for_each_incident<T>(arch, layout, [&](int j, size_t l, size_t idx, bool is_bias) {
      const T w = is_bias ? params.layers[l].b[idx] : params.layers[l].w[idx];
      const T g = coef[size_t(j)] * detail::sgn(w);
      if (is_bias)
        out.grads_w.layers[l].b[idx] += g;
      else
        out.grads_w.layers[l].w[idx] += g;
    });
    for (size_t j = 0; j < mag.size(); ++j)
      out.grads_q[j] += T(cfg.lambda) * T(2) * (q.scores[j] - sig[j]);
  }

  if (!std::isfinite(out.l_tr + out.l_pr + out.l_ir))
    throw RunError("loss_and_grads: non-finite composite loss");
  return out;
}

template <Scalar T>
LossGrads<T> loss_and_grads(const Arch& arch, const ParamSet<T>& params,
                            const ImportanceIndicator<T>& q, const ParamSet<T>& global_params,
                            const Batch<T>& batch, const LossConfig& cfg, SparseRatio s) {
  const UnitLayout layout = UnitLayout::of(arch);
  const UnitMask mask = build_mask(derive_pattern(q, s, layout), arch);
  return loss_and_grads_masked(arch, params, q, global_params, batch, cfg, mask);
}

template <Scalar T>
double evaluate(const Arch& arch, const ParamSet<T>& personal_params_masked, const Dataset& ds,
                const std::vector<int>& indices) {
  if (indices.empty()) throw ConfigError("evaluate: empty split");
  Batch<T> batch;
  batch.size = int(indices.size());
  batch.dim = ds.dim;
  batch.inputs.resize(size_t(batch.size) * ds.dim);
  batch.labels.resize(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const double* src = ds.features.data() + size_t(indices[i]) * ds.dim;
    T* dst = batch.inputs.data() + i * size_t(ds.dim);
    for (int d = 0; d < ds.dim; ++d) dst[d] = T(src[d]);
    batch.labels[i] = ds.labels[size_t(indices[i])];
  }
  const UnitMask ones = UnitMask::all_ones(arch);
  const auto cache = forward(arch, personal_params_masked, ones, batch);
  const auto& logits = logits_of(cache);
  const int classes = arch.back().out_dim;
  int correct = 0;
  for (int s = 0; s < batch.size; ++s) {
    const T* zs = logits.data() + size_t(s) * classes;
    int arg = 0;
    for (int i = 1; i < classes; ++i)
      if (zs[i] > zs[arg]) arg = i;
    if (arg == batch.labels[size_t(s)]) ++correct;
  }
  return 100.0 * double(correct) / double(batch.size);
}

template <Scalar T>
Batch<T> sample_batch(const Dataset& ds, const std::vector<int>& pool, int batch_size, Rng& rng) {
  if (pool.empty()) throw ConfigError("sample_batch: empty training pool");
  Batch<T> b;
  b.size = batch_size;
  b.dim = ds.dim;
  b.inputs.resize(size_t(batch_size) * ds.dim);
  b.labels.resize(size_t(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    const int idx = pool[size_t(rng.next_below(pool.size()))];
    const double* src = ds.features.data() + size_t(idx) * ds.dim;
    T* dst = b.inputs.data() + size_t(i) * ds.dim;
    for (int d = 0; d < ds.dim; ++d) dst[d] = T(src[d]);
    b.labels[size_t(i)] = ds.labels[size_t(idx)];
  }
  return b;
}

template <Scalar T>
struct ClientOutcome {
  ClientReport<T> report;
  CostReport cost;
  double ratio_sampled = 1.0;
  double ratio_effective = 1.0;
  double mean_l_tr = 0, mean_l_pr = 0, mean_l_ir = 0;
  ParamSet<T> personal;  // omega_E o m_E, kept client-side for evaluation
  ImportanceIndicator<T> q_final;
};

// One ClientUpdate: initialize from the broadcast model, E iterations of
// joint (omega, Q) SGD with the pattern rebuilt from the current Q every
// iteration, then residual construction and cost accounting.
//
// pattern_fn(params, q, ratio) supplies the pattern; the learnable default is
// derive_pattern. Heuristic baselines swap this hook and nothing else.
template <Scalar T, class PatternFn>
ClientOutcome<T> client_update(const Arch& arch, const ClientState<T>& state,
                               const ParamSet<T>& global_params, SparseRatio s_sampled,
                               const LossConfig& cfg, const DeviceProfile& profile, double alpha,
                               double s_min, Rng& batch_rng, PatternFn&& pattern_fn) {
  if (!state.data || !state.split) throw ConfigError("client_update: client has no dataset");
  if (state.split->train.empty())
    throw ConfigError(strf("client_update: client %d has an empty local dataset", state.client_id));

  ClientOutcome<T> out;
  out.ratio_sampled = s_sampled.value;
  // capability clamp: a ratio above z_k is reset to z_k
  const double effective = std::clamp(std::min(s_sampled.value, state.capability), s_min, 1.0);
  out.ratio_effective = effective;
  const SparseRatio s{effective};

  ParamSet<T> params = global_params;
  ImportanceIndicator<T> q = state.q;

  double acc_sum = 0;
  double flops = 0;
  UnitMask mask;
  try {
    for (int iter = 0; iter < cfg.local_iters; ++iter) {
      mask = build_mask(pattern_fn(params, q, s), arch);
      const Batch<T> batch = sample_batch<T>(*state.data, state.split->train, cfg.batch_size,
                                             batch_rng);
      auto lg = loss_and_grads_masked(arch, params, q, global_params, batch, cfg, mask);
      sgd_step(params, lg.grads_w, cfg.lr, cfg.grad_clip);
      const bool q_moves = cfg.q_grad == QGradMode::ste || cfg.lambda != 0;
      if (q_moves) vec_sgd_step(q.scores, lg.grads_q, cfg.lr, cfg.grad_clip);
      acc_sum += lg.batch_accuracy;
      out.mean_l_tr += lg.l_tr;
      out.mean_l_pr += lg.l_pr;
      out.mean_l_ir += lg.l_ir;
      flops += flops_of_round(arch, mask, cfg.batch_size, 1);
    }
  } catch (const RunError& e) {
    throw RunError(strf("client %d: %s", state.client_id, e.what()));
  }
  const int iters = std::max(1, cfg.local_iters);
  out.mean_l_tr /= iters;
  out.mean_l_pr /= iters;
  out.mean_l_ir /= iters;

  // final pattern/mask from the trained Q (and trained params, for heuristics)
  const SparsePattern final_pattern = pattern_fn(params, q, s);
  mask = build_mask(final_pattern, arch);

  out.personal = params;
  mask.hadamard(arch, out.personal);
  out.q_final = std::move(q);

  out.report.pattern = final_pattern;
  out.report.sample_count = int(state.split->train.size());
  out.report.residual = GradSet<T>::zeros(arch);
  for (size_t l = 0; l < arch.size(); ++l) {
    const int in = arch[l].in_dim, outd = arch[l].out_dim;
    for (int i = 0; i < outd; ++i) {
      for (int j = 0; j < in; ++j) {
        const size_t idx = size_t(i) * in + j;
        if (mask.weight_bit(l, i, j))
          out.report.residual.layers[l].w[idx] =
              global_params.layers[l].w[idx] - params.layers[l].w[idx];
      }
      if (mask.bias_bit(l, i))
        out.report.residual.layers[l].b[size_t(i)] =
            global_params.layers[l].b[size_t(i)] - params.layers[l].b[size_t(i)];
    }
  }

  if (cfg.local_iters > 0) {
    out.report.train_accuracy = 100.0 * acc_sum / cfg.local_iters;
  }
  if (cfg.acc_probe && !state.split->test.empty())
    out.report.train_accuracy = evaluate(arch, out.personal, *state.data, state.split->test);

  out.cost.flops = flops;
  out.cost.upload_params = upload_size(mask, arch);
  out.cost.local_time = local_cost(out.cost.flops, out.cost.upload_params, profile, alpha);
  out.report.local_cost = out.cost.local_time;
  return out;
}

template <Scalar T>
ClientOutcome<T> client_update_learnable(const Arch& arch, const ClientState<T>& state,
                                         const ParamSet<T>& global_params, SparseRatio s_sampled,
                                         const LossConfig& cfg, const DeviceProfile& profile,
                                         double alpha, double s_min, Rng& batch_rng) {
  const UnitLayout layout = UnitLayout::of(arch);
  return client_update(arch, state, global_params, s_sampled, cfg, profile, alpha, s_min,
                       batch_rng,
                       [&](const ParamSet<T>&, const ImportanceIndicator<T>& q, SparseRatio s) {
                         return derive_pattern(q, s, layout);
                       });
}

}  // namespace fedlps
