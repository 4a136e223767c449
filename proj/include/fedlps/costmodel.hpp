#pragma once

#include <algorithm>
#include <vector>

#include "fedlps/sparsity.hpp"

// FLOP and upload accounting plus the local/global time-cost formulas.
//
// FLOP convention (fixed here, documented once): one retained weight is one
// multiply-accumulate; a MAC costs 2 FLOPs forward, and forward+backward cost
// 3x the forward pass, so one local iteration costs
//   6 * retained_weight_count * batch_size
// FLOPs. Bias adds and importance-indicator updates are excluded (negligible
// next to the MAC volume).

namespace fedlps {

struct DeviceProfile {
  double flops_capacity = 727e9;    // F_k, FLOPs/second at z = 1
  double bandwidth_capacity = 1e6;  // B_k, parameters/second at z = 1
  double capability = 1.0;          // z_k
};

inline DeviceProfile profile_for(double z, double base_flops = 727e9, double base_bw = 1e6) {
  return DeviceProfile{base_flops * z, base_bw * z, z};
}

struct CostReport {
  double flops = 0;        // F-hat
  uint64_t upload_params = 0;  // B-hat, in 32-bit parameter slots
  double local_time = 0;   // T, simulated seconds
};

inline double flops_of_round(const Arch& arch, const UnitMask& mask, int samples, int local_iters) {
  const double macs = double(mask.retained_weight_count(arch));
  return 6.0 * macs * double(samples) * double(local_iters);
}

// Upload = retained parameter slots + the bit-packed pattern, counted in
// 32-bit words so pattern overhead is commensurable with float32 parameters.
inline uint64_t upload_size(const UnitMask& mask, const Arch& arch) {
  const uint64_t retained = mask.retained_param_count(arch);
  const uint64_t j = uint64_t(total_hidden_units(arch));
  return retained + (j + 31) / 32;
}

inline double local_cost(double flops, uint64_t upload, const DeviceProfile& profile,
                         double alpha) {
  if (alpha < 0) throw ConfigError("local_cost: alpha must be >= 0");
  if (profile.flops_capacity <= 0 || profile.bandwidth_capacity <= 0)
    throw ConfigError("local_cost: capacities must be positive");
  return flops / profile.flops_capacity + alpha * double(upload) / profile.bandwidth_capacity;
}

// Synchronous aggregation: the round costs as much as its slowest client.
inline double global_cost(const std::vector<double>& local_times) {
  if (local_times.empty()) throw ConfigError("global_cost: empty round");
  return *std::max_element(local_times.begin(), local_times.end());
}

}  // namespace fedlps
