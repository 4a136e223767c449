#pragma once

#include "fedlps/config.hpp"
#include "fedlps/sparsity.hpp"

// Heuristic sparse-pattern strategies and the resource-controlled ratio rule.
// Baselines share the whole training loop; only the pattern/ratio hooks differ.

namespace fedlps {

// random: uniform choice of n_keep units per layer (pure function of the rng
// seed, so a re-call with the same stream reproduces the pattern).
// ordered: keep the lowest n_keep unit indices per layer (contiguous prefix
// submodel convention).
// magnitude: keep the top n_keep by summed incident parameter magnitude.
template <Scalar T>
SparsePattern heuristic_pattern(PatternKind kind, const ParamSet<T>& params, const Arch& arch,
                                SparseRatio s, Rng rng) {
  const UnitLayout layout = UnitLayout::of(arch);
  SparsePattern p;
  p.bits.assign(size_t(layout.total), 0);
  switch (kind) {
    case PatternKind::learnable:
      throw std::logic_error("heuristic_pattern: learnable is not a heuristic");
    case PatternKind::ordered:
      for (size_t l = 0; l < layout.widths.size(); ++l) {
        const int keep = std::min(retained_units(s.value, layout.widths[l]), layout.widths[l]);
        for (int u = 0; u < keep; ++u) p.bits[size_t(layout.offsets[l] + u)] = 1;
      }
      return p;
    case PatternKind::random:
      for (size_t l = 0; l < layout.widths.size(); ++l) {
        const int width = layout.widths[l];
        const int keep = std::min(retained_units(s.value, width), width);
        std::vector<int> idx(static_cast<size_t>(width));
        std::iota(idx.begin(), idx.end(), 0);
        for (size_t i = idx.size(); i > 1; --i)
          std::swap(idx[i - 1], idx[size_t(rng.next_below(i))]);
        for (int u = 0; u < keep; ++u) p.bits[size_t(layout.offsets[l] + idx[size_t(u)])] = 1;
      }
      return p;
    case PatternKind::magnitude: {
      ImportanceIndicator<T> q;
      q.scores = magnitude_summary(params, arch);
      return derive_pattern(q, s, layout);
    }
  }
  throw std::logic_error("heuristic_pattern: bad kind");
}

// RCR: the ratio is pinned to the device capability for the whole run.
inline SparseRatio rcr_ratio(double capability, double s_min) {
  return SparseRatio{std::max(capability, s_min)};
}

}  // namespace fedlps
