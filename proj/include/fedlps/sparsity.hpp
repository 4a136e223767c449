#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "fedlps/netcore.hpp"

// Unit-wise importance indicators, importance-derived sparse patterns, and
// mask construction. One score per sparsifiable unit (hidden neuron), indexed
// flat across hidden layers.

namespace fedlps {

struct UnitLayout {
  std::vector<int> widths;   // hidden layer widths
  std::vector<int> offsets;  // flat index of each hidden layer's first unit
  int total = 0;             // J

  static UnitLayout of(const Arch& arch) {
    UnitLayout lo;
    lo.widths = hidden_widths(arch);
    lo.offsets.resize(lo.widths.size());
    for (size_t l = 0; l < lo.widths.size(); ++l) {
      lo.offsets[l] = lo.total;
      lo.total += lo.widths[l];
    }
    return lo;
  }
};

template <Scalar T>
struct ImportanceIndicator {
  std::vector<T> scores;  // length J

  bool all_finite() const {
    for (T v : scores)
      if (!std::isfinite(double(v))) return false;
    return true;
  }
};

struct SparsePattern {
  std::vector<uint8_t> bits;  // length J, 1 = unit retained
};

struct SparseRatio {
  double value = 1.0;
};

inline constexpr double kDefaultSMin = 0.05;

inline SparseRatio clamp_ratio(double v, double s_min) {
  return SparseRatio{std::clamp(v, s_min, 1.0)};
}

inline int retained_units(double s, int width) {
  return std::max<long long>(1, std::llround(s * width));
}

// Top-k selection per layer: exactly max(1, round(s*width)) highest-scoring
// units keep their bit, ties resolved toward the lower unit index. This is the
// quantile-threshold step function realized exactly.
template <Scalar T>
SparsePattern derive_pattern(const ImportanceIndicator<T>& q, SparseRatio s,
                             const UnitLayout& layout) {
  if (int(q.scores.size()) != layout.total)
    throw std::logic_error("derive_pattern: indicator length mismatch");
  SparsePattern p;
  p.bits.assign(size_t(layout.total), 0);
  std::vector<int> order;
  for (size_t l = 0; l < layout.widths.size(); ++l) {
    const int width = layout.widths[l], off = layout.offsets[l];
    const int n_keep = retained_units(s.value, width);
    order.resize(size_t(width));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return q.scores[size_t(off + a)] > q.scores[size_t(off + b)];
    });
    for (int k = 0; k < std::min(n_keep, width); ++k) p.bits[size_t(off + order[size_t(k)])] = 1;
  }
  return p;
}

inline UnitMask build_mask(const SparsePattern& pattern, const Arch& arch) {
  const UnitLayout layout = UnitLayout::of(arch);
  if (int(pattern.bits.size()) != layout.total)
    throw std::logic_error("build_mask: pattern length does not match architecture");
  UnitMask m;
  m.keep.resize(layout.widths.size());
  for (size_t l = 0; l < layout.widths.size(); ++l) {
    const int off = layout.offsets[l];
    m.keep[l].assign(pattern.bits.begin() + off, pattern.bits.begin() + off + layout.widths[l]);
  }
  return m;
}

inline SparsePattern pattern_of(const UnitMask& mask) {
  SparsePattern p;
  for (const auto& ly : mask.keep) p.bits.insert(p.bits.end(), ly.begin(), ly.end());
  return p;
}

// |w|_J: per unit, the summed absolute value of every incident parameter
// (incoming row + bias + outgoing column).
template <Scalar T>
std::vector<T> magnitude_summary(const ParamSet<T>& params, const Arch& arch) {
  const UnitLayout layout = UnitLayout::of(arch);
  std::vector<T> m(size_t(layout.total), T(0));
  for (size_t l = 0; l < layout.widths.size(); ++l) {
    const int width = layout.widths[l], off = layout.offsets[l];
    const int in = arch[l].in_dim;
    const int out_next = arch[l + 1].out_dim;
    for (int u = 0; u < width; ++u) {
      T sum = T(0);
      const T* row = params.layers[l].w.data() + size_t(u) * in;
      for (int j = 0; j < in; ++j) sum += std::abs(row[j]);
      sum += std::abs(params.layers[l].b[size_t(u)]);
      for (int i = 0; i < out_next; ++i)
        sum += std::abs(params.layers[l + 1].w[size_t(i) * width + u]);
      m[size_t(off + u)] = sum;
    }
  }
  return m;
}

// Retained fraction of the maskable parameter set. A parameter is maskable if
// some pattern can zero it: weights with at least one hidden-side endpoint and
// hidden-unit biases. Output biases (and everything in a no-hidden-layer net)
// are always-on and excluded from the ratio.
inline double sparsity_of(const UnitMask& mask, const Arch& arch) {
  size_t maskable = 0, retained = 0;
  const size_t last = arch.size() - 1;
  for (size_t l = 0; l < arch.size(); ++l) {
    const bool out_hidden = l < last;
    const bool in_hidden = l > 0;
    if (out_hidden || in_hidden) {
      for (int i = 0; i < arch[l].out_dim; ++i)
        for (int j = 0; j < arch[l].in_dim; ++j) {
          ++maskable;
          retained += mask.weight_bit(l, i, j);
        }
    }
    if (out_hidden) {
      for (int i = 0; i < arch[l].out_dim; ++i) {
        ++maskable;
        retained += mask.bias_bit(l, i);
      }
    }
  }
  return maskable == 0 ? 1.0 : double(retained) / double(maskable);
}

}  // namespace fedlps
