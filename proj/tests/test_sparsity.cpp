#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "fedlps/sparsity.hpp"

using namespace fedlps;

namespace {

Arch arch_643() {
  return {{6, 4, Activation::relu}, {4, 3, Activation::softmax_logits}};
}

// per-edge enumeration oracle for the parameter-level mask popcount
size_t enumerate_retained(const Arch& arch, const SparsePattern& pattern) {
  const UnitLayout layout = UnitLayout::of(arch);
  auto unit_bit = [&](size_t layer, int u) -> int {
    // layer indexes activations: 0 = input, arch.size() = output
    if (layer == 0 || layer == arch.size()) return 1;
    return pattern.bits[size_t(layout.offsets[layer - 1] + u)];
  };
  size_t count = 0;
  for (size_t l = 0; l < arch.size(); ++l) {
    for (int i = 0; i < arch[l].out_dim; ++i) {
      for (int j = 0; j < arch[l].in_dim; ++j)
        if (unit_bit(l + 1, i) && unit_bit(l, j)) ++count;
      if (unit_bit(l + 1, i)) ++count;  // bias
    }
  }
  return count;
}

}  // namespace

TEST_CASE("derive_pattern: s = 1 keeps everything") {
  const UnitLayout layout{{4}, {0}, 4};
  ImportanceIndicator<double> q{{0.4, 0.1, 0.9, 0.2}};
  const auto p = derive_pattern(q, SparseRatio{1.0}, layout);
  REQUIRE(p.bits == std::vector<uint8_t>{1, 1, 1, 1});
}

TEST_CASE("derive_pattern: top-half selection on a single layer") {
  const UnitLayout layout{{4}, {0}, 4};
  ImportanceIndicator<double> q{{0.1, 0.5, 0.9, 0.3}};
  const auto p = derive_pattern(q, SparseRatio{0.5}, layout);
  REQUIRE(p.bits == std::vector<uint8_t>{0, 1, 1, 0});
}

TEST_CASE("derive_pattern: ties retain the lower unit index") {
  const UnitLayout layout{{4}, {0}, 4};
  ImportanceIndicator<double> q{{0.5, 0.5, 0.5, 0.5}};
  const auto p = derive_pattern(q, SparseRatio{0.5}, layout);
  REQUIRE(p.bits == std::vector<uint8_t>{1, 1, 0, 0});
}

TEST_CASE("derive_pattern: matches a brute-force sort oracle") {
  const UnitLayout layout{{20}, {0}, 20};
  Rng rng(17);
  ImportanceIndicator<double> q;
  for (int i = 0; i < 20; ++i) q.scores.push_back(rng.next_double());
  const double s = 0.35;
  const auto p = derive_pattern(q, SparseRatio{s}, layout);

  // oracle: sort (score desc, index asc), keep first max(1, round(s*20))
  std::vector<int> idx(20);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (q.scores[size_t(a)] != q.scores[size_t(b)]) return q.scores[size_t(a)] > q.scores[size_t(b)];
    return a < b;
  });
  std::vector<uint8_t> expect(20, 0);
  const int keep = std::max(1, int(std::llround(s * 20)));
  for (int k = 0; k < keep; ++k) expect[size_t(idx[size_t(k)])] = 1;
  REQUIRE(p.bits == expect);
}

TEST_CASE("derive_pattern: cardinality and nesting across the ratio grid") {
  const UnitLayout layout{{7, 5}, {0, 7}, 12};
  Rng rng(23);
  for (int rep = 0; rep < 10; ++rep) {
    ImportanceIndicator<double> q;
    for (int i = 0; i < 12; ++i) q.scores.push_back(rng.next_double());
    std::vector<uint8_t> prev;
    for (int step = 1; step <= 20; ++step) {
      const double s = 0.05 * step;
      const auto p = derive_pattern(q, SparseRatio{s}, layout);
      for (size_t l = 0; l < layout.widths.size(); ++l) {
        int pop = 0;
        for (int u = 0; u < layout.widths[l]; ++u) pop += p.bits[size_t(layout.offsets[l] + u)];
        REQUIRE(pop == retained_units(s, layout.widths[l]));
      }
      if (!prev.empty())
        for (size_t j = 0; j < p.bits.size(); ++j) REQUIRE(!(prev[j] == 1 && p.bits[j] == 0));
      prev = p.bits;
    }
  }
}

TEST_CASE("derive_pattern: permutation equivariance within a layer") {
  const UnitLayout layout{{6}, {0}, 6};
  Rng rng(29);
  ImportanceIndicator<double> q;
  for (int i = 0; i < 6; ++i) q.scores.push_back(rng.next_double());
  const auto p = derive_pattern(q, SparseRatio{0.5}, layout);

  std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  ImportanceIndicator<double> qp;
  qp.scores.resize(6);
  for (int i = 0; i < 6; ++i) qp.scores[size_t(perm[size_t(i)])] = q.scores[size_t(i)];
  const auto pp = derive_pattern(qp, SparseRatio{0.5}, layout);
  for (int i = 0; i < 6; ++i) REQUIRE(pp.bits[size_t(perm[size_t(i)])] == p.bits[size_t(i)]);
}

TEST_CASE("build_mask: all-ones pattern gives the all-ones mask") {
  const Arch arch = arch_643();
  SparsePattern p{std::vector<uint8_t>(4, 1)};
  const UnitMask m = build_mask(p, arch);
  REQUIRE(m.is_all_ones());
  REQUIRE(m.retained_param_count(arch) == param_count(arch));
}

TEST_CASE("build_mask: 2-2-2 with pattern [1,0] zeroes row 2 and column 2") {
  const Arch arch = {{2, 2, Activation::relu}, {2, 2, Activation::softmax_logits}};
  SparsePattern p{{1, 0}};
  const UnitMask m = build_mask(p, arch);
  REQUIRE(m.weight_bit(0, 0, 0) == 1);
  REQUIRE(m.weight_bit(0, 0, 1) == 1);
  REQUIRE(m.weight_bit(0, 1, 0) == 0);
  REQUIRE(m.weight_bit(0, 1, 1) == 0);
  REQUIRE(m.bias_bit(0, 1) == 0);
  REQUIRE(m.weight_bit(1, 0, 0) == 1);
  REQUIRE(m.weight_bit(1, 0, 1) == 0);
  REQUIRE(m.weight_bit(1, 1, 1) == 0);
  REQUIRE(m.bias_bit(1, 0) == 1);
}

TEST_CASE("build_mask: popcount equals the edge-enumeration oracle") {
  const Arch arch = arch_643();
  Rng rng(31);
  for (int rep = 0; rep < 25; ++rep) {
    SparsePattern p;
    for (int i = 0; i < 4; ++i) p.bits.push_back(uint8_t(rng.next_below(2)));
    if (std::count(p.bits.begin(), p.bits.end(), 1) == 0) p.bits[0] = 1;
    const UnitMask m = build_mask(p, arch);
    REQUIRE(m.retained_param_count(arch) == enumerate_retained(arch, p));
  }
}

TEST_CASE("build_mask: rejects wrong pattern length") {
  REQUIRE_THROWS_AS(build_mask(SparsePattern{{1, 0, 1}}, arch_643()), std::logic_error);
}

TEST_CASE("magnitude_summary: closed-form cases") {
  SECTION("zero parameters give the zero vector") {
    const Arch arch = arch_643();
    const auto m = magnitude_summary(ParamSet<double>::zeros(arch), arch);
    for (double v : m) REQUIRE(v == 0.0);
  }
  SECTION("1-1-1 chain sums incident magnitudes") {
    const Arch arch = {{1, 1, Activation::relu}, {1, 1, Activation::softmax_logits}};
    ParamSet<double> p = ParamSet<double>::zeros(arch);
    p.layers[0].w = {2.0};
    p.layers[0].b = {-1.0};
    p.layers[1].w = {3.0};
    const auto m = magnitude_summary(p, arch);
    REQUIRE(m.size() == 1);
    REQUIRE(m[0] == 6.0);
  }
}

TEST_CASE("magnitude_summary: matches a per-edge enumeration oracle") {
  const Arch arch = {{4, 3, Activation::relu}, {3, 2, Activation::softmax_logits}};
  Rng rng(37);
  ParamSet<double> p = ParamSet<double>::zeros(arch);
  p.for_each([&](double& v) { v = rng.uniform(-2, 2); });
  const auto m = magnitude_summary(p, arch);
  for (int u = 0; u < 3; ++u) {
    double expect = 0;
    for (int j = 0; j < 4; ++j) expect += std::abs(p.layers[0].w[size_t(u) * 4 + j]);
    expect += std::abs(p.layers[0].b[size_t(u)]);
    for (int i = 0; i < 2; ++i) expect += std::abs(p.layers[1].w[size_t(i) * 3 + u]);
    REQUIRE_THAT(m[size_t(u)], Catch::Matchers::WithinRel(expect, 1e-12));
  }
}

TEST_CASE("sparsity_of: all-ones mask is fully dense") {
  const Arch arch = arch_643();
  REQUIRE(sparsity_of(UnitMask::all_ones(arch), arch) == 1.0);
}

TEST_CASE("sparsity_of: floor-pruned 4-4-4-2 matches the hand count") {
  const Arch arch = {
      {4, 4, Activation::relu}, {4, 4, Activation::relu}, {4, 2, Activation::softmax_logits}};
  SparsePattern p{{1, 0, 0, 0, 1, 0, 0, 0}};
  const UnitMask m = build_mask(p, arch);
  // retained maskable: 4 (w0 row) + 1 (b0) + 1 (w1) + 1 (b1) + 2 (w2 col) = 9 of 48
  REQUIRE(sparsity_of(m, arch) == 9.0 / 48.0);
}

TEST_CASE("sparsity_of: s = 0.5 on uniform wide layers lands in [0.25, 0.5]") {
  const Arch arch = {{32, 32, Activation::relu},
                     {32, 32, Activation::relu},
                     {32, 10, Activation::softmax_logits}};
  const UnitLayout layout = UnitLayout::of(arch);
  Rng rng(41);
  ImportanceIndicator<double> q;
  for (int i = 0; i < layout.total; ++i) q.scores.push_back(rng.next_double());
  const UnitMask m = build_mask(derive_pattern(q, SparseRatio{0.5}, layout), arch);
  const double s = sparsity_of(m, arch);
  REQUIRE(s >= 0.25);
  REQUIRE(s <= 0.5);
}

TEST_CASE("mask application is idempotent") {
  const Arch arch = arch_643();
  const UnitLayout layout = UnitLayout::of(arch);
  Rng rng(43);
  ImportanceIndicator<double> q;
  for (int i = 0; i < layout.total; ++i) q.scores.push_back(rng.next_double());
  const UnitMask m = build_mask(derive_pattern(q, SparseRatio{0.4}, layout), arch);
  ParamSet<double> p = init_params<double>(arch, 5);
  ParamSet<double> once = p;
  m.hadamard(arch, once);
  ParamSet<double> twice = once;
  m.hadamard(arch, twice);
  bool equal = true;
  zip_params(once, twice, [&](const double& a, const double& b) { equal = equal && (a == b); });
  REQUIRE(equal);
}

TEST_CASE("clamp_ratio respects the configured floor") {
  REQUIRE(clamp_ratio(0.01, 0.05).value == 0.05);
  REQUIRE(clamp_ratio(1.7, 0.05).value == 1.0);
  REQUIRE(clamp_ratio(0.3, 0.05).value == 0.3);
}
