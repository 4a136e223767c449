#include <catch2/catch_amalgamated.hpp>

#include "fedlps/baselines.hpp"
#include "fedlps/orchestrator.hpp"

using namespace fedlps;

namespace {

Arch hidden4() {
  return {{1, 4, Activation::relu}, {4, 1, Activation::identity}};
}

}  // namespace

TEST_CASE("heuristic_pattern: ordered keeps the index prefix") {
  const Arch arch = hidden4();
  const auto p = heuristic_pattern(PatternKind::ordered, ParamSet<double>::zeros(arch), arch,
                                   SparseRatio{0.5}, Rng(1));
  REQUIRE(p.bits == std::vector<uint8_t>{1, 1, 0, 0});
}

TEST_CASE("heuristic_pattern: magnitude keeps the largest incident sums") {
  const Arch arch = hidden4();
  ParamSet<double> params = ParamSet<double>::zeros(arch);
  params.layers[0].w = {3, 1, 4, 2};  // |w|_J = [3, 1, 4, 2]
  const auto p =
      heuristic_pattern(PatternKind::magnitude, params, arch, SparseRatio{0.5}, Rng(1));
  REQUIRE(p.bits == std::vector<uint8_t>{1, 0, 1, 0});
}

TEST_CASE("heuristic_pattern: random is a pure function of its rng") {
  const Arch arch = hidden4();
  const auto params = init_params<double>(arch, 3);
  const auto a = heuristic_pattern(PatternKind::random, params, arch, SparseRatio{0.5}, Rng(9));
  const auto b = heuristic_pattern(PatternKind::random, params, arch, SparseRatio{0.5}, Rng(9));
  const auto c = heuristic_pattern(PatternKind::random, params, arch, SparseRatio{0.5}, Rng(10));
  REQUIRE(a.bits == b.bits);
  // with 4 choose 2 options a different seed usually differs; just check validity
  int pop = 0;
  for (uint8_t bit : c.bits) pop += bit;
  REQUIRE(pop == 2);
}

TEST_CASE("all strategies satisfy the cardinality invariant, differing only in sets") {
  const Arch arch = {{6, 10, Activation::relu}, {10, 3, Activation::softmax_logits}};
  const UnitLayout layout = UnitLayout::of(arch);
  const auto params = init_params<double>(arch, 5);
  ImportanceIndicator<double> q;
  Rng qr(7);
  for (int j = 0; j < layout.total; ++j) q.scores.push_back(qr.next_double());
  for (double s : {0.2, 0.35, 0.7, 1.0}) {
    std::vector<SparsePattern> pats;
    pats.push_back(derive_pattern(q, SparseRatio{s}, layout));
    for (PatternKind k : {PatternKind::random, PatternKind::ordered, PatternKind::magnitude})
      pats.push_back(heuristic_pattern(k, params, arch, SparseRatio{s}, Rng(11)));
    const int want = retained_units(s, 10);
    for (const auto& p : pats) {
      int pop = 0;
      for (uint8_t bit : p.bits) pop += bit;
      REQUIRE(pop == want);
    }
  }
}

TEST_CASE("rcr_ratio: capability-pinned ratios") {
  REQUIRE(rcr_ratio(1.0, 0.05).value == 1.0);
  REQUIRE(rcr_ratio(0.0625, 0.05).value == 0.0625);
  REQUIRE(rcr_ratio(0.25, 0.05).value == 0.25);
  REQUIRE(rcr_ratio(0.01, 0.05).value == 0.05);  // floor engages below s_min
}

TEST_CASE("fedavg_reference: single client, single iteration is one SGD step") {
  RunConfig cfg;
  cfg.seed = 21;
  cfg.clients = 1;
  cfg.classes = 3;
  cfg.feature_dim = 6;
  cfg.per_class = 20;
  cfg.classes_per_client = 3;
  cfg.hidden = {4};
  cfg.rounds = 1;
  cfg.select_fraction = 1.0;
  cfg.local_iters = 1;
  cfg.batch_size = 5;
  cfg.mu = 0;
  cfg.lambda = 0;
  const RunSetup setup = build_setup(cfg);
  const auto ref = fedavg_reference<double>(cfg, setup);

  // manual: one forward/backward/step on the same batch stream
  ParamSet<double> params = init_params<double>(setup.arch, cfg.seed);
  Rng brng = stream(cfg.seed, StreamKind::batch, 0, 0);
  const auto batch = sample_batch<double>(setup.data, setup.plan.clients[0].train, 5, brng);
  const UnitMask ones = UnitMask::all_ones(setup.arch);
  const auto cache = forward(setup.arch, params, ones, batch);
  const auto bwd = backward(setup.arch, params, ones, batch, cache);
  sgd_step(params, bwd.grads, cfg.lr);

  // single-client aggregation collapses to the local model
  bool equal = true;
  zip_params(ref.final_params, params,
             [&](const double& a, const double& b) { equal = equal && (a == b); });
  REQUIRE(equal);
}

TEST_CASE("fedavg_reference: seeded runs reproduce digests") {
  RunConfig cfg;
  cfg.seed = 22;
  cfg.clients = 3;
  cfg.classes = 3;
  cfg.feature_dim = 6;
  cfg.per_class = 30;
  cfg.classes_per_client = 2;
  cfg.hidden = {5};
  cfg.rounds = 3;
  cfg.select_fraction = 0.67;
  cfg.local_iters = 2;
  cfg.batch_size = 4;
  const auto a = fedavg_reference<double>(cfg);
  const auto b = fedavg_reference<double>(cfg);
  REQUIRE(a.digests == b.digests);
}
