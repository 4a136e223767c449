#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fedlps/netcore.hpp"
#include "fedlps/sparsity.hpp"

using namespace fedlps;

namespace {

Arch arch_222() {
  return {{2, 2, Activation::relu}, {2, 2, Activation::softmax_logits}};
}

ParamSet<double> hand_params_222() {
  ParamSet<double> p = ParamSet<double>::zeros(arch_222());
  p.layers[0].w = {0.5, -0.3, 0.8, 0.2};
  p.layers[0].b = {0.1, -0.2};
  p.layers[1].w = {1.0, -1.0, 0.3, 0.7};
  p.layers[1].b = {0.05, -0.05};
  return p;
}

Batch<double> one_sample(std::vector<double> x, int label) {
  Batch<double> b;
  b.size = 1;
  b.dim = int(x.size());
  b.inputs = std::move(x);
  b.labels = {label};
  return b;
}

// scalar-arithmetic oracle for the 2-2-2 net, written without any matrix code
std::array<double, 2> oracle_222(const ParamSet<double>& p, double x0, double x1) {
  double z0 = p.layers[0].b[0];
  z0 += p.layers[0].w[0] * x0;
  z0 += p.layers[0].w[1] * x1;
  double z1 = p.layers[0].b[1];
  z1 += p.layers[0].w[2] * x0;
  z1 += p.layers[0].w[3] * x1;
  const double a0 = z0 > 0 ? z0 : 0;
  const double a1 = z1 > 0 ? z1 : 0;
  double o0 = p.layers[1].b[0];
  o0 += p.layers[1].w[0] * a0;
  o0 += p.layers[1].w[1] * a1;
  double o1 = p.layers[1].b[1];
  o1 += p.layers[1].w[2] * a0;
  o1 += p.layers[1].w[3] * a1;
  return {o0, o1};
}

double task_loss_value(const Arch& arch, const ParamSet<double>& p, const UnitMask& m,
                       const Batch<double>& batch) {
  auto cache = forward(arch, p, m, batch);
  const auto& logits = logits_of(cache);
  const int classes = arch.back().out_dim;
  double total = 0;
  for (int s = 0; s < batch.size; ++s) {
    const double* zs = logits.data() + size_t(s) * classes;
    double zmax = zs[0];
    for (int i = 1; i < classes; ++i) zmax = std::max(zmax, zs[i]);
    double denom = 0;
    for (int i = 0; i < classes; ++i) denom += std::exp(zs[i] - zmax);
    total += std::log(denom) - (zs[batch.labels[size_t(s)]] - zmax);
  }
  return total / batch.size;
}

}  // namespace

TEST_CASE("forward: zero parameters give zero logits") {
  const Arch arch = arch_222();
  const auto p = ParamSet<double>::zeros(arch);
  const auto mask = UnitMask::all_ones(arch);
  const auto cache = forward(arch, p, mask, one_sample({0.3, 0.7}, 0));
  for (double v : logits_of(cache)) REQUIRE(v == 0.0);
}

TEST_CASE("forward: hand-set 2-2-2 net matches the scalar oracle") {
  const Arch arch = arch_222();
  const auto p = hand_params_222();
  const auto mask = UnitMask::all_ones(arch);
  const auto cache = forward(arch, p, mask, one_sample({0.6, 0.9}, 1));
  const auto expect = oracle_222(p, 0.6, 0.9);
  REQUIRE(logits_of(cache)[0] == expect[0]);
  REQUIRE(logits_of(cache)[1] == expect[1]);
}

TEST_CASE("forward: masking a unit equals zeroing its incident weights") {
  const Arch arch = arch_222();
  const auto p = hand_params_222();
  UnitMask mask = UnitMask::all_ones(arch);
  mask.keep[0][1] = 0;

  ParamSet<double> zeroed = p;
  zeroed.layers[0].w[2] = zeroed.layers[0].w[3] = 0;  // incoming row of unit 1
  zeroed.layers[0].b[1] = 0;
  zeroed.layers[1].w[1] = zeroed.layers[1].w[3] = 0;  // outgoing column of unit 1

  const auto batch = one_sample({0.6, 0.9}, 0);
  const auto masked = forward(arch, p, mask, batch);
  const auto manual = forward(arch, zeroed, UnitMask::all_ones(arch), batch);
  REQUIRE(logits_of(masked) == logits_of(manual));
}

TEST_CASE("backward: uniform logits give ln(C) loss") {
  const Arch arch = {{3, 4, Activation::softmax_logits}};
  const auto p = ParamSet<double>::zeros(arch);
  const UnitMask mask;  // no hidden layers
  Batch<double> b;
  b.size = 2;
  b.dim = 3;
  b.inputs = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  b.labels = {1, 3};
  const auto cache = forward(arch, p, mask, b);
  const auto r = backward(arch, p, mask, b, cache);
  REQUIRE_THAT(r.task_loss, Catch::Matchers::WithinAbs(std::log(4.0), 1e-12));
}

TEST_CASE("backward: analytic gradients match central finite differences") {
  const Arch arch = {{4, 3, Activation::relu}, {3, 2, Activation::softmax_logits}};
  Rng rng(1234);
  ParamSet<double> p = ParamSet<double>::zeros(arch);
  p.for_each([&](double& v) { v = rng.uniform(-0.8, 0.8); });
  Batch<double> b;
  b.size = 3;
  b.dim = 4;
  for (int i = 0; i < 12; ++i) b.inputs.push_back(rng.next_double());
  b.labels = {0, 1, 1};

  UnitMask mask = UnitMask::all_ones(arch);
  mask.keep[0][2] = 0;

  const auto cache = forward(arch, p, mask, b);
  const auto r = backward(arch, p, mask, b, cache);

  const double h = 1e-5;
  for (size_t l = 0; l < arch.size(); ++l) {
    auto check = [&](std::vector<double>& vec, const std::vector<double>& grad) {
      for (size_t i = 0; i < vec.size(); ++i) {
        const double keep = vec[i];
        vec[i] = keep + h;
        const double up = task_loss_value(arch, p, mask, b);
        vec[i] = keep - h;
        const double dn = task_loss_value(arch, p, mask, b);
        vec[i] = keep;
        const double fd = (up - dn) / (2 * h);
        const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-7});
        REQUIRE(std::abs(fd - grad[i]) / scale <= 1e-4);
      }
    };
    check(p.layers[l].w, r.grads.layers[l].w);
    check(p.layers[l].b, r.grads.layers[l].b);
  }
}

TEST_CASE("backward: masked unit receives exactly zero gradient") {
  const Arch arch = {{4, 3, Activation::relu}, {3, 2, Activation::softmax_logits}};
  Rng rng(99);
  ParamSet<double> p = ParamSet<double>::zeros(arch);
  p.for_each([&](double& v) { v = rng.uniform(-1, 1); });
  Batch<double> b;
  b.size = 2;
  b.dim = 4;
  for (int i = 0; i < 8; ++i) b.inputs.push_back(rng.next_double());
  b.labels = {1, 0};
  UnitMask mask = UnitMask::all_ones(arch);
  const int j = 1;
  mask.keep[0][j] = 0;
  const auto cache = forward(arch, p, mask, b);
  const auto r = backward(arch, p, mask, b, cache);
  for (int col = 0; col < 4; ++col) REQUIRE(r.grads.layers[0].w[size_t(j) * 4 + col] == 0.0);
  REQUIRE(r.grads.layers[0].b[j] == 0.0);
  for (int row = 0; row < 2; ++row) REQUIRE(r.grads.layers[1].w[size_t(row) * 3 + j] == 0.0);
}

TEST_CASE("masked-unit isolation: perturbing incident weights changes nothing") {
  const Arch arch = {{3, 3, Activation::relu}, {3, 2, Activation::softmax_logits}};
  Rng rng(7);
  ParamSet<double> p = ParamSet<double>::zeros(arch);
  p.for_each([&](double& v) { v = rng.uniform(-1, 1); });
  Batch<double> b;
  b.size = 2;
  b.dim = 3;
  for (int i = 0; i < 6; ++i) b.inputs.push_back(rng.next_double());
  b.labels = {0, 1};
  UnitMask mask = UnitMask::all_ones(arch);
  mask.keep[0][2] = 0;

  const auto base = forward(arch, p, mask, b);
  const double base_loss = task_loss_value(arch, p, mask, b);
  for (double bump : {0.5, -2.0}) {
    ParamSet<double> q = p;
    q.layers[0].w[2 * 3 + 0] += bump;  // incoming
    q.layers[0].b[2] += bump;
    q.layers[1].w[0 * 3 + 2] += bump;  // outgoing
    const auto moved = forward(arch, q, mask, b);
    REQUIRE(logits_of(moved) == logits_of(base));
    REQUIRE(task_loss_value(arch, q, mask, b) == base_loss);
  }
}

TEST_CASE("sgd_step: arithmetic and norm clipping") {
  const Arch arch = {{1, 2, Activation::identity}};
  ParamSet<double> p = ParamSet<double>::zeros(arch);
  p.layers[0].w = {1.0, 1.0};
  GradSet<double> g = GradSet<double>::zeros(arch);

  SECTION("zero gradient leaves parameters unchanged") {
    auto before = p;
    sgd_step(p, g, 0.5);
    REQUIRE(p.layers[0].w == before.layers[0].w);
  }
  SECTION("plain step") {
    g.layers[0].w = {2.0, -2.0};
    sgd_step(p, g, 0.5);
    REQUIRE(p.layers[0].w[0] == 0.0);
    REQUIRE(p.layers[0].w[1] == 2.0);
  }
  SECTION("global norm clip rescales the gradient") {
    g.layers[0].w = {0.0, 4.0};  // norm 4, clip 1 => effective {0, 1}
    sgd_step(p, g, 1.0, 1.0);
    REQUIRE_THAT(p.layers[0].w[1], Catch::Matchers::WithinAbs(0.0, 1e-15));
    REQUIRE(p.layers[0].w[0] == 1.0);
  }
}

TEST_CASE("forward/backward are deterministic across repeated calls") {
  const Arch arch = {{5, 4, Activation::relu}, {4, 3, Activation::softmax_logits}};
  const auto p = init_params<double>(arch, 42);
  Batch<double> b;
  b.size = 4;
  b.dim = 5;
  Rng rng(5);
  for (int i = 0; i < 20; ++i) b.inputs.push_back(rng.next_double());
  b.labels = {0, 2, 1, 2};
  UnitMask mask = UnitMask::all_ones(arch);
  mask.keep[0][3] = 0;
  const auto c1 = forward(arch, p, mask, b);
  const auto c2 = forward(arch, p, mask, b);
  REQUIRE(logits_of(c1) == logits_of(c2));
  const auto r1 = backward(arch, p, mask, b, c1);
  const auto r2 = backward(arch, p, mask, b, c2);
  bool equal = true;
  zip_params(r1.grads, r2.grads, [&](const double& a, const double& b2) {
    equal = equal && (a == b2);
  });
  REQUIRE(equal);
}

TEST_CASE("init_params: seeded, fan-bounded, biases zero") {
  const Arch arch = {{6, 5, Activation::relu}, {5, 3, Activation::softmax_logits}};
  const auto a = init_params<double>(arch, 9);
  const auto b = init_params<double>(arch, 9);
  const auto c = init_params<double>(arch, 10);
  bool same = true, diff = false;
  zip_params(a, b, [&](const double& x, const double& y) { same = same && (x == y); });
  zip_params(a, c, [&](const double& x, const double& y) { diff = diff || (x != y); });
  REQUIRE(same);
  REQUIRE(diff);
  const double bound0 = std::sqrt(6.0 / (6 + 5));
  for (double v : a.layers[0].w) REQUIRE(std::abs(v) <= bound0);
  for (double v : a.layers[0].b) REQUIRE(v == 0.0);
}

TEST_CASE("checkpoint: bit-exact round trip with and without a pattern") {
  const Arch arch = {{3, 4, Activation::relu}, {4, 2, Activation::softmax_logits}};
  auto p = init_params<double>(arch, 31);
  p.layers[0].w[0] = -0.0;  // sign of zero must survive
  const std::vector<uint8_t> bits = {1, 0, 1, 1};

  const std::string path = (std::filesystem::temp_directory_path() / "fedlps_ck.bin").string();
  save_checkpoint(path, arch, p, &bits);
  const Checkpoint ck = load_checkpoint(path);
  REQUIRE(ck.arch.size() == arch.size());
  for (size_t l = 0; l < arch.size(); ++l) {
    REQUIRE(ck.arch[l].in_dim == arch[l].in_dim);
    REQUIRE(ck.arch[l].out_dim == arch[l].out_dim);
    REQUIRE(ck.arch[l].act == arch[l].act);
  }
  REQUIRE(encode_checkpoint(arch, ck.params, &*ck.pattern_bits) ==
          encode_checkpoint(arch, p, &bits));
  REQUIRE(*ck.pattern_bits == bits);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: corrupt inputs raise parse errors with byte context") {
  const Arch arch = {{2, 2, Activation::softmax_logits}};
  const auto p = init_params<double>(arch, 3);
  std::string buf = encode_checkpoint(arch, p);

  SECTION("bad magic") {
    buf[0] = 'X';
    REQUIRE_THROWS_AS(decode_checkpoint(buf), ParseError);
  }
  SECTION("truncated payload") {
    buf.resize(buf.size() / 2);
    try {
      decode_checkpoint(buf);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      REQUIRE(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
}

TEST_CASE("pattern bit packing round-trips arbitrary lengths") {
  Rng rng(8);
  for (int len : {0, 1, 7, 8, 9, 64, 101}) {
    std::vector<uint8_t> bits(static_cast<size_t>(len));
    for (auto& b : bits) b = uint8_t(rng.next_below(2));
    std::string buf;
    pack_bits(buf, bits);
    detail::ByteReader rd{buf};
    REQUIRE(unpack_bits(rd) == bits);
    REQUIRE(rd.pos == buf.size());
  }
}
