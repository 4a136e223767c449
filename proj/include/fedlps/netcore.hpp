#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <vector>

#include "fedlps/common.hpp"
#include "fedlps/rng.hpp"

// Minimal fully-connected network with per-unit (neuron) maskability and
// manual forward/backward. Everything is a pure function of its inputs; the
// orchestrator introduces parallelism by running independent clients on
// independent value copies.

namespace fedlps {

enum class Activation : uint32_t { relu = 0, identity = 1, softmax_logits = 2 };

struct LayerSpec {
  int in_dim = 0;
  int out_dim = 0;
  Activation act = Activation::relu;
};

using Arch = std::vector<LayerSpec>;

inline void validate_arch(const Arch& arch) {
  if (arch.empty()) throw std::logic_error("arch: no layers");
  for (size_t l = 0; l < arch.size(); ++l) {
    if (arch[l].in_dim < 1 || arch[l].out_dim < 1)
      throw std::logic_error(strf("arch: layer %zu has non-positive dims", l));
    if (l + 1 < arch.size()) {
      if (arch[l].out_dim != arch[l + 1].in_dim)
        throw std::logic_error(strf("arch: layer %zu/%zu dim mismatch", l, l + 1));
      if (arch[l].act == Activation::softmax_logits)
        throw std::logic_error("arch: softmax_logits only allowed on the final layer");
    }
  }
  if (arch.back().act == Activation::relu)
    throw std::logic_error("arch: final layer must be identity or softmax_logits");
}

inline std::vector<int> hidden_widths(const Arch& arch) {
  std::vector<int> w;
  for (size_t l = 0; l + 1 < arch.size(); ++l) w.push_back(arch[l].out_dim);
  return w;
}

// J: total count of sparsifiable units (hidden neurons; the output layer is
// never sparsifiable).
inline int total_hidden_units(const Arch& arch) {
  int j = 0;
  for (size_t l = 0; l + 1 < arch.size(); ++l) j += arch[l].out_dim;
  return j;
}

inline size_t param_count(const Arch& arch) {
  size_t n = 0;
  for (const auto& ls : arch) n += size_t(ls.out_dim) * ls.in_dim + ls.out_dim;
  return n;
}

template <Scalar T>
struct ParamSet {
  struct Layer {
    std::vector<T> w;  // row-major, out_dim x in_dim
    std::vector<T> b;  // out_dim
  };
  std::vector<Layer> layers;

  static ParamSet zeros(const Arch& arch) {
    ParamSet p;
    p.layers.resize(arch.size());
    for (size_t l = 0; l < arch.size(); ++l) {
      p.layers[l].w.assign(size_t(arch[l].out_dim) * arch[l].in_dim, T(0));
      p.layers[l].b.assign(arch[l].out_dim, T(0));
    }
    return p;
  }

  template <class Fn>
  void for_each(Fn&& fn) {
    for (auto& ly : layers) {
      for (auto& v : ly.w) fn(v);
      for (auto& v : ly.b) fn(v);
    }
  }
  template <class Fn>
  void for_each(Fn&& fn) const {
    for (const auto& ly : layers) {
      for (const auto& v : ly.w) fn(v);
      for (const auto& v : ly.b) fn(v);
    }
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](T v) { ok = ok && std::isfinite(double(v)); });
    return ok;
  }

  double sq_norm() const {
    double s = 0;
    for_each([&](T v) { s += double(v) * double(v); });
    return s;
  }
};

template <Scalar T>
using GradSet = ParamSet<T>;

template <Scalar T>
bool same_shape(const ParamSet<T>& a, const ParamSet<T>& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (size_t l = 0; l < a.layers.size(); ++l)
    if (a.layers[l].w.size() != b.layers[l].w.size() || a.layers[l].b.size() != b.layers[l].b.size())
      return false;
  return true;
}

template <Scalar T, class Fn>
void zip_params(ParamSet<T>& a, const ParamSet<T>& b, Fn&& fn) {
  for (size_t l = 0; l < a.layers.size(); ++l) {
    for (size_t i = 0; i < a.layers[l].w.size(); ++i) fn(a.layers[l].w[i], b.layers[l].w[i]);
    for (size_t i = 0; i < a.layers[l].b.size(); ++i) fn(a.layers[l].b[i], b.layers[l].b[i]);
  }
}

template <Scalar T, class Fn>
void zip_params(const ParamSet<T>& a, const ParamSet<T>& b, Fn&& fn) {
  for (size_t l = 0; l < a.layers.size(); ++l) {
    for (size_t i = 0; i < a.layers[l].w.size(); ++i) fn(a.layers[l].w[i], b.layers[l].w[i]);
    for (size_t i = 0; i < a.layers[l].b.size(); ++i) fn(a.layers[l].b[i], b.layers[l].b[i]);
  }
}

template <Scalar T>
ParamSet<T> cast_params(const ParamSet<double>& p) {
  ParamSet<T> out;
  out.layers.resize(p.layers.size());
  for (size_t l = 0; l < p.layers.size(); ++l) {
    out.layers[l].w.assign(p.layers[l].w.begin(), p.layers[l].w.end());
    out.layers[l].b.assign(p.layers[l].b.begin(), p.layers[l].b.end());
  }
  return out;
}

// Per-layer fan-based init: weights uniform in +-sqrt(6/(in+out)), biases 0.
template <Scalar T>
ParamSet<T> init_params(const Arch& arch, uint64_t master_seed) {
  ParamSet<T> p = ParamSet<T>::zeros(arch);
  Rng rng = stream(master_seed, StreamKind::param_init);
  for (size_t l = 0; l < arch.size(); ++l) {
    const double bound = std::sqrt(6.0 / (arch[l].in_dim + arch[l].out_dim));
    for (auto& v : p.layers[l].w) v = T(rng.uniform(-bound, bound));
  }
  return p;
}

// Per-unit keep bits for the hidden layers; keep[l][u] = 1 retains neuron u of
// hidden layer l. Input features and output classes are always retained.
struct UnitMask {
  std::vector<std::vector<uint8_t>> keep;

  static UnitMask all_ones(const Arch& arch) {
    UnitMask m;
    for (int w : hidden_widths(arch)) m.keep.emplace_back(w, uint8_t(1));
    return m;
  }

  size_t hidden_layer_count() const { return keep.size(); }

  bool is_all_ones() const {
    for (const auto& ly : keep)
      for (uint8_t b : ly)
        if (!b) return false;
    return true;
  }

  // Parameter-level view: weight (l, row i, col j) survives iff both incident
  // units survive.
  uint8_t weight_bit(size_t l, int i, int j) const {
    const uint8_t out_keep = (l < keep.size()) ? keep[l][size_t(i)] : uint8_t(1);
    const uint8_t in_keep = (l > 0) ? keep[l - 1][size_t(j)] : uint8_t(1);
    return out_keep & in_keep;
  }
  uint8_t bias_bit(size_t l, int i) const {
    return (l < keep.size()) ? keep[l][size_t(i)] : uint8_t(1);
  }

  template <Scalar T>
  void hadamard(const Arch& arch, ParamSet<T>& p) const {
    for (size_t l = 0; l < arch.size(); ++l) {
      const int out = arch[l].out_dim, in = arch[l].in_dim;
      for (int i = 0; i < out; ++i) {
        for (int j = 0; j < in; ++j)
          if (!weight_bit(l, i, j)) p.layers[l].w[size_t(i) * in + j] = T(0);
        if (!bias_bit(l, i)) p.layers[l].b[size_t(i)] = T(0);
      }
    }
  }

  size_t retained_weight_count(const Arch& arch) const {
    size_t n = 0;
    for (size_t l = 0; l < arch.size(); ++l)
      for (int i = 0; i < arch[l].out_dim; ++i)
        for (int j = 0; j < arch[l].in_dim; ++j) n += weight_bit(l, i, j);
    return n;
  }

  size_t retained_param_count(const Arch& arch) const {
    size_t n = retained_weight_count(arch);
    for (size_t l = 0; l < arch.size(); ++l)
      for (int i = 0; i < arch[l].out_dim; ++i) n += bias_bit(l, i);
    return n;
  }
};

template <Scalar T>
struct Batch {
  int size = 0;
  int dim = 0;
  std::vector<T> inputs;  // row-major, size x dim
  std::vector<int> labels;
};

template <Scalar T>
struct ForwardCache {
  // acts[0] = input; acts[l+1] = post-activation (masked) output of layer l.
  // Final entry holds the logits. pre[l] = pre-activation of layer l.
  std::vector<std::vector<T>> acts;
  std::vector<std::vector<T>> pre;
  int batch = 0;
};

template <Scalar T>
const std::vector<T>& logits_of(const ForwardCache<T>& c) {
  return c.acts.back();
}

template <Scalar T>
ForwardCache<T> forward(const Arch& arch, const ParamSet<T>& params, const UnitMask& mask,
                        const Batch<T>& batch) {
  if (batch.dim != arch.front().in_dim)
    throw std::logic_error("forward: batch dim does not match input layer");
  if (mask.keep.size() != arch.size() - 1)
    throw std::logic_error("forward: mask layer count mismatch");
  for (size_t l = 0; l + 1 < arch.size(); ++l)
    if (int(mask.keep[l].size()) != arch[l].out_dim)
      throw std::logic_error("forward: mask width mismatch");

  ForwardCache<T> c;
  c.batch = batch.size;
  c.acts.resize(arch.size() + 1);
  c.pre.resize(arch.size());
  c.acts[0] = batch.inputs;

  const int n = batch.size;
  for (size_t l = 0; l < arch.size(); ++l) {
    const int in = arch[l].in_dim, out = arch[l].out_dim;
    const auto& x = c.acts[l];
    auto& z = c.pre[l];
    z.assign(size_t(n) * out, T(0));
    for (int s = 0; s < n; ++s) {
      const T* xs = x.data() + size_t(s) * in;
      T* zs = z.data() + size_t(s) * out;
      for (int i = 0; i < out; ++i) {
        const T* wi = params.layers[l].w.data() + size_t(i) * in;
        T acc = params.layers[l].b[size_t(i)];
        for (int j = 0; j < in; ++j) acc += wi[j] * xs[j];
        zs[i] = acc;
      }
    }
    auto& a = c.acts[l + 1];
    a = z;
    const bool hidden = l + 1 < arch.size();
    if (arch[l].act == Activation::relu)
      for (auto& v : a) v = v > T(0) ? v : T(0);
    if (hidden && !mask.keep[l].empty()) {
      const auto& kb = mask.keep[l];
      for (int s = 0; s < n; ++s) {
        T* as = a.data() + size_t(s) * out;
        for (int i = 0; i < out; ++i)
          if (!kb[size_t(i)]) as[i] = T(0);
      }
    }
  }
  return c;
}

enum class LabelLoss { cross_entropy };

// masked: the training gradient; masked units pass no signal, so gradient
//   entries at masked positions come out exactly zero.
// pass_through: straight-through variant for the importance route; the mask is
//   treated as identity on the way back, so masked units still see the error
//   signal their pre-activations would have carried.
enum class BackpropMask { masked, pass_through };

template <Scalar T>
struct BackwardResult {
  GradSet<T> grads;
  double task_loss = 0;       // mean cross-entropy over the batch
  double batch_accuracy = 0;  // fraction of argmax-correct predictions
};

template <Scalar T>
BackwardResult<T> backward(const Arch& arch, const ParamSet<T>& params, const UnitMask& mask,
                           const Batch<T>& batch, const ForwardCache<T>& cache,
                           LabelLoss loss = LabelLoss::cross_entropy,
                           BackpropMask mode = BackpropMask::masked) {
  (void)loss;
  const int n = batch.size;
  const int classes = arch.back().out_dim;
  const auto& logits = logits_of(cache);

  BackwardResult<T> r;
  r.grads = GradSet<T>::zeros(arch);

  // softmax + CE, row-stabilized
  std::vector<T> dlogits(size_t(n) * classes);
  double loss_sum = 0;
  int correct = 0;
  for (int s = 0; s < n; ++s) {
    const T* zs = logits.data() + size_t(s) * classes;
    T zmax = zs[0];
    int arg = 0;
    for (int i = 1; i < classes; ++i)
      if (zs[i] > zmax) zmax = zs[i], arg = i;
    T denom = T(0);
    for (int i = 0; i < classes; ++i) denom += std::exp(zs[i] - zmax);
    const int y = batch.labels[size_t(s)];
    loss_sum += double(std::log(denom)) - double(zs[y] - zmax);
    if (arg == y) ++correct;
    T* ds = dlogits.data() + size_t(s) * classes;
    for (int i = 0; i < classes; ++i) {
      T p = std::exp(zs[i] - zmax) / denom;
      ds[i] = (p - (i == y ? T(1) : T(0))) / T(n);
    }
  }
  r.task_loss = loss_sum / n;
  r.batch_accuracy = double(correct) / n;
  if (!std::isfinite(r.task_loss)) throw RunError("backward: non-finite task loss");

  std::vector<T> dz = std::move(dlogits);
  for (size_t li = arch.size(); li-- > 0;) {
    const int in = arch[li].in_dim, out = arch[li].out_dim;
    const auto& x = cache.acts[li];
    auto& gw = r.grads.layers[li].w;
    auto& gb = r.grads.layers[li].b;
    for (int s = 0; s < n; ++s) {
      const T* xs = x.data() + size_t(s) * in;
      const T* dzs = dz.data() + size_t(s) * out;
      for (int i = 0; i < out; ++i) {
        const T d = dzs[i];
        T* gwi = gw.data() + size_t(i) * in;
        for (int j = 0; j < in; ++j) gwi[j] += d * xs[j];
        gb[size_t(i)] += d;
      }
    }
    if (li == 0) break;
    std::vector<T> dprev(size_t(n) * in, T(0));
    const auto& zprev = cache.pre[li - 1];
    const auto& kb = mask.keep[li - 1];
    for (int s = 0; s < n; ++s) {
      const T* dzs = dz.data() + size_t(s) * out;
      T* dps = dprev.data() + size_t(s) * in;
      for (int i = 0; i < out; ++i) {
        const T d = dzs[i];
        const T* wi = params.layers[li].w.data() + size_t(i) * in;
        for (int j = 0; j < in; ++j) dps[j] += wi[j] * d;
      }
      const T* zp = zprev.data() + size_t(s) * in;
      for (int j = 0; j < in; ++j) {
        if (!kb[size_t(j)]) {
          dps[j] = T(0);
        } else if (arch[li - 1].act == Activation::relu && zp[j] <= T(0)) {
          dps[j] = T(0);
        }
      }
    }
    dz = std::move(dprev);
  }
  return r;
}

// params <- params - lr * grads, with optional global-L2-norm clipping.
template <Scalar T>
void sgd_step(ParamSet<T>& params, const GradSet<T>& grads, double lr,
              std::optional<double> clip = std::nullopt) {
  if (lr <= 0 && lr != 0) throw std::logic_error("sgd_step: negative lr");
  double factor = 1.0;
  if (clip) {
    const double norm = std::sqrt(grads.sq_norm());
    if (norm > *clip && norm > 0) factor = *clip / norm;
  }
  if (factor != 1.0) {
    zip_params(params, grads, [&](T& p, const T& g) { p -= T(lr) * (T(factor) * g); });
  } else {
    zip_params(params, grads, [&](T& p, const T& g) { p -= T(lr) * g; });
  }
  bool finite = params.all_finite();
  if (!finite) throw RunError("sgd_step: parameters became non-finite");
}

template <Scalar T>
void vec_sgd_step(std::vector<T>& v, const std::vector<T>& g, double lr,
                  std::optional<double> clip = std::nullopt) {
  double factor = 1.0;
  if (clip) {
    double sq = 0;
    for (T x : g) sq += double(x) * double(x);
    const double norm = std::sqrt(sq);
    if (norm > *clip && norm > 0) factor = *clip / norm;
  }
  for (size_t i = 0; i < v.size(); ++i) v[i] -= T(lr) * (factor == 1.0 ? g[i] : T(factor) * g[i]);
}

// --- checkpoint format -------------------------------------------------------
// Flat little-endian binary: "FLPS", u32 version, u32 layer count, per-layer
// (u32 in, u32 out, u32 activation), then per-layer row-major f64 weights and
// f64 biases. Optional trailing bit-packed sparse pattern with a u64 bit-count
// prefix. Bit-exact round-trip.

namespace detail {
inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<uint64_t>(d)); }

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;
  void need(size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw ParseError(strf("checkpoint: truncated reading %s at byte %zu (have %zu)", what, pos,
                            buf.size()));
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  uint8_t u8(const char* what) {
    need(1, what);
    return uint8_t(buf[pos++]);
  }
};
}  // namespace detail

inline constexpr uint32_t kCheckpointVersion = 1;

inline void pack_bits(std::string& out, const std::vector<uint8_t>& bits) {
  detail::put_u64(out, bits.size());
  uint8_t cur = 0;
  for (size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) cur |= uint8_t(1u << (i % 8));
    if (i % 8 == 7) {
      out.push_back(char(cur));
      cur = 0;
    }
  }
  if (bits.size() % 8 != 0) out.push_back(char(cur));
}

inline std::vector<uint8_t> unpack_bits(detail::ByteReader& rd) {
  const uint64_t nbits = rd.u64("pattern length");
  const size_t nbytes = size_t((nbits + 7) / 8);
  rd.need(nbytes, "pattern bits");
  std::vector<uint8_t> bits(nbits);
  for (uint64_t i = 0; i < nbits; ++i)
    bits[size_t(i)] = (uint8_t(rd.buf[rd.pos + size_t(i / 8)]) >> (i % 8)) & 1;
  rd.pos += nbytes;
  return bits;
}

template <Scalar T>
std::string encode_checkpoint(const Arch& arch, const ParamSet<T>& params,
                              const std::vector<uint8_t>* pattern_bits = nullptr) {
  std::string out = "FLPS";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, uint32_t(arch.size()));
  for (const auto& ls : arch) {
    detail::put_u32(out, uint32_t(ls.in_dim));
    detail::put_u32(out, uint32_t(ls.out_dim));
    detail::put_u32(out, uint32_t(ls.act));
  }
  for (const auto& ly : params.layers) {
    for (T v : ly.w) detail::put_f64(out, double(v));
    for (T v : ly.b) detail::put_f64(out, double(v));
  }
  out.push_back(pattern_bits ? char(1) : char(0));
  if (pattern_bits) pack_bits(out, *pattern_bits);
  return out;
}

struct Checkpoint {
  Arch arch;
  ParamSet<double> params;
  std::optional<std::vector<uint8_t>> pattern_bits;
};

inline Checkpoint decode_checkpoint(const std::string& buf) {
  detail::ByteReader rd{buf};
  rd.need(4, "magic");
  if (buf.compare(0, 4, "FLPS") != 0) throw ParseError("checkpoint: bad magic at byte 0");
  rd.pos = 4;
  const uint32_t version = rd.u32("version");
  if (version != kCheckpointVersion)
    throw ParseError(strf("checkpoint: unsupported version %u", version));
  const uint32_t nlayers = rd.u32("layer count");
  Checkpoint ck;
  for (uint32_t l = 0; l < nlayers; ++l) {
    LayerSpec ls;
    ls.in_dim = int(rd.u32("in_dim"));
    ls.out_dim = int(rd.u32("out_dim"));
    const uint32_t act = rd.u32("activation");
    if (act > 2) throw ParseError(strf("checkpoint: bad activation code %u", act));
    ls.act = Activation(act);
    ck.arch.push_back(ls);
  }
  validate_arch(ck.arch);
  ck.params = ParamSet<double>::zeros(ck.arch);
  for (auto& ly : ck.params.layers) {
    for (auto& v : ly.w) v = rd.f64("weight");
    for (auto& v : ly.b) v = rd.f64("bias");
  }
  if (rd.u8("pattern flag") == 1) ck.pattern_bits = unpack_bits(rd);
  return ck;
}

template <Scalar T>
void save_checkpoint(const std::string& path, const Arch& arch, const ParamSet<T>& params,
                     const std::vector<uint8_t>* pattern_bits = nullptr) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint for writing: " + path);
  const std::string buf = encode_checkpoint(arch, params, pattern_bits);
  f.write(buf.data(), std::streamsize(buf.size()));
  if (!f) throw ConfigError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

template <Scalar T>
uint64_t digest_params(const ParamSet<T>& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  params.for_each([&](T v) {
    const double d = double(v);
    const uint64_t bits = std::bit_cast<uint64_t>(d);
    unsigned char raw[8];
    std::memcpy(raw, &bits, 8);
    h = fnv1a64(raw, 8, h);
  });
  return h;
}

}  // namespace fedlps
