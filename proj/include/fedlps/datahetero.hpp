#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "fedlps/common.hpp"
#include "fedlps/rng.hpp"

// Dataset loading (IDX), synthetic generation, pathological non-IID
// partitioning, and device-capability assignment.

namespace fedlps {

struct Dataset {
  int n = 0;
  int dim = 0;
  int class_count = 0;
  std::vector<double> features;  // row-major n x dim, in [0, 1]
  std::vector<int> labels;
};

struct ClientSplit {
  std::vector<int> train;
  std::vector<int> test;
};

struct PartitionPlan {
  std::vector<ClientSplit> clients;
  int classes_per_client = 0;
};

// Gaussian class clusters on coordinate axes at pairwise distance `sep`
// (unit covariance), min-max normalized to [0, 1] afterwards so the margin
// scales but never disappears.
inline Dataset synth_dataset(int classes, int dim, int per_class, double sep, Rng& rng) {
  if (classes < 1 || dim < 1 || per_class < 1) throw ConfigError("synth_dataset: bad sizes");
  if (!(sep > 0)) throw ConfigError("synth_dataset: separation must be positive");
  if (classes > dim)
    throw ConfigError(strf("synth_dataset: need dim >= classes (got %d classes, dim %d)", classes,
                           dim));
  Dataset ds;
  ds.dim = dim;
  ds.class_count = classes;
  ds.n = classes * per_class;
  ds.features.resize(size_t(ds.n) * dim);
  ds.labels.resize(size_t(ds.n));
  const double radius = sep / std::sqrt(2.0);  // axis placement => pairwise distance sep
  size_t row = 0;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i, ++row) {
      ds.labels[row] = c;
      double* f = ds.features.data() + row * dim;
      for (int d = 0; d < dim; ++d) f[d] = rng.normal() + (d == c ? radius : 0.0);
    }
  }
  double lo = ds.features[0], hi = ds.features[0];
  for (double v : ds.features) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  for (double& v : ds.features) v = (v - lo) / span;
  return ds;
}

// Pathological partition: every client holds samples from exactly
// min(c, class_count) classes. Each class's index pool is shuffled and cut
// into as many shards as clients drawing on it; client class choices favor
// the classes with the most unassigned shards so the dealing never dead-ends.
inline PartitionPlan pathological_partition(const Dataset& ds, int clients, int classes_per_client,
                                            double test_fraction, Rng& rng) {
  if (clients < 1) throw ConfigError("partition: need at least one client");
  const int c = std::min(classes_per_client, ds.class_count);
  if (c < 1) throw ConfigError("partition: classes_per_client must be >= 1");
  if (!(test_fraction >= 0 && test_fraction < 1))
    throw ConfigError("partition: test_fraction must be in [0, 1)");

  // shard quota per class, balanced to sum to clients * c
  const int total_shards = clients * c;
  std::vector<int> quota(size_t(ds.class_count), total_shards / ds.class_count);
  for (int i = 0; i < total_shards % ds.class_count; ++i) ++quota[size_t(i)];
  for (int x = 0; x < ds.class_count; ++x)
    if (quota[size_t(x)] > clients)
      throw ConfigError("partition: classes_per_client too small for this client count");

  std::vector<std::vector<int>> by_class(size_t(ds.class_count));
  for (int i = 0; i < ds.n; ++i) by_class[size_t(ds.labels[size_t(i)])].push_back(i);
  for (int x = 0; x < ds.class_count; ++x) {
    if (quota[size_t(x)] > 0 && int(by_class[size_t(x)].size()) < quota[size_t(x)])
      throw ConfigError(strf("partition: class %d has %zu samples for %d shards", x,
                             by_class[size_t(x)].size(), quota[size_t(x)]));
    auto& idx = by_class[size_t(x)];
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[size_t(rng.next_below(i))]);
  }

  // deal classes to clients: greedy on remaining quota, random tie-break
  std::vector<int> remaining = quota;
  std::vector<std::vector<int>> client_classes(static_cast<size_t>(clients));
  for (int k = 0; k < clients; ++k) {
    std::vector<int> order(size_t(ds.class_count));
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> tie(size_t(ds.class_count));
    for (auto& t : tie) t = rng.next_double();
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (remaining[size_t(a)] != remaining[size_t(b)])
        return remaining[size_t(a)] > remaining[size_t(b)];
      return tie[size_t(a)] > tie[size_t(b)];
    });
    for (int j = 0; j < c; ++j) {
      const int x = order[size_t(j)];
      if (remaining[size_t(x)] <= 0)
        throw ConfigError("partition: shard dealing failed (too few classes with shards left)");
      client_classes[size_t(k)].push_back(x);
      --remaining[size_t(x)];
    }
  }

  // cut each class pool into its shards and hand them out in dealing order
  std::vector<size_t> cursor(size_t(ds.class_count), 0);
  std::vector<int> shard_seq(size_t(ds.class_count), 0);
  PartitionPlan plan;
  plan.classes_per_client = c;
  plan.clients.resize(size_t(clients));
  for (int k = 0; k < clients; ++k) {
    std::vector<int> mine;
    for (int x : client_classes[size_t(k)]) {
      const auto& pool = by_class[size_t(x)];
      const int shards = quota[size_t(x)];
      const size_t base = pool.size() / size_t(shards);
      const size_t extra = pool.size() % size_t(shards);
      const size_t len = base + (size_t(shard_seq[size_t(x)]) < extra ? 1 : 0);
      for (size_t i = 0; i < len; ++i) mine.push_back(pool[cursor[size_t(x)] + i]);
      cursor[size_t(x)] += len;
      ++shard_seq[size_t(x)];
    }
    // stratified train/test split inside the client
    auto& split = plan.clients[size_t(k)];
    std::vector<std::vector<int>> mine_by_class(size_t(ds.class_count));
    for (int i : mine) mine_by_class[size_t(ds.labels[size_t(i)])].push_back(i);
    for (auto& grp : mine_by_class) {
      if (grp.empty()) continue;
      long long t = std::llround(double(grp.size()) * test_fraction);
      if (test_fraction > 0 && grp.size() >= 2) t = std::clamp<long long>(t, 1, long(grp.size()) - 1);
      else t = std::min<long long>(t, long(grp.size()) - 1);
      for (size_t i = 0; i < grp.size(); ++i)
        (i < grp.size() - size_t(t) ? split.train : split.test).push_back(grp[i]);
    }
    if (split.train.empty()) throw ConfigError(strf("partition: client %d has no training data", k));
  }
  return plan;
}

inline std::vector<double> assign_capabilities(int clients, const std::vector<double>& levels,
                                               Rng& rng) {
  if (levels.empty()) throw ConfigError("assign_capabilities: empty level set");
  std::vector<double> z(static_cast<size_t>(clients));
  for (auto& v : z) v = levels[size_t(rng.next_below(levels.size()))];
  return z;
}

// --- IDX files ---------------------------------------------------------------

namespace detail {
inline uint32_t read_be32(std::ifstream& f, size_t& offset, const char* what,
                          const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4)
    throw ParseError(strf("%s: truncated %s at byte %zu", path.c_str(), what, offset));
  offset += 4;
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}
}  // namespace detail

// Standard IDX image/label pair (big-endian headers, unsigned byte payloads).
// Pixels come out scaled to [0, 1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw ConfigError("cannot open IDX image file: " + images_path);
  size_t off = 0;
  const uint32_t magic = detail::read_be32(img, off, "magic", images_path);
  if (magic != 0x00000803u)
    throw ParseError(strf("%s: bad image magic 0x%08x at byte 0", images_path.c_str(), magic));
  const uint32_t n = detail::read_be32(img, off, "count", images_path);
  const uint32_t rows = detail::read_be32(img, off, "rows", images_path);
  const uint32_t cols = detail::read_be32(img, off, "cols", images_path);

  Dataset ds;
  ds.n = int(n);
  ds.dim = int(rows * cols);
  ds.features.resize(size_t(n) * rows * cols);
  std::vector<unsigned char> buf(size_t(n) * rows * cols);
  img.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (size_t(img.gcount()) != buf.size())
    throw ParseError(strf("%s: expected %zu pixel bytes at byte %zu, got %lld", images_path.c_str(),
                          buf.size(), off, static_cast<long long>(img.gcount())));
  for (size_t i = 0; i < buf.size(); ++i) ds.features[i] = double(buf[i]) / 255.0;

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw ConfigError("cannot open IDX label file: " + labels_path);
  size_t loff = 0;
  const uint32_t lmagic = detail::read_be32(lab, loff, "magic", labels_path);
  if (lmagic != 0x00000801u)
    throw ParseError(strf("%s: bad label magic 0x%08x at byte 0", labels_path.c_str(), lmagic));
  const uint32_t ln = detail::read_be32(lab, loff, "count", labels_path);
  if (ln != n)
    throw ParseError(strf("%s: %u labels for %u images", labels_path.c_str(), ln, n));
  std::vector<unsigned char> lbuf(static_cast<size_t>(n));
  lab.read(reinterpret_cast<char*>(lbuf.data()), std::streamsize(lbuf.size()));
  if (size_t(lab.gcount()) != lbuf.size())
    throw ParseError(strf("%s: expected %zu label bytes at byte %zu, got %lld", labels_path.c_str(),
                          lbuf.size(), loff, static_cast<long long>(lab.gcount())));
  ds.labels.assign(lbuf.begin(), lbuf.end());
  int maxl = 0;
  for (int l : ds.labels) maxl = std::max(maxl, l);
  ds.class_count = maxl + 1;
  return ds;
}

inline void write_idx(const std::string& images_path, const std::string& labels_path,
                      const Dataset& ds, int rows, int cols) {
  if (rows * cols != ds.dim) throw ConfigError("write_idx: rows*cols must equal feature dim");
  auto be32 = [](std::ofstream& f, uint32_t v) {
    unsigned char b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
    f.write(reinterpret_cast<char*>(b), 4);
  };
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw ConfigError("cannot write IDX image file: " + images_path);
  be32(img, 0x00000803u);
  be32(img, uint32_t(ds.n));
  be32(img, uint32_t(rows));
  be32(img, uint32_t(cols));
  for (double v : ds.features) {
    const auto byte = static_cast<unsigned char>(std::clamp(std::llround(v * 255.0), 0ll, 255ll));
    img.put(char(byte));
  }
  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw ConfigError("cannot write IDX label file: " + labels_path);
  be32(lab, 0x00000801u);
  be32(lab, uint32_t(ds.n));
  for (int l : ds.labels) lab.put(char(uint8_t(l)));
}

// CSV dump: header "label,f0..f{d-1}", one row per sample.
inline void dump_csv(const std::string& path, const Dataset& ds) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write CSV: " + path);
  f << "label";
  for (int d = 0; d < ds.dim; ++d) f << ",f" << d;
  f << "\n";
  for (int i = 0; i < ds.n; ++i) {
    f << ds.labels[size_t(i)];
    for (int d = 0; d < ds.dim; ++d)
      f << ',' << strf("%.12g", ds.features[size_t(i) * ds.dim + d]);
    f << "\n";
  }
}

}  // namespace fedlps
