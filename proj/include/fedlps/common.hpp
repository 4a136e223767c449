#pragma once

#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fedlps {

template <class T>
concept Scalar = std::same_as<T, float> || std::same_as<T, double>;

// User-facing configuration problems (bad config key, missing file, empty
// dataset). The CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk input (IDX/checkpoint). Carries a byte offset in the message.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical breakdown during a run (non-finite loss), with round/client context.
struct RunError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class... Args>
std::string strf(const char* fmt, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), fmt, args...);
  return std::string(buf);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// FNV-1a over raw bytes; used for model digests in ledgers/manifests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) { return strf("%016llx", static_cast<unsigned long long>(v)); }

// Fork-join over [0, n). Tasks must be pure w.r.t. shared state: each index
// writes only its own slot, so results do not depend on the thread count.
template <class Fn>
void parallel_for(size_t n, unsigned threads, Fn&& fn) {
  if (n == 0) return;
  unsigned hw = std::thread::hardware_concurrency();
  if (threads == 0) threads = hw ? hw : 1;
  threads = static_cast<unsigned>(std::min<size_t>(threads, n));
  if (threads <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace fedlps
