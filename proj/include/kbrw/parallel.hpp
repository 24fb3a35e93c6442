#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "kbrw/rng.hpp"

namespace kbrw {

/// Replica budget shared by every Monte Carlo entry point.
struct McConfig {
  std::uint64_t replicas = 100000;
  std::uint64_t seed = 1;
  unsigned workers = 1;
};

/// KBRW_WORKERS overrides the requested worker count.
inline unsigned resolve_workers(unsigned requested) {
  if (const char* env = std::getenv("KBRW_WORKERS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, requested);
}

/// Runs `body(acc, rng, replica_index)` for replica indices [0, n).
///
/// Replicas are grouped into blocks of kBlockSize; block b owns the stream
/// stream_for(seed, b) and its own accumulator, and block accumulators are
/// merged in block order. The result does not depend on `workers`.
template <class Acc, class Body>
Acc run_replicas(const McConfig& cfg, Body&& body, const Acc& init = Acc{}) {
  const std::uint64_t n = cfg.replicas;
  const std::uint64_t n_blocks = (n + kBlockSize - 1) / kBlockSize;
  std::vector<Acc> partial(n_blocks, init);
  std::atomic<std::uint64_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;

  auto worker = [&]() {
    for (;;) {
      const std::uint64_t b = next.fetch_add(1);
      if (b >= n_blocks) return;
      try {
        Rng rng = stream_for(cfg.seed, b);
        const std::uint64_t lo = b * kBlockSize;
        const std::uint64_t hi = std::min(n, lo + kBlockSize);
        for (std::uint64_t i = lo; i < hi; ++i) body(partial[b], rng, i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n_blocks);
        return;
      }
    }
  };

  const unsigned workers = static_cast<unsigned>(
      std::min<std::uint64_t>(std::max(1u, cfg.workers), std::max<std::uint64_t>(1, n_blocks)));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  Acc total = init;
  for (const auto& p : partial) total.merge(p);
  return total;
}

}  // namespace kbrw
