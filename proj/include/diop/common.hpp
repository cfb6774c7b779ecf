#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace diop {

inline constexpr const char* kVersion = "0.3.1";

/// Base class of every error raised by the pipeline. `kind()` is a short
/// machine-readable tag used by the CLI error line and the service.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format", m) {}
};
struct LabelRangeError : Error {
  LabelRangeError(const std::string& m, std::size_t offset)
      : Error("label_range", m), offset(offset) {}
  std::size_t offset;
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error("validation", m) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};
struct EmptyRegionError : Error {
  explicit EmptyRegionError(const std::string& m) : Error("empty_region", m) {}
};

// splitmix64 finalizer; used to derive independent RNG streams from
// (master seed, index...) so parallel work is schedule-independent.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

using Rng = std::mt19937_64;

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a) {
  return mix_seed(master ^ mix_seed(a + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b) {
  return derive_seed(derive_seed(master, a), b);
}

/// Runs body(i) for i in [0, n) on up to `jobs` threads. Exceptions from
/// the body are rethrown (first one wins) after all workers finish.
inline void parallel_for(std::size_t n, unsigned jobs,
                         const std::function<void(std::size_t)>& body) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(jobs, n);
  std::size_t next = 0;
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= n || failure) return;
        i = next++;
      }
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace diop
