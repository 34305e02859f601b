#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace coseg {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using VecXd = Eigen::VectorXd;
// Row-major so that .row(i) views a contiguous per-primitive record.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

// splitmix64; used to derive independent stream seeds from (seed, tag, index).
inline std::uint64_t hash_u64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
  return hash_u64(hash_u64(seed ^ hash_u64(tag)) ^ index);
}

// Deterministic RNG. All draws are implemented here rather than through
// <random> distributions, whose output is implementation-specified.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x853c49e6748fea9bULL) {}

  std::uint64_t next_u64() {
    state_ = hash_u64(state_ + 0x2545f4914f6cdd1dULL);
    return state_;
  }

  // uniform in [0, 1) with 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Box-Muller; one value per call, the pair partner is cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  // k distinct indices from [0, n), order randomized
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    k = std::min(k, n);
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + index(n - i)]);
    pool.resize(k);
    return pool;
  }

private:
  std::uint64_t state_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

// Compensated accumulator; keeps per-slot sums independent of merge order
// well below the documented 1e-10 reordering tolerance.
struct KahanSum {
  double sum = 0.0;
  double comp = 0.0;

  void add(double x) {
    const double y = x - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

// Parallel map over [0, n) in contiguous chunks. Chunks write disjoint state,
// so the result is independent of scheduling.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                         unsigned num_threads = 0) {
  if (num_threads == 0) num_threads = std::max(1u, std::thread::hardware_concurrency());
  if (n == 0) return;
  if (num_threads <= 1 || n < 2) {
    body(0, n);
    return;
  }
  const std::size_t chunks = std::min<std::size_t>(num_threads, n);
  const std::size_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> workers;
  workers.reserve(chunks);
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t lo = c * per;
    const std::size_t hi = std::min(n, lo + per);
    if (lo >= hi) break;
    workers.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& w : workers) w.join();
}

struct CosegError : std::runtime_error {
  explicit CosegError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw CosegError(msg);
}

}  // namespace coseg
