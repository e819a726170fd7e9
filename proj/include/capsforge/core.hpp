// Shared plumbing: error types, deterministic RNG, thread control.
#pragma once

#include <cstdint>
#include <cstdlib>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace capsforge {

// Exit-code mapping used by the CLI: Error -> 1, UsageError -> 2,
// ValidationError -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <class... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  os.precision(17);
  detail::format_into(os, args...);
  return os.str();
}

template <class... Args>
[[noreturn]] void fail(const Args&... args) {
  throw Error(cat(args...));
}

template <class... Args>
[[noreturn]] void fail_usage(const Args&... args) {
  throw UsageError(cat(args...));
}

template <class... Args>
[[noreturn]] void fail_validation(const Args&... args) {
  throw ValidationError(cat(args...));
}

template <class... Args>
void require(bool cond, const Args&... args) {
  if (!cond) fail(args...);
}

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// xoshiro256++ seeded through splitmix64. All distributions are implemented
// here so streams are bit-identical across platforms and standard libraries.
// Purpose-named substreams derive their seed from (root seed, purpose, index)
// so parallel and serial generation orders agree.
// ---------------------------------------------------------------------------

namespace detail {
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}
}  // namespace detail

class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& word : state_) word = detail::splitmix64(sm);
  }

  static Rng substream(uint64_t root_seed, std::string_view purpose,
                       uint64_t index = 0) {
    uint64_t mix = root_seed;
    mix ^= detail::fnv1a64(purpose) + 0x9E3779B97F4A7C15ULL;
    uint64_t sm = mix;
    mix = detail::splitmix64(sm) ^ (index * 0xD1342543DE82EF95ULL + 1);
    return Rng(mix);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes two uniforms per draw, no cached spare.
  double normal(double mean = 0.0, double sd = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sd * r * std::cos(2.0 * M_PI * u2);
  }

  // Inclusive range, unbiased via rejection.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) fail("uniform_int: empty range [", lo, ", ", hi, "]");
    const uint64_t span = uint64_t(hi - lo) + 1;
    if (span == 0) return int64_t(next_u64());  // full 64-bit range
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t draw = next_u64();
    while (draw >= limit) draw = next_u64();
    return lo + int64_t(draw % span);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = size_t(uniform_int(0, int64_t(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t state_[4];
};

// ---------------------------------------------------------------------------
// Threading. Ops parallelize over independent output slots, so results are
// bit-identical for any thread count. CAPSFORGE_THREADS caps the pool.
// ---------------------------------------------------------------------------

inline void configure_threads_from_env() {
#ifdef _OPENMP
  if (const char* env = std::getenv("CAPSFORGE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
  }
  omp_set_nested(0);
#endif
}

template <class F>
void parallel_for(int64_t n, F&& body) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 1)
  for (int64_t i = 0; i < n; ++i) body(i);
#else
  for (int64_t i = 0; i < n; ++i) body(i);
#endif
}

}  // namespace capsforge
