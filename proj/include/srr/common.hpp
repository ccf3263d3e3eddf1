#pragma once

#include <atomic>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace srr {

// Error taxonomy. Everything user-facing throws one of these; the CLI maps
// them to structured stderr diagnostics and a nonzero exit code.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvalidInput : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct ContractViolation : Error {
    using Error::Error;
};
struct ParseError : Error {
    ParseError(const std::string& msg, long offset)
        : Error(msg + " (offset " + std::to_string(offset) + ")"), byte_offset(offset) {}
    long byte_offset;
};
struct PriorUnavailable : Error {
    using Error::Error;
};

inline void check(bool cond, const char* msg) {
    if (!cond) throw InvalidInput(msg);
}
inline void check_config(bool cond, const char* msg) {
    if (!cond) throw ConfigError(msg);
}
inline void check_contract(bool cond, const char* msg) {
    if (!cond) throw ContractViolation(msg);
}

// Seeded RNG. Every stochastic path in the project derives from explicit
// 64-bit seeds; std::random_device is never used.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(eng_);
    }
    double normal(double mean, double stddev) {
        return std::normal_distribution<double>(mean, stddev)(eng_);
    }
    // Uniform integer in [0, n).
    int64_t index(int64_t n) {
        return std::uniform_int_distribution<int64_t>(0, n - 1)(eng_);
    }
    std::mt19937_64& engine() { return eng_; }

  private:
    std::mt19937_64 eng_;
};

// splitmix64; used to derive stateless per-(seed, step, tag) streams so that
// resuming a run from a checkpoint reproduces it bit-identically.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
    return mix64(mix64(seed ^ mix64(a)) ^ mix64(b + 0x517cc1b727220a95ull));
}

inline int& num_threads_ref() {
    static int n = 1;
    return n;
}
inline int num_threads() { return num_threads_ref(); }
inline void set_num_threads(int n) { num_threads_ref() = n < 1 ? 1 : n; }

// Parallel loop over independent work items. Items must write disjoint
// outputs; results are then bit-identical to the serial loop regardless of
// scheduling.
template <class F>
void parallel_for(int n, F&& f) {
    const int threads = std::min(num_threads(), n);
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) f(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace srr
