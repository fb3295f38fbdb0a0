#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dsdm {

using Token = std::int32_t;

/// Base error for every failure raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-supplied configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : Error(what + " at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// SplitMix64 finalizer. Used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for sub-stream `stream` of a component seeded with `base`.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix64(mix64(base) ^ (stream * 0xd1342543de82ef95ULL + 1));
}

std::uint64_t derive_seed(std::uint64_t base, const std::string& tag);

/// Runs fn(i) for i in [0, n) on up to hardware_concurrency threads. Work is
/// split into contiguous blocks, so callers writing results by index get the
/// same output regardless of scheduling. If any fn(i) throws, the exception
/// from the smallest failing index is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t max_threads = 0);

}  // namespace dsdm
