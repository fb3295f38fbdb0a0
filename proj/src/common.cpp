#include "dsdm/common.hpp"

#include <exception>
#include <mutex>

namespace dsdm {

std::uint64_t derive_seed(std::uint64_t base, const std::string& tag) {
  // FNV-1a over the tag, then mixed with the base seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return derive_seed(base, h);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t max_threads) {
  if (n == 0) return;
  std::size_t threads = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (max_threads > 0) threads = std::min(threads, max_threads);
  threads = std::min(threads, n);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }

  std::exception_ptr first_error;
  std::size_t first_index = n;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  workers.reserve(threads);
  const std::size_t block = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * block;
    const std::size_t end = std::min(n, begin + block);
    if (begin >= end) break;
    workers.emplace_back([&, begin, end] {
      std::size_t i = begin;
      try {
        for (; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (i < first_index) {
          first_index = i;
          first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace dsdm
