#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace bwnh {

// Runs fn(i) for i in [0, n) on up to `threads` workers using a static
// strided partition. fn must only write state owned by index i.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
}

}  // namespace bwnh
