#pragma once

#include <cstdint>

namespace equitab {

// Data-parallel loop over independent output slices. Each index must write
// a disjoint region and perform its own reductions sequentially, so the
// result is bit-identical for any thread count. `min_parallel` is the size
// below which the loop stays serial.
template <class F>
void parallel_for(std::int64_t n, F&& body, std::int64_t min_parallel = 4) {
#ifdef _OPENMP
  if (n >= min_parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
  }
#endif
  for (std::int64_t i = 0; i < n; ++i) body(i);
}

}  // namespace equitab
