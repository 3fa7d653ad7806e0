#pragma once

#include <cstddef>
#include <functional>

namespace fuseloc {

// Process-wide worker count for the heavy kernels. Work is split into
// contiguous index ranges and every output element is produced by exactly one
// worker in a fixed order, so results never depend on the thread count.
void set_num_threads(int n);
int num_threads();

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk = 1);

}  // namespace fuseloc
