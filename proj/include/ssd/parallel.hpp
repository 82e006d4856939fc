#pragma once

#include <cstdint>
#include <functional>

namespace ssd {

// Worker count for parallel_for. Defaults to hardware concurrency, or the
// SSD_THREADS environment variable when set.
int num_threads();
void set_num_threads(int n);

// Runs body(begin, end) over disjoint chunks of [begin, end). Each index is
// processed exactly once with a fixed per-index execution, so results are
// bit-identical for any worker count. Nested calls run inline.
void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace ssd
