#pragma once

#include <Eigen/Core>

#include <cstddef>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace idm {

/// Keeps large activation buffers in the heap between steps instead of
/// returning them to the OS; each fresh mmap'd buffer costs a page fault per
/// 4 KiB on first touch.
inline void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

/// Worker threads for matrix products; 0 leaves the default.
inline void set_threads(std::size_t n) {
  if (n > 0) Eigen::setNbThreads(static_cast<int>(n));
}

}  // namespace idm
