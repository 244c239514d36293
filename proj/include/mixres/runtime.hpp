#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mixres {

/// Keeps large tensor buffers on the heap between training steps.
///
/// Activation and gradient buffers are freed and reallocated every step;
/// with glibc's defaults each one above the mmap threshold comes back as
/// fresh zero pages and pays the page faults again. Raising the thresholds
/// lets freed blocks be reused. Call once at program start; a no-op off glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace mixres
