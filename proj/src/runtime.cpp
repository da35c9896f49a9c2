#include "hyvi/runtime.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace hyvi {

void tune_allocator() {
#if defined(__GLIBC__)
  // 32 MiB is the largest threshold glibc accepts on 64-bit targets.
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
}

}  // namespace hyvi
