#pragma once

namespace hyvi {

/// Keeps large temporaries on the heap instead of fresh mmap'd pages. Training allocates
/// and frees buffers of several megabytes per step; without this the page-fault cost can
/// exceed the arithmetic. No-op outside glibc. Call once at program start.
void tune_allocator();

}  // namespace hyvi
