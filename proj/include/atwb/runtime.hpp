#pragma once

namespace atwb {

// Keeps large tensor buffers on the heap instead of fresh mmap regions.
// Forward/backward passes allocate many short-lived multi-megabyte buffers,
// and returning each one to the kernel dominated runtime. No-op off glibc.
void tune_allocator();

}  // namespace atwb
