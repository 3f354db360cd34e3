#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>

namespace mate {

/// Instrumentation shared by the dense and bucketed attention kernels.
/// `score_ops` counts query-key dot products. The byte figures track the
/// attention intermediates (score/probability buffers and bucket views)
/// that a kernel holds at once, not process memory.
struct AttentionCounters {
  std::uint64_t score_ops = 0;
  std::size_t live_bytes = 0;
  std::size_t peak_bytes = 0;

  void acquire(std::size_t bytes) {
    live_bytes += bytes;
    peak_bytes = std::max(peak_bytes, live_bytes);
  }
  void release(std::size_t bytes) { live_bytes -= std::min(bytes, live_bytes); }
};

/// RAII registration of a scratch buffer with an optional counter set.
class ScratchLease {
 public:
  ScratchLease(AttentionCounters* counters, std::size_t bytes)
      : counters_(counters), bytes_(bytes) {
    if (counters_) counters_->acquire(bytes_);
  }
  ~ScratchLease() {
    if (counters_) counters_->release(bytes_);
  }
  ScratchLease(const ScratchLease&) = delete;
  ScratchLease& operator=(const ScratchLease&) = delete;

 private:
  AttentionCounters* counters_;
  std::size_t bytes_;
};

}  // namespace mate
