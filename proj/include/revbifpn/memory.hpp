#pragma once

#include <cstddef>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace revbifpn {

struct MemoryEvent {
  std::string label;
  std::size_t live_bytes = 0;
};

struct MemoryTrace {
  std::vector<MemoryEvent> events;
  std::size_t peak_bytes = 0;
};

// Live-activation registry. Engine-managed activation buffers (saved pyramids,
// block caches, in-flight activations and their gradients) are registered here;
// parameters, parameter gradients and kernel scratch are not.
class MemoryTracker {
 public:
  // RAII registration of one buffer. Move-only; releases on destruction.
  class Allocation {
   public:
    Allocation() = default;
    Allocation(const Allocation&) = delete;
    Allocation& operator=(const Allocation&) = delete;
    Allocation(Allocation&& o) noexcept { *this = std::move(o); }
    Allocation& operator=(Allocation&& o) noexcept;
    ~Allocation();

    void release();
    [[nodiscard]] std::size_t bytes() const { return bytes_; }
    [[nodiscard]] bool active() const { return tracker_ != nullptr; }

   private:
    friend class MemoryTracker;
    Allocation(MemoryTracker* t, std::string label, std::size_t bytes)
        : tracker_(t), label_(std::move(label)), bytes_(bytes) {}

    MemoryTracker* tracker_ = nullptr;
    std::string label_;
    std::size_t bytes_ = 0;
  };

  MemoryTracker() = default;
  MemoryTracker(const MemoryTracker&) = delete;
  MemoryTracker& operator=(const MemoryTracker&) = delete;

  [[nodiscard]] Allocation acquire(std::string label, std::size_t bytes);
  // Low-level pair; acquire() is preferred. release_bytes throws AccountingError
  // when more is released than is live.
  void register_bytes(const std::string& label, std::size_t bytes);
  void release_bytes(const std::string& label, std::size_t bytes);

  [[nodiscard]] std::size_t live_bytes() const;
  [[nodiscard]] std::size_t peak_bytes() const;
  [[nodiscard]] MemoryTrace trace() const;

  // Throws AccountingError when buffers are still registered.
  void check_balanced() const;
  // Clears the trace and peak. Requires a balanced registry.
  void reset();

 private:
  mutable std::mutex mu_;
  std::size_t live_ = 0;
  MemoryTrace trace_;
};

}  // namespace revbifpn
