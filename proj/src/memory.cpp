#include "revbifpn/memory.hpp"

#include <algorithm>

#include "revbifpn/errors.hpp"

namespace revbifpn {

MemoryTracker::Allocation& MemoryTracker::Allocation::operator=(Allocation&& o) noexcept {
  if (this != &o) {
    release();
    tracker_ = std::exchange(o.tracker_, nullptr);
    label_ = std::move(o.label_);
    bytes_ = std::exchange(o.bytes_, 0);
  }
  return *this;
}

MemoryTracker::Allocation::~Allocation() { release(); }

void MemoryTracker::Allocation::release() {
  if (tracker_ != nullptr) {
    tracker_->release_bytes(label_, bytes_);
    tracker_ = nullptr;
    bytes_ = 0;
  }
}

MemoryTracker::Allocation MemoryTracker::acquire(std::string label, std::size_t bytes) {
  register_bytes(label, bytes);
  return Allocation(this, std::move(label), bytes);
}

void MemoryTracker::register_bytes(const std::string& label, std::size_t bytes) {
  std::lock_guard lock(mu_);
  live_ += bytes;
  trace_.peak_bytes = std::max(trace_.peak_bytes, live_);
  trace_.events.push_back({"+" + label, live_});
}

void MemoryTracker::release_bytes(const std::string& label, std::size_t bytes) {
  std::lock_guard lock(mu_);
  if (bytes > live_) {
    throw AccountingError("memory registry: releasing " + std::to_string(bytes) + " bytes for '" +
                          label + "' but only " + std::to_string(live_) + " are live");
  }
  live_ -= bytes;
  trace_.events.push_back({"-" + label, live_});
}

std::size_t MemoryTracker::live_bytes() const {
  std::lock_guard lock(mu_);
  return live_;
}

std::size_t MemoryTracker::peak_bytes() const {
  std::lock_guard lock(mu_);
  return trace_.peak_bytes;
}

MemoryTrace MemoryTracker::trace() const {
  std::lock_guard lock(mu_);
  return trace_;
}

void MemoryTracker::check_balanced() const {
  std::lock_guard lock(mu_);
  if (live_ != 0) {
    throw AccountingError("memory registry unbalanced: " + std::to_string(live_) +
                          " bytes still registered");
  }
}

void MemoryTracker::reset() {
  check_balanced();
  std::lock_guard lock(mu_);
  trace_ = MemoryTrace{};
}

}  // namespace revbifpn
