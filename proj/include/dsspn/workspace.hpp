#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "dsspn/tensor.hpp"

namespace dsspn {

// Depth-indexed feature buffers for the dense concatenation path.
//
// Slot 0 holds h0; slot d holds the concatenated input of the neuron at
// depth d, which is slot d-1 extended by the parent's hidden maps. While a
// neuron runs only the slots along its path are live, so the number of live
// buffers is bounded by depth + 1 instead of growing with every neuron
// visited. Siblings at the same depth reuse the same slot.
template <typename T>
class PathWorkspace {
 public:
  struct Handle {
    std::size_t depth{0};
    std::uint64_t generation{0};
  };

  PathWorkspace(std::size_t max_depth, std::size_t slot_capacity)
      : capacity_{slot_capacity}, slots_(max_depth + 1) {}

  std::size_t max_depth() const { return slots_.size() - 1; }
  std::size_t capacity() const { return capacity_; }

  Handle acquire(std::size_t depth, const Shape& shape) {
    if (depth > max_depth()) throw std::logic_error(str_cat("workspace: depth ", depth, " exceeds max depth ", max_depth()));
    if (shape.size() > capacity_) {
      throw std::logic_error(str_cat("workspace: shape ", shape.str(), " exceeds slot capacity ", capacity_));
    }
    Slot& s = slots_[depth];
    if (s.live) throw std::logic_error(str_cat("workspace: slot ", depth, " acquired twice"));
    if (s.data.empty()) {
      s.data.resize(capacity_);
      ++allocations_;
    }
    s.live = true;
    s.shape = shape;
    ++s.generation;
    ++live_;
    high_water_ = std::max(high_water_, live_);
    return {depth, s.generation};
  }

  // Slots are released deepest first.
  void release(const Handle& h) {
    if (h.depth > max_depth()) throw std::logic_error("workspace: invalid handle");
    Slot& s = slots_[h.depth];
    if (!s.live || s.generation != h.generation) throw std::logic_error(str_cat("workspace: slot ", h.depth, " released twice"));
    for (std::size_t d = h.depth + 1; d < slots_.size(); ++d) {
      if (slots_[d].live) throw std::logic_error(str_cat("workspace: slot ", h.depth, " released before deeper slot ", d));
    }
    s.live = false;
    --live_;
  }

  std::span<T> buffer(const Handle& h) {
    Slot& s = checked(h);
    return {s.data.data(), s.shape.size()};
  }

  const Shape& shape(const Handle& h) { return checked(h).shape; }

  bool is_live(std::size_t depth) const { return depth < slots_.size() && slots_[depth].live; }

  // Distinct slot allocations since construction.
  std::size_t allocations() const { return allocations_; }
  std::size_t live() const { return live_; }
  std::size_t high_water() const { return high_water_; }

 private:
  struct Slot {
    std::vector<T> data;
    Shape shape{};
    bool live{false};
    std::uint64_t generation{0};
  };

  Slot& checked(const Handle& h) {
    if (h.depth > max_depth()) throw std::logic_error("workspace: invalid handle");
    Slot& s = slots_[h.depth];
    if (!s.live || s.generation != h.generation) throw std::logic_error(str_cat("workspace: slot ", h.depth, " is not live"));
    return s;
  }

  std::size_t capacity_;
  std::vector<Slot> slots_;
  std::size_t allocations_{0};
  std::size_t live_{0};
  std::size_t high_water_{0};
};

}  // namespace dsspn
