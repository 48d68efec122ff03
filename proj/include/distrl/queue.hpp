#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "distrl/core.hpp"

namespace distrl {

/// Bounded FIFO between transport sessions (many producers) and the training
/// loop (one consumer). A push on a full queue discards the oldest entry.
class TrajectoryQueue {
 public:
  explicit TrajectoryQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("TrajectoryQueue: capacity must be >= 1");
  }

  /// True if an older entry was dropped to make room.
  bool push(Trajectory t) {
    std::lock_guard lk(mu_);
    bool dropped = false;
    if (items_.size() == capacity_) {
      items_.pop_front();
      ++drops_;
      dropped = true;
    }
    items_.push_back(std::move(t));
    ++accepted_;
    cv_.notify_one();
    return dropped;
  }

  /// Validates against (d, m) first; invalid trajectories are counted and rejected.
  std::vector<std::string> push_validated(Trajectory t, std::size_t d, int m) {
    auto problems = validate_trajectory(t, d, m);
    if (!problems.empty()) {
      std::lock_guard lk(mu_);
      ++rejected_;
      return problems;
    }
    push(std::move(t));
    return {};
  }

  std::vector<Trajectory> drain_all() {
    std::lock_guard lk(mu_);
    std::vector<Trajectory> out(std::make_move_iterator(items_.begin()), std::make_move_iterator(items_.end()));
    items_.clear();
    return out;
  }

  template <class Rep, class Period>
  bool wait_nonempty(std::chrono::duration<Rep, Period> timeout) {
    std::unique_lock lk(mu_);
    return cv_.wait_for(lk, timeout, [&] { return !items_.empty(); });
  }

  std::size_t depth() const {
    std::lock_guard lk(mu_);
    return items_.size();
  }
  std::uint64_t drops() const {
    std::lock_guard lk(mu_);
    return drops_;
  }
  std::uint64_t accepted() const {
    std::lock_guard lk(mu_);
    return accepted_;
  }
  std::uint64_t rejected() const {
    std::lock_guard lk(mu_);
    return rejected_;
  }
  std::size_t capacity() const noexcept { return capacity_; }

 private:
  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Trajectory> items_;
  std::uint64_t drops_ = 0;
  std::uint64_t accepted_ = 0;
  std::uint64_t rejected_ = 0;
};

}  // namespace distrl
