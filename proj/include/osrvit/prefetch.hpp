#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>

#include "osrvit/data.hpp"

namespace osrvit {

/// Fixed-capacity FIFO between one producer and one consumer.
template <class V>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  /// Blocks while full. Returns false once the queue has been closed.
  bool push(V v) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return false;
    items_.push_back(std::move(v));
    not_empty_.notify_one();
    return true;
  }

  /// Blocks while empty; nullopt after close() once drained.
  std::optional<V> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    V v = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return v;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  std::size_t capacity() const { return capacity_; }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<V> items_;
  bool closed_ = false;
};

/// Produces one epoch of batches on a background thread, at most `depth`
/// ahead of the consumer. Batches arrive in the same order as a plain
/// EpochCursor would yield them; depth 0 disables the thread.
class PrefetchingCursor {
 public:
  PrefetchingCursor(const Stream& stream, std::size_t epoch, std::size_t depth)
      : cursor_(stream, epoch), queue_(depth) {
    if (depth == 0) return;
    threaded_ = true;
    worker_ = std::jthread([this] {
      try {
        while (auto b = cursor_.next()) {
          if (!queue_.push(std::move(*b))) return;
        }
      } catch (...) {
        error_ = std::current_exception();
      }
      queue_.close();
    });
  }

  ~PrefetchingCursor() {
    queue_.close();
  }

  PrefetchingCursor(const PrefetchingCursor&) = delete;
  PrefetchingCursor& operator=(const PrefetchingCursor&) = delete;

  std::optional<Batch> next() {
    if (!threaded_) return cursor_.next();
    auto b = queue_.pop();
    if (!b && error_) std::rethrow_exception(error_);
    return b;
  }

 private:
  Stream::EpochCursor cursor_;
  BoundedQueue<Batch> queue_;
  bool threaded_ = false;
  std::exception_ptr error_;
  std::jthread worker_;  // declared last: joined before the queue is destroyed
};

}  // namespace osrvit
