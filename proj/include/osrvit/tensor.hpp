#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "osrvit/errors.hpp"

namespace osrvit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Kernel threading. Every kernel partitions work over output rows, so each
// output element is reduced by exactly one thread in a fixed order; results do
// not depend on the thread count. `deterministic` additionally pins execution
// to the calling thread.
// ---------------------------------------------------------------------------

struct ExecutionSettings {
  std::size_t num_threads = std::max(1u, std::thread::hardware_concurrency());
  bool deterministic = false;
};

inline ExecutionSettings& execution_settings() {
  static ExecutionSettings settings;
  return settings;
}

inline void set_deterministic(bool on) { execution_settings().deterministic = on; }
inline void set_num_threads(std::size_t n) { execution_settings().num_threads = std::max<std::size_t>(1, n); }

/// Runs fn(begin, end) over [0, n). `work_per_item` is a rough flop count used
/// to skip threading for small kernels.
template <class Fn>
void parallel_for(std::size_t n, std::size_t work_per_item, Fn&& fn) {
  const auto& cfg = execution_settings();
  std::size_t threads = cfg.deterministic ? 1 : std::min(cfg.num_threads, n);
  if (threads <= 1 || n * work_per_item < (1u << 16)) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(threads - 1);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    const std::size_t b = t * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty unless differentiable
  bool requires_grad = false;
  std::uint64_t id = 0;
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

/// Dense row-major array with an optional gradient buffer. Copies are shallow
/// handles onto the same storage; use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : node_(std::make_shared<TensorNode<T>>()) {
    check_shape(shape);
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->id = next_node_id();
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
    check_shape(shape);
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->id = next_node_id();
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::uint64_t id() const { return node_->id; }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  T& operator[](std::size_t i) { return node_->value[i]; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  /// Marks the tensor differentiable and allocates a zeroed gradient buffer.
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    if (on) {
      node_->grad.assign(node_->value.size(), T{0});
    } else {
      node_->grad.clear();
    }
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }

  Tensor clone() const {
    Tensor out(shape(), std::vector<T>(node_->value));
    if (requires_grad()) out.set_requires_grad();
    return out;
  }

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& shared_node() const { return node_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

// ---------------------------------------------------------------------------
// ComputationRecord: the tape of operations executed while it is active.
// ---------------------------------------------------------------------------

template <class T>
class ComputationRecord {
 public:
  struct Entry {
    std::vector<std::shared_ptr<TensorNode<T>>> inputs;
    std::shared_ptr<TensorNode<T>> output;
    std::function<void()> backward;
  };

  /// RAII activation. Operations record onto the innermost active record of
  /// the current thread; with none active they compute values only.
  class Scope {
   public:
    explicit Scope(ComputationRecord& rec) : previous_(active_) { active_ = &rec; }
    ~Scope() { active_ = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    ComputationRecord* previous_;
  };

  ComputationRecord() = default;
  ComputationRecord(const ComputationRecord&) = delete;
  ComputationRecord& operator=(const ComputationRecord&) = delete;

  Scope activate() { return Scope(*this); }

  static ComputationRecord* active() { return active_; }

  void record(std::vector<std::shared_ptr<TensorNode<T>>> inputs,
              std::shared_ptr<TensorNode<T>> output, std::function<void()> rule) {
    if (consumed_) throw ContractError("cannot record onto a computation record after backward()");
    entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(rule)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  bool consumed() const { return consumed_; }

  /// Seeds d(loss)/d(loss) = 1 and replays backward rules in reverse order.
  /// Leaf gradients accumulate into their existing buffers. A record may be
  /// replayed only once.
  void backward(Tensor<T>& loss) {
    if (consumed_) throw ContractError("backward() already called on this computation record");
    if (loss.numel() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.has_grad()) throw ContractError("loss is not differentiable");
    consumed_ = true;
    loss.grad()[0] = T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

 private:
  std::vector<Entry> entries_;
  bool consumed_ = false;
  static inline thread_local ComputationRecord* active_ = nullptr;
};

/// Wires `out` into the active record when any input is differentiable.
/// `rule` reads out's gradient and accumulates into the inputs' gradients;
/// it must skip inputs without a gradient buffer.
template <class T, class Rule>
void attach(Tensor<T>& out, std::initializer_list<Tensor<T>> inputs, Rule&& rule) {
  auto* rec = ComputationRecord<T>::active();
  if (rec == nullptr) return;
  bool any = false;
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  nodes.reserve(inputs.size());
  for (const auto& t : inputs) {
    any = any || t.requires_grad();
    nodes.push_back(t.shared_node());
  }
  if (!any) return;
  out.set_requires_grad();
  rec->record(std::move(nodes), out.shared_node(), std::forward<Rule>(rule));
}

/// Convenience: backward through the record that is currently active.
template <class T>
void backward(Tensor<T>& loss) {
  auto* rec = ComputationRecord<T>::active();
  if (rec == nullptr) throw ContractError("backward() called with no active computation record");
  rec->backward(loss);
}

}  // namespace osrvit
