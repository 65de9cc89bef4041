#pragma once

// Dense 64-bit tensor with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to immutable values plus an optional gradient
// buffer. Primitives record a backward closure on the thread's active Tape
// whenever a tape is installed and at least one input requires a gradient.
// Without an active tape nothing is recorded, which is how inference runs.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace prgcn {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// Leaves elements of `std::vector(n)` uninitialized; ops overwrite every slot.
// Storage is cache-line aligned: vectorized kernels peel a scalar prologue up to
// the first aligned element, so a varying base address would change results in
// the last bit from one allocation to the next.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
  static constexpr std::align_val_t kAlign{64};
  template <class U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <class U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

using Buffer = std::vector<double, detail::DefaultInitAllocator<double>>;

namespace detail {

struct TensorData {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;

  double* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

using DataPtr = std::shared_ptr<TensorData>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}
  Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values), requires_grad) {}

  Tensor(Shape shape, Buffer values, bool requires_grad = false) : d_(std::make_shared<detail::TensorData>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    d_->shape = std::move(shape);
    d_->value = std::move(values);
    d_->requires_grad = requires_grad;
  }

  explicit Tensor(detail::DataPtr data) : d_(std::move(data)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer(n, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, Buffer{v}, requires_grad);
  }
  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.d_->value[i * n + i] = 1.0;
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t dim() const { return d_->shape.size(); }
  std::size_t size(std::size_t axis) const { return d_->shape.at(axis); }
  std::size_t numel() const { return d_->value.size(); }

  std::span<const double> data() const { return d_->value; }
  // Direct write access; reserved for parameter updates and test fixtures.
  std::span<double> mutable_data() { return d_->value; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool on) { d_->requires_grad = on; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::span<const double> grad() const { return d_->grad; }
  std::span<double> mutable_grad() { return {d_->grad_buffer(), d_->value.size()}; }
  void zero_grad() { d_->grad.clear(); }

  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return d_->value[0];
  }

  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != dim()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= d_->shape[axis]) throw DimensionError("index out of range for " + shape_str(shape()));
      flat = flat * d_->shape[axis] + i;
      ++axis;
    }
    return d_->value[flat];
  }

  // Deep copy of values, detached from any tape.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(d_->shape, d_->value, requires_grad);
  }

  const detail::DataPtr& impl() const { return d_; }

 private:
  detail::DataPtr d_;
};

// Ordered record of primitive applications. Installing a Tape makes it the
// active recorder for the current thread until it is destroyed.
class Tape {
 public:
  Tape() : previous_(current()) { current() = this; }
  ~Tape() { current() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current(); }

  void record(std::function<void()> backward_fn) {
    if (consumed_) throw TapeError("cannot record on a tape that has already run backward");
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  void backward(const Tensor& loss) {
    if (consumed_) throw TapeError("backward called twice on the same tape");
    if (loss.numel() != 1 || loss.dim() != 0) {
      throw DimensionError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.impl()->grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

 private:
  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  Tape* previous_;
};

// Runs backward on the thread's active tape.
inline void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (!tape) throw TapeError("backward called with no active tape");
  tape->backward(loss);
}

}  // namespace prgcn
