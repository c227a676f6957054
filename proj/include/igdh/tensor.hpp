#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "igdh/rng.hpp"

namespace igdh {

// Dense rank-4 shape in (N, C, H, W) order. Everything in this library is a
// rank-4 tensor; vectors and matrices use trailing singleton dims.
struct Shape4 {
  int64_t n = 0;
  int64_t c = 0;
  int64_t h = 0;
  int64_t w = 0;

  int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

template <class T>
struct GradNode;

// Shared tensor state. Tensors are value handles onto one of these; copies
// alias the same storage. Data is immutable after creation by convention --
// the only sanctioned mutators are parameter initialization, the optimizer
// (between steps) and grad_check's perturbation loop.
template <class T>
struct TensorImpl {
  Shape4 shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass accumulates into it
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> grad_fn;  // null for leaves
};

// A recorded operation: inputs it consumed plus the rule that maps the
// gradient w.r.t. its output onto gradients w.r.t. its inputs. Nodes form the
// Graph for one forward pass; creation order is topological by construction.
template <class T>
struct GradNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  TensorImpl<T>* output = nullptr;  // backref (owned by the output tensor)
  bool consumed = false;
  // sink(i) returns the accumulation buffer for input i, or null when that
  // input does not take part in gradient flow.
  std::function<void(const std::vector<T>& grad_out,
                     const std::function<std::vector<T>*(size_t)>& sink)>
      backward;
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape4 s);
  static Tensor full(Shape4 s, T value);
  static Tensor from_data(Shape4 s, std::vector<T> values);
  // fan-in-scaled uniform in [-bound, bound]
  static Tensor uniform(Shape4 s, T bound, Rng& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape4& shape() const { return impl_->shape; }
  int64_t numel() const { return impl_->shape.numel(); }

  const T* data() const { return impl_->data.data(); }
  T* data() { return impl_->data.data(); }
  const std::vector<T>& vec() const { return impl_->data; }
  std::vector<T>& vec() { return impl_->data; }

  T at(int64_t n, int64_t c, int64_t h, int64_t w) const;
  T item() const;  // value of a 1-element tensor

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }
  // null until backward has accumulated something
  const std::vector<T>* grad() const {
    return impl_->grad.empty() ? nullptr : &impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

  bool all_finite() const;

  // Text dump: "TENSOR v1 N C H W dtype" then row-major values. Used by
  // golden-file tests; round-trips exactly.
  void dump(std::ostream& os) const;
  static Tensor load_dump(std::istream& is);

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Thread-local autograd recording switch.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse sweep from a scalar loss. Accumulates dLoss/dLeaf into every
// reachable requires_grad leaf, then marks the recorded nodes as consumed;
// a second sweep over the same nodes throws.
template <class T>
void backward(const Tensor<T>& loss);

// Helper for op implementations: wraps forward output data in a tensor and
// records a GradNode when gradients are being tracked.
template <class T>
Tensor<T> make_result(
    Shape4 shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
    const char* op,
    std::function<void(const std::vector<T>&,
                       const std::function<std::vector<T>*(size_t)>&)>
        backward_fn);

// Central-difference verification of the analytic gradients of a recorded
// scalar computation. Returns max over checked entries of
// |analytic - fd| / max(1, |analytic|). Only meaningful in 64-bit mode.
// max_entries_per_input < 0 checks every entry; otherwise a deterministic
// sample of that many entries per input is checked.
double grad_check(const std::function<Tensor<double>()>& f,
                  std::vector<Tensor<double>> inputs, double eps,
                  int64_t max_entries_per_input = -1,
                  uint64_t sample_seed = 0x5eed);

}  // namespace igdh
