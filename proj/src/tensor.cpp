#include "igdh/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace igdh {

std::string Shape4::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

template <class T>
Tensor<T> Tensor<T>::zeros(Shape4 s) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = s;
  impl->data.assign(static_cast<size_t>(s.numel()), T(0));
  return Tensor<T>(std::move(impl));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape4 s, T value) {
  auto t = zeros(s);
  std::fill(t.vec().begin(), t.vec().end(), value);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::from_data(Shape4 s, std::vector<T> values) {
  if (static_cast<int64_t>(values.size()) != s.numel()) {
    throw std::invalid_argument("Tensor::from_data: " + std::to_string(values.size()) +
                                " values for shape " + s.str());
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = s;
  impl->data = std::move(values);
  return Tensor<T>(std::move(impl));
}

template <class T>
Tensor<T> Tensor<T>::uniform(Shape4 s, T bound, Rng& rng) {
  auto t = zeros(s);
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(-double(bound), double(bound)));
  return t;
}

template <class T>
T Tensor<T>::at(int64_t n, int64_t c, int64_t h, int64_t w) const {
  const Shape4& s = impl_->shape;
  return impl_->data[static_cast<size_t>(((n * s.c + c) * s.h + h) * s.w + w)];
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) +
                                " elements, expected 1");
  }
  return impl_->data[0];
}

template <class T>
bool Tensor<T>::all_finite() const {
  for (const T& v : impl_->data) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

template <class T>
void Tensor<T>::dump(std::ostream& os) const {
  const Shape4& s = impl_->shape;
  os << "TENSOR v1 " << s.n << " " << s.c << " " << s.h << " " << s.w << " "
     << (sizeof(T) == 4 ? "f32" : "f64") << "\n";
  os.precision(std::numeric_limits<T>::max_digits10);
  int64_t i = 0;
  for (const T& v : impl_->data) {
    os << v << ((++i % 16 == 0) ? '\n' : ' ');
  }
  os << "\n";
}

template <class T>
Tensor<T> Tensor<T>::load_dump(std::istream& is) {
  std::string magic, version, dtype;
  Shape4 s;
  is >> magic >> version >> s.n >> s.c >> s.h >> s.w >> dtype;
  if (magic != "TENSOR" || version != "v1") {
    throw std::runtime_error("Tensor::load_dump: bad header");
  }
  const std::string expect = sizeof(T) == 4 ? "f32" : "f64";
  if (dtype != expect) {
    throw std::runtime_error("Tensor::load_dump: dtype " + dtype + ", expected " + expect);
  }
  std::vector<T> values(static_cast<size_t>(s.numel()));
  for (auto& v : values) {
    if (!(is >> v)) throw std::runtime_error("Tensor::load_dump: truncated payload");
  }
  return from_data(s, std::move(values));
}

template <class T>
Tensor<T> make_result(
    Shape4 shape, std::vector<T> data, std::vector<Tensor<T>> inputs, const char* op,
    std::function<void(const std::vector<T>&,
                       const std::function<std::vector<T>*(size_t)>&)>
        backward_fn) {
  auto out = Tensor<T>::from_data(shape, std::move(data));
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    auto node = std::make_shared<GradNode<T>>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->output = out.impl().get();
    node->backward = std::move(backward_fn);
    out.impl()->grad_fn = std::move(node);
    out.impl()->requires_grad = true;
  }
  return out;
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  auto root_impl = loss.impl();
  if (!root_impl->grad_fn) {
    throw std::runtime_error(
        "backward: loss has no recorded graph (detached or built under NoGradGuard)");
  }

  // Iterative postorder DFS over nodes: inputs come before their consumers.
  std::vector<GradNode<T>*> order;
  std::unordered_set<GradNode<T>*> visited;
  std::vector<std::pair<GradNode<T>*, size_t>> stack;
  stack.emplace_back(root_impl->grad_fn.get(), 0);
  visited.insert(root_impl->grad_fn.get());
  while (!stack.empty()) {
    GradNode<T>* node = stack.back().first;
    if (node->consumed) {
      throw std::runtime_error(std::string("backward: graph already consumed at op '") +
                               node->op + "'; re-record the forward pass");
    }
    bool descended = false;
    while (stack.back().second < node->inputs.size()) {
      GradNode<T>* child = node->inputs[stack.back().second].get()->grad_fn.get();
      ++stack.back().second;
      if (child != nullptr && visited.insert(child).second) {
        stack.emplace_back(child, 0);  // may reallocate; loop re-reads back()
        descended = true;
        break;
      }
    }
    if (!descended) {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Gradients for intermediates live here and are dropped once used; leaf
  // gradients accumulate into their TensorImpl so they survive the sweep.
  std::unordered_map<TensorImpl<T>*, std::vector<T>> grads;
  grads[root_impl.get()] = {T(1)};

  auto sink_for = [&grads](GradNode<T>* node) {
    return [&grads, node](size_t i) -> std::vector<T>* {
      TensorImpl<T>* in = node->inputs[i].get();
      if (!in->requires_grad) return nullptr;
      if (!in->grad_fn) {
        // leaf: accumulate persistently
        if (in->grad.empty()) in->grad.assign(in->data.size(), T(0));
        return &in->grad;
      }
      auto [it, inserted] = grads.try_emplace(in);
      if (inserted) it->second.assign(in->data.size(), T(0));
      return &it->second;
    };
  };

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    GradNode<T>* node = *it;
    auto found = grads.find(node->output);
    if (found == grads.end()) {
      // Output never received a gradient: node is off the differentiable
      // path (can happen when a recorded tensor is also used by a detached
      // branch). Nothing to propagate.
      node->consumed = true;
      continue;
    }
    node->backward(found->second, sink_for(node));
    node->consumed = true;
    grads.erase(found);
  }
}

double grad_check(const std::function<Tensor<double>()>& f,
                  std::vector<Tensor<double>> inputs, double eps,
                  int64_t max_entries_per_input, uint64_t sample_seed) {
  // Analytic pass.
  for (auto& in : inputs) {
    if (!in.requires_grad()) {
      throw std::invalid_argument("grad_check: input does not require grad");
    }
    in.zero_grad();
  }
  Tensor<double> loss = f();
  if (loss.numel() != 1) {
    throw std::invalid_argument("grad_check: f must be scalar-valued");
  }
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    analytic.push_back(in.grad() ? *in.grad() : std::vector<double>(in.numel(), 0.0));
  }

  double max_rel = 0.0;
  NoGradGuard ng;
  for (size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    std::vector<int64_t> entries;
    const int64_t n = in.numel();
    if (max_entries_per_input < 0 || max_entries_per_input >= n) {
      entries.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) entries[static_cast<size_t>(i)] = i;
    } else {
      Rng rng(derive_seed(sample_seed, k));
      std::unordered_set<int64_t> seen;
      while (static_cast<int64_t>(entries.size()) < max_entries_per_input) {
        int64_t i = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n)));
        if (seen.insert(i).second) entries.push_back(i);
      }
    }
    for (int64_t i : entries) {
      double* slot = in.data() + i;
      const double saved = *slot;
      *slot = saved + eps;
      const double f_plus = f().item();
      *slot = saved - eps;
      const double f_minus = f().item();
      *slot = saved;
      const double fd = (f_plus - f_minus) / (2.0 * eps);
      const double a = analytic[k][static_cast<size_t>(i)];
      const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

#define IGDH_INSTANTIATE_TENSOR(T)                                                   \
  template class Tensor<T>;                                                          \
  template void backward<T>(const Tensor<T>&);                                       \
  template Tensor<T> make_result<T>(                                                 \
      Shape4, std::vector<T>, std::vector<Tensor<T>>, const char*,                   \
      std::function<void(const std::vector<T>&,                                      \
                         const std::function<std::vector<T>*(size_t)>&)>);

IGDH_INSTANTIATE_TENSOR(float)
IGDH_INSTANTIATE_TENSOR(double)

}  // namespace igdh
