#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcg::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("tensor: negative extent");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense tensor participating in reverse-mode differentiation. Values are
// contiguous; grad is allocated lazily the first time backward touches it.
template <class T>
struct TensorT {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string name;  // non-empty for named parameters / state

  TensorT() = default;
  explicit TensorT(Shape s) : shape(std::move(s)), value(numel(shape), T(0)) {}

  std::size_t size() const { return value.size(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T* grad_data() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
  }
};

template <class T>
using TensorPtr = std::shared_ptr<TensorT<T>>;

template <class T>
TensorPtr<T> make_tensor(Shape shape, bool requires_grad = false, std::string name = {}) {
  auto t = std::make_shared<TensorT<T>>(std::move(shape));
  t->requires_grad = requires_grad;
  t->name = std::move(name);
  return t;
}

// Records the backward closures of one forward pass, in topological order.
// backward() zeroes every touched gradient first, so repeated backward calls
// over the same forward give bit-identical results.
template <class T>
class TapeT {
 public:
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  void record(std::vector<TensorPtr<T>> touched, std::function<void()> backward_fn) {
    if (!grad_enabled_) return;
    for (auto& t : touched) touched_.push_back(std::move(t));
    steps_.push_back(std::move(backward_fn));
  }

  void backward(const TensorPtr<T>& root) {
    if (root->size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    for (auto& t : touched_) t->zero_grad();
    root->zero_grad();
    root->grad_data()[0] = T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  void clear() {
    steps_.clear();
    touched_.clear();
  }

  std::size_t recorded_ops() const { return steps_.size(); }

 private:
  std::vector<std::function<void()>> steps_;
  std::vector<TensorPtr<T>> touched_;
  bool grad_enabled_ = true;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace pcg::ad
