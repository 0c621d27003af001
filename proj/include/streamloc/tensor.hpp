#ifndef STREAMLOC_TENSOR_HPP
#define STREAMLOC_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "streamloc/common.hpp"
#include "streamloc/rng.hpp"

namespace streamloc {

enum class Dtype : uint8_t { kF32 = 0, kF64 = 1 };

inline size_t dtype_size(Dtype d) { return d == Dtype::kF32 ? 4 : 8; }
const char* dtype_name(Dtype d);

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;

// Reverse-mode edge. `apply` reads the output tensor's gradient buffer and
// accumulates into the gradients of `inputs`.
struct GradFn {
  std::string op;
  std::vector<Tensor> inputs;
  std::function<void(const Tensor& out)> apply;
};

struct TensorImpl {
  Shape shape;
  Dtype dtype = Dtype::kF32;
  std::vector<uint8_t> data;
  bool requires_grad = false;
  std::vector<uint8_t> grad;  // empty until used; same dtype/shape as data
  std::shared_ptr<GradFn> grad_fn;
};

// Value-semantic handle onto a shared buffer. Copying a Tensor aliases the
// underlying storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, Dtype dtype = Dtype::kF32,
                      bool requires_grad = false);
  static Tensor full(Shape shape, double value, Dtype dtype = Dtype::kF32);
  static Tensor ones(Shape shape, Dtype dtype = Dtype::kF32) {
    return full(std::move(shape), 1.0, dtype);
  }
  static Tensor from_f32(Shape shape, std::span<const float> values);
  static Tensor from_f64(Shape shape, std::span<const double> values);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            Dtype dtype);
  // Gaussian init, mean 0.
  static Tensor randn(Shape shape, double stddev, Rng& rng,
                      Dtype dtype = Dtype::kF32, bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        Dtype dtype = Dtype::kF32, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return shape_numel(impl_->shape); }
  Dtype dtype() const { return impl_->dtype; }

  template <typename S>
  std::span<S> buf() {
    return {reinterpret_cast<S*>(impl_->data.data()),
            static_cast<size_t>(numel())};
  }
  template <typename S>
  std::span<const S> buf() const {
    return {reinterpret_cast<const S*>(impl_->data.data()),
            static_cast<size_t>(numel())};
  }

  // Generic element access (converts through double); for tests and I/O.
  double at(int64_t i) const;
  void set(int64_t i, double v);

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  template <typename S>
  std::span<S> grad_buf() {
    ensure_grad();
    return {reinterpret_cast<S*>(impl_->grad.data()),
            static_cast<size_t>(numel())};
  }
  // Gradient as a plain tensor (copy); empty tensor if none accumulated.
  Tensor grad() const;
  void zero_grad();
  void ensure_grad();  // allocates a zero grad buffer if absent

  Tensor clone() const;    // deep copy, no graph
  Tensor detach() const;   // shares data, drops graph and requires_grad
  Tensor astype(Dtype d) const;
  Tensor reshaped(Shape new_shape) const;  // shares data; numel must match

  // Throws Error(kNumeric) naming `what` if any element is NaN/Inf.
  void check_finite(const char* what) const;

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<TensorImpl> impl_;

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
};

// Scalar-typed dispatch helper.
template <typename F>
auto dispatch(Dtype d, F&& f) {
  if (d == Dtype::kF32) return f.template operator()<float>();
  return f.template operator()<double>();
}

// Grad-mode: ops record backward edges only while enabled (default on).
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Runs reverse-mode accumulation from a scalar root (seeds d(root)=1).
void backward(const Tensor& root);

// Whether outputs of every op are scanned for NaN/Inf (default on).
bool finite_checks_enabled();
void set_finite_checks(bool on);

namespace detail {
// Attaches a grad edge to `out` when grad mode is on and any input requires
// grad. `apply` must accumulate into the inputs' grad buffers.
void attach_grad_fn(Tensor& out, std::string op, std::vector<Tensor> inputs,
                    std::function<void(const Tensor&)> apply);
template <typename S>
void accumulate(Tensor& t, std::span<const S> delta);
}  // namespace detail

}  // namespace streamloc

#endif  // STREAMLOC_TENSOR_HPP
