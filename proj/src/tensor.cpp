#include "streamloc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace streamloc {

const char* dtype_name(Dtype d) { return d == Dtype::kF32 ? "f32" : "f64"; }

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, Dtype dtype) {
  for (int64_t d : shape) {
    if (d <= 0)
      fail(ErrorKind::kDimension,
           "tensor dims must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->dtype = dtype;
  impl->data.assign(static_cast<size_t>(shape_numel(shape)) * dtype_size(dtype),
                    0);
  impl->shape = std::move(shape);
  return impl;
}

thread_local bool g_grad_enabled = true;
bool g_finite_checks = true;

}  // namespace

Tensor Tensor::zeros(Shape shape, Dtype dtype, bool requires_grad) {
  Tensor t(make_impl(std::move(shape), dtype));
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, Dtype dtype) {
  Tensor t(make_impl(std::move(shape), dtype));
  int64_t n = t.numel();
  if (dtype == Dtype::kF32) {
    auto b = t.buf<float>();
    std::fill(b.begin(), b.end(), static_cast<float>(value));
  } else {
    auto b = t.buf<double>();
    std::fill(b.begin(), b.end(), value);
  }
  (void)n;
  return t;
}

Tensor Tensor::from_f32(Shape shape, std::span<const float> values) {
  Tensor t(make_impl(std::move(shape), Dtype::kF32));
  if (static_cast<int64_t>(values.size()) != t.numel())
    fail(ErrorKind::kDimension, "from_f32: value count does not match shape");
  std::memcpy(t.impl_->data.data(), values.data(), values.size() * 4);
  return t;
}

Tensor Tensor::from_f64(Shape shape, std::span<const double> values) {
  Tensor t(make_impl(std::move(shape), Dtype::kF64));
  if (static_cast<int64_t>(values.size()) != t.numel())
    fail(ErrorKind::kDimension, "from_f64: value count does not match shape");
  std::memcpy(t.impl_->data.data(), values.data(), values.size() * 8);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values,
                           Dtype dtype) {
  if (dtype == Dtype::kF64) return from_f64(std::move(shape), values);
  Tensor t(make_impl(std::move(shape), Dtype::kF32));
  if (static_cast<int64_t>(values.size()) != t.numel())
    fail(ErrorKind::kDimension, "from_values: value count mismatch");
  auto b = t.buf<float>();
  for (size_t i = 0; i < values.size(); ++i)
    b[i] = static_cast<float>(values[i]);
  return t;
}

Tensor Tensor::randn(Shape shape, double stddev, Rng& rng, Dtype dtype,
                     bool requires_grad) {
  Tensor t(make_impl(std::move(shape), dtype));
  t.impl_->requires_grad = requires_grad;
  int64_t n = t.numel();
  dispatch(dtype, [&]<typename S>() {
    auto b = t.buf<S>();
    for (int64_t i = 0; i < n; ++i)
      b[i] = static_cast<S>(rng.normal(0.0, stddev));
  });
  return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, Dtype dtype,
                       bool requires_grad) {
  Tensor t(make_impl(std::move(shape), dtype));
  t.impl_->requires_grad = requires_grad;
  int64_t n = t.numel();
  dispatch(dtype, [&]<typename S>() {
    auto b = t.buf<S>();
    for (int64_t i = 0; i < n; ++i) b[i] = static_cast<S>(rng.uniform(lo, hi));
  });
  return t;
}

double Tensor::at(int64_t i) const {
  if (i < 0 || i >= numel()) fail(ErrorKind::kIndex, "Tensor::at out of range");
  if (dtype() == Dtype::kF32) return buf<float>()[static_cast<size_t>(i)];
  return buf<double>()[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double v) {
  if (i < 0 || i >= numel()) fail(ErrorKind::kIndex, "Tensor::set out of range");
  if (dtype() == Dtype::kF32)
    buf<float>()[static_cast<size_t>(i)] = static_cast<float>(v);
  else
    buf<double>()[static_cast<size_t>(i)] = v;
}

void Tensor::ensure_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0);
}

Tensor Tensor::grad() const {
  if (impl_->grad.empty()) return Tensor();
  Tensor g(make_impl(impl_->shape, impl_->dtype));
  std::memcpy(g.impl_->data.data(), impl_->grad.data(), impl_->grad.size());
  return g;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::clone() const {
  Tensor t(make_impl(impl_->shape, impl_->dtype));
  std::memcpy(t.impl_->data.data(), impl_->data.data(), impl_->data.size());
  return t;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;  // copy of bytes, no aliasing of grads/graph
  return Tensor(std::move(impl));
}

Tensor Tensor::astype(Dtype d) const {
  if (d == dtype()) return clone();
  Tensor t(make_impl(impl_->shape, d));
  int64_t n = numel();
  if (d == Dtype::kF64) {
    auto src = buf<float>();
    auto dst = t.buf<double>();
    for (int64_t i = 0; i < n; ++i) dst[i] = src[i];
  } else {
    auto src = buf<double>();
    auto dst = t.buf<float>();
    for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
  }
  return t;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel())
    fail(ErrorKind::kDimension,
         "reshape " + shape_str(shape()) + " -> " + shape_str(new_shape) +
             " changes element count");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(new_shape);
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

void Tensor::check_finite(const char* what) const {
  bool ok = true;
  dispatch(dtype(), [&]<typename S>() {
    auto b = buf<S>();
    for (S v : b) {
      if (!std::isfinite(static_cast<double>(v))) {
        ok = false;
        break;
      }
    }
  });
  if (!ok)
    fail(ErrorKind::kNumeric, std::string("non-finite values in ") + what);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool on) { g_finite_checks = on; }

namespace detail {

void attach_grad_fn(Tensor& out, std::string op, std::vector<Tensor> inputs,
                    std::function<void(const Tensor&)> apply) {
  if (finite_checks_enabled()) out.check_finite(op.c_str());
  if (!grad_enabled()) return;
  bool any = false;
  for (const Tensor& t : inputs)
    if (t.defined() && (t.requires_grad() || t.impl_->grad_fn)) any = true;
  if (!any) return;
  auto fn = std::make_shared<GradFn>();
  fn->op = std::move(op);
  fn->inputs = std::move(inputs);
  fn->apply = std::move(apply);
  out.impl_->grad_fn = std::move(fn);
  out.impl_->requires_grad = true;
}

template <typename S>
void accumulate(Tensor& t, std::span<const S> delta) {
  t.ensure_grad();
  auto g = t.grad_buf<S>();
  for (size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

template void accumulate<float>(Tensor&, std::span<const float>);
template void accumulate<double>(Tensor&, std::span<const double>);

}  // namespace detail

void backward(const Tensor& root) {
  if (!root.defined()) fail(ErrorKind::kState, "backward on undefined tensor");
  if (root.numel() != 1)
    fail(ErrorKind::kDimension, "backward expects a scalar root");
  // Post-order DFS, then reverse: every consumer runs before its producer.
  std::vector<TensorImpl*> order;
  std::unordered_map<TensorImpl*, Tensor> handles;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.push_back({root.impl_.get(), 0});
  handles.emplace(root.impl_.get(), root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (!node->grad_fn || idx >= node->grad_fn->inputs.size()) {
      order.push_back(node);
      stack.pop_back();
      continue;
    }
    const Tensor& child = node->grad_fn->inputs[idx];
    ++idx;
    if (child.defined() && !handles.count(child.impl_.get())) {
      handles.emplace(child.impl_.get(), child);
      stack.push_back({child.impl_.get(), 0});
    }
  }
  // Seed d(root) = 1.
  {
    Tensor r = root;
    r.ensure_grad();
    if (r.dtype() == Dtype::kF32)
      r.grad_buf<float>()[0] = 1.0f;
    else
      r.grad_buf<double>()[0] = 1.0;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (!node->grad_fn) continue;
    if (node->grad.empty()) continue;  // branch does not reach the root
    node->grad_fn->apply(handles.at(node));
  }
}

}  // namespace streamloc
