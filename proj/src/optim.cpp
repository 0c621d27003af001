#include "streamloc/optim.hpp"

#include <cmath>

namespace streamloc {

namespace {

// Gradient span of a value tensor, or empty if none was accumulated.
template <typename S>
std::span<const S> grad_span(const Tensor& value) {
  const auto& bytes = value.impl_->grad;
  if (bytes.empty()) return {};
  return {reinterpret_cast<const S*>(bytes.data()),
          static_cast<size_t>(value.numel())};
}

}  // namespace

void init_sgd_state(const std::vector<Parameter*>& params) {
  for (Parameter* p : params)
    if (!p->momentum.defined())
      p->momentum = Tensor::zeros(p->value.shape(), p->value.dtype());
}

void init_rmsprop_state(const std::vector<Parameter*>& params) {
  for (Parameter* p : params)
    if (!p->mean_square.defined())
      p->mean_square = Tensor::zeros(p->value.shape(), p->value.dtype());
}

void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->value.zero_grad();
}

void sgd_step(const std::vector<Parameter*>& params, const SgdConfig& cfg) {
  for (Parameter* p : params) {
    if (!p->momentum.defined())
      fail(ErrorKind::kState,
           "sgd_step: parameter '" + p->name + "' has no momentum buffer");
    if (p->momentum.shape() != p->value.shape())
      fail(ErrorKind::kState,
           "sgd_step: stale momentum buffer for '" + p->name + "'");
    dispatch(p->value.dtype(), [&]<typename S>() {
      auto theta = p->value.buf<S>();
      auto v = p->momentum.buf<S>();
      auto g = grad_span<S>(p->value);
      for (size_t i = 0; i < theta.size(); ++i) {
        const double gi = (g.empty() ? 0.0 : static_cast<double>(g[i])) +
                          cfg.weight_decay * static_cast<double>(theta[i]);
        const double vi = cfg.momentum * static_cast<double>(v[i]) - cfg.lr * gi;
        v[i] = static_cast<S>(vi);
        theta[i] = static_cast<S>(static_cast<double>(theta[i]) + vi);
      }
    });
    if (finite_checks_enabled()) p->value.check_finite(p->name.c_str());
  }
}

void rmsprop_step(const std::vector<Parameter*>& params,
                  const RmspropConfig& cfg) {
  for (Parameter* p : params) {
    if (!p->mean_square.defined())
      fail(ErrorKind::kState,
           "rmsprop_step: parameter '" + p->name + "' has no mean-square buffer");
    if (p->mean_square.shape() != p->value.shape())
      fail(ErrorKind::kState,
           "rmsprop_step: stale mean-square buffer for '" + p->name + "'");
    dispatch(p->value.dtype(), [&]<typename S>() {
      auto theta = p->value.buf<S>();
      auto s = p->mean_square.buf<S>();
      auto g = grad_span<S>(p->value);
      for (size_t i = 0; i < theta.size(); ++i) {
        const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
        const double si =
            cfg.decay * static_cast<double>(s[i]) + (1.0 - cfg.decay) * gi * gi;
        s[i] = static_cast<S>(si);
        theta[i] = static_cast<S>(static_cast<double>(theta[i]) -
                                  cfg.lr * gi / (std::sqrt(si) + cfg.epsilon));
      }
    });
    if (finite_checks_enabled()) p->value.check_finite(p->name.c_str());
  }
}

}  // namespace streamloc
