#include "streamloc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace streamloc {

std::string GradCheckReport::str() const {
  std::ostringstream os;
  for (const auto& g : groups)
    os << g.name << ": max rel err " << g.max_rel_err << " over " << g.checked
       << " elements\n";
  os << "overall max rel err " << max_rel_err << "\n";
  return os.str();
}

GradCheckReport finite_difference_check(const std::vector<Parameter*>& params,
                                        const std::function<Tensor()>& loss_fn,
                                        double h,
                                        int64_t max_elems_per_param) {
  for (const Parameter* p : params)
    if (p->value.dtype() != Dtype::kF64)
      fail(ErrorKind::kArgument,
           "finite_difference_check: parameter '" + p->name + "' is not f64");
  zero_grads(params);
  Tensor loss = loss_fn();
  if (!loss.defined() || loss.numel() != 1 || loss.dtype() != Dtype::kF64)
    fail(ErrorKind::kArgument,
         "finite_difference_check: loss_fn must return an f64 scalar");
  backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) {
    Tensor g = p->value.grad();
    analytic.push_back(g.defined() ? g
                                   : Tensor::zeros(p->value.shape(), Dtype::kF64));
  }
  auto eval = [&]() {
    NoGradGuard ng;
    return loss_fn().at(0);
  };
  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    GradCheckGroup group{p->name, 0.0, 0};
    const int64_t n = p->value.numel();
    const int64_t want = max_elems_per_param < 0
                             ? n
                             : std::min<int64_t>(n, max_elems_per_param);
    const int64_t step = want > 0 ? std::max<int64_t>(1, n / want) : n;
    auto buf = p->value.buf<double>();
    auto an = analytic[pi].buf<double>();
    for (int64_t i = 0; i < n && group.checked < want; i += step) {
      const double saved = buf[i];
      auto rel_at = [&](double step_h) {
        buf[i] = saved + step_h;
        const double lp = eval();
        buf[i] = saved - step_h;
        const double lm = eval();
        buf[i] = saved;
        const double fd = (lp - lm) / (2.0 * step_h);
        // The 1e-6 floor keeps central-difference truncation error from
        // dominating the ratio when the true gradient is near zero.
        return std::abs(fd - an[i]) /
               std::max({std::abs(fd), std::abs(an[i]), 1e-6});
      };
      // A perturbation that crosses a relu kink or flips a pool argmax makes
      // the central difference disagree at that one step size while a wrong
      // analytic gradient disagrees at every step size, so retry mismatches
      // at h/8 and 8h and keep the best agreement.
      double rel = rel_at(h);
      if (rel > 1e-5) rel = std::min(rel, rel_at(h / 8.0));
      if (rel > 1e-5) rel = std::min(rel, rel_at(h * 8.0));
      group.max_rel_err = std::max(group.max_rel_err, rel);
      ++group.checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, group.max_rel_err);
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace streamloc
