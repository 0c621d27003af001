#pragma once

#include <functional>
#include <string>
#include <vector>

#include "streamloc/optim.hpp"
#include "streamloc/tensor.hpp"

namespace streamloc {

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0.0;
  bool passed(double tol) const { return max_rel_err < tol; }
  std::string str() const;
};

// Central-difference gradient check. `loss_fn` must rebuild a scalar loss
// from the parameters' current values on every call. All parameters must be
// f64. `max_elems_per_param` < 0 checks every element; otherwise that many
// evenly spaced elements per parameter.
GradCheckReport finite_difference_check(const std::vector<Parameter*>& params,
                                        const std::function<Tensor()>& loss_fn,
                                        double h = 1e-5,
                                        int64_t max_elems_per_param = -1);

}  // namespace streamloc
