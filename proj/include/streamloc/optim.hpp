#pragma once

#include <string>
#include <vector>

#include "streamloc/tensor.hpp"

namespace streamloc {

// A named, trainable tensor plus per-rule optimizer state. The state buffers
// stay undefined until the matching init_* call; stepping without them is a
// state error.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor momentum;     // SGD velocity
  Tensor mean_square;  // RMSProp running squared gradient
};

struct SgdConfig {
  double lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct RmspropConfig {
  double lr = 1e-4;
  double decay = 0.9;
  double epsilon = 1e-8;
};

void init_sgd_state(const std::vector<Parameter*>& params);
void init_rmsprop_state(const std::vector<Parameter*>& params);
void zero_grads(const std::vector<Parameter*>& params);

// Both steps read each parameter's accumulated gradient buffer (a missing
// buffer counts as zero gradient, e.g. a head untouched by the loss).
// v <- mu*v - lr*(g + wd*theta); theta <- theta + v.
void sgd_step(const std::vector<Parameter*>& params, const SgdConfig& cfg);
// s <- rho*s + (1-rho)*g^2; theta <- theta - lr*g/(sqrt(s) + eps).
void rmsprop_step(const std::vector<Parameter*>& params,
                  const RmspropConfig& cfg);

}  // namespace streamloc
