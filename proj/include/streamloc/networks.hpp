#pragma once

#include <string>
#include <vector>

#include "streamloc/common.hpp"
#include "streamloc/ops.hpp"
#include "streamloc/optim.hpp"
#include "streamloc/rng.hpp"
#include "streamloc/tensor.hpp"

namespace streamloc {

// The K action classes and the label sets derived from them.
struct LabelSpace {
  std::vector<std::string> class_names;

  int k() const { return static_cast<int>(class_names.size()); }
  static constexpr int kPrSize = 2;  // background, action
  int ar_size() const { return 2 * k(); }
  int det_size() const { return k() + 1; }
  // Subclass encoding: beginning of class c = 2c, finishing = 2c+1.
  int ar_label(int class_id, bool finishing) const;
  int det_background() const { return k(); }
  std::string ar_name(int label) const;
};

// ---- C3D (PR and AR share this; they differ only in out_dim) ----
struct C3DConfig {
  int64_t in_channels = 1;
  int64_t height = 32, width = 32;
  // conv blocks 1a, 2a, 3a, 3b, 4a, 4b, 5a, 5b
  std::vector<int64_t> widths = {8, 16, 32, 32, 64, 64, 64, 64};
  int64_t feature_dim = 128;  // fc6 and fc7
  int64_t out_dim = 2;
  double dropout_p = 0.5;

  std::string str() const;  // canonical form, hashed into checkpoints
};

// 8 conv layers (3x3x3, same padding), 5 pools (pool1 keeps time, the rest
// halve it; windows clamp to the remaining extent), fc6/fc7, output layer.
// A 16-frame input leaves pool5 with temporal extent 1.
class C3DNet {
 public:
  C3DNet(C3DConfig cfg, Dtype dtype, Rng& rng);

  struct Out {
    Tensor logits;  // [N, out_dim]
    Tensor fc7;     // [N, feature_dim], post-ReLU, pre-dropout
  };
  // x is [N, C, 16, H, W]; dropout (train mode) needs `drop_rng`.
  Out forward(const Tensor& x, Mode mode, Rng* drop_rng = nullptr) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  const C3DConfig& config() const { return cfg_; }
  int64_t param_count() const;

 private:
  C3DConfig cfg_;
  std::vector<Parameter> params_;
  const Tensor& p(size_t i) const { return params_[i].value; }
};

// ---- F2G: future frame generation ----
struct F2GConfig {
  int64_t in_channels = 1;
  int64_t height = 32, width = 32;  // divisible by 4
  std::vector<int64_t> content_widths = {16, 32};  // two stride-2 convs
  std::vector<int64_t> motion_widths = {16, 32};   // two stride-2 convs
  int64_t lstm_channels = 32;                      // convLSTM at H/4 x W/4
  int64_t fuse_width = 64;
  std::vector<int64_t> decoder_widths = {32, 16};  // two stride-2 deconvs
  int64_t horizon = 8;

  std::string str() const;
};

// Content CNN on the latest frame + motion convLSTM on successive frame
// differences; the decoder fuses both and upsamples back to frame size.
// Generation is recursive: each predicted frame feeds the next step.
class F2GNet {
 public:
  F2GNet(F2GConfig cfg, Dtype dtype, Rng& rng);

  // context [16, C, H, W] -> [horizon, C, H, W], values in (0,1). No graph.
  Tensor generate(const Tensor& context) const;
  // Differentiable: mean over the horizon of image_loss(pred, target).
  // context [16, C, H, W], targets [horizon, C, H, W].
  Tensor train_loss(const Tensor& context, const Tensor& targets,
                    double gdl_weight = 1.0) const;

  std::vector<Parameter*> parameters();
  const F2GConfig& config() const { return cfg_; }
  int64_t param_count() const;

 private:
  std::vector<Tensor> unroll(const Tensor& context) const;
  Tensor encode_motion(const Tensor& diff) const;
  Tensor predict(const Tensor& last, const Tensor& motion_h) const;

  F2GConfig cfg_;
  std::vector<Parameter> params_;
  const Tensor& p(size_t i) const { return params_[i].value; }
  ops::ConvLstmParams clstm_;  // views over params_, built once
};

// ---- detection LSTM ----
struct DetectorConfig {
  int64_t input_dim = 512;  // 4F
  int64_t lstm_width = 128;
  int64_t num_layers = 2;
  double dropout_p = 0.5;
  int64_t out_dim = 4;  // K+1

  std::string str() const;
};

// dropout -> LSTM -> LSTM -> dropout -> dense(K+1), stepped one window at a
// time; recurrent state is explicit so callers control its lifetime.
class DetectorNet {
 public:
  DetectorNet(DetectorConfig cfg, Dtype dtype, Rng& rng);

  struct State {
    std::vector<ops::LstmState> layers;
  };
  State initial_state(int64_t batch = 1) const;

  struct Out {
    Tensor logits;  // [N, out_dim]
    State state;
  };
  // features [N, input_dim] in the fixed order
  // concat(fc7_pr, fc7_pr_future, fc7_ar, fc7_ar_future).
  Out forward(const Tensor& features, const State& state, Mode mode,
              Rng* drop_rng = nullptr) const;

  std::vector<Parameter*> parameters();
  const DetectorConfig& config() const { return cfg_; }
  int64_t param_count() const;

 private:
  DetectorConfig cfg_;
  std::vector<Parameter> params_;
  std::vector<ops::LstmParams> layer_params_;  // views over params_
};

}  // namespace streamloc
