#include "streamloc/networks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace streamloc {

namespace {

Parameter make_param(std::string name, Tensor value) {
  value.set_requires_grad(true);
  return Parameter{std::move(name), std::move(value), Tensor(), Tensor()};
}

// He-style init for conv/dense weights feeding ReLU.
Tensor he(Shape shape, int64_t fan_in, Dtype dtype, Rng& rng) {
  return Tensor::randn(std::move(shape), std::sqrt(2.0 / fan_in), rng, dtype);
}

// Gate weights feeding sigmoid/tanh get the gentler 1/fan_in scale.
Tensor gate(Shape shape, int64_t fan_in, Dtype dtype, Rng& rng) {
  return Tensor::randn(std::move(shape), std::sqrt(1.0 / fan_in), rng, dtype);
}

struct Dims3 {
  int64_t t, h, w;
};

int64_t pool_out(int64_t v, int64_t wnd) {
  wnd = std::min(wnd, v);
  return (v - wnd) / wnd + 1;
}

// Extents after pool1 (1,2,2) and pools 2-5 (2,2,2), windows clamped.
Dims3 c3d_pooled(int64_t t, int64_t h, int64_t w) {
  h = pool_out(h, 2);
  w = pool_out(w, 2);
  for (int i = 0; i < 4; ++i) {
    t = pool_out(t, 2);
    h = pool_out(h, 2);
    w = pool_out(w, 2);
  }
  return {t, h, w};
}

std::string join(const std::vector<int64_t>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

constexpr int64_t kTau = 16;  // C3D temporal input extent

}  // namespace

int LabelSpace::ar_label(int class_id, bool finishing) const {
  if (class_id < 0 || class_id >= k())
    fail(ErrorKind::kLabel,
         "ar_label: class id " + std::to_string(class_id) + " out of range");
  return 2 * class_id + (finishing ? 1 : 0);
}

std::string LabelSpace::ar_name(int label) const {
  if (label < 0 || label >= ar_size())
    fail(ErrorKind::kLabel, "ar_name: label " + std::to_string(label) + " out of range");
  return class_names[static_cast<size_t>(label / 2)] +
         (label % 2 ? ".finishing" : ".beginning");
}

// ---- C3D ----

std::string C3DConfig::str() const {
  std::ostringstream os;
  os << "c3d;in=" << in_channels << ";hw=" << height << "x" << width
     << ";widths=" << join(widths) << ";f=" << feature_dim << ";out=" << out_dim
     << ";drop=" << dropout_p;
  return os.str();
}

C3DNet::C3DNet(C3DConfig cfg, Dtype dtype, Rng& rng) : cfg_(std::move(cfg)) {
  if (cfg_.widths.size() != 8)
    fail(ErrorKind::kArgument, "c3d: exactly 8 conv widths required, got " +
                                   std::to_string(cfg_.widths.size()));
  if (cfg_.in_channels < 1 || cfg_.height < 4 || cfg_.width < 4 ||
      cfg_.feature_dim < 1 || cfg_.out_dim < 2)
    fail(ErrorKind::kArgument, "c3d: invalid config " + cfg_.str());
  static const char* names[8] = {"conv1a", "conv2a", "conv3a", "conv3b",
                                 "conv4a", "conv4b", "conv5a", "conv5b"};
  // Small positive bias keeps narrow ReLU layers from starting fully dead.
  int64_t cin = cfg_.in_channels;
  for (int i = 0; i < 8; ++i) {
    const int64_t cout = cfg_.widths[static_cast<size_t>(i)];
    params_.push_back(make_param(std::string(names[i]) + ".k",
                                 he({cout, cin, 3, 3, 3}, cin * 27, dtype, rng)));
    params_.push_back(make_param(std::string(names[i]) + ".b",
                                 Tensor::full({cout}, 0.01, dtype)));
    cin = cout;
  }
  Dims3 d = c3d_pooled(kTau, cfg_.height, cfg_.width);
  const int64_t flat = cfg_.widths[7] * d.t * d.h * d.w;
  params_.push_back(make_param(
      "fc6.w", he({cfg_.feature_dim, flat}, flat, dtype, rng)));
  params_.push_back(
      make_param("fc6.b", Tensor::full({cfg_.feature_dim}, 0.01, dtype)));
  params_.push_back(make_param(
      "fc7.w", he({cfg_.feature_dim, cfg_.feature_dim}, cfg_.feature_dim, dtype, rng)));
  params_.push_back(
      make_param("fc7.b", Tensor::full({cfg_.feature_dim}, 0.01, dtype)));
  params_.push_back(make_param(
      "out.w", gate({cfg_.out_dim, cfg_.feature_dim}, cfg_.feature_dim, dtype, rng)));
  params_.push_back(make_param("out.b", Tensor::zeros({cfg_.out_dim}, dtype)));
}

C3DNet::Out C3DNet::forward(const Tensor& x, Mode mode, Rng* drop_rng) const {
  if (x.rank() != 5)
    fail(ErrorKind::kDimension,
         "c3d: expected [N,C,T,H,W] input, got " + shape_str(x.shape()));
  if (x.dim(2) != kTau)
    fail(ErrorKind::kDimension, "c3d: temporal extent must be " +
                                    std::to_string(kTau) + ", got " +
                                    std::to_string(x.dim(2)));
  if (x.dim(1) != cfg_.in_channels || x.dim(3) != cfg_.height ||
      x.dim(4) != cfg_.width)
    fail(ErrorKind::kDimension, "c3d: input " + shape_str(x.shape()) +
                                    " does not match config " + cfg_.str());
  const bool drop = mode == Mode::kTrain && cfg_.dropout_p > 0.0;
  if (drop && !drop_rng)
    fail(ErrorKind::kArgument, "c3d: train-mode forward needs a dropout rng");
  Tensor h = x;
  auto conv = [&](int i) {
    h = ops::relu(ops::bias_add(
        ops::conv3d(h, p(2 * static_cast<size_t>(i)), {1, 1, 1}, {1, 1, 1}),
        p(2 * static_cast<size_t>(i) + 1)));
  };
  auto pool = [&](bool over_time) {
    Int3 wnd{over_time ? static_cast<int>(std::min<int64_t>(2, h.dim(2))) : 1,
             static_cast<int>(std::min<int64_t>(2, h.dim(3))),
             static_cast<int>(std::min<int64_t>(2, h.dim(4)))};
    h = ops::maxpool3d(h, wnd, wnd);
  };
  conv(0);
  pool(false);
  conv(1);
  pool(true);
  conv(2);
  conv(3);
  pool(true);
  conv(4);
  conv(5);
  pool(true);
  conv(6);
  conv(7);
  pool(true);
  h = ops::reshape(h, {h.dim(0), h.numel() / h.dim(0)});
  h = ops::relu(ops::dense(h, p(16), p(17)));
  if (drop) h = ops::dropout(h, cfg_.dropout_p, mode, *drop_rng);
  Tensor fc7 = ops::relu(ops::dense(h, p(18), p(19)));
  Tensor head = fc7;
  if (drop) head = ops::dropout(head, cfg_.dropout_p, mode, *drop_rng);
  Tensor logits = ops::dense(head, p(20), p(21));
  return {logits, fc7};
}

std::vector<Parameter*> C3DNet::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> C3DNet::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

int64_t C3DNet::param_count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

// ---- F2G ----

std::string F2GConfig::str() const {
  std::ostringstream os;
  os << "f2g;in=" << in_channels << ";hw=" << height << "x" << width
     << ";content=" << join(content_widths) << ";motion=" << join(motion_widths)
     << ";lstm=" << lstm_channels << ";fuse=" << fuse_width
     << ";decoder=" << join(decoder_widths) << ";horizon=" << horizon;
  return os.str();
}

F2GNet::F2GNet(F2GConfig cfg, Dtype dtype, Rng& rng) : cfg_(std::move(cfg)) {
  if (cfg_.content_widths.size() != 2 || cfg_.motion_widths.size() != 2 ||
      cfg_.decoder_widths.size() != 2)
    fail(ErrorKind::kArgument, "f2g: encoder/decoder width lists must have 2 entries");
  if (cfg_.height % 4 != 0 || cfg_.width % 4 != 0 || cfg_.height < 8 ||
      cfg_.width < 8)
    fail(ErrorKind::kArgument,
         "f2g: frame size must be a multiple of 4 and >= 8, got " +
             std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
  if (cfg_.horizon < 1) fail(ErrorKind::kArgument, "f2g: horizon must be >= 1");
  const int64_t c = cfg_.in_channels;
  const int64_t cw0 = cfg_.content_widths[0], cw1 = cfg_.content_widths[1];
  const int64_t mw0 = cfg_.motion_widths[0], mw1 = cfg_.motion_widths[1];
  const int64_t L = cfg_.lstm_channels, fw = cfg_.fuse_width;
  const int64_t dw0 = cfg_.decoder_widths[0], dw1 = cfg_.decoder_widths[1];
  // ReLU-followed layers get a small positive bias so narrow encoders do not
  // start fully dead; the sigmoid output head keeps a zero bias.
  auto conv_pair = [&](const char* name, int64_t cin, int64_t cout,
                       double bias_init) {
    params_.push_back(make_param(std::string(name) + ".k",
                                 he({cout, cin, 3, 3}, cin * 9, dtype, rng)));
    params_.push_back(make_param(std::string(name) + ".b",
                                 Tensor::full({cout}, bias_init, dtype)));
  };
  conv_pair("content1", c, cw0, 0.01);    // 0,1
  conv_pair("content2", cw0, cw1, 0.01);  // 2,3
  conv_pair("motion1", c, mw0, 0.01);     // 4,5
  conv_pair("motion2", mw0, mw1, 0.01);   // 6,7
  static const char* gates[4] = {"i", "f", "g", "o"};
  for (int gi = 0; gi < 4; ++gi) {  // 8..19
    params_.push_back(make_param(std::string("clstm.kx") + gates[gi],
                                 gate({L, mw1, 3, 3}, mw1 * 9, dtype, rng)));
    params_.push_back(make_param(std::string("clstm.kh") + gates[gi],
                                 gate({L, L, 3, 3}, L * 9, dtype, rng)));
    Tensor b = Tensor::zeros({L}, dtype);
    if (gi == 1) b = Tensor::full({L}, 1.0, dtype);  // forget gate starts open
    params_.push_back(make_param(std::string("clstm.b") + gates[gi], std::move(b)));
  }
  conv_pair("fuse", cw1 + L, fw, 0.01);  // 20,21
  params_.push_back(make_param("deconv1.k",
                               he({fw, dw0, 4, 4}, fw * 16, dtype, rng)));  // 22
  params_.push_back(
      make_param("deconv1.b", Tensor::full({dw0}, 0.01, dtype)));  // 23
  params_.push_back(make_param("deconv2.k",
                               he({dw0, dw1, 4, 4}, dw0 * 16, dtype, rng)));  // 24
  params_.push_back(
      make_param("deconv2.b", Tensor::full({dw1}, 0.01, dtype)));  // 25
  conv_pair("out", dw1, c, 0.0);  // 26,27
  clstm_ = ops::ConvLstmParams{p(8),  p(9),  p(10), p(11), p(12), p(13),
                               p(14), p(15), p(16), p(17), p(18), p(19)};
}

Tensor F2GNet::encode_motion(const Tensor& diff) const {
  Tensor h = ops::relu(ops::bias_add(ops::conv2d(diff, p(4), {2, 2}, {1, 1}), p(5)));
  return ops::relu(ops::bias_add(ops::conv2d(h, p(6), {2, 2}, {1, 1}), p(7)));
}

Tensor F2GNet::predict(const Tensor& last, const Tensor& motion_h) const {
  Tensor c = ops::relu(ops::bias_add(ops::conv2d(last, p(0), {2, 2}, {1, 1}), p(1)));
  c = ops::relu(ops::bias_add(ops::conv2d(c, p(2), {2, 2}, {1, 1}), p(3)));
  Tensor f = ops::concat_channels({c, motion_h});
  f = ops::relu(ops::bias_add(ops::conv2d(f, p(20), {1, 1}, {1, 1}), p(21)));
  f = ops::relu(ops::bias_add(ops::deconv2d(f, p(22), {2, 2}, {1, 1}), p(23)));
  f = ops::relu(ops::bias_add(ops::deconv2d(f, p(24), {2, 2}, {1, 1}), p(25)));
  return ops::sigmoid(ops::bias_add(ops::conv2d(f, p(26), {1, 1}, {1, 1}), p(27)));
}

std::vector<Tensor> F2GNet::unroll(const Tensor& context) const {
  if (context.rank() != 4)
    fail(ErrorKind::kDimension,
         "f2g: expected [T,C,H,W] context, got " + shape_str(context.shape()));
  if (context.dim(0) != kTau)
    fail(ErrorKind::kDimension, "f2g: context length must be " +
                                    std::to_string(kTau) + ", got " +
                                    std::to_string(context.dim(0)));
  if (context.dim(1) != cfg_.in_channels || context.dim(2) != cfg_.height ||
      context.dim(3) != cfg_.width)
    fail(ErrorKind::kDimension, "f2g: context " + shape_str(context.shape()) +
                                    " does not match config " + cfg_.str());
  const int64_t chw = context.numel() / kTau;
  const Dtype dt = context.dtype();
  std::vector<Tensor> frames;
  frames.reserve(kTau);
  for (int64_t t = 0; t < kTau; ++t) {
    Tensor f = Tensor::zeros({1, cfg_.in_channels, cfg_.height, cfg_.width}, dt);
    std::memcpy(f.impl_->data.data(),
                context.impl_->data.data() + t * chw * dtype_size(dt),
                static_cast<size_t>(chw) * dtype_size(dt));
    frames.push_back(std::move(f));
  }
  ops::LstmState state{
      Tensor::zeros({1, cfg_.lstm_channels, cfg_.height / 4, cfg_.width / 4}, dt),
      Tensor::zeros({1, cfg_.lstm_channels, cfg_.height / 4, cfg_.width / 4}, dt)};
  for (int64_t t = 1; t < kTau; ++t) {
    Tensor d = ops::sub(frames[static_cast<size_t>(t)],
                        frames[static_cast<size_t>(t - 1)]);
    state = ops::conv_lstm_cell(encode_motion(d), state, clstm_);
  }
  Tensor last = frames.back();
  std::vector<Tensor> preds;
  preds.reserve(static_cast<size_t>(cfg_.horizon));
  for (int64_t i = 0; i < cfg_.horizon; ++i) {
    Tensor pred = predict(last, state.h);
    preds.push_back(pred);
    if (i + 1 < cfg_.horizon) {
      state = ops::conv_lstm_cell(encode_motion(ops::sub(pred, last)), state,
                                  clstm_);
      last = pred;
    }
  }
  return preds;
}

Tensor F2GNet::generate(const Tensor& context) const {
  NoGradGuard ng;
  std::vector<Tensor> preds = unroll(context);
  Tensor out = Tensor::zeros(
      {cfg_.horizon, cfg_.in_channels, cfg_.height, cfg_.width}, context.dtype());
  const size_t bytes = preds[0].impl_->data.size();
  for (size_t i = 0; i < preds.size(); ++i)
    std::memcpy(out.impl_->data.data() + i * bytes, preds[i].impl_->data.data(),
                bytes);
  return out;
}

Tensor F2GNet::train_loss(const Tensor& context, const Tensor& targets,
                          double gdl_weight) const {
  if (targets.rank() != 4 || targets.dim(0) != cfg_.horizon ||
      targets.dim(1) != cfg_.in_channels || targets.dim(2) != cfg_.height ||
      targets.dim(3) != cfg_.width)
    fail(ErrorKind::kDimension,
         "f2g: targets " + shape_str(targets.shape()) + " must be [" +
             std::to_string(cfg_.horizon) + ",C,H,W] matching " + cfg_.str());
  std::vector<Tensor> preds = unroll(context);
  const int64_t chw = targets.numel() / cfg_.horizon;
  const Dtype dt = targets.dtype();
  Tensor total;
  for (int64_t i = 0; i < cfg_.horizon; ++i) {
    Tensor t = Tensor::zeros({1, cfg_.in_channels, cfg_.height, cfg_.width}, dt);
    std::memcpy(t.impl_->data.data(),
                targets.impl_->data.data() + i * chw * dtype_size(dt),
                static_cast<size_t>(chw) * dtype_size(dt));
    Tensor li = ops::image_loss(preds[static_cast<size_t>(i)], t, gdl_weight);
    total = total.defined() ? ops::add(total, li) : li;
  }
  return ops::scale(total, 1.0 / static_cast<double>(cfg_.horizon));
}

std::vector<Parameter*> F2GNet::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

int64_t F2GNet::param_count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

// ---- detector ----

std::string DetectorConfig::str() const {
  std::ostringstream os;
  os << "det;in=" << input_dim << ";lstm=" << lstm_width << "x" << num_layers
     << ";drop=" << dropout_p << ";out=" << out_dim;
  return os.str();
}

DetectorNet::DetectorNet(DetectorConfig cfg, Dtype dtype, Rng& rng)
    : cfg_(std::move(cfg)) {
  if (cfg_.input_dim < 1 || cfg_.lstm_width < 1 || cfg_.num_layers < 1 ||
      cfg_.out_dim < 2)
    fail(ErrorKind::kArgument, "detector: invalid config " + cfg_.str());
  static const char* gates[4] = {"i", "f", "g", "o"};
  for (int64_t l = 0; l < cfg_.num_layers; ++l) {
    const int64_t din = l == 0 ? cfg_.input_dim : cfg_.lstm_width;
    const int64_t dh = cfg_.lstm_width;
    const std::string prefix = "lstm" + std::to_string(l) + ".";
    for (int gi = 0; gi < 4; ++gi) {
      params_.push_back(make_param(prefix + "wx" + gates[gi],
                                   gate({dh, din}, din, dtype, rng)));
      params_.push_back(make_param(prefix + "wh" + gates[gi],
                                   gate({dh, dh}, dh, dtype, rng)));
      Tensor b = gi == 1 ? Tensor::full({dh}, 1.0, dtype)
                         : Tensor::zeros({dh}, dtype);
      params_.push_back(make_param(prefix + "b" + gates[gi], std::move(b)));
    }
  }
  params_.push_back(make_param(
      "out.w", gate({cfg_.out_dim, cfg_.lstm_width}, cfg_.lstm_width, dtype, rng)));
  params_.push_back(make_param("out.b", Tensor::zeros({cfg_.out_dim}, dtype)));
  for (int64_t l = 0; l < cfg_.num_layers; ++l) {
    const size_t base = static_cast<size_t>(l) * 12;
    layer_params_.push_back(ops::LstmParams{
        params_[base + 0].value, params_[base + 1].value, params_[base + 2].value,
        params_[base + 3].value, params_[base + 4].value, params_[base + 5].value,
        params_[base + 6].value, params_[base + 7].value, params_[base + 8].value,
        params_[base + 9].value, params_[base + 10].value,
        params_[base + 11].value});
  }
}

DetectorNet::State DetectorNet::initial_state(int64_t batch) const {
  const Dtype dt = params_[0].value.dtype();
  State s;
  for (int64_t l = 0; l < cfg_.num_layers; ++l)
    s.layers.push_back(ops::LstmState{
        Tensor::zeros({batch, cfg_.lstm_width}, dt),
        Tensor::zeros({batch, cfg_.lstm_width}, dt)});
  return s;
}

DetectorNet::Out DetectorNet::forward(const Tensor& features, const State& state,
                                      Mode mode, Rng* drop_rng) const {
  if (features.rank() != 2 || features.dim(1) != cfg_.input_dim)
    fail(ErrorKind::kDimension,
         "detector: features " + shape_str(features.shape()) +
             " do not match input_dim " + std::to_string(cfg_.input_dim));
  if (static_cast<int64_t>(state.layers.size()) != cfg_.num_layers)
    fail(ErrorKind::kState, "detector: state has " +
                                std::to_string(state.layers.size()) +
                                " layers, config wants " +
                                std::to_string(cfg_.num_layers));
  const bool drop = mode == Mode::kTrain && cfg_.dropout_p > 0.0;
  if (drop && !drop_rng)
    fail(ErrorKind::kArgument, "detector: train-mode forward needs a dropout rng");
  Tensor x = features;
  if (drop) x = ops::dropout(x, cfg_.dropout_p, mode, *drop_rng);
  State next;
  for (int64_t l = 0; l < cfg_.num_layers; ++l) {
    ops::LstmState s = ops::lstm_cell(x, state.layers[static_cast<size_t>(l)],
                                      layer_params_[static_cast<size_t>(l)]);
    x = s.h;
    next.layers.push_back(std::move(s));
  }
  if (drop) x = ops::dropout(x, cfg_.dropout_p, mode, *drop_rng);
  const size_t nw = params_.size();
  Tensor logits = ops::dense(x, params_[nw - 2].value, params_[nw - 1].value);
  return {logits, std::move(next)};
}

std::vector<Parameter*> DetectorNet::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

int64_t DetectorNet::param_count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

}  // namespace streamloc
