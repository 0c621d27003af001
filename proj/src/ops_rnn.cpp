#include <string>

#include "streamloc/ops.hpp"

// LSTM cells are composites of the primitive ops, so they inherit their
// gradients; nothing here carries its own backward closure.

namespace streamloc::ops {

namespace {

Tensor gate_dense(const Tensor& x, const Tensor& h, const Tensor& wx,
                  const Tensor& wh, const Tensor& b) {
  return bias_add(add(linear(x, wx), linear(h, wh)), b);
}

Int2 same_pad(const char* op, const Tensor& k) {
  const int64_t kh = k.dim(k.rank() - 2), kw = k.dim(k.rank() - 1);
  if (kh % 2 == 0 || kw % 2 == 0)
    fail(ErrorKind::kDimension,
         std::string(op) + ": same padding needs odd kernel dims, got " +
             shape_str(k.shape()));
  return {static_cast<int>(kh / 2), static_cast<int>(kw / 2)};
}

Tensor gate_conv(const Tensor& x, const Tensor& h, const Tensor& kx,
                 const Tensor& kh, const Tensor& b) {
  Tensor zx = conv2d(x, kx, {1, 1}, same_pad("conv_lstm_cell", kx));
  Tensor zh = conv2d(h, kh, {1, 1}, same_pad("conv_lstm_cell", kh));
  return bias_add(add(zx, zh), b);
}

}  // namespace

LstmState lstm_cell(const Tensor& x, const LstmState& state,
                    const LstmParams& p) {
  if (x.rank() != 2 || state.h.rank() != 2 || state.c.rank() != 2)
    fail(ErrorKind::kDimension,
         "lstm_cell: expected rank-2 input and state, got x " +
             shape_str(x.shape()) + ", h " + shape_str(state.h.shape()) +
             ", c " + shape_str(state.c.shape()));
  Tensor i = sigmoid(gate_dense(x, state.h, p.wxi, p.whi, p.bi));
  Tensor f = sigmoid(gate_dense(x, state.h, p.wxf, p.whf, p.bf));
  Tensor g = tanh(gate_dense(x, state.h, p.wxg, p.whg, p.bg));
  Tensor o = sigmoid(gate_dense(x, state.h, p.wxo, p.who, p.bo));
  Tensor c = add(mul(f, state.c), mul(i, g));
  Tensor h = mul(o, tanh(c));
  return {h, c};
}

LstmState conv_lstm_cell(const Tensor& x, const LstmState& state,
                         const ConvLstmParams& p) {
  if (x.rank() != 4 || state.h.rank() != 4 || state.c.rank() != 4)
    fail(ErrorKind::kDimension,
         "conv_lstm_cell: expected rank-4 input and state, got x " +
             shape_str(x.shape()) + ", h " + shape_str(state.h.shape()) +
             ", c " + shape_str(state.c.shape()));
  if (x.dim(2) != state.h.dim(2) || x.dim(3) != state.h.dim(3))
    fail(ErrorKind::kDimension,
         "conv_lstm_cell: spatial dims of x " + shape_str(x.shape()) +
             " and h " + shape_str(state.h.shape()) + " differ");
  Tensor i = sigmoid(gate_conv(x, state.h, p.kxi, p.khi, p.bi));
  Tensor f = sigmoid(gate_conv(x, state.h, p.kxf, p.khf, p.bf));
  Tensor g = tanh(gate_conv(x, state.h, p.kxg, p.khg, p.bg));
  Tensor o = sigmoid(gate_conv(x, state.h, p.kxo, p.kho, p.bo));
  Tensor c = add(mul(f, state.c), mul(i, g));
  Tensor h = mul(o, tanh(c));
  return {h, c};
}

}  // namespace streamloc::ops
