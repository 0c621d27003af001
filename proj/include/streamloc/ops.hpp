#pragma once

#include "streamloc/common.hpp"
#include "streamloc/rng.hpp"
#include "streamloc/tensor.hpp"

// Differentiable ops. Every op validates shapes up front, computes the
// forward value and, when grad mode is on, attaches a closure that routes
// the output gradient back to its inputs. Layouts follow the Caffe
// convention: video tensors are [N, C, T, H, W], images [N, C, H, W],
// kernels [Cout, Cin, (kt,) kh, kw].

namespace streamloc::ops {

// ---- elementwise ----
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);

// Inverted dropout: train mode zeroes each element with probability p and
// rescales survivors by 1/(1-p); eval mode is the identity. 0 <= p < 1.
Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng);

// ---- shape / assembly ----
Tensor reshape(const Tensor& x, Shape shape);
// Concatenate along axis 1 (channels); all other axes must match.
Tensor concat_channels(const std::vector<Tensor>& parts);
// x is [N, C, ...], bias is [C]; adds bias[c] across every trailing position.
Tensor bias_add(const Tensor& x, const Tensor& bias);

// ---- dense ----
// x [N, Din] times w [Dout, Din] transposed -> [N, Dout].
Tensor linear(const Tensor& x, const Tensor& w);
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- reductions / losses ----
Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar

// Row-wise softmax over the last axis of a [N, K] tensor.
Tensor softmax(const Tensor& logits);

// Mean over rows of -w_k * log softmax(logits)[k] at the one-hot target
// class. `class_weights` is [K] or an empty tensor for uniform weights.
// Each target row must be exactly one-hot.
Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& onehot,
                             const Tensor& class_weights = Tensor());

// L2 plus weighted gradient-difference image loss, averaged over batch
// elements: sum((p-t)^2) + gdl_weight * sum(||d_h t| - |d_h p|| + ||d_w t| - |d_w p||)
// over neighbour differences d_h/d_w. pred/target are [N, C, H, W];
// differentiable w.r.t. pred only.
Tensor image_loss(const Tensor& pred, const Tensor& target, double gdl_weight);

// ---- conv / pool ----
// x [N, Cin, T, H, W], k [Cout, Cin, kt, kh, kw]. Zero padding; output dims
// floor((in + 2p - k) / s) + 1.
Tensor conv3d(const Tensor& x, const Tensor& k, Int3 stride, Int3 pad);
// x [N, Cin, H, W], k [Cout, Cin, kh, kw].
Tensor conv2d(const Tensor& x, const Tensor& k, Int2 stride, Int2 pad);
// Transposed conv, the adjoint of conv2d under the same kernel:
// <conv2d(x, k), y> == <x, deconv2d(y, k)>. y [N, Cout, H, W] with the same
// k [Cout, Cin, kh, kw] yields [N, Cin, (H-1)s - 2p + kh, (W-1)s - 2p + kw].
Tensor deconv2d(const Tensor& y, const Tensor& k, Int2 stride, Int2 pad);
// Window/stride max pooling; ties go to the first element in scan order and
// route the full gradient there.
Tensor maxpool3d(const Tensor& x, Int3 window, Int3 stride);

// ---- recurrent cells (composites of the primitives above) ----
struct LstmParams {
  // One (input weight, hidden weight, bias) triple per gate i, f, g, o.
  Tensor wxi, whi, bi;
  Tensor wxf, whf, bf;
  Tensor wxg, whg, bg;
  Tensor wxo, who, bo;
};

struct LstmState {
  Tensor h, c;
};

// x [N, Din], state tensors [N, Dh].
LstmState lstm_cell(const Tensor& x, const LstmState& state, const LstmParams& p);

struct ConvLstmParams {
  // Conv kernels on the input map and on the hidden map plus channel biases.
  Tensor kxi, khi, bi;
  Tensor kxf, khf, bf;
  Tensor kxg, khg, bg;
  Tensor kxo, kho, bo;
};

// x [N, Cin, H, W], state maps [N, Ch, H, W]; stride-1 same-padded
// convolutions (kernels must be odd-sized) so spatial dims are preserved.
LstmState conv_lstm_cell(const Tensor& x, const LstmState& state,
                         const ConvLstmParams& p);

}  // namespace streamloc::ops
