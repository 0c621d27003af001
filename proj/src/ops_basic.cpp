#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "streamloc/ops.hpp"

namespace streamloc::ops {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

bool wants_grad(const Tensor& t) {
  return t.defined() && (t.requires_grad() || t.impl_->grad_fn != nullptr);
}

void check_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype())
    fail(ErrorKind::kDimension, std::string(op) + ": dtype mismatch (" +
                                    dtype_name(a.dtype()) + " vs " +
                                    dtype_name(b.dtype()) + ")");
  if (a.shape() != b.shape())
    fail(ErrorKind::kDimension, std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

}  // namespace

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename S>() {
    auto xs = x.buf<S>();
    auto os = out.buf<S>();
    for (size_t i = 0; i < xs.size(); ++i) os[i] = xs[i] > S(0) ? xs[i] : S(0);
  });
  Tensor xin = x;
  detail::attach_grad_fn(out, "relu", {x}, [xin](const Tensor& o) mutable {
    Tensor oc = o;
    dispatch(oc.dtype(), [&]<typename S>() {
      auto g = oc.grad_buf<S>();
      auto xs = xin.buf<S>();
      auto gx = xin.grad_buf<S>();
      for (size_t i = 0; i < g.size(); ++i)
        if (xs[i] > S(0)) gx[i] += g[i];
    });
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename S>() {
    auto xs = x.buf<S>();
    auto os = out.buf<S>();
    for (size_t i = 0; i < xs.size(); ++i) {
      double v = static_cast<double>(xs[i]);
      // Evaluate from the non-overflowing side.
      double y = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                          : std::exp(v) / (1.0 + std::exp(v));
      os[i] = static_cast<S>(y);
    }
  });
  Tensor xin = x, val = out;
  detail::attach_grad_fn(out, "sigmoid", {x}, [xin, val](const Tensor& o) mutable {
    Tensor oc = o;
    dispatch(oc.dtype(), [&]<typename S>() {
      auto g = oc.grad_buf<S>();
      auto ys = val.buf<S>();
      auto gx = xin.grad_buf<S>();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * ys[i] * (S(1) - ys[i]);
    });
  });
  return out;
}

Tensor tanh(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename S>() {
    auto xs = x.buf<S>();
    auto os = out.buf<S>();
    for (size_t i = 0; i < xs.size(); ++i)
      os[i] = static_cast<S>(std::tanh(static_cast<double>(xs[i])));
  });
  Tensor xin = x, val = out;
  detail::attach_grad_fn(out, "tanh", {x}, [xin, val](const Tensor& o) mutable {
    Tensor oc = o;
    dispatch(oc.dtype(), [&]<typename S>() {
      auto g = oc.grad_buf<S>();
      auto ys = val.buf<S>();
      auto gx = xin.grad_buf<S>();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (S(1) - ys[i] * ys[i]);
    });
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same("add", a, b);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename S>() {
    auto as = a.buf<S>();
    auto bs = b.buf<S>();
    auto os = out.buf<S>();
    for (size_t i = 0; i < as.size(); ++i) os[i] = as[i] + bs[i];
  });
  Tensor ain = a, bin = b;
  detail::attach_grad_fn(out, "add", {a, b}, [ain, bin](const Tensor& o) mutable {
    Tensor oc = o;
    dispatch(oc.dtype(), [&]<typename S>() {
      auto g = oc.grad_buf<S>();
      if (wants_grad(ain)) {
        auto ga = ain.grad_buf<S>();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (wants_grad(bin)) {
        auto gb = bin.grad_buf<S>();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same("sub", a, b);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename S>() {
    auto as = a.buf<S>();
    auto bs = b.buf<S>();
    auto os = out.buf<S>();
    for (size_t i = 0; i < as.size(); ++i) os[i] = as[i] - bs[i];
  });
  Tensor ain = a, bin = b;
  detail::attach_grad_fn(out, "sub", {a, b}, [ain, bin](const Tensor& o) mutable {
    Tensor oc = o;
    dispatch(oc.dtype(), [&]<typename S>() {
      auto g = oc.grad_buf<S>();
      if (wants_grad(ain)) {
        auto ga = ain.grad_buf<S>();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (wants_grad(bin)) {
        auto gb = bin.grad_buf<S>();
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same("mul", a, b);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename S>() {
    auto as = a.buf<S>();
    auto bs = b.buf<S>();
    auto os = out.buf<S>();
    for (size_t i = 0; i < as.size(); ++i) os[i] = as[i] * bs[i];
  });
  Tensor ain = a, bin = b;
  detail::attach_grad_fn(out, "mul", {a, b}, [ain, bin](const Tensor& o) mutable {
    Tensor oc = o;
    dispatch(oc.dtype(), [&]<typename S>() {
      auto g = oc.grad_buf<S>();
      if (wants_grad(ain)) {
        auto ga = ain.grad_buf<S>();
        auto bs = bin.buf<S>();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs[i];
      }
      if (wants_grad(bin)) {
        auto gb = bin.grad_buf<S>();
        auto as = ain.buf<S>();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as[i];
      }
    });
  });
  return out;
}

Tensor scale(const Tensor& x, double s) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename S>() {
    auto xs = x.buf<S>();
    auto os = out.buf<S>();
    for (size_t i = 0; i < xs.size(); ++i) os[i] = static_cast<S>(xs[i] * s);
  });
  Tensor xin = x;
  detail::attach_grad_fn(out, "scale", {x}, [xin, s](const Tensor& o) mutable {
    Tensor oc = o;
    dispatch(oc.dtype(), [&]<typename S>() {
      auto g = oc.grad_buf<S>();
      auto gx = xin.grad_buf<S>();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += static_cast<S>(g[i] * s);
    });
  });
  return out;
}

Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (p < 0.0 || p >= 1.0)
    fail(ErrorKind::kArgument,
         "dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::kEval || p == 0.0) return x;
  Tensor mask = Tensor::zeros(x.shape(), x.dtype());
  const double inv_keep = 1.0 / (1.0 - p);
  dispatch(x.dtype(), [&]<typename S>() {
    auto ms = mask.buf<S>();
    for (size_t i = 0; i < ms.size(); ++i)
      ms[i] = rng.uniform() < p ? S(0) : static_cast<S>(inv_keep);
  });
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename S>() {
    auto xs = x.buf<S>();
    auto ms = mask.buf<S>();
    auto os = out.buf<S>();
    for (size_t i = 0; i < xs.size(); ++i) os[i] = xs[i] * ms[i];
  });
  Tensor xin = x;
  detail::attach_grad_fn(out, "dropout", {x}, [xin, mask](const Tensor& o) mutable {
    Tensor oc = o;
    dispatch(oc.dtype(), [&]<typename S>() {
      auto g = oc.grad_buf<S>();
      auto ms = mask.buf<S>();
      auto gx = xin.grad_buf<S>();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * ms[i];
    });
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    fail(ErrorKind::kDimension, "reshape " + shape_str(x.shape()) + " -> " +
                                    shape_str(shape) + " changes element count");
  Tensor out = Tensor::zeros(std::move(shape), x.dtype());
  std::memcpy(out.impl_->data.data(), x.impl_->data.data(),
              x.impl_->data.size());
  Tensor xin = x;
  detail::attach_grad_fn(out, "reshape", {x}, [xin](const Tensor& o) mutable {
    Tensor oc = o;
    dispatch(oc.dtype(), [&]<typename S>() {
      auto g = oc.grad_buf<S>();
      auto gx = xin.grad_buf<S>();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  });
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorKind::kArgument, "concat_channels: no inputs");
  const Tensor& first = parts[0];
  if (first.rank() < 2)
    fail(ErrorKind::kDimension, "concat_channels: rank must be >= 2");
  Shape out_shape = first.shape();
  int64_t total_c = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != first.rank() || t.dtype() != first.dtype())
      fail(ErrorKind::kDimension, "concat_channels: rank/dtype mismatch");
    for (int i = 0; i < first.rank(); ++i)
      if (i != 1 && t.dim(i) != first.dim(i))
        fail(ErrorKind::kDimension,
             "concat_channels: axis " + std::to_string(i) + " mismatch (" +
                 shape_str(t.shape()) + " vs " + shape_str(first.shape()) + ")");
    total_c += t.dim(1);
  }
  out_shape[1] = total_c;
  const int64_t n = first.dim(0);
  int64_t inner = 1;
  for (int i = 2; i < first.rank(); ++i) inner *= first.dim(i);
  Tensor out = Tensor::zeros(out_shape, first.dtype());
  dispatch(first.dtype(), [&]<typename S>() {
    auto os = out.buf<S>();
    for (int64_t bi = 0; bi < n; ++bi) {
      int64_t coff = 0;
      for (const Tensor& t : parts) {
        auto ts = t.buf<S>();
        const int64_t c = t.dim(1);
        std::memcpy(&os[(bi * total_c + coff) * inner],
                    &ts[bi * c * inner],
                    static_cast<size_t>(c * inner) * sizeof(S));
        coff += c;
      }
    }
  });
  std::vector<Tensor> ins = parts;
  detail::attach_grad_fn(
      out, "concat_channels", parts, [ins, n, inner, total_c](const Tensor& o) mutable {
        Tensor oc = o;
        dispatch(oc.dtype(), [&]<typename S>() {
          auto g = oc.grad_buf<S>();
          for (int64_t bi = 0; bi < n; ++bi) {
            int64_t coff = 0;
            for (Tensor& t : ins) {
              const int64_t c = t.dim(1);
              if (wants_grad(t)) {
                auto gt = t.grad_buf<S>();
                const S* src = &g[(bi * total_c + coff) * inner];
                S* dst = &gt[bi * c * inner];
                for (int64_t i = 0; i < c * inner; ++i) dst[i] += src[i];
              }
              coff += c;
            }
          }
        });
      });
  return out;
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2)
    fail(ErrorKind::kDimension, "bias_add: input rank must be >= 2");
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1))
    fail(ErrorKind::kDimension,
         "bias_add: bias " + shape_str(bias.shape()) +
             " does not match channel axis of " + shape_str(x.shape()));
  if (bias.dtype() != x.dtype())
    fail(ErrorKind::kDimension, "bias_add: dtype mismatch");
  const int64_t n = x.dim(0), c = x.dim(1);
  int64_t inner = 1;
  for (int i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename S>() {
    auto xs = x.buf<S>();
    auto bs = bias.buf<S>();
    auto os = out.buf<S>();
    for (int64_t bi = 0; bi < n; ++bi)
      for (int64_t ci = 0; ci < c; ++ci) {
        const S b = bs[ci];
        const int64_t base = (bi * c + ci) * inner;
        for (int64_t i = 0; i < inner; ++i) os[base + i] = xs[base + i] + b;
      }
  });
  Tensor xin = x, bin = bias;
  detail::attach_grad_fn(
      out, "bias_add", {x, bias}, [xin, bin, n, c, inner](const Tensor& o) mutable {
        Tensor oc = o;
        dispatch(oc.dtype(), [&]<typename S>() {
          auto g = oc.grad_buf<S>();
          if (wants_grad(xin)) {
            auto gx = xin.grad_buf<S>();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
          }
          if (wants_grad(bin)) {
            auto gb = bin.grad_buf<S>();
            for (int64_t bi = 0; bi < n; ++bi)
              for (int64_t ci = 0; ci < c; ++ci) {
                S acc = 0;
                const int64_t base = (bi * c + ci) * inner;
                for (int64_t i = 0; i < inner; ++i) acc += g[base + i];
                gb[ci] += acc;
              }
          }
        });
      });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.rank() != 2)
    fail(ErrorKind::kDimension, "linear: expected rank-2 input and weight, got " +
                                    shape_str(x.shape()) + " and " +
                                    shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    fail(ErrorKind::kDimension, "linear: input axis 1 (" +
                                    std::to_string(x.dim(1)) +
                                    ") != weight axis 1 (" +
                                    std::to_string(w.dim(1)) + ")");
  if (x.dtype() != w.dtype())
    fail(ErrorKind::kDimension, "linear: dtype mismatch");
  const int64_t n = x.dim(0), din = x.dim(1), dout = w.dim(0);
  Tensor out = Tensor::zeros({n, dout}, x.dtype());
  dispatch(x.dtype(), [&]<typename S>() {
    ConstMatMap<S> xm(x.buf<S>().data(), n, din);
    ConstMatMap<S> wm(w.buf<S>().data(), dout, din);
    MatMap<S> om(out.buf<S>().data(), n, dout);
    om.noalias() = xm * wm.transpose();
  });
  Tensor xin = x, win = w;
  detail::attach_grad_fn(
      out, "linear", {x, w}, [xin, win, n, din, dout](const Tensor& o) mutable {
        Tensor oc = o;
        dispatch(oc.dtype(), [&]<typename S>() {
          ConstMatMap<S> gm(oc.grad_buf<S>().data(), n, dout);
          if (wants_grad(xin)) {
            ConstMatMap<S> wm(win.buf<S>().data(), dout, din);
            MatMap<S> gx(xin.grad_buf<S>().data(), n, din);
            gx.noalias() += gm * wm;
          }
          if (wants_grad(win)) {
            ConstMatMap<S> xm(xin.buf<S>().data(), n, din);
            MatMap<S> gw(win.grad_buf<S>().data(), dout, din);
            gw.noalias() += gm.transpose() * xm;
          }
        });
      });
  return out;
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  return bias_add(linear(x, w), b);
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({1}, x.dtype());
  dispatch(x.dtype(), [&]<typename S>() {
    auto xs = x.buf<S>();
    double acc = 0.0;
    for (S v : xs) acc += static_cast<double>(v);
    out.buf<S>()[0] = static_cast<S>(acc);
  });
  Tensor xin = x;
  detail::attach_grad_fn(out, "sum", {x}, [xin](const Tensor& o) mutable {
    Tensor oc = o;
    dispatch(oc.dtype(), [&]<typename S>() {
      const S g = oc.grad_buf<S>()[0];
      auto gx = xin.grad_buf<S>();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  });
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / x.numel()); }

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2)
    fail(ErrorKind::kDimension,
         "softmax: expected [N,K] logits, got " + shape_str(logits.shape()));
  const int64_t n = logits.dim(0), k = logits.dim(1);
  Tensor out = Tensor::zeros(logits.shape(), logits.dtype());
  dispatch(logits.dtype(), [&]<typename S>() {
    auto ls = logits.buf<S>();
    auto os = out.buf<S>();
    for (int64_t r = 0; r < n; ++r) {
      const S* row = &ls[r * k];
      double m = row[0];
      for (int64_t i = 1; i < k; ++i) m = std::max(m, static_cast<double>(row[i]));
      double z = 0.0;
      for (int64_t i = 0; i < k; ++i) z += std::exp(static_cast<double>(row[i]) - m);
      for (int64_t i = 0; i < k; ++i)
        os[r * k + i] = static_cast<S>(std::exp(static_cast<double>(row[i]) - m) / z);
    }
  });
  Tensor lin = logits, val = out;
  detail::attach_grad_fn(
      out, "softmax", {logits}, [lin, val, n, k](const Tensor& o) mutable {
        Tensor oc = o;
        dispatch(oc.dtype(), [&]<typename S>() {
          auto g = oc.grad_buf<S>();
          auto ys = val.buf<S>();
          auto gl = lin.grad_buf<S>();
          for (int64_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (int64_t i = 0; i < k; ++i)
              dot += static_cast<double>(g[r * k + i]) * ys[r * k + i];
            for (int64_t i = 0; i < k; ++i)
              gl[r * k + i] += static_cast<S>(
                  ys[r * k + i] * (static_cast<double>(g[r * k + i]) - dot));
          }
        });
      });
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& onehot,
                             const Tensor& class_weights) {
  if (logits.rank() != 2)
    fail(ErrorKind::kDimension, "softmax_cross_entropy: expected [N,K] logits, got " +
                                    shape_str(logits.shape()));
  check_same("softmax_cross_entropy", logits, onehot);
  const int64_t n = logits.dim(0), k = logits.dim(1);
  if (class_weights.defined() &&
      (class_weights.rank() != 1 || class_weights.dim(0) != k))
    fail(ErrorKind::kDimension,
         "softmax_cross_entropy: class_weights must be [K=" + std::to_string(k) +
             "], got " + shape_str(class_weights.shape()));
  logits.check_finite("softmax_cross_entropy logits");
  // Validate one-hot rows and remember the target class per row.
  std::vector<int64_t> target(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    int64_t hot = -1;
    for (int64_t i = 0; i < k; ++i) {
      double v = onehot.at(r * k + i);
      if (v == 1.0) {
        if (hot >= 0) hot = -2;
        if (hot == -1) hot = i;
      } else if (v != 0.0) {
        hot = -2;
      }
      if (hot == -2) break;
    }
    if (hot < 0)
      fail(ErrorKind::kLabel,
           "softmax_cross_entropy: target row " + std::to_string(r) +
               " is not one-hot");
    target[static_cast<size_t>(r)] = hot;
  }
  Tensor probs = Tensor::zeros(logits.shape(), logits.dtype());
  Tensor out = Tensor::zeros({1}, logits.dtype());
  dispatch(logits.dtype(), [&]<typename S>() {
    auto ls = logits.buf<S>();
    auto ps = probs.buf<S>();
    double loss = 0.0;
    for (int64_t r = 0; r < n; ++r) {
      const S* row = &ls[r * k];
      double m = row[0];
      for (int64_t i = 1; i < k; ++i) m = std::max(m, static_cast<double>(row[i]));
      double z = 0.0;
      for (int64_t i = 0; i < k; ++i) z += std::exp(static_cast<double>(row[i]) - m);
      const double lse = m + std::log(z);
      for (int64_t i = 0; i < k; ++i)
        ps[r * k + i] = static_cast<S>(std::exp(static_cast<double>(row[i]) - m) / z);
      const int64_t t = target[static_cast<size_t>(r)];
      const double w = class_weights.defined() ? class_weights.at(t) : 1.0;
      loss += w * (lse - static_cast<double>(row[t]));
    }
    out.buf<S>()[0] = static_cast<S>(loss / static_cast<double>(n));
  });
  Tensor lin = logits;
  Tensor win = class_weights;
  detail::attach_grad_fn(
      out, "softmax_cross_entropy", {logits},
      [lin, win, probs, target, n, k](const Tensor& o) mutable {
        Tensor oc = o;
        dispatch(oc.dtype(), [&]<typename S>() {
          const double g = static_cast<double>(oc.grad_buf<S>()[0]);
          auto ps = probs.buf<S>();
          auto gl = lin.grad_buf<S>();
          for (int64_t r = 0; r < n; ++r) {
            const int64_t t = target[static_cast<size_t>(r)];
            const double w = win.defined() ? win.at(t) : 1.0;
            const double c = g * w / static_cast<double>(n);
            for (int64_t i = 0; i < k; ++i) {
              double y = i == t ? 1.0 : 0.0;
              gl[r * k + i] += static_cast<S>(c * (static_cast<double>(ps[r * k + i]) - y));
            }
          }
        });
      });
  return out;
}

Tensor image_loss(const Tensor& pred, const Tensor& target, double gdl_weight) {
  check_same("image_loss", pred, target);
  if (pred.rank() != 4)
    fail(ErrorKind::kDimension,
         "image_loss: expected [N,C,H,W], got " + shape_str(pred.shape()));
  const int64_t n = pred.dim(0), c = pred.dim(1), h = pred.dim(2), w = pred.dim(3);
  Tensor out = Tensor::zeros({1}, pred.dtype());
  dispatch(pred.dtype(), [&]<typename S>() {
    auto ps = pred.buf<S>();
    auto ts = target.buf<S>();
    double l2 = 0.0, gdl = 0.0;
    for (size_t i = 0; i < ps.size(); ++i) {
      const double d = static_cast<double>(ps[i]) - static_cast<double>(ts[i]);
      l2 += d * d;
    }
    auto at = [&](auto& b, int64_t ni, int64_t ci, int64_t y, int64_t x) {
      return static_cast<double>(b[((ni * c + ci) * h + y) * w + x]);
    };
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t ci = 0; ci < c; ++ci) {
        for (int64_t y = 0; y + 1 < h; ++y)
          for (int64_t x = 0; x < w; ++x)
            gdl += std::abs(std::abs(at(ts, ni, ci, y + 1, x) - at(ts, ni, ci, y, x)) -
                            std::abs(at(ps, ni, ci, y + 1, x) - at(ps, ni, ci, y, x)));
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x + 1 < w; ++x)
            gdl += std::abs(std::abs(at(ts, ni, ci, y, x + 1) - at(ts, ni, ci, y, x)) -
                            std::abs(at(ps, ni, ci, y, x + 1) - at(ps, ni, ci, y, x)));
      }
    out.buf<S>()[0] = static_cast<S>((l2 + gdl_weight * gdl) / static_cast<double>(n));
  });
  // The target is data: the loss is differentiable w.r.t. pred only.
  Tensor pin = pred, tin = target;
  detail::attach_grad_fn(
      out, "image_loss", {pred},
      [pin, tin, gdl_weight, n, c, h, w](const Tensor& o) mutable {
        Tensor oc = o;
        dispatch(oc.dtype(), [&]<typename S>() {
          const double g = static_cast<double>(oc.grad_buf<S>()[0]) /
                           static_cast<double>(n);
          auto ps = pin.buf<S>();
          auto ts = tin.buf<S>();
          auto gp = pin.grad_buf<S>();
          for (size_t i = 0; i < ps.size(); ++i)
            gp[i] += static_cast<S>(
                g * 2.0 * (static_cast<double>(ps[i]) - static_cast<double>(ts[i])));
          auto idx = [&](int64_t ni, int64_t ci, int64_t y, int64_t x) {
            return ((ni * c + ci) * h + y) * w + x;
          };
          auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
          for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci) {
              for (int64_t y = 0; y + 1 < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                  const int64_t a = idx(ni, ci, y + 1, x), b = idx(ni, ci, y, x);
                  const double dp = static_cast<double>(ps[a]) - static_cast<double>(ps[b]);
                  const double dt = static_cast<double>(ts[a]) - static_cast<double>(ts[b]);
                  // d/dp of |  |dt| - |dp|  | = -sgn(|dt|-|dp|) * sgn(dp) * d(dp)/dp
                  const double co = g * gdl_weight *
                                    -sgn(std::abs(dt) - std::abs(dp)) * sgn(dp);
                  gp[a] += static_cast<S>(co);
                  gp[b] -= static_cast<S>(co);
                }
              for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x + 1 < w; ++x) {
                  const int64_t a = idx(ni, ci, y, x + 1), b = idx(ni, ci, y, x);
                  const double dp = static_cast<double>(ps[a]) - static_cast<double>(ps[b]);
                  const double dt = static_cast<double>(ts[a]) - static_cast<double>(ts[b]);
                  const double co = g * gdl_weight *
                                    -sgn(std::abs(dt) - std::abs(dp)) * sgn(dp);
                  gp[a] += static_cast<S>(co);
                  gp[b] -= static_cast<S>(co);
                }
            }
        });
      });
  return out;
}

}  // namespace streamloc::ops
