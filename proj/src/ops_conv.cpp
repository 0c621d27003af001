#include <Eigen/Core>
#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "streamloc/ops.hpp"

// conv3d / conv2d / deconv2d share one engine: unfold the input into a
// [L, CK] column matrix (L = output positions, CK = Cin*kt*kh*kw taps) and
// multiply against the kernel viewed as [Cout, CK]. conv2d runs the same
// engine with a singleton temporal axis. deconv2d runs it backwards: its
// forward is the conv backward-input path, so the adjoint identity with
// conv2d holds by construction.

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

struct ConvDims {
  int64_t n, cin, t, h, w;      // input volume (t=1 for 2d)
  int64_t cout, kt, kh, kw;     // kernel
  int64_t st, sh, sw, pt, ph, pw;
  int64_t to, ho, wo;           // output volume
  int64_t l, ck;                // l = to*ho*wo, ck = cin*kt*kh*kw
};

int64_t out_extent(int64_t in, int64_t k, int64_t s, int64_t p) {
  return (in + 2 * p - k) / s + 1;
}

void check_axis(const char* op, const char* axis, int64_t in, int64_t k,
                int64_t s, int64_t p) {
  if (s < 1)
    fail(ErrorKind::kArgument,
         std::string(op) + ": stride along " + axis + " must be >= 1");
  if (p < 0)
    fail(ErrorKind::kArgument,
         std::string(op) + ": padding along " + axis + " must be >= 0");
  if (in + 2 * p < k)
    fail(ErrorKind::kDimension,
         std::string(op) + ": axis " + axis + " too small (" +
             std::to_string(in) + " + 2*" + std::to_string(p) + " padding < kernel " +
             std::to_string(k) + ")");
}

ConvDims conv_dims(const char* op, const Tensor& x, const Tensor& k,
                   bool two_d, Int3 stride, Int3 pad) {
  const int xr = two_d ? 4 : 5;
  if (x.rank() != xr || k.rank() != xr)
    fail(ErrorKind::kDimension,
         std::string(op) + ": expected rank-" + std::to_string(xr) +
             " input and kernel, got " + shape_str(x.shape()) + " and " +
             shape_str(k.shape()));
  if (x.dtype() != k.dtype())
    fail(ErrorKind::kDimension, std::string(op) + ": dtype mismatch");
  ConvDims d{};
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.t = two_d ? 1 : x.dim(2);
  d.h = x.dim(xr - 2);
  d.w = x.dim(xr - 1);
  d.cout = k.dim(0);
  if (k.dim(1) != d.cin)
    fail(ErrorKind::kDimension,
         std::string(op) + ": channel axis 1 mismatch (input " +
             std::to_string(d.cin) + ", kernel " + std::to_string(k.dim(1)) + ")");
  d.kt = two_d ? 1 : k.dim(2);
  d.kh = k.dim(xr - 2);
  d.kw = k.dim(xr - 1);
  d.st = stride.t, d.sh = stride.h, d.sw = stride.w;
  d.pt = pad.t, d.ph = pad.h, d.pw = pad.w;
  if (!two_d) check_axis(op, "T", d.t, d.kt, d.st, d.pt);
  check_axis(op, "H", d.h, d.kh, d.sh, d.ph);
  check_axis(op, "W", d.w, d.kw, d.sw, d.pw);
  d.to = out_extent(d.t, d.kt, d.st, d.pt);
  d.ho = out_extent(d.h, d.kh, d.sh, d.ph);
  d.wo = out_extent(d.w, d.kw, d.sw, d.pw);
  d.l = d.to * d.ho * d.wo;
  d.ck = d.cin * d.kt * d.kh * d.kw;
  return d;
}

// Unfold one input item [Cin,T,H,W] into col [L, CK]; zero padding.
template <typename S>
void vol2col(const S* x, const ConvDims& d, S* col) {
  int64_t row = 0;
  for (int64_t ot = 0; ot < d.to; ++ot)
    for (int64_t oy = 0; oy < d.ho; ++oy)
      for (int64_t ox = 0; ox < d.wo; ++ox, ++row) {
        S* dst = col + row * d.ck;
        for (int64_t ci = 0; ci < d.cin; ++ci)
          for (int64_t dt = 0; dt < d.kt; ++dt) {
            const int64_t it = ot * d.st - d.pt + dt;
            for (int64_t dy = 0; dy < d.kh; ++dy) {
              const int64_t iy = oy * d.sh - d.ph + dy;
              for (int64_t dx = 0; dx < d.kw; ++dx, ++dst) {
                const int64_t ix = ox * d.sw - d.pw + dx;
                *dst = (it >= 0 && it < d.t && iy >= 0 && iy < d.h && ix >= 0 &&
                        ix < d.w)
                           ? x[((ci * d.t + it) * d.h + iy) * d.w + ix]
                           : S(0);
              }
            }
          }
      }
}

// Adjoint of vol2col: scatter-add col [L, CK] back into one item [Cin,T,H,W].
template <typename S>
void col2vol(const S* col, const ConvDims& d, S* x) {
  int64_t row = 0;
  for (int64_t ot = 0; ot < d.to; ++ot)
    for (int64_t oy = 0; oy < d.ho; ++oy)
      for (int64_t ox = 0; ox < d.wo; ++ox, ++row) {
        const S* src = col + row * d.ck;
        for (int64_t ci = 0; ci < d.cin; ++ci)
          for (int64_t dt = 0; dt < d.kt; ++dt) {
            const int64_t it = ot * d.st - d.pt + dt;
            for (int64_t dy = 0; dy < d.kh; ++dy) {
              const int64_t iy = oy * d.sh - d.ph + dy;
              for (int64_t dx = 0; dx < d.kw; ++dx, ++src) {
                const int64_t ix = ox * d.sw - d.pw + dx;
                if (it >= 0 && it < d.t && iy >= 0 && iy < d.h && ix >= 0 &&
                    ix < d.w)
                  x[((ci * d.t + it) * d.h + iy) * d.w + ix] += *src;
              }
            }
          }
      }
}

Tensor conv_core(const char* op, const Tensor& x, const Tensor& k,
                 const ConvDims& d, Shape out_shape) {
  Tensor out = Tensor::zeros(std::move(out_shape), x.dtype());
  dispatch(x.dtype(), [&]<typename S>() {
    std::vector<S> col(static_cast<size_t>(d.l * d.ck));
    ConstMatMap<S> km(k.buf<S>().data(), d.cout, d.ck);
    auto xs = x.buf<S>();
    auto os = out.buf<S>();
    for (int64_t ni = 0; ni < d.n; ++ni) {
      vol2col(&xs[ni * d.cin * d.t * d.h * d.w], d, col.data());
      ConstMatMap<S> cm(col.data(), d.l, d.ck);
      MatMap<S> om(&os[ni * d.cout * d.l], d.cout, d.l);
      om.noalias() = km * cm.transpose();
    }
  });
  Tensor xin = x, kin = k;
  std::string opname = op;
  detail::attach_grad_fn(
      out, opname, {x, k}, [xin, kin, d](const Tensor& o) mutable {
        Tensor oc = o;
        dispatch(oc.dtype(), [&]<typename S>() {
          auto g = oc.grad_buf<S>();
          auto xs = xin.buf<S>();
          ConstMatMap<S> km(kin.buf<S>().data(), d.cout, d.ck);
          const bool want_x = wants_grad(xin), want_k = wants_grad(kin);
          std::vector<S> col(static_cast<size_t>(d.l * d.ck));
          std::vector<S> dcol(want_x ? static_cast<size_t>(d.l * d.ck) : 0);
          for (int64_t ni = 0; ni < d.n; ++ni) {
            ConstMatMap<S> gm(&g[ni * d.cout * d.l], d.cout, d.l);
            if (want_k) {
              vol2col(&xs[ni * d.cin * d.t * d.h * d.w], d, col.data());
              ConstMatMap<S> cm(col.data(), d.l, d.ck);
              MatMap<S> gk(kin.grad_buf<S>().data(), d.cout, d.ck);
              gk.noalias() += gm * cm;
            }
            if (want_x) {
              MatMap<S> dcm(dcol.data(), d.l, d.ck);
              dcm.noalias() = gm.transpose() * km;
              col2vol(dcol.data(),
                      d, &xin.grad_buf<S>()[ni * d.cin * d.t * d.h * d.w]);
            }
          }
        });
      });
  return out;
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& k, Int3 stride, Int3 pad) {
  ConvDims d = conv_dims("conv3d", x, k, false, stride, pad);
  return conv_core("conv3d", x, k, d, {d.n, d.cout, d.to, d.ho, d.wo});
}

Tensor conv2d(const Tensor& x, const Tensor& k, Int2 stride, Int2 pad) {
  ConvDims d = conv_dims("conv2d", x, k, true, {1, stride.h, stride.w},
                         {0, pad.h, pad.w});
  return conv_core("conv2d", x, k, d, {d.n, d.cout, d.ho, d.wo});
}

Tensor deconv2d(const Tensor& y, const Tensor& k, Int2 stride, Int2 pad) {
  if (y.rank() != 4 || k.rank() != 4)
    fail(ErrorKind::kDimension,
         "deconv2d: expected rank-4 input and kernel, got " +
             shape_str(y.shape()) + " and " + shape_str(k.shape()));
  if (y.dtype() != k.dtype())
    fail(ErrorKind::kDimension, "deconv2d: dtype mismatch");
  if (y.dim(1) != k.dim(0))
    fail(ErrorKind::kDimension,
         "deconv2d: channel axis 1 mismatch (input " + std::to_string(y.dim(1)) +
             ", kernel axis 0 " + std::to_string(k.dim(0)) + ")");
  if (stride.h < 1 || stride.w < 1)
    fail(ErrorKind::kArgument, "deconv2d: stride must be >= 1");
  if (pad.h < 0 || pad.w < 0)
    fail(ErrorKind::kArgument, "deconv2d: padding must be >= 0");
  // Roles are the conv2d ones: (cin, h, w) is the deconv OUTPUT volume and
  // (cout, ho, wo) the deconv input, so vol2col/col2vol can be reused as-is.
  ConvDims d{};
  d.n = y.dim(0);
  d.cout = y.dim(1);
  d.cin = k.dim(1);
  d.t = 1, d.kt = 1, d.st = 1, d.pt = 0, d.to = 1;
  d.kh = k.dim(2), d.kw = k.dim(3);
  d.sh = stride.h, d.sw = stride.w;
  d.ph = pad.h, d.pw = pad.w;
  d.ho = y.dim(2), d.wo = y.dim(3);
  d.h = (d.ho - 1) * d.sh - 2 * d.ph + d.kh;
  d.w = (d.wo - 1) * d.sw - 2 * d.pw + d.kw;
  if (d.h < 1 || d.w < 1)
    fail(ErrorKind::kDimension,
         "deconv2d: output extent not positive (H " + std::to_string(d.h) +
             ", W " + std::to_string(d.w) + ")");
  d.l = d.ho * d.wo;
  d.ck = d.cin * d.kh * d.kw;
  Tensor out = Tensor::zeros({d.n, d.cin, d.h, d.w}, y.dtype());
  dispatch(y.dtype(), [&]<typename S>() {
    RowMat<S> col(d.l, d.ck);
    ConstMatMap<S> km(k.buf<S>().data(), d.cout, d.ck);
    auto ys = y.buf<S>();
    auto os = out.buf<S>();
    for (int64_t ni = 0; ni < d.n; ++ni) {
      ConstMatMap<S> ym(&ys[ni * d.cout * d.l], d.cout, d.l);
      col.noalias() = ym.transpose() * km;
      col2vol(col.data(), d, &os[ni * d.cin * d.h * d.w]);
    }
  });
  Tensor yin = y, kin = k;
  detail::attach_grad_fn(
      out, "deconv2d", {y, k}, [yin, kin, d](const Tensor& o) mutable {
        Tensor oc = o;
        dispatch(oc.dtype(), [&]<typename S>() {
          auto g = oc.grad_buf<S>();
          auto ys = yin.buf<S>();
          ConstMatMap<S> km(kin.buf<S>().data(), d.cout, d.ck);
          const bool want_y = wants_grad(yin), want_k = wants_grad(kin);
          std::vector<S> colg(static_cast<size_t>(d.l * d.ck));
          for (int64_t ni = 0; ni < d.n; ++ni) {
            vol2col(&g[ni * d.cin * d.h * d.w], d, colg.data());
            ConstMatMap<S> cgm(colg.data(), d.l, d.ck);
            if (want_y) {
              MatMap<S> gy(&yin.grad_buf<S>()[ni * d.cout * d.l], d.cout, d.l);
              gy.noalias() += km * cgm.transpose();
            }
            if (want_k) {
              ConstMatMap<S> ym(&ys[ni * d.cout * d.l], d.cout, d.l);
              MatMap<S> gk(kin.grad_buf<S>().data(), d.cout, d.ck);
              gk.noalias() += ym * cgm;
            }
          }
        });
      });
  return out;
}

Tensor maxpool3d(const Tensor& x, Int3 window, Int3 stride) {
  if (x.rank() != 5)
    fail(ErrorKind::kDimension,
         "maxpool3d: expected [N,C,T,H,W], got " + shape_str(x.shape()));
  if (window.t < 1 || window.h < 1 || window.w < 1)
    fail(ErrorKind::kArgument, "maxpool3d: window dims must be >= 1");
  if (stride.t < 1 || stride.h < 1 || stride.w < 1)
    fail(ErrorKind::kArgument, "maxpool3d: stride dims must be >= 1");
  const int64_t n = x.dim(0), c = x.dim(1), t = x.dim(2), h = x.dim(3),
                w = x.dim(4);
  if (window.t > t || window.h > h || window.w > w)
    fail(ErrorKind::kDimension,
         "maxpool3d: window (" + std::to_string(window.t) + "," +
             std::to_string(window.h) + "," + std::to_string(window.w) +
             ") larger than input " + shape_str(x.shape()));
  const int64_t to = (t - window.t) / stride.t + 1;
  const int64_t ho = (h - window.h) / stride.h + 1;
  const int64_t wo = (w - window.w) / stride.w + 1;
  Tensor out = Tensor::zeros({n, c, to, ho, wo}, x.dtype());
  auto argmax = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(n * c * to * ho * wo));
  dispatch(x.dtype(), [&]<typename S>() {
    auto xs = x.buf<S>();
    auto os = out.buf<S>();
    int64_t cell = 0;
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t ci = 0; ci < c; ++ci) {
        const int64_t base = (ni * c + ci) * t * h * w;
        for (int64_t ot = 0; ot < to; ++ot)
          for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox, ++cell) {
              S best{};
              int64_t best_i = -1;
              for (int64_t dt = 0; dt < window.t; ++dt)
                for (int64_t dy = 0; dy < window.h; ++dy)
                  for (int64_t dx = 0; dx < window.w; ++dx) {
                    const int64_t it = ot * stride.t + dt;
                    const int64_t iy = oy * stride.h + dy;
                    const int64_t ix = ox * stride.w + dx;
                    const int64_t i = base + (it * h + iy) * w + ix;
                    if (best_i < 0 || xs[i] > best) {
                      best = xs[i];
                      best_i = i;
                    }
                  }
              os[cell] = best;
              (*argmax)[static_cast<size_t>(cell)] = best_i;
            }
      }
  });
  Tensor xin = x;
  detail::attach_grad_fn(
      out, "maxpool3d", {x}, [xin, argmax](const Tensor& o) mutable {
        Tensor oc = o;
        dispatch(oc.dtype(), [&]<typename S>() {
          auto g = oc.grad_buf<S>();
          auto gx = xin.grad_buf<S>();
          for (size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
        });
      });
  return out;
}

}  // namespace streamloc::ops
