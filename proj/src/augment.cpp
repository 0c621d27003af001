#include "streamloc/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "streamloc/common.hpp"

namespace streamloc {
namespace {

constexpr int kBlock = 8;
constexpr int kSearch = 4;

void check_pair(const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined())
    fail(ErrorKind::kArgument, "interpolate_pair: undefined frame");
  if (a.rank() != 3 || b.rank() != 3)
    fail(ErrorKind::kDimension, "interpolate_pair expects [C,H,W] frames, got " +
                                     shape_str(a.shape()) + " and " +
                                     shape_str(b.shape()));
  if (a.shape() != b.shape() || a.dtype() != b.dtype())
    fail(ErrorKind::kDimension, "interpolate_pair: mismatched frames " +
                                     shape_str(a.shape()) + " vs " +
                                     shape_str(b.shape()));
}

template <typename S>
S sample(const S* img, int64_t c, int64_t h, int64_t w, int64_t y, int64_t x) {
  y = std::clamp<int64_t>(y, 0, h - 1);
  x = std::clamp<int64_t>(x, 0, w - 1);
  return img[c * h * w + y * w + x];
}

// Displacement (dy, dx) moving block content from a to b, by exhaustive SAD
// search; first minimum in scan order wins.
template <typename S>
void block_motion(const S* a, const S* b, int64_t ch, int64_t h, int64_t w,
                  int64_t by, int64_t bx, int* out_dy, int* out_dx) {
  double best = -1.0;
  for (int dy = -kSearch; dy <= kSearch; ++dy)
    for (int dx = -kSearch; dx <= kSearch; ++dx) {
      double sad = 0.0;
      for (int64_t c = 0; c < ch; ++c)
        for (int64_t yy = by; yy < std::min<int64_t>(by + kBlock, h); ++yy)
          for (int64_t xx = bx; xx < std::min<int64_t>(bx + kBlock, w); ++xx)
            sad += std::abs(static_cast<double>(sample(a, c, h, w, yy, xx)) -
                            static_cast<double>(sample(b, c, h, w, yy + dy, xx + dx)));
      if (best < 0.0 || sad < best) {
        best = sad;
        *out_dy = dy;
        *out_dx = dx;
      }
    }
}

Tensor slice_frame(const Tensor& frames, int64_t t) {
  const int64_t c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
  Tensor out = Tensor::zeros({c, h, w}, frames.dtype());
  const size_t bytes = static_cast<size_t>(c * h * w) * dtype_size(frames.dtype());
  std::memcpy(out.impl_->data.data(),
              frames.impl_->data.data() + static_cast<size_t>(t) * bytes, bytes);
  return out;
}

void store_frame(Tensor& frames, int64_t t, const Tensor& frame) {
  const size_t bytes = frame.impl_->data.size();
  std::memcpy(frames.impl_->data.data() + static_cast<size_t>(t) * bytes,
              frame.impl_->data.data(), bytes);
}

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

}  // namespace

Tensor interpolate_pair(const Tensor& a, const Tensor& b, double alpha,
                        InterpKernel kernel) {
  check_pair(a, b);
  if (!(alpha >= 0.0 && alpha <= 1.0))
    fail(ErrorKind::kArgument,
          "interpolate_pair: alpha " + std::to_string(alpha) + " outside [0,1]");
  if (alpha == 0.0) return a.clone();
  if (alpha == 1.0) return b.clone();

  const int64_t ch = a.dim(0), h = a.dim(1), w = a.dim(2);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename S>() {
    auto pa = a.buf<S>();
    auto pb = b.buf<S>();
    auto po = out.buf<S>();
    if (kernel == InterpKernel::kBlend) {
      for (size_t i = 0; i < po.size(); ++i)
        po[i] = static_cast<S>((1.0 - alpha) * static_cast<double>(pa[i]) +
                               alpha * static_cast<double>(pb[i]));
      return;
    }
    const int64_t grid_h = ceil_div(h, kBlock), grid_w = ceil_div(w, kBlock);
    std::vector<int> mdy(static_cast<size_t>(grid_h * grid_w));
    std::vector<int> mdx(mdy.size());
    for (int64_t gy = 0; gy < grid_h; ++gy)
      for (int64_t gx = 0; gx < grid_w; ++gx)
        block_motion(pa.data(), pb.data(), ch, h, w, gy * kBlock, gx * kBlock,
                     &mdy[static_cast<size_t>(gy * grid_w + gx)],
                     &mdx[static_cast<size_t>(gy * grid_w + gx)]);
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const size_t g = static_cast<size_t>((y / kBlock) * grid_w + x / kBlock);
        // Content at this pixel sits alpha of the way along the block's
        // motion: pull from a behind it and from b ahead of it.
        const int64_t oy = std::llround(alpha * mdy[g]);
        const int64_t ox = std::llround(alpha * mdx[g]);
        const int64_t ry = mdy[g] - oy, rx = mdx[g] - ox;
        for (int64_t c = 0; c < ch; ++c) {
          const double va =
              static_cast<double>(sample(pa.data(), c, h, w, y - oy, x - ox));
          const double vb =
              static_cast<double>(sample(pb.data(), c, h, w, y + ry, x + rx));
          po[static_cast<size_t>(c * h * w + y * w + x)] =
              static_cast<S>((1.0 - alpha) * va + alpha * vb);
        }
      }
  });
  return out;
}

SpeedUpResult speed_up(const AnnotatedStream& s, int factor) {
  if (factor < 1)
    fail(ErrorKind::kArgument, "speed_up: factor must be >= 1");
  if (!s.frames.defined() || s.frames.rank() != 4)
    fail(ErrorKind::kState, "speed_up: stream '" + s.id + "' has no frames");
  const int64_t t_in = s.length();
  const int64_t f = factor;
  const int64_t t_out = ceil_div(t_in, f);

  SpeedUpResult res;
  res.stream.id = s.id + "-sp" + std::to_string(factor);
  res.stream.provenance = "origin=" + s.id + ";transform=speed_up;factor=" +
                          std::to_string(factor);
  Shape shape = s.frames.shape();
  shape[0] = t_out;
  res.stream.frames = Tensor::zeros(shape, s.frames.dtype());
  for (int64_t j = 0; j < t_out; ++j)
    store_frame(res.stream.frames, j, slice_frame(s.frames, j * f));

  for (const Interval& iv : s.intervals) {
    Interval out;
    out.start = ceil_div(iv.start, f);
    out.end = ceil_div(iv.end, f);
    out.class_id = iv.class_id;
    if (out.end <= out.start) {
      ++res.dropped_intervals;  // no surviving sample falls inside
      continue;
    }
    if (iv.phase_switch >= 0 && out.end - out.start >= 2)
      out.phase_switch =
          std::clamp(ceil_div(iv.phase_switch, f), out.start + 1, out.end - 1);
    res.stream.intervals.push_back(out);
  }
  return res;
}

AnnotatedStream slow_down(const AnnotatedStream& s, InterpKernel kernel) {
  if (!s.frames.defined() || s.frames.rank() != 4 || s.length() < 1)
    fail(ErrorKind::kState, "slow_down: stream '" + s.id + "' has no frames");
  const int64_t t_in = s.length();
  const int64_t t_out = 2 * t_in - 1;

  AnnotatedStream out;
  out.id = s.id + "-sl2";
  out.provenance = "origin=" + s.id + ";transform=slow_down;factor=2;kernel=" +
                   (kernel == InterpKernel::kFlow ? "flow" : "blend");
  Shape shape = s.frames.shape();
  shape[0] = t_out;
  out.frames = Tensor::zeros(shape, s.frames.dtype());
  for (int64_t i = 0; i < t_in; ++i)
    store_frame(out.frames, 2 * i, slice_frame(s.frames, i));
  for (int64_t i = 0; i + 1 < t_in; ++i)
    store_frame(out.frames, 2 * i + 1,
                interpolate_pair(slice_frame(s.frames, i),
                                 slice_frame(s.frames, i + 1), 0.5, kernel));

  for (const Interval& iv : s.intervals) {
    Interval o;
    o.start = 2 * iv.start;
    o.end = std::min<int64_t>(2 * iv.end, t_out);
    o.class_id = iv.class_id;
    if (iv.phase_switch >= 0) o.phase_switch = 2 * iv.phase_switch;
    out.intervals.push_back(o);
  }
  return out;
}

Dataset augment_dataset(const Dataset& ds, int* dropped_intervals) {
  Dataset out;
  out.class_names = ds.class_names;
  int dropped = 0;
  for (const AnnotatedStream& s : ds.streams) out.streams.push_back(s);
  for (const AnnotatedStream& s : ds.streams) {
    SpeedUpResult sp = speed_up(s, 2);
    dropped += sp.dropped_intervals;
    out.streams.push_back(std::move(sp.stream));
    out.streams.push_back(slow_down(s, InterpKernel::kFlow));
  }
  if (dropped_intervals) *dropped_intervals = dropped;
  return out;
}

}  // namespace streamloc
