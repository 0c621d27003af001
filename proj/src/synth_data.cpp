#include "streamloc/data.hpp"

#include <algorithm>
#include <cmath>

#include "streamloc/common.hpp"

namespace streamloc {
namespace {

constexpr double kPi = 3.14159265358979323846;

struct ProgramParams {
  // expand-contract
  double cx = 0, cy = 0, r0 = 0, rmax = 0;
  // sweep-left-then-right
  double x0 = 0, xl = 0, xr = 0, bar_w = 0;
  // brighten-dim
  double gain_hi = 0, gain_lo = 0;
};

ProgramParams draw_params(int class_id, int64_t h, int64_t w, Rng& rng) {
  ProgramParams p;
  switch (class_id) {
    case 0:
      p.cx = rng.uniform(0.30, 0.70) * static_cast<double>(w);
      p.cy = rng.uniform(0.30, 0.70) * static_cast<double>(h);
      p.r0 = 1.5;
      p.rmax = rng.uniform(0.28, 0.40) * static_cast<double>(std::min(h, w));
      break;
    case 1:
      p.x0 = rng.uniform(0.45, 0.55) * static_cast<double>(w);
      p.xl = rng.uniform(0.05, 0.15) * static_cast<double>(w);
      p.xr = rng.uniform(0.85, 0.95) * static_cast<double>(w);
      p.bar_w = rng.uniform(2.0, 4.0);
      break;
    case 2:
      p.gain_hi = rng.uniform(1.55, 1.80);
      p.gain_lo = rng.uniform(0.45, 0.65);
      break;
    default:
      fail(ErrorKind::kSpec, "no motion program for class id " +
                                  std::to_string(class_id));
  }
  return p;
}

// Phase progress in (0, 1]: position of frame t inside [lo, hi).
double progress(int64_t t, int64_t lo, int64_t hi) {
  return static_cast<double>(t - lo + 1) / static_cast<double>(hi - lo);
}

double soft_cov(double signed_dist) {  // 1 inside, 0 outside, 1-px ramp
  return std::clamp(signed_dist + 0.5, 0.0, 1.0);
}

void render_instance(float* frame, int64_t h, int64_t w, int class_id,
                     const ProgramParams& p, int64_t t, const Interval& iv) {
  const int64_t m = iv.switch_frame();
  const bool beginning = t < m;
  const double u = beginning ? progress(t, iv.start, m) : progress(t, m, iv.end);
  if (class_id == 0) {
    const double r = beginning ? p.r0 + (p.rmax - p.r0) * u
                               : p.rmax - (p.rmax - 0.5 * p.r0) * u;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - p.cx;
        const double dy = static_cast<double>(y) - p.cy;
        const double cov = soft_cov(r - std::sqrt(dx * dx + dy * dy));
        float* px = frame + y * w + x;
        *px = static_cast<float>((1.0 - cov) * *px + cov * 0.92);
      }
  } else if (class_id == 1) {
    const double xc = beginning ? p.x0 - (p.x0 - p.xl) * u
                                : p.xl + (p.xr - p.xl) * u;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double cov =
            soft_cov(0.5 * p.bar_w - std::abs(static_cast<double>(x) - xc));
        float* px = frame + y * w + x;
        *px = static_cast<float>((1.0 - cov) * *px + cov * 0.90);
      }
  } else {
    const double g = beginning ? 1.0 + (p.gain_hi - 1.0) * u
                               : p.gain_hi - (p.gain_hi - p.gain_lo) * u;
    for (int64_t i = 0; i < h * w; ++i)
      frame[i] = static_cast<float>(frame[i] * g);
  }
}

// The interval covering the most window frames; earlier interval wins ties.
const Interval* majority_interval(const AnnotatedStream& s, int64_t ws, int tau) {
  const Interval* best = nullptr;
  int64_t best_overlap = 0;
  for (const Interval& iv : s.intervals) {
    const int64_t lo = std::max<int64_t>(ws, iv.start);
    const int64_t hi = std::min<int64_t>(ws + tau, iv.end);
    const int64_t overlap = hi - lo;
    if (overlap > best_overlap) {
      best_overlap = overlap;
      best = &iv;
    }
  }
  return best;
}

void check_window(const AnnotatedStream& s, int64_t ws, int tau) {
  if (tau < 1) fail(ErrorKind::kArgument, "tau must be >= 1");
  if (!s.frames.defined())
    fail(ErrorKind::kState, "stream '" + s.id + "' has no frames");
  if (ws < 0 || ws + tau > s.length())
    fail(ErrorKind::kIndex,
          "window [" + std::to_string(ws) + ", " + std::to_string(ws + tau) +
              ") outside stream '" + s.id + "' of length " +
              std::to_string(s.length()));
}

}  // namespace

std::vector<std::string> default_class_names() {
  return {"expand-contract", "sweep-left-then-right", "brighten-dim"};
}

AnnotatedStream generate_stream(const StreamSpec& spec) {
  if (spec.num_instances < 0)
    fail(ErrorKind::kSpec, "num_instances must be >= 0");
  const int max_classes = static_cast<int>(default_class_names().size());
  if (spec.num_classes < 1 || spec.num_classes > max_classes)
    fail(ErrorKind::kSpec, "num_classes must be in [1, " +
                                std::to_string(max_classes) + "]");
  if (spec.height < 8 || spec.width < 8)
    fail(ErrorKind::kSpec, "frames must be at least 8x8");
  if (spec.duration_min < 2 || spec.duration_max < spec.duration_min)
    fail(ErrorKind::kSpec, "bad duration range");
  if (spec.gap_min < 1 || spec.gap_max < spec.gap_min)
    fail(ErrorKind::kSpec, "bad gap range");

  Rng rng(spec.seed);

  // Lay the instances out left to right: gap, instance, gap, instance, ...
  std::vector<Interval> intervals;
  std::vector<ProgramParams> params;
  int64_t cursor = rng.uniform_int(spec.gap_min, spec.gap_max);
  for (int i = 0; i < spec.num_instances; ++i) {
    const int64_t dur = rng.uniform_int(spec.duration_min, spec.duration_max);
    const int cls = static_cast<int>(rng.uniform_int(0, spec.num_classes - 1));
    Interval iv;
    iv.start = cursor;
    iv.end = cursor + dur;
    iv.class_id = cls;
    const double frac = rng.uniform(0.35, 0.65);
    iv.phase_switch =
        iv.start + std::clamp<int64_t>(std::llround(frac * static_cast<double>(dur)),
                                       1, dur - 1);
    intervals.push_back(iv);
    params.push_back(draw_params(cls, spec.height, spec.width, rng));
    cursor = iv.end + rng.uniform_int(spec.gap_min, spec.gap_max);
  }

  int64_t length = spec.length;
  if (length == 0) {
    length = cursor;  // trailing gap included
  } else if (!intervals.empty() && intervals.back().end > length) {
    fail(ErrorKind::kSpec,
          "cannot pack " + std::to_string(spec.num_instances) +
              " instances into " + std::to_string(length) +
              " frames (layout needs " + std::to_string(intervals.back().end) +
              ")");
  }

  const int64_t h = spec.height, w = spec.width;
  AnnotatedStream s;
  s.id = spec.id;
  s.intervals = intervals;
  s.frames = Tensor::zeros({length, 1, h, w}, Dtype::kF32);
  auto buf = s.frames.buf<float>();

  // Background: a slowly drifting sinusoidal texture.
  const double fx = rng.uniform(0.02, 0.08);
  const double fy = rng.uniform(0.02, 0.08);
  const double phi = rng.uniform(0.0, 2.0 * kPi);
  const double omega = rng.uniform(0.05, 0.15);

  size_t next_iv = 0;
  for (int64_t t = 0; t < length; ++t) {
    float* frame = buf.data() + t * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        frame[y * w + x] = static_cast<float>(
            0.45 + 0.08 * std::sin(2.0 * kPi *
                                       (fx * static_cast<double>(x) +
                                        fy * static_cast<double>(y)) +
                                   phi + omega * static_cast<double>(t)));
    while (next_iv < intervals.size() && t >= intervals[next_iv].end) ++next_iv;
    if (next_iv < intervals.size() && t >= intervals[next_iv].start)
      render_instance(frame, h, w, intervals[next_iv].class_id,
                      params[next_iv], t, intervals[next_iv]);
    for (int64_t i = 0; i < h * w; ++i) {
      const double noisy =
          frame[i] + rng.uniform(-spec.noise_level, spec.noise_level);
      frame[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
    }
  }
  return s;
}

int derive_pr_labels(const AnnotatedStream& s, int64_t window_start, int tau) {
  check_window(s, window_start, tau);
  int64_t covered = 0;
  for (const Interval& iv : s.intervals) {
    const int64_t lo = std::max<int64_t>(window_start, iv.start);
    const int64_t hi = std::min<int64_t>(window_start + tau, iv.end);
    covered += std::max<int64_t>(0, hi - lo);
  }
  return 2 * covered >= tau ? kPrAction : kPrBackground;
}

int derive_ar_labels(const AnnotatedStream& s, int64_t window_start, int tau) {
  if (derive_pr_labels(s, window_start, tau) != kPrAction)
    fail(ErrorKind::kLabel,
          "window at " + std::to_string(window_start) + " of stream '" + s.id +
              "' is background; no action phase to label");
  const Interval* iv = majority_interval(s, window_start, tau);
  const int64_t center = window_start + tau / 2;
  const bool finishing = center >= iv->switch_frame();
  return 2 * iv->class_id + (finishing ? 1 : 0);
}

int derive_det_labels(const AnnotatedStream& s, int64_t window_start,
                      int num_classes, int tau) {
  if (num_classes < 1)
    fail(ErrorKind::kArgument, "num_classes must be >= 1");
  if (derive_pr_labels(s, window_start, tau) != kPrAction)
    return num_classes;  // background id
  const Interval* iv = majority_interval(s, window_start, tau);
  if (iv->class_id >= num_classes)
    fail(ErrorKind::kLabel, "stream '" + s.id + "' interval has class " +
                                 std::to_string(iv->class_id) +
                                 " outside [0, " + std::to_string(num_classes) +
                                 ")");
  return iv->class_id;
}

}  // namespace streamloc
