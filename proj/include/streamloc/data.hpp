#pragma once

#include <string>
#include <vector>

#include "streamloc/rng.hpp"
#include "streamloc/tensor.hpp"

namespace streamloc {

// One ground-truth action instance on a stream. Frames are [start, end).
struct Interval {
  int64_t start = 0;
  int64_t end = 0;
  int class_id = 0;
  // Absolute frame where the finishing phase begins; -1 = unknown, callers
  // fall back to the interval midpoint.
  int64_t phase_switch = -1;

  int64_t length() const { return end - start; }
  int64_t switch_frame() const {
    return phase_switch >= 0 ? phase_switch : start + length() / 2;
  }
};

// An untrimmed stream: frames plus sorted, non-overlapping annotations.
struct AnnotatedStream {
  std::string id;
  Tensor frames;  // [T, C, H, W], f32, values in [0,1]
  std::vector<Interval> intervals;
  std::string provenance;  // empty for generated streams

  int64_t length() const { return frames.defined() ? frames.dim(0) : 0; }
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<AnnotatedStream> streams;
};

// ---- synthetic generation ----
// The default three classes, in class-id order: expand-contract (a disk
// grows, then shrinks), sweep-left-then-right (a bar sweeps left, then back
// right), brighten-dim (the scene brightens, then dims below baseline).
std::vector<std::string> default_class_names();

struct StreamSpec {
  int num_instances = 4;
  int num_classes = 3;  // at most the default program count
  int64_t height = 32, width = 32;
  int64_t duration_min = 24, duration_max = 96;
  int64_t gap_min = 16, gap_max = 48;
  double noise_level = 0.02;
  // 0 = size the stream to fit the drawn layout; > 0 = fixed length, and the
  // drawn layout must fit (spec error otherwise).
  int64_t length = 0;
  uint64_t seed = 0;
  std::string id = "stream";
};

AnnotatedStream generate_stream(const StreamSpec& spec);

// ---- window labels ----
// PR: 0 = background, 1 = action. A window is action iff at least half its
// frames lie inside ground-truth intervals.
inline constexpr int kPrBackground = 0;
inline constexpr int kPrAction = 1;

int derive_pr_labels(const AnnotatedStream& s, int64_t window_start, int tau = 16);
// AR subclass 0..2K-1 (beginning of class c = 2c, finishing = 2c+1); the
// window must satisfy the action rule.
int derive_ar_labels(const AnnotatedStream& s, int64_t window_start, int tau = 16);
// Detection label 0..K with K = background.
int derive_det_labels(const AnnotatedStream& s, int64_t window_start,
                      int num_classes, int tau = 16);

// ---- dataset I/O ----
// Single-stream "SLVD" container: header then raw [T,C,H,W] f32 pixels.
void write_frames_file(const Tensor& frames, const std::string& path);
Tensor read_frames_file(const std::string& path);

// Layout: <dir>/annotations.json plus one "SLVD" frames file per stream.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);

// THUMOS-style adapter: lines of "class_name start_sec end_sec" mapped onto
// frame indices at the given rate. Unknown class names are a parse error.
std::vector<Interval> read_thumos_annotations(
    const std::string& path, double fps,
    const std::vector<std::string>& class_names);

}  // namespace streamloc
