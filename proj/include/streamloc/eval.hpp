#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "streamloc/data.hpp"
#include "streamloc/pipeline.hpp"

namespace streamloc {

// Temporal intersection-over-union of two frame intervals [start, end).
double iou(const Interval& a, const Interval& b);
double iou(int64_t a_start, int64_t a_end, int64_t b_start, int64_t b_end);

// One stream's detections paired with its ground truth.
struct StreamEval {
  std::vector<DetectionEvent> events;
  std::vector<Interval> ground_truth;
};

// THUMOS-style protocol: detections in descending confidence greedily match
// the highest-IoU unmatched ground-truth interval of the same class with
// IoU >= theta; every unmatched detection (duplicates included) is a false
// positive. `order[i]` is the original index of the i-th ranked detection and
// `tp[i]` its verdict.
struct MatchResult {
  std::vector<int> order;
  std::vector<bool> tp;
};
MatchResult match_detections(const std::vector<DetectionEvent>& events,
                             const std::vector<Interval>& ground_truth,
                             double theta);

// All-point interpolated average precision for one class. `hits` are the
// per-detection TP flags in descending-confidence order. num_gt == 0 leaves
// AP undefined (nullopt).
std::optional<double> average_precision(const std::vector<bool>& hits,
                                        int64_t num_gt);

struct ApTable {
  // AP per class id; classes without ground truth are absent (noted).
  std::map<int, double> per_class;
  std::vector<int> skipped_classes;
  double mean = 0.0;  // over defined classes
};

// Corpus-level detection mAP at one IoU threshold. Errors if the corpus has
// no ground truth at all.
ApTable map_at(const std::vector<StreamEval>& corpus, int num_classes,
               double theta);
std::map<double, ApTable> map_table(const std::vector<StreamEval>& corpus,
                                    int num_classes,
                                    const std::vector<double>& thetas);
// The standard threshold grid.
std::vector<double> default_thetas();

// Frame-level mAP from per-frame class scores, ranked by score and
// tie-broken by (stream, frame) position.
struct FrameEval {
  std::vector<std::vector<double>> scores;  // [T][K+1]
  std::vector<Interval> ground_truth;
};
ApTable per_frame_map(const std::vector<FrameEval>& corpus, int num_classes);

// Reference implementation for cross-checks: the best AP achievable over all
// valid detection-to-ground-truth assignments (same class, IoU >= theta, one
// detection per interval). Exponential; callers keep event counts small.
std::optional<double> oracle_best_ap(const std::vector<DetectionEvent>& events,
                                     const std::vector<Interval>& ground_truth,
                                     double theta, int class_id);

}  // namespace streamloc
