#include "streamloc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "streamloc/common.hpp"

namespace streamloc {
namespace {

// Descending confidence, original position breaking ties.
std::vector<int> rank_by_confidence(const std::vector<DetectionEvent>& events) {
  std::vector<int> order(events.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return events[static_cast<size_t>(a)].confidence >
           events[static_cast<size_t>(b)].confidence;
  });
  return order;
}

double ap_from_flags(const std::vector<bool>& hits, int64_t num_gt) {
  // All-point interpolation: each true positive contributes 1/num_gt of
  // recall at the running precision envelope.
  const size_t n = hits.size();
  std::vector<double> env(n);
  int64_t tp = 0;
  for (size_t i = 0; i < n; ++i) {
    if (hits[i]) ++tp;
    env[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  for (size_t i = n; i-- > 1;) env[i - 1] = std::max(env[i - 1], env[i]);
  double ap = 0.0;
  for (size_t i = 0; i < n; ++i)
    if (hits[i]) ap += env[i] / static_cast<double>(num_gt);
  return ap;
}

void check_theta(double theta) {
  if (!(theta > 0.0 && theta <= 1.0))
    fail(ErrorKind::kArgument,
          "IoU threshold " + std::to_string(theta) + " outside (0, 1]");
}

}  // namespace

double iou(int64_t a_start, int64_t a_end, int64_t b_start, int64_t b_end) {
  if (a_end <= a_start || b_end <= b_start)
    fail(ErrorKind::kArgument,
          "iou: degenerate interval [" +
              std::to_string(a_end <= a_start ? a_start : b_start) + ", " +
              std::to_string(a_end <= a_start ? a_end : b_end) + ")");
  const int64_t inter = std::min(a_end, b_end) - std::max(a_start, b_start);
  if (inter <= 0) return 0.0;
  const int64_t uni = (a_end - a_start) + (b_end - b_start) - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double iou(const Interval& a, const Interval& b) {
  return iou(a.start, a.end, b.start, b.end);
}

MatchResult match_detections(const std::vector<DetectionEvent>& events,
                             const std::vector<Interval>& ground_truth,
                             double theta) {
  check_theta(theta);
  MatchResult res;
  res.order = rank_by_confidence(events);
  res.tp.assign(events.size(), false);
  std::vector<bool> taken(ground_truth.size(), false);
  for (size_t r = 0; r < res.order.size(); ++r) {
    const DetectionEvent& ev = events[static_cast<size_t>(res.order[r])];
    int best = -1;
    double best_iou = 0.0;
    for (size_t g = 0; g < ground_truth.size(); ++g) {
      if (taken[g] || ground_truth[g].class_id != ev.class_id) continue;
      const double v =
          iou(ev.start, ev.end, ground_truth[g].start, ground_truth[g].end);
      if (v >= theta && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      taken[static_cast<size_t>(best)] = true;
      res.tp[r] = true;
    }
  }
  return res;
}

std::optional<double> average_precision(const std::vector<bool>& hits,
                                        int64_t num_gt) {
  if (num_gt < 0)
    fail(ErrorKind::kArgument, "average_precision: negative num_gt");
  if (num_gt == 0) return std::nullopt;
  return ap_from_flags(hits, num_gt);
}

std::vector<double> default_thetas() {
  return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.75, 0.95};
}

ApTable map_at(const std::vector<StreamEval>& corpus, int num_classes,
               double theta) {
  check_theta(theta);
  if (num_classes < 1)
    fail(ErrorKind::kArgument, "map_at: num_classes must be >= 1");
  int64_t total_gt = 0;
  for (const StreamEval& s : corpus)
    total_gt += static_cast<int64_t>(s.ground_truth.size());
  if (total_gt == 0)
    fail(ErrorKind::kData, "map_at: corpus has no ground-truth intervals");

  struct Scored {
    double conf;
    bool tp;
    size_t stream, rank;
  };
  std::vector<std::vector<Scored>> per_class(static_cast<size_t>(num_classes));
  std::vector<int64_t> gt_count(static_cast<size_t>(num_classes), 0);

  for (size_t si = 0; si < corpus.size(); ++si) {
    const StreamEval& s = corpus[si];
    for (const Interval& iv : s.ground_truth) {
      if (iv.class_id < 0 || iv.class_id >= num_classes)
        fail(ErrorKind::kLabel, "map_at: ground-truth class " +
                                     std::to_string(iv.class_id) +
                                     " outside [0, " +
                                     std::to_string(num_classes) + ")");
      ++gt_count[static_cast<size_t>(iv.class_id)];
    }
    const MatchResult m = match_detections(s.events, s.ground_truth, theta);
    for (size_t r = 0; r < m.order.size(); ++r) {
      const DetectionEvent& ev = s.events[static_cast<size_t>(m.order[r])];
      if (ev.class_id < 0 || ev.class_id >= num_classes)
        fail(ErrorKind::kLabel, "map_at: detection class " +
                                     std::to_string(ev.class_id) +
                                     " outside [0, " +
                                     std::to_string(num_classes) + ")");
      per_class[static_cast<size_t>(ev.class_id)].push_back(
          {ev.confidence, m.tp[r], si, r});
    }
  }

  ApTable table;
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (gt_count[static_cast<size_t>(c)] == 0) {
      table.skipped_classes.push_back(c);
      continue;
    }
    auto& dets = per_class[static_cast<size_t>(c)];
    std::sort(dets.begin(), dets.end(), [](const Scored& a, const Scored& b) {
      if (a.conf != b.conf) return a.conf > b.conf;
      if (a.stream != b.stream) return a.stream < b.stream;
      return a.rank < b.rank;
    });
    std::vector<bool> hits(dets.size());
    for (size_t i = 0; i < dets.size(); ++i) hits[i] = dets[i].tp;
    const double ap = ap_from_flags(hits, gt_count[static_cast<size_t>(c)]);
    table.per_class[c] = ap;
    sum += ap;
    ++defined;
  }
  if (defined == 0)
    fail(ErrorKind::kData, "map_at: every class lacks ground truth");
  table.mean = sum / defined;
  return table;
}

std::map<double, ApTable> map_table(const std::vector<StreamEval>& corpus,
                                    int num_classes,
                                    const std::vector<double>& thetas) {
  std::map<double, ApTable> out;
  for (double theta : thetas) out[theta] = map_at(corpus, num_classes, theta);
  return out;
}

ApTable per_frame_map(const std::vector<FrameEval>& corpus, int num_classes) {
  if (num_classes < 1)
    fail(ErrorKind::kArgument, "per_frame_map: num_classes must be >= 1");
  struct Scored {
    double score;
    bool pos;
    size_t stream;
    int64_t frame;
  };
  ApTable table;
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<Scored> rows;
    int64_t num_pos = 0;
    for (size_t si = 0; si < corpus.size(); ++si) {
      const FrameEval& s = corpus[si];
      for (int64_t f = 0; f < static_cast<int64_t>(s.scores.size()); ++f) {
        const auto& probs = s.scores[static_cast<size_t>(f)];
        if (static_cast<int>(probs.size()) != num_classes + 1)
          fail(ErrorKind::kDimension,
                "per_frame_map: score row has " +
                    std::to_string(probs.size()) + " entries, want " +
                    std::to_string(num_classes + 1));
        bool pos = false;
        for (const Interval& iv : s.ground_truth)
          if (iv.class_id == c && f >= iv.start && f < iv.end) pos = true;
        if (pos) ++num_pos;
        rows.push_back({probs[static_cast<size_t>(c)], pos, si, f});
      }
    }
    if (num_pos == 0) {
      table.skipped_classes.push_back(c);
      continue;
    }
    std::sort(rows.begin(), rows.end(), [](const Scored& a, const Scored& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.stream != b.stream) return a.stream < b.stream;
      return a.frame < b.frame;
    });
    std::vector<bool> hits(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) hits[i] = rows[i].pos;
    const double ap = ap_from_flags(hits, num_pos);
    table.per_class[c] = ap;
    sum += ap;
    ++defined;
  }
  if (defined == 0)
    fail(ErrorKind::kData, "per_frame_map: no positive frames for any class");
  table.mean = sum / defined;
  return table;
}

std::optional<double> oracle_best_ap(const std::vector<DetectionEvent>& events,
                                     const std::vector<Interval>& ground_truth,
                                     double theta, int class_id) {
  check_theta(theta);
  std::vector<DetectionEvent> dets;
  for (const DetectionEvent& ev : events)
    if (ev.class_id == class_id) dets.push_back(ev);
  std::vector<Interval> gts;
  for (const Interval& iv : ground_truth)
    if (iv.class_id == class_id) gts.push_back(iv);
  if (gts.empty()) return std::nullopt;

  const std::vector<int> order = rank_by_confidence(dets);
  const size_t n = order.size();
  std::vector<bool> flags(n, false);
  std::vector<bool> taken(gts.size(), false);
  double best_ap = 0.0;

  // Try every assignment of ranked detections to eligible intervals.
  auto recurse = [&](auto&& self, size_t r) -> void {
    if (r == n) {
      best_ap = std::max(
          best_ap, ap_from_flags(flags, static_cast<int64_t>(gts.size())));
      return;
    }
    const DetectionEvent& ev = dets[static_cast<size_t>(order[r])];
    flags[r] = false;  // count it as a false positive
    self(self, r + 1);
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      if (iou(ev.start, ev.end, gts[g].start, gts[g].end) < theta) continue;
      taken[g] = true;
      flags[r] = true;
      self(self, r + 1);
      flags[r] = false;
      taken[g] = false;
    }
  };
  recurse(recurse, 0);
  return best_ap;
}

}  // namespace streamloc
