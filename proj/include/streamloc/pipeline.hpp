#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "streamloc/data.hpp"
#include "streamloc/networks.hpp"
#include "streamloc/tensor.hpp"

namespace streamloc {

struct PipelineConfig {
  int tau = 16;          // window length (frames)
  int test_stride = 8;   // emission stride at inference
  int train_stride = 16; // window stride when building training sets
  int horizon = 8;       // generated future frames per window
  bool use_f2g = true;
  bool serial_cascade = false;  // gate AR behind PR's decision
  bool oracle_future = false;   // true future frames instead of generated ones
  int min_event_windows = 1;    // discard shorter events

  void validate() const;
  std::string str() const;
};

// One emitted decision: window ending at frame t claims [t-stride+1, t].
struct WindowPrediction {
  int64_t t = 0;
  int label = 0;                // 0..K-1 action class, K background
  std::vector<double> probs;   // K+1 softmax scores
};

struct DetectionEvent {
  int class_id = 0;
  int64_t start = 0, end = 0;  // frames, [start, end)
  double confidence = 0.0;     // mean class probability over merged windows
};

struct StreamResult {
  std::vector<WindowPrediction> predictions;
  std::vector<DetectionEvent> events;
  std::vector<std::vector<double>> per_frame_scores;  // [T][K+1]
  int64_t ar_forwards = 0;  // AR network invocations (cascade diagnostics)
  bool causal = true;       // false once oracle future frames were used
};

// Features for one window position, in the detector's fixed concatenation
// order: current PR, future PR, current AR, future AR.
struct WindowFeatures {
  Tensor pr, pr_future, ar, ar_future;  // each [1, F]
  int pr_label = 0;                     // current-window PR argmax
  Tensor concat() const;                // [1, 4F]
};

class OnlinePipeline {
 public:
  OnlinePipeline(const PipelineConfig& cfg, const C3DNet& pr, const C3DNet& ar,
                 const F2GNet* f2g, const DetectorNet& det);

  // Feed one frame [C,H,W]. Returns a prediction when the schedule emits one
  // (first at t = tau-1, then every test_stride). oracle_future, when the
  // config demands it, holds the true next frames [horizon,C,H,W].
  std::optional<WindowPrediction> step(const Tensor& frame,
                                       const Tensor& oracle_future = Tensor());
  void reset();

  int64_t ar_forwards() const { return ar_forwards_; }
  const PipelineConfig& config() const { return cfg_; }

 private:
  PipelineConfig cfg_;
  const C3DNet& pr_;
  const C3DNet& ar_;
  const F2GNet* f2g_;
  const DetectorNet& det_;
  std::deque<Tensor> window_;
  DetectorNet::State state_;
  int64_t t_ = -1;
  int64_t ar_forwards_ = 0;
};

// Feature extraction shared between the online loop and detector training:
// window = frames [tau,C,H,W] ending the current position; future taken from
// F2G (or the oracle tensor) per the config flags.
WindowFeatures extract_window_features(const Tensor& window,
                                       const PipelineConfig& cfg,
                                       const C3DNet& pr, const C3DNet& ar,
                                       const F2GNet* f2g,
                                       const Tensor& oracle_future,
                                       int64_t* ar_forwards);

// Stack tau frames [C,H,W] into a C3D input [1, C, tau, H, W].
Tensor stack_window(const std::vector<Tensor>& frames);
// Transpose a window [tau,C,H,W] into a C3D input [1, C, tau, H, W].
Tensor window_to_input(const Tensor& window);
// Slice [count] frames starting at t into [count,C,H,W], repeating the last
// frame past the end of the stream.
Tensor slice_frames(const Tensor& frames, int64_t t, int64_t count);

std::vector<DetectionEvent> events_from_predictions(
    const std::vector<WindowPrediction>& preds, const PipelineConfig& cfg,
    int num_classes);

std::vector<std::vector<double>> per_frame_scores(
    const std::vector<WindowPrediction>& preds, const PipelineConfig& cfg,
    int64_t stream_length, int num_classes);

StreamResult run_stream(const AnnotatedStream& stream,
                        const PipelineConfig& cfg, const C3DNet& pr,
                        const C3DNet& ar, const F2GNet* f2g,
                        const DetectorNet& det);

// Detection record as line-oriented JSON: stream id, the pipeline config,
// the merged events, and the causality flag.
std::string detection_json(const std::string& stream_id,
                           const PipelineConfig& cfg, const StreamResult& res);
StreamResult detection_from_json(const std::string& text,
                                 std::string* stream_id);

}  // namespace streamloc
