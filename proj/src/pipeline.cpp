#include "streamloc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "json.hpp"
#include "streamloc/common.hpp"
#include "streamloc/ops.hpp"

namespace streamloc {
namespace {

using ordered_json = nlohmann::ordered_json;

int argmax_row(const Tensor& logits) {
  int best = 0;
  double best_v = 0;
  dispatch(logits.dtype(), [&]<typename S>() {
    auto b = logits.buf<S>();
    best_v = static_cast<double>(b[0]);
    for (int64_t i = 1; i < logits.dim(1); ++i)
      if (static_cast<double>(b[static_cast<size_t>(i)]) > best_v) {
        best_v = static_cast<double>(b[static_cast<size_t>(i)]);
        best = static_cast<int>(i);
      }
  });
  return best;
}

std::vector<double> softmax_row(const Tensor& logits) {
  std::vector<double> out(static_cast<size_t>(logits.dim(1)));
  dispatch(logits.dtype(), [&]<typename S>() {
    auto b = logits.buf<S>();
    double mx = static_cast<double>(b[0]);
    for (size_t i = 1; i < out.size(); ++i)
      mx = std::max(mx, static_cast<double>(b[i]));
    double z = 0;
    for (size_t i = 0; i < out.size(); ++i) {
      out[i] = std::exp(static_cast<double>(b[i]) - mx);
      z += out[i];
    }
    for (double& v : out) v /= z;
  });
  return out;
}

Tensor concat_frames(const Tensor& a, const Tensor& b) {
  Shape shape = a.shape();
  shape[0] = a.dim(0) + b.dim(0);
  Tensor out = Tensor::zeros(shape, a.dtype());
  std::memcpy(out.impl_->data.data(), a.impl_->data.data(),
              a.impl_->data.size());
  std::memcpy(out.impl_->data.data() + a.impl_->data.size(),
              b.impl_->data.data(), b.impl_->data.size());
  return out;
}

bool would_emit(int64_t t, const PipelineConfig& cfg) {
  return t >= cfg.tau - 1 && (t - (cfg.tau - 1)) % cfg.test_stride == 0;
}

}  // namespace

void PipelineConfig::validate() const {
  if (tau < 2) fail(ErrorKind::kArgument, "pipeline: tau must be >= 2");
  if (test_stride < 1 || train_stride < 1)
    fail(ErrorKind::kArgument, "pipeline: strides must be >= 1");
  if (horizon < 1 || horizon >= tau)
    fail(ErrorKind::kArgument,
          "pipeline: horizon must be in [1, tau-1], got " +
              std::to_string(horizon));
  if (min_event_windows < 1)
    fail(ErrorKind::kArgument, "pipeline: min_event_windows must be >= 1");
}

std::string PipelineConfig::str() const {
  return "tau=" + std::to_string(tau) +
         ";test_stride=" + std::to_string(test_stride) +
         ";train_stride=" + std::to_string(train_stride) +
         ";horizon=" + std::to_string(horizon) +
         ";use_f2g=" + std::to_string(use_f2g) +
         ";serial_cascade=" + std::to_string(serial_cascade) +
         ";oracle_future=" + std::to_string(oracle_future) +
         ";min_event_windows=" + std::to_string(min_event_windows);
}

Tensor window_to_input(const Tensor& w) {
  if (!w.defined() || w.rank() != 4)
    fail(ErrorKind::kDimension, "window_to_input expects [tau,C,H,W]");
  const int64_t t = w.dim(0), c = w.dim(1), h = w.dim(2), wd = w.dim(3);
  Tensor out = Tensor::zeros({1, c, t, h, wd}, w.dtype());
  const size_t plane = static_cast<size_t>(h * wd) * dtype_size(w.dtype());
  for (int64_t tt = 0; tt < t; ++tt)
    for (int64_t cc = 0; cc < c; ++cc)
      std::memcpy(out.impl_->data.data() +
                      (static_cast<size_t>(cc * t + tt)) * plane,
                  w.impl_->data.data() +
                      (static_cast<size_t>(tt * c + cc)) * plane,
                  plane);
  return out;
}

Tensor stack_window(const std::vector<Tensor>& frames) {
  if (frames.empty())
    fail(ErrorKind::kArgument, "stack_window: no frames");
  const Shape& f0 = frames[0].shape();
  Shape shape = {static_cast<int64_t>(frames.size()), f0[0], f0[1], f0[2]};
  Tensor out = Tensor::zeros(shape, frames[0].dtype());
  const size_t bytes = frames[0].impl_->data.size();
  for (size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].shape() != f0)
      fail(ErrorKind::kDimension, "stack_window: mismatched frame shapes");
    std::memcpy(out.impl_->data.data() + i * bytes,
                frames[i].impl_->data.data(), bytes);
  }
  return out;
}

Tensor slice_frames(const Tensor& frames, int64_t t, int64_t count) {
  const int64_t total = frames.dim(0);
  Shape shape = frames.shape();
  shape[0] = count;
  Tensor out = Tensor::zeros(shape, frames.dtype());
  const size_t bytes = static_cast<size_t>(frames.numel() / total) *
                       dtype_size(frames.dtype());
  for (int64_t i = 0; i < count; ++i) {
    const int64_t src = std::clamp<int64_t>(t + i, 0, total - 1);
    std::memcpy(out.impl_->data.data() + static_cast<size_t>(i) * bytes,
                frames.impl_->data.data() + static_cast<size_t>(src) * bytes,
                bytes);
  }
  return out;
}

Tensor WindowFeatures::concat() const {
  return ops::concat_channels({pr, pr_future, ar, ar_future});
}

WindowFeatures extract_window_features(const Tensor& window,
                                       const PipelineConfig& cfg,
                                       const C3DNet& pr, const C3DNet& ar,
                                       const F2GNet* f2g,
                                       const Tensor& oracle_future,
                                       int64_t* ar_forwards) {
  NoGradGuard ng;
  const int64_t feat = pr.config().feature_dim;
  WindowFeatures wf;

  const Tensor x = window_to_input(window);
  C3DNet::Out pr_out = pr.forward(x, Mode::kEval);
  wf.pr = pr_out.fc7;
  wf.pr_label = argmax_row(pr_out.logits);

  if (!cfg.serial_cascade || wf.pr_label == kPrAction) {
    wf.ar = ar.forward(x, Mode::kEval).fc7;
    if (ar_forwards) ++*ar_forwards;
  } else {
    wf.ar = Tensor::zeros({1, feat}, wf.pr.dtype());
  }

  if (!cfg.use_f2g && !cfg.oracle_future) {
    wf.pr_future = Tensor::zeros({1, feat}, wf.pr.dtype());
    wf.ar_future = Tensor::zeros({1, feat}, wf.pr.dtype());
    return wf;
  }

  Tensor future;
  if (cfg.oracle_future) {
    if (!oracle_future.defined())
      fail(ErrorKind::kState,
            "pipeline: oracle_future set but no future frames supplied");
    if (oracle_future.rank() != 4 || oracle_future.dim(0) != cfg.horizon)
      fail(ErrorKind::kDimension,
            "pipeline: oracle future frames must be [horizon,C,H,W], got " +
                shape_str(oracle_future.shape()));
    future = oracle_future;
  } else {
    if (!f2g)
      fail(ErrorKind::kState,
            "pipeline: use_f2g set but no future generator attached");
    future = f2g->generate(window);
  }

  const Tensor tail = slice_frames(window, cfg.horizon, cfg.tau - cfg.horizon);
  const Tensor x_hat = window_to_input(concat_frames(tail, future));
  C3DNet::Out pr_hat = pr.forward(x_hat, Mode::kEval);
  wf.pr_future = pr_hat.fc7;
  if (!cfg.serial_cascade || argmax_row(pr_hat.logits) == kPrAction) {
    wf.ar_future = ar.forward(x_hat, Mode::kEval).fc7;
    if (ar_forwards) ++*ar_forwards;
  } else {
    wf.ar_future = Tensor::zeros({1, feat}, wf.pr.dtype());
  }
  return wf;
}

OnlinePipeline::OnlinePipeline(const PipelineConfig& cfg, const C3DNet& pr,
                               const C3DNet& ar, const F2GNet* f2g,
                               const DetectorNet& det)
    : cfg_(cfg), pr_(pr), ar_(ar), f2g_(f2g), det_(det) {
  cfg_.validate();
  if (cfg_.tau != 16)
    fail(ErrorKind::kDimension, "pipeline: the C3D networks take 16-frame windows");
  if (pr_.config().out_dim != 2)
    fail(ErrorKind::kDimension, "pipeline: PR network must have 2 outputs");
  if (pr_.config().feature_dim != ar_.config().feature_dim)
    fail(ErrorKind::kDimension,
          "pipeline: PR and AR feature widths differ");
  if (det_.config().input_dim != 4 * pr_.config().feature_dim)
    fail(ErrorKind::kDimension,
          "pipeline: detector expects input width " +
              std::to_string(det_.config().input_dim) + " but features give " +
              std::to_string(4 * pr_.config().feature_dim));
  if (cfg_.use_f2g && !cfg_.oracle_future) {
    if (!f2g_)
      fail(ErrorKind::kState,
            "pipeline: use_f2g set but no future generator attached");
    if (f2g_->config().horizon != cfg_.horizon)
      fail(ErrorKind::kDimension,
            "pipeline: generator horizon " +
                std::to_string(f2g_->config().horizon) +
                " != pipeline horizon " + std::to_string(cfg_.horizon));
  }
  state_ = det_.initial_state(1);
}

void OnlinePipeline::reset() {
  window_.clear();
  state_ = det_.initial_state(1);
  t_ = -1;
  ar_forwards_ = 0;
}

std::optional<WindowPrediction> OnlinePipeline::step(const Tensor& frame,
                                                     const Tensor& oracle_future) {
  if (!frame.defined() || frame.rank() != 3)
    fail(ErrorKind::kDimension, "pipeline: step expects one [C,H,W] frame");
  ++t_;
  window_.push_back(frame.clone());
  while (static_cast<int>(window_.size()) > cfg_.tau) window_.pop_front();
  if (!would_emit(t_, cfg_)) return std::nullopt;

  const Tensor window =
      stack_window(std::vector<Tensor>(window_.begin(), window_.end()));
  WindowFeatures wf = extract_window_features(window, cfg_, pr_, ar_, f2g_,
                                              oracle_future, &ar_forwards_);
  NoGradGuard ng;
  DetectorNet::Out out = det_.forward(wf.concat(), state_, Mode::kEval);
  state_ = out.state;

  WindowPrediction pred;
  pred.t = t_;
  pred.probs = softmax_row(out.logits);
  pred.label = argmax_row(out.logits);
  return pred;
}

std::vector<DetectionEvent> events_from_predictions(
    const std::vector<WindowPrediction>& preds, const PipelineConfig& cfg,
    int num_classes) {
  std::vector<DetectionEvent> events;
  const int background = num_classes;

  struct Run {
    int label = -1;
    int64_t first_t = 0, last_t = 0;
    double conf_sum = 0;
    int count = 0;
  } run;
  auto flush = [&]() {
    if (run.label >= 0 && run.count >= cfg.min_event_windows) {
      DetectionEvent ev;
      ev.class_id = run.label;
      ev.start = std::max<int64_t>(0, run.first_t - cfg.test_stride + 1);
      ev.end = run.last_t + 1;
      ev.confidence = run.conf_sum / run.count;
      events.push_back(ev);
    }
    run = Run{};
  };

  for (const WindowPrediction& p : preds) {
    if (p.label < 0 || p.label > background)
      fail(ErrorKind::kLabel,
            "prediction label " + std::to_string(p.label) + " outside [0, " +
                std::to_string(background) + "]");
    const bool continues = run.label == p.label && run.count > 0 &&
                           p.t == run.last_t + cfg.test_stride;
    if (p.label == background || !continues) flush();
    if (p.label == background) continue;
    if (run.count == 0) {
      run.label = p.label;
      run.first_t = p.t;
    }
    run.last_t = p.t;
    run.conf_sum += p.probs[static_cast<size_t>(p.label)];
    ++run.count;
  }
  flush();
  return events;
}

std::vector<std::vector<double>> per_frame_scores(
    const std::vector<WindowPrediction>& preds, const PipelineConfig& cfg,
    int64_t stream_length, int num_classes) {
  std::vector<std::vector<double>> scores(
      static_cast<size_t>(stream_length),
      std::vector<double>(static_cast<size_t>(num_classes + 1), 0.0));
  for (auto& row : scores) row[static_cast<size_t>(num_classes)] = 1.0;
  for (const WindowPrediction& p : preds) {
    const int64_t lo = std::max<int64_t>(0, p.t - cfg.test_stride + 1);
    const int64_t hi = std::min<int64_t>(stream_length, p.t + 1);
    for (int64_t f = lo; f < hi; ++f) scores[static_cast<size_t>(f)] = p.probs;
  }
  return scores;
}

StreamResult run_stream(const AnnotatedStream& stream,
                        const PipelineConfig& cfg, const C3DNet& pr,
                        const C3DNet& ar, const F2GNet* f2g,
                        const DetectorNet& det) {
  if (!stream.frames.defined() || stream.frames.rank() != 4)
    fail(ErrorKind::kState,
          "run_stream: stream '" + stream.id + "' has no [T,C,H,W] frames");
  OnlinePipeline pipe(cfg, pr, ar, f2g, det);
  const int64_t total = stream.length();
  StreamResult res;
  for (int64_t t = 0; t < total; ++t) {
    Tensor frame = slice_frames(stream.frames, t, 1)
                       .reshaped({stream.frames.dim(1), stream.frames.dim(2),
                                  stream.frames.dim(3)});
    Tensor oracle;
    if (cfg.oracle_future && would_emit(t, cfg))
      oracle = slice_frames(stream.frames, t + 1, cfg.horizon);
    if (auto p = pipe.step(frame, oracle)) res.predictions.push_back(*p);
  }
  const int num_classes = det.config().out_dim - 1;
  res.events = events_from_predictions(res.predictions, cfg, num_classes);
  res.per_frame_scores =
      per_frame_scores(res.predictions, cfg, total, num_classes);
  res.ar_forwards = pipe.ar_forwards();
  res.causal = !cfg.oracle_future;
  return res;
}

std::string detection_json(const std::string& stream_id,
                           const PipelineConfig& cfg, const StreamResult& res) {
  ordered_json root;
  root["stream_id"] = stream_id;
  ordered_json jc;
  jc["tau"] = cfg.tau;
  jc["test_stride"] = cfg.test_stride;
  jc["train_stride"] = cfg.train_stride;
  jc["horizon"] = cfg.horizon;
  jc["use_f2g"] = cfg.use_f2g;
  jc["serial_cascade"] = cfg.serial_cascade;
  jc["oracle_future"] = cfg.oracle_future;
  jc["min_event_windows"] = cfg.min_event_windows;
  root["config"] = jc;
  root["events"] = ordered_json::array();
  for (const DetectionEvent& ev : res.events) {
    ordered_json je;
    je["class"] = ev.class_id;
    je["start"] = ev.start;
    je["end"] = ev.end;
    je["confidence"] = ev.confidence;
    root["events"].push_back(je);
  }
  root["causal"] = res.causal;
  return root.dump();
}

StreamResult detection_from_json(const std::string& text,
                                 std::string* stream_id) {
  StreamResult res;
  try {
    const auto root = nlohmann::json::parse(text);
    if (stream_id) *stream_id = root.at("stream_id").get<std::string>();
    for (const auto& je : root.at("events")) {
      DetectionEvent ev;
      ev.class_id = je.at("class").get<int>();
      ev.start = je.at("start").get<int64_t>();
      ev.end = je.at("end").get<int64_t>();
      ev.confidence = je.at("confidence").get<double>();
      res.events.push_back(ev);
    }
    res.causal = root.at("causal").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("detection record: ") + e.what());
  }
  return res;
}

}  // namespace streamloc
