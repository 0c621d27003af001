#include "streamloc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "streamloc/augment.hpp"
#include "streamloc/common.hpp"
#include "streamloc/ops.hpp"

namespace streamloc {
namespace {

using ordered_json = nlohmann::ordered_json;

double scalar_value(const Tensor& t) { return t.at(0); }

void check_disjoint(const Dataset& train, const Dataset& val) {
  std::set<std::string> ids;
  for (const AnnotatedStream& s : train.streams) ids.insert(s.id);
  for (const AnnotatedStream& s : val.streams)
    if (ids.count(s.id))
      fail(ErrorKind::kData,
           "stream '" + s.id + "' appears in both train and val splits");
}

// Copy window frames [ws, ws+tau) of a [T,C,H,W] stream into batch item b of
// a [B,C,tau,H,W] tensor.
void fill_batch_item(Tensor& batch, int64_t b, const Tensor& frames,
                     int64_t ws, int tau) {
  const int64_t c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
  const size_t plane = static_cast<size_t>(h * w) * dtype_size(frames.dtype());
  uint8_t* dst = batch.impl_->data.data() +
                 static_cast<size_t>(b * c * tau) * plane;
  const uint8_t* src = frames.impl_->data.data();
  for (int64_t cc = 0; cc < c; ++cc)
    for (int64_t tt = 0; tt < tau; ++tt)
      std::memcpy(dst + static_cast<size_t>(cc * tau + tt) * plane,
                  src + static_cast<size_t>((ws + tt) * c + cc) * plane, plane);
}

Tensor one_hot(const std::vector<int>& labels, int num_classes, Dtype dt) {
  Tensor t = Tensor::zeros({static_cast<int64_t>(labels.size()), num_classes},
                           dt);
  dispatch(dt, [&]<typename S>() {
    auto b = t.buf<S>();
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= num_classes)
        fail(ErrorKind::kLabel, "label " + std::to_string(labels[i]) +
                                    " outside [0, " +
                                    std::to_string(num_classes) + ")");
      b[i * static_cast<size_t>(num_classes) + static_cast<size_t>(labels[i])] =
          S(1);
    }
  });
  return t;
}

Tensor weights_tensor(const std::vector<double>& w, Dtype dt) {
  Tensor t = Tensor::zeros({static_cast<int64_t>(w.size())}, dt);
  dispatch(dt, [&]<typename S>() {
    auto b = t.buf<S>();
    for (size_t i = 0; i < w.size(); ++i) b[i] = static_cast<S>(w[i]);
  });
  return t;
}

std::vector<std::vector<uint8_t>> snapshot(const std::vector<Parameter*>& ps) {
  std::vector<std::vector<uint8_t>> out;
  out.reserve(ps.size());
  for (const Parameter* p : ps) out.push_back(p->value.impl_->data);
  return out;
}

void restore(const std::vector<Parameter*>& ps,
             const std::vector<std::vector<uint8_t>>& snap) {
  for (size_t i = 0; i < ps.size(); ++i)
    ps[i]->value.impl_->data = snap[i];
}

int argmax_of_row(const Tensor& logits, int64_t row) {
  const int64_t k = logits.dim(1);
  int best = 0;
  double best_v = logits.at(row * k);
  for (int64_t j = 1; j < k; ++j) {
    const double v = logits.at(row * k + j);
    if (v > best_v) {
      best_v = v;
      best = static_cast<int>(j);
    }
  }
  return best;
}

double balanced_accuracy(const std::vector<std::vector<int64_t>>& confusion) {
  double sum = 0;
  int classes = 0;
  for (size_t c = 0; c < confusion.size(); ++c) {
    int64_t support = 0;
    for (int64_t v : confusion[c]) support += v;
    if (support == 0) continue;
    sum += static_cast<double>(confusion[c][c]) / static_cast<double>(support);
    ++classes;
  }
  return classes ? sum / classes : 0.0;
}

struct Stepper {
  std::string kind;
  SgdConfig sgd;
  RmspropConfig rms;
  void init(const std::vector<Parameter*>& ps, const PhaseConfig& cfg) {
    kind = cfg.optimizer;
    if (kind == "sgd") {
      sgd.lr = cfg.lr;
      sgd.momentum = cfg.momentum;
      sgd.weight_decay = cfg.weight_decay;
      init_sgd_state(ps);
    } else if (kind == "rmsprop") {
      rms.lr = cfg.lr;
      rms.decay = cfg.rho;
      rms.epsilon = cfg.eps;
      init_rmsprop_state(ps);
    } else {
      fail(ErrorKind::kArgument, "unknown optimizer '" + kind + "'");
    }
  }
  void step(const std::vector<Parameter*>& ps) {
    if (kind == "sgd")
      sgd_step(ps, sgd);
    else
      rmsprop_step(ps, rms);
  }
};

// Shared PR/AR epoch loop.
TrainResult train_c3d_head(C3DNet& net, const Dataset& train,
                           const Dataset& val, const PhaseConfig& cfg, int tau,
                           int stride, uint64_t seed, const LogSink& log,
                           LabelKind kind, const std::string& phase) {
  check_disjoint(train, val);
  const std::vector<WindowRef> train_w = enumerate_windows(train, tau, stride, kind);
  const std::vector<WindowRef> val_w = enumerate_windows(val, tau, stride, kind);
  if (train_w.empty())
    fail(ErrorKind::kData, phase + ": corpus has no trainable windows");
  const int num_classes = net.config().out_dim;

  if (kind == LabelKind::kAr) {
    // Every class needs both phases represented.
    std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
    for (const WindowRef& w : train_w) ++counts[static_cast<size_t>(w.label)];
    for (size_t c = 0; 2 * c + 1 < counts.size(); ++c) {
      const std::string& name = c < train.class_names.size()
                                    ? train.class_names[c]
                                    : std::to_string(c);
      if (counts[2 * c] == 0)
        fail(ErrorKind::kData,
             phase + ": class '" + name + "' has no beginning windows");
      if (counts[2 * c + 1] == 0)
        fail(ErrorKind::kData,
             phase + ": class '" + name + "' has no finishing windows");
    }
  }

  std::vector<Parameter*> params = net.parameters();
  const Dtype dt = params.front()->value.dtype();

  Tensor weights;
  if (cfg.weighted) {
    std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
    for (const WindowRef& w : train_w) ++counts[static_cast<size_t>(w.label)];
    weights = weights_tensor(class_weights(counts), dt);
  }

  Stepper opt;
  opt.init(params, cfg);
  Rng rng = Rng(seed).fork(phase);
  TrainResult res;
  std::vector<std::vector<uint8_t>> best_snap;
  double best_val = -1.0;
  int64_t global_step = 0;

  auto run_batch = [&](const Dataset& ds, const std::vector<WindowRef>& refs,
                       size_t lo, size_t hi, bool train_mode) {
    const int64_t bsz = static_cast<int64_t>(hi - lo);
    const AnnotatedStream& probe = ds.streams[static_cast<size_t>(refs[lo].stream)];
    Tensor batch = Tensor::zeros({bsz, probe.frames.dim(1), tau,
                                  probe.frames.dim(2), probe.frames.dim(3)},
                                 Dtype::kF32);
    std::vector<int> labels(static_cast<size_t>(bsz));
    for (size_t i = lo; i < hi; ++i) {
      const WindowRef& w = refs[i];
      fill_batch_item(batch, static_cast<int64_t>(i - lo),
                      ds.streams[static_cast<size_t>(w.stream)].frames, w.start,
                      tau);
      labels[i - lo] = w.label;
    }
    Tensor x = dt == Dtype::kF32 ? batch : batch.astype(dt);
    C3DNet::Out out = net.forward(x, train_mode ? Mode::kTrain : Mode::kEval,
                                  train_mode ? &rng : nullptr);
    return std::pair<C3DNet::Out, std::vector<int>>(std::move(out),
                                                    std::move(labels));
  };

  auto validate = [&](std::vector<std::vector<int64_t>>* confusion) {
    NoGradGuard ng;
    std::vector<std::vector<int64_t>> conf(
        static_cast<size_t>(num_classes),
        std::vector<int64_t>(static_cast<size_t>(num_classes), 0));
    int64_t correct = 0;
    const size_t bs = static_cast<size_t>(std::max(1, cfg.batch_size));
    for (size_t lo = 0; lo < val_w.size(); lo += bs) {
      const size_t hi = std::min(val_w.size(), lo + bs);
      auto [out, labels] = run_batch(val, val_w, lo, hi, false);
      for (size_t i = 0; i < labels.size(); ++i) {
        const int pred = argmax_of_row(out.logits, static_cast<int64_t>(i));
        ++conf[static_cast<size_t>(labels[i])][static_cast<size_t>(pred)];
        if (pred == labels[i]) ++correct;
      }
    }
    if (confusion) *confusion = conf;
    return val_w.empty() ? 0.0
                         : static_cast<double>(correct) /
                               static_cast<double>(val_w.size());
  };

  std::vector<WindowRef> order = train_w;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0;
    int64_t loss_count = 0;
    auto train_step = [&](const std::vector<WindowRef>& refs, size_t lo,
                          size_t hi) {
      zero_grads(params);
      auto [out, labels] = run_batch(train, refs, lo, hi, true);
      Tensor loss =
          ops::softmax_cross_entropy(out.logits, one_hot(labels, num_classes, dt),
                                     weights);
      if (res.initial_loss == 0.0 && global_step == 0)
        res.initial_loss = scalar_value(loss);
      backward(loss);
      opt.step(params);
      loss_sum += scalar_value(loss);
      ++loss_count;
      ++global_step;
    };

    if (cfg.steps_per_epoch > 0) {
      std::vector<WindowRef> sampled(static_cast<size_t>(cfg.batch_size));
      for (int s = 0; s < cfg.steps_per_epoch; ++s) {
        for (auto& w : sampled)
          w = train_w[static_cast<size_t>(rng.uniform_int(
              0, static_cast<int64_t>(train_w.size()) - 1))];
        train_step(sampled, 0, sampled.size());
      }
    } else {
      // Full sweep in a fresh shuffled order.
      for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1],
                  order[static_cast<size_t>(rng.uniform_int(
                      0, static_cast<int64_t>(i) - 1))]);
      const size_t bs = static_cast<size_t>(std::max(1, cfg.batch_size));
      for (size_t lo = 0; lo < order.size(); lo += bs)
        train_step(order, lo, std::min(order.size(), lo + bs));
    }

    std::vector<std::vector<int64_t>> conf;
    const double val_acc = validate(&conf);
    const double mean_loss = loss_count ? loss_sum / loss_count : 0.0;
    res.epoch_losses.push_back(mean_loss);
    res.val_curve.push_back(val_acc);
    if (val_acc > best_val) {
      best_val = val_acc;
      best_snap = snapshot(params);
      res.confusion = conf;
    }
    if (log) log({phase, epoch, global_step, mean_loss, val_acc, seed});
  }

  if (!best_snap.empty()) restore(params, best_snap);
  res.best_val = best_val < 0 ? 0.0 : best_val;
  res.final_loss = res.epoch_losses.empty() ? 0.0 : res.epoch_losses.back();
  return res;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  const int64_t n = static_cast<int64_t>(rows.size());
  const int64_t f = rows[0].dim(1);
  Tensor out = Tensor::zeros({n, f}, rows[0].dtype());
  const size_t bytes = rows[0].impl_->data.size();
  for (int64_t i = 0; i < n; ++i)
    std::memcpy(out.impl_->data.data() + static_cast<size_t>(i) * bytes,
                rows[static_cast<size_t>(i)].impl_->data.data(), bytes);
  return out;
}

}  // namespace

std::string log_entry_json(const TrainLogEntry& e) {
  ordered_json j;
  j["phase"] = e.phase;
  j["epoch"] = e.epoch;
  j["step"] = e.step;
  j["loss"] = e.loss;
  j["val_metric"] = e.val_metric;
  j["seed"] = e.seed;
  return j.dump();
}

std::vector<double> class_weights(const std::vector<int64_t>& counts) {
  if (counts.empty())
    fail(ErrorKind::kArgument, "class_weights: empty count vector");
  int64_t mx = 0;
  for (int64_t c : counts) {
    if (c < 0) fail(ErrorKind::kArgument, "class_weights: negative count");
    mx = std::max(mx, c);
  }
  if (mx == 0) fail(ErrorKind::kArgument, "class_weights: all counts are zero");
  std::vector<double> w(counts.size());
  for (size_t i = 0; i < counts.size(); ++i)
    w[i] = 1.0 - static_cast<double>(counts[i]) / (2.0 * static_cast<double>(mx));
  return w;
}

std::vector<WindowRef> enumerate_windows(const Dataset& ds, int tau, int stride,
                                         LabelKind kind) {
  if (tau < 1 || stride < 1)
    fail(ErrorKind::kArgument, "enumerate_windows: tau and stride must be >= 1");
  const int k = static_cast<int>(ds.class_names.size());
  std::vector<WindowRef> out;
  for (size_t si = 0; si < ds.streams.size(); ++si) {
    const AnnotatedStream& s = ds.streams[si];
    for (int64_t ws = 0; ws + tau <= s.length(); ws += stride) {
      WindowRef ref;
      ref.stream = static_cast<int>(si);
      ref.start = ws;
      switch (kind) {
        case LabelKind::kPr:
          ref.label = derive_pr_labels(s, ws, tau);
          break;
        case LabelKind::kAr:
          if (derive_pr_labels(s, ws, tau) != kPrAction) continue;
          ref.label = derive_ar_labels(s, ws, tau);
          break;
        case LabelKind::kDet:
          ref.label = derive_det_labels(s, ws, k, tau);
          break;
      }
      out.push_back(ref);
    }
  }
  return out;
}

TrainResult train_pr(C3DNet& net, const Dataset& train, const Dataset& val,
                     const PhaseConfig& cfg, int tau, int stride, uint64_t seed,
                     const LogSink& log) {
  if (net.config().out_dim != 2)
    fail(ErrorKind::kDimension, "train_pr: network must have 2 outputs");
  return train_c3d_head(net, train, val, cfg, tau, stride, seed, log,
                        LabelKind::kPr, "pr");
}

TrainResult train_ar(C3DNet& net, const Dataset& train, const Dataset& val,
                     const PhaseConfig& cfg, int tau, int stride, uint64_t seed,
                     const LogSink& log) {
  const int expect = 2 * static_cast<int>(train.class_names.size());
  if (net.config().out_dim != expect)
    fail(ErrorKind::kDimension,
         "train_ar: network has " + std::to_string(net.config().out_dim) +
             " outputs, corpus needs " + std::to_string(expect));
  return train_c3d_head(net, train, val, cfg, tau, stride, seed, log,
                        LabelKind::kAr, "ar");
}

TrainResult train_f2g(F2GNet& net, const Dataset& train, const Dataset& val,
                      const F2GPhaseConfig& cfg, uint64_t seed,
                      const LogSink& log) {
  check_disjoint(train, val);
  const int tau = 16;
  const int horizon = net.config().horizon;
  const int64_t need = tau + horizon;
  for (const Dataset* ds : {&train, &val})
    for (const AnnotatedStream& s : ds->streams)
      if (s.length() < need)
        fail(ErrorKind::kData, "train_f2g: stream '" + s.id + "' has " +
                                   std::to_string(s.length()) +
                                   " frames, needs at least " +
                                   std::to_string(need));
  if (train.streams.empty())
    fail(ErrorKind::kData, "train_f2g: empty corpus");

  // Fixed validation pairs: march over val streams at a coarse stride.
  std::vector<std::pair<int, int64_t>> val_pairs;
  for (int64_t pos = 0; static_cast<int>(val_pairs.size()) < cfg.val_pairs;
       pos += need) {
    bool any = false;
    for (size_t si = 0;
         si < val.streams.size() &&
         static_cast<int>(val_pairs.size()) < cfg.val_pairs;
         ++si)
      if (pos + need <= val.streams[si].length()) {
        val_pairs.emplace_back(static_cast<int>(si), pos);
        any = true;
      }
    if (!any) break;
  }
  if (val_pairs.empty())
    fail(ErrorKind::kData, "train_f2g: no validation pairs available");

  auto pair_loss = [&](const AnnotatedStream& s, int64_t pos) {
    const Tensor ctx = slice_frames(s.frames, pos, tau);
    const Tensor tgt = slice_frames(s.frames, pos + tau, horizon);
    return net.train_loss(ctx, tgt, cfg.gdl_weight);
  };
  auto val_loss = [&]() {
    NoGradGuard ng;
    double sum = 0;
    for (const auto& [si, pos] : val_pairs)
      sum += scalar_value(pair_loss(val.streams[static_cast<size_t>(si)], pos));
    return sum / static_cast<double>(val_pairs.size());
  };

  // Copy-last-frame reference on the same pairs and loss.
  double baseline = 0;
  {
    NoGradGuard ng;
    for (const auto& [si, pos] : val_pairs) {
      const AnnotatedStream& s = val.streams[static_cast<size_t>(si)];
      const Tensor last = slice_frames(s.frames, pos + tau - 1, 1);
      double acc = 0;
      for (int hstep = 0; hstep < horizon; ++hstep)
        acc += scalar_value(ops::image_loss(
            last, slice_frames(s.frames, pos + tau + hstep, 1), cfg.gdl_weight));
      baseline += acc / horizon;
    }
    baseline /= static_cast<double>(val_pairs.size());
  }

  std::vector<Parameter*> params = net.parameters();
  SgdConfig sgd;
  sgd.lr = cfg.lr;
  sgd.momentum = 0.0;
  sgd.weight_decay = 0.0;
  init_sgd_state(params);
  Rng rng = Rng(seed).fork("f2g");

  TrainResult res;
  res.baseline_val = baseline;
  if (log) log({"f2g_baseline", 0, 0, baseline, baseline, seed});

  double best = -1;
  std::vector<std::vector<uint8_t>> best_snap;
  double run_sum = 0;
  int64_t run_count = 0;
  int epoch = 0;
  for (int64_t it = 1; it <= cfg.iterations; ++it) {
    // Pick a context position, biased toward action instances.
    const int si = static_cast<int>(rng.uniform_int(
        0, static_cast<int64_t>(train.streams.size()) - 1));
    const AnnotatedStream& s = train.streams[static_cast<size_t>(si)];
    const int64_t max_pos = s.length() - need;
    int64_t pos;
    if (!s.intervals.empty() && rng.uniform() < cfg.action_bias) {
      const Interval& iv = s.intervals[static_cast<size_t>(rng.uniform_int(
          0, static_cast<int64_t>(s.intervals.size()) - 1))];
      pos = std::clamp<int64_t>(
          rng.uniform_int(iv.start - horizon, std::max(iv.start - horizon,
                                                       iv.end - tau)),
          0, max_pos);
    } else {
      pos = rng.uniform_int(0, max_pos);
    }

    zero_grads(params);
    Tensor loss = pair_loss(s, pos);
    if (res.initial_loss == 0.0 && it == 1)
      res.initial_loss = scalar_value(loss);
    backward(loss);
    sgd_step(params, sgd);
    run_sum += scalar_value(loss);
    ++run_count;

    if (it % cfg.log_every == 0 || it == cfg.iterations) {
      const double v = val_loss();
      const double mean_loss = run_sum / run_count;
      res.epoch_losses.push_back(mean_loss);
      res.val_curve.push_back(v);
      if (best < 0 || v < best) {
        best = v;
        best_snap = snapshot(params);
      }
      if (log) log({"f2g", epoch, it, mean_loss, v, seed});
      ++epoch;
      run_sum = 0;
      run_count = 0;
    }
  }
  if (!best_snap.empty()) restore(params, best_snap);
  res.best_val = best;
  res.final_loss = res.epoch_losses.empty() ? 0.0 : res.epoch_losses.back();
  return res;
}

std::vector<StreamPieces> extract_detector_pieces(
    const Dataset& ds, const PipelineConfig& pcfg, const C3DNet& pr,
    const C3DNet& ar, const F2GNet* f2g, bool want_generated, bool want_oracle) {
  pcfg.validate();
  if (want_generated && !f2g)
    fail(ErrorKind::kState,
         "extract_detector_pieces: generated features need a future generator");
  NoGradGuard ng;
  const int k = static_cast<int>(ds.class_names.size());
  const int tau = pcfg.tau;
  std::vector<StreamPieces> out;
  for (const AnnotatedStream& s : ds.streams) {
    StreamPieces sp;
    for (int64_t ws = 0; ws + tau <= s.length(); ws += pcfg.train_stride) {
      const Tensor window = slice_frames(s.frames, ws, tau);
      const Tensor x = window_to_input(window);
      WindowPieces wp;
      C3DNet::Out pr_out = pr.forward(x, Mode::kEval);
      wp.pr = pr_out.fc7;
      wp.pr_label = argmax_of_row(pr_out.logits, 0);
      wp.ar = ar.forward(x, Mode::kEval).fc7;

      const Tensor tail = slice_frames(window, pcfg.horizon, tau - pcfg.horizon);
      auto future_pieces = [&](const Tensor& future, Tensor* prf, Tensor* arf,
                               int* label) {
        Tensor merged = Tensor::zeros({tau, window.dim(1), window.dim(2),
                                       window.dim(3)}, window.dtype());
        std::memcpy(merged.impl_->data.data(), tail.impl_->data.data(),
                    tail.impl_->data.size());
        std::memcpy(merged.impl_->data.data() + tail.impl_->data.size(),
                    future.impl_->data.data(), future.impl_->data.size());
        const Tensor xh = window_to_input(merged);
        C3DNet::Out ph = pr.forward(xh, Mode::kEval);
        *prf = ph.fc7;
        *label = argmax_of_row(ph.logits, 0);
        *arf = ar.forward(xh, Mode::kEval).fc7;
      };
      if (want_generated)
        future_pieces(f2g->generate(window), &wp.pr_gen, &wp.ar_gen,
                      &wp.pr_gen_label);
      if (want_oracle)
        future_pieces(slice_frames(s.frames, ws + tau, pcfg.horizon), &wp.pr_gt,
                      &wp.ar_gt, &wp.pr_gt_label);
      sp.windows.push_back(std::move(wp));
      sp.det_labels.push_back(derive_det_labels(s, ws, k, tau));
    }
    out.push_back(std::move(sp));
  }
  return out;
}

std::vector<FeatureSequence> assemble_sequences(
    const std::vector<StreamPieces>& pieces, const PipelineConfig& pcfg,
    int feature_dim, int seq_len) {
  if (seq_len < 1)
    fail(ErrorKind::kArgument, "assemble_sequences: seq_len must be >= 1");
  std::vector<FeatureSequence> out;
  for (const StreamPieces& sp : pieces) {
    const int64_t n = static_cast<int64_t>(sp.windows.size());
    for (int64_t lo = 0; lo + seq_len <= n; lo += seq_len) {
      FeatureSequence seq;
      for (int64_t i = lo; i < lo + seq_len; ++i) {
        const WindowPieces& wp = sp.windows[static_cast<size_t>(i)];
        const Dtype dt = wp.pr.dtype();
        const Tensor zero = Tensor::zeros({1, feature_dim}, dt);
        Tensor cur_ar = (!pcfg.serial_cascade || wp.pr_label == kPrAction)
                            ? wp.ar
                            : zero;
        Tensor fut_pr = zero, fut_ar = zero;
        if (pcfg.oracle_future || pcfg.use_f2g) {
          const bool gt = pcfg.oracle_future;
          const Tensor& pr_f = gt ? wp.pr_gt : wp.pr_gen;
          const Tensor& ar_f = gt ? wp.ar_gt : wp.ar_gen;
          const int label_f = gt ? wp.pr_gt_label : wp.pr_gen_label;
          if (!pr_f.defined())
            fail(ErrorKind::kState,
                 "assemble_sequences: cached pieces lack the requested future "
                 "features");
          fut_pr = pr_f;
          fut_ar = (!pcfg.serial_cascade || label_f == kPrAction) ? ar_f : zero;
        }
        seq.steps.push_back(
            ops::concat_channels({wp.pr, fut_pr, cur_ar, fut_ar}));
        seq.labels.push_back(sp.det_labels[static_cast<size_t>(i)]);
      }
      out.push_back(std::move(seq));
    }
  }
  return out;
}

TrainResult train_det_cached(DetectorNet& net,
                             const std::vector<FeatureSequence>& train_seqs,
                             const std::vector<FeatureSequence>& val_seqs,
                             const PhaseConfig& cfg, int num_classes,
                             uint64_t seed, const LogSink& log) {
  if (train_seqs.empty())
    fail(ErrorKind::kData, "train_det: no full training sequences");
  const int out_dim = num_classes + 1;
  if (net.config().out_dim != out_dim)
    fail(ErrorKind::kDimension,
         "train_det: network has " + std::to_string(net.config().out_dim) +
             " outputs, corpus needs " + std::to_string(out_dim));
  const int seq_len = static_cast<int>(train_seqs[0].steps.size());
  std::vector<Parameter*> params = net.parameters();
  const Dtype dt = params.front()->value.dtype();

  Tensor weights;
  if (cfg.weighted) {
    std::vector<int64_t> counts(static_cast<size_t>(out_dim), 0);
    for (const FeatureSequence& seq : train_seqs)
      for (int label : seq.labels) ++counts[static_cast<size_t>(label)];
    weights = weights_tensor(class_weights(counts), dt);
  }

  Stepper opt;
  opt.init(params, cfg);
  Rng rng = Rng(seed).fork("det");

  // One forward over a batch of sequences; returns the mean step loss.
  auto seq_batch = [&](const std::vector<const FeatureSequence*>& batch,
                       bool train_mode,
                       std::vector<std::vector<int64_t>>* confusion) {
    const int64_t b = static_cast<int64_t>(batch.size());
    DetectorNet::State state = net.initial_state(b);
    Tensor total;
    for (int t = 0; t < seq_len; ++t) {
      std::vector<Tensor> rows;
      std::vector<int> labels;
      for (const FeatureSequence* seq : batch) {
        rows.push_back(seq->steps[static_cast<size_t>(t)]);
        labels.push_back(seq->labels[static_cast<size_t>(t)]);
      }
      Tensor x = stack_rows(rows);
      if (x.dtype() != dt) x = x.astype(dt);
      DetectorNet::Out out = net.forward(
          x, state, train_mode ? Mode::kTrain : Mode::kEval,
          train_mode ? &rng : nullptr);
      state = out.state;
      Tensor loss = ops::softmax_cross_entropy(
          out.logits, one_hot(labels, out_dim, dt), weights);
      total = total.defined() ? ops::add(total, loss) : loss;
      if (confusion)
        for (size_t i = 0; i < labels.size(); ++i)
          ++(*confusion)[static_cast<size_t>(labels[i])][static_cast<size_t>(
              argmax_of_row(out.logits, static_cast<int64_t>(i)))];
    }
    return ops::scale(total, 1.0 / seq_len);
  };

  auto validate = [&](std::vector<std::vector<int64_t>>* confusion) {
    NoGradGuard ng;
    std::vector<std::vector<int64_t>> conf(
        static_cast<size_t>(out_dim),
        std::vector<int64_t>(static_cast<size_t>(out_dim), 0));
    const size_t bs = static_cast<size_t>(std::max(1, cfg.batch_size));
    for (size_t lo = 0; lo < val_seqs.size(); lo += bs) {
      std::vector<const FeatureSequence*> batch;
      for (size_t i = lo; i < std::min(val_seqs.size(), lo + bs); ++i)
        batch.push_back(&val_seqs[i]);
      seq_batch(batch, false, &conf);
    }
    if (confusion) *confusion = conf;
    return balanced_accuracy(conf);
  };

  TrainResult res;
  double best = -1;
  std::vector<std::vector<uint8_t>> best_snap;
  int64_t global_step = 0;
  std::vector<size_t> order(train_seqs.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(
                                  0, static_cast<int64_t>(i) - 1))]);
    double loss_sum = 0;
    int64_t loss_count = 0;
    const size_t bs = static_cast<size_t>(std::max(1, cfg.batch_size));
    for (size_t lo = 0; lo < order.size(); lo += bs) {
      std::vector<const FeatureSequence*> batch;
      for (size_t i = lo; i < std::min(order.size(), lo + bs); ++i)
        batch.push_back(&train_seqs[order[i]]);
      zero_grads(params);
      Tensor loss = seq_batch(batch, true, nullptr);
      if (res.initial_loss == 0.0 && global_step == 0)
        res.initial_loss = scalar_value(loss);
      backward(loss);
      opt.step(params);
      loss_sum += scalar_value(loss);
      ++loss_count;
      ++global_step;
    }
    std::vector<std::vector<int64_t>> conf;
    const double val_metric = val_seqs.empty() ? 0.0 : validate(&conf);
    const double mean_loss = loss_count ? loss_sum / loss_count : 0.0;
    res.epoch_losses.push_back(mean_loss);
    res.val_curve.push_back(val_metric);
    if (val_metric > best) {
      best = val_metric;
      best_snap = snapshot(params);
      res.confusion = conf;
    }
    if (log) log({"det", epoch, global_step, mean_loss, val_metric, seed});
  }
  if (!best_snap.empty()) restore(params, best_snap);
  res.best_val = best < 0 ? 0.0 : best;
  res.final_loss = res.epoch_losses.empty() ? 0.0 : res.epoch_losses.back();
  return res;
}

TrainResult train_det(DetectorNet& net, const C3DNet& pr, const C3DNet& ar,
                      const F2GNet* f2g, const Dataset& train,
                      const Dataset& val, const PipelineConfig& pcfg,
                      const PhaseConfig& cfg, int seq_len, uint64_t seed,
                      const LogSink& log) {
  check_disjoint(train, val);
  const bool want_gen = pcfg.use_f2g && !pcfg.oracle_future;
  const bool want_gt = pcfg.oracle_future;
  if (want_gen && !f2g)
    fail(ErrorKind::kState, "train_det: future generator missing");
  const int feat = pr.config().feature_dim;
  const auto train_pieces =
      extract_detector_pieces(train, pcfg, pr, ar, f2g, want_gen, want_gt);
  const auto val_pieces =
      extract_detector_pieces(val, pcfg, pr, ar, f2g, want_gen, want_gt);
  const auto train_seqs = assemble_sequences(train_pieces, pcfg, feat, seq_len);
  const auto val_seqs = assemble_sequences(val_pieces, pcfg, feat, seq_len);
  const int k = static_cast<int>(train.class_names.size());
  return train_det_cached(net, train_seqs, val_seqs, cfg, k, seed, log);
}

std::map<double, ApTable> evaluate_pipeline(const Dataset& ds,
                                            const PipelineConfig& pcfg,
                                            const C3DNet& pr, const C3DNet& ar,
                                            const F2GNet* f2g,
                                            const DetectorNet& det,
                                            const std::vector<double>& thetas) {
  std::vector<StreamEval> corpus;
  for (const AnnotatedStream& s : ds.streams) {
    StreamResult res = run_stream(s, pcfg, pr, ar, f2g, det);
    corpus.push_back({std::move(res.events), s.intervals});
  }
  return map_table(corpus, static_cast<int>(ds.class_names.size()), thetas);
}

Dataset make_corpus_split(const CorpusConfig& cfg, int num_streams,
                          uint64_t seed, const std::string& prefix) {
  if (cfg.min_instances < 0 || cfg.max_instances < cfg.min_instances)
    fail(ErrorKind::kSpec, "make_corpus_split: bad instance range");
  Dataset ds;
  ds.class_names = default_class_names();
  while (static_cast<int>(ds.class_names.size()) < cfg.proto.num_classes)
    ds.class_names.push_back("class-" + std::to_string(ds.class_names.size()));
  ds.class_names.resize(static_cast<size_t>(cfg.proto.num_classes));
  Rng root(seed);
  for (int i = 0; i < num_streams; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%03d", i);
    StreamSpec spec = cfg.proto;
    spec.id = prefix + "-" + buf;
    Rng r = root.fork(spec.id);
    spec.num_instances =
        static_cast<int>(r.uniform_int(cfg.min_instances, cfg.max_instances));
    spec.seed = r.next_u64();
    ds.streams.push_back(generate_stream(spec));
  }
  return ds;
}

const std::vector<std::string>& ablation_setups() {
  static const std::vector<std::string> kSetups = {
      "baseline", "no_aug", "cascade", "no_f2g", "full", "f2g_gt"};
  return kSetups;
}

AblationReport run_ablation(const AblationConfig& cfg, const LogSink& log) {
  AblationReport rep;
  rep.setups = ablation_setups();
  if (cfg.seeds.empty())
    fail(ErrorKind::kArgument, "run_ablation: no seeds given");

  auto prefixed = [&](const std::string& prefix) -> LogSink {
    if (!log) return LogSink();
    return [&, prefix](const TrainLogEntry& e) {
      TrainLogEntry copy = e;
      copy.phase = prefix + "." + e.phase;
      log(copy);
    };
  };

  struct Bundle {
    std::unique_ptr<C3DNet> pr, ar;
    std::unique_ptr<F2GNet> f2g;
    std::vector<StreamPieces> train_pieces, val_pieces;
  };

  const CorpusConfig& val_corpus = cfg.has_val_corpus ? cfg.val_corpus : cfg.corpus;
  for (uint64_t seed : cfg.seeds) {
    Rng root(seed);
    const Dataset train = make_corpus_split(cfg.corpus, cfg.corpus.train_streams,
                                            root.fork("corpus-train").next_u64(),
                                            "abl-train");
    const Dataset val = make_corpus_split(val_corpus, cfg.corpus.val_streams,
                                          root.fork("corpus-val").next_u64(),
                                          "abl-val");
    const Dataset train_aug = augment_dataset(train);

    auto build_bundle = [&](bool aug, bool want_gt) {
      const Dataset& tr = aug ? train_aug : train;
      const std::string tag = aug ? "aug" : "raw";
      Bundle b;
      Rng nr = root.fork("nets-" + tag);
      Rng pr_rng = nr.fork("pr"), ar_rng = nr.fork("ar"),
          f2g_rng = nr.fork("f2g");
      b.pr = std::make_unique<C3DNet>(cfg.pr_net, Dtype::kF32, pr_rng);
      b.ar = std::make_unique<C3DNet>(cfg.ar_net, Dtype::kF32, ar_rng);
      b.f2g = std::make_unique<F2GNet>(cfg.f2g_net, Dtype::kF32, f2g_rng);
      const std::string pre = "ablate.s" + std::to_string(seed) + "." + tag;
      train_pr(*b.pr, tr, val, cfg.pr_opt, cfg.pipeline.tau,
               cfg.pipeline.train_stride, root.fork("pr-" + tag).next_u64(),
               prefixed(pre));
      train_ar(*b.ar, tr, val, cfg.ar_opt, cfg.pipeline.tau,
               cfg.pipeline.train_stride, root.fork("ar-" + tag).next_u64(),
               prefixed(pre));
      train_f2g(*b.f2g, tr, val, cfg.f2g_opt,
                root.fork("f2g-" + tag).next_u64(), prefixed(pre));
      b.train_pieces = extract_detector_pieces(tr, cfg.pipeline, *b.pr, *b.ar,
                                               b.f2g.get(), true, want_gt);
      b.val_pieces = extract_detector_pieces(val, cfg.pipeline, *b.pr, *b.ar,
                                             b.f2g.get(), true, want_gt);
      return b;
    };

    const Bundle aug_bundle = build_bundle(true, true);
    const Bundle raw_bundle = build_bundle(false, false);

    for (const std::string& setup : rep.setups) {
      PipelineConfig pcfg = cfg.pipeline;
      const Bundle* bundle = &aug_bundle;
      if (setup == "baseline") {
        pcfg.use_f2g = false;
        bundle = &raw_bundle;
      } else if (setup == "no_aug") {
        bundle = &raw_bundle;
      } else if (setup == "cascade") {
        pcfg.serial_cascade = true;
      } else if (setup == "no_f2g") {
        pcfg.use_f2g = false;
      } else if (setup == "f2g_gt") {
        pcfg.oracle_future = true;
      }

      Rng det_rng = root.fork("det-" + setup);
      DetectorNet det(cfg.det_net, Dtype::kF32, det_rng);
      const int feat = cfg.pr_net.feature_dim;
      const auto train_seqs =
          assemble_sequences(bundle->train_pieces, pcfg, feat, cfg.seq_len);
      const auto val_seqs =
          assemble_sequences(bundle->val_pieces, pcfg, feat, cfg.seq_len);
      train_det_cached(det, train_seqs, val_seqs, cfg.det_opt,
                       cfg.det_net.out_dim - 1,
                       root.fork("det-seed-" + setup).next_u64(),
                       prefixed("ablate.s" + std::to_string(seed) + "." + setup));

      const auto table = evaluate_pipeline(val, pcfg, *bundle->pr, *bundle->ar,
                                           bundle->f2g.get(), det, cfg.thetas);
      AblationCell cell;
      cell.setup = setup;
      cell.seed = seed;
      double sum = 0;
      for (const auto& [theta, ap] : table) {
        cell.map_by_theta[theta] = ap.mean;
        sum += ap.mean;
      }
      cell.mean_map = table.empty() ? 0.0 : sum / static_cast<double>(table.size());
      rep.cells.push_back(std::move(cell));
    }
  }

  for (const std::string& setup : rep.setups) {
    double sum = 0;
    int n = 0;
    for (const AblationCell& c : rep.cells)
      if (c.setup == setup) {
        sum += c.mean_map;
        ++n;
      }
    rep.mean_by_setup[setup] = n ? sum / n : 0.0;
  }
  return rep;
}

std::string ablation_table_text(const AblationReport& rep,
                                const std::vector<double>& thetas) {
  std::ostringstream os;
  os << "setup      ";
  for (double th : thetas) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "  th=%.2f", th);
    os << buf;
  }
  os << "    mean\n";
  for (const std::string& setup : rep.setups) {
    // Mean over seeds per threshold.
    char name[32];
    std::snprintf(name, sizeof(name), "%-10s", setup.c_str());
    os << name;
    for (double th : thetas) {
      double sum = 0;
      int n = 0;
      for (const AblationCell& c : rep.cells)
        if (c.setup == setup && c.map_by_theta.count(th)) {
          sum += c.map_by_theta.at(th);
          ++n;
        }
      char buf[16];
      std::snprintf(buf, sizeof(buf), "   %.3f", n ? sum / n : 0.0);
      os << buf;
    }
    char buf[16];
    std::snprintf(buf, sizeof(buf), "   %.3f", rep.mean_by_setup.at(setup));
    os << buf << "\n";
  }
  return os.str();
}

std::string ablation_table_json(const AblationReport& rep) {
  ordered_json root;
  root["setups"] = rep.setups;
  root["cells"] = ordered_json::array();
  for (const AblationCell& c : rep.cells) {
    ordered_json jc;
    jc["setup"] = c.setup;
    jc["seed"] = c.seed;
    jc["mean_map"] = c.mean_map;
    ordered_json jt;
    for (const auto& [theta, v] : c.map_by_theta) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%.2f", theta);
      jt[buf] = v;
    }
    jc["map_by_theta"] = jt;
    root["cells"].push_back(jc);
  }
  ordered_json jm;
  for (const auto& [setup, v] : rep.mean_by_setup) jm[setup] = v;
  root["mean_by_setup"] = jm;
  return root.dump(2);
}

}  // namespace streamloc
