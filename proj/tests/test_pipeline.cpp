// Causal sliding-window pipeline: schedule, features, events, JSON records.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <optional>
#include <vector>

#include "streamloc/networks.hpp"
#include "streamloc/pipeline.hpp"
#include "test_util.hpp"

using namespace streamloc;

namespace {

// Miniature networks: fast enough to run whole streams in unit tests.
C3DConfig tiny_c3d(int64_t out_dim) {
  C3DConfig c;
  c.in_channels = 1;
  c.height = 16;
  c.width = 16;
  c.widths = {2, 2, 2, 2, 2, 2, 2, 2};
  c.feature_dim = 8;
  c.out_dim = out_dim;
  return c;
}

F2GConfig tiny_f2g() {
  F2GConfig c;
  c.in_channels = 1;
  c.height = 16;
  c.width = 16;
  c.content_widths = {2, 2};
  c.motion_widths = {2, 2};
  c.lstm_channels = 2;
  c.fuse_width = 4;
  c.decoder_widths = {2, 2};
  c.horizon = 8;
  return c;
}

DetectorConfig tiny_det() {
  DetectorConfig c;
  c.input_dim = 32;  // 4F with F = 8
  c.lstm_width = 8;
  c.num_layers = 2;
  c.out_dim = 4;
  return c;
}

struct Nets {
  C3DNet pr, ar;
  F2GNet f2g;
  DetectorNet det;
};

Nets make_nets(uint64_t seed) {
  Rng rng(seed);
  return Nets{C3DNet(tiny_c3d(2), Dtype::kF32, rng),
              C3DNet(tiny_c3d(6), Dtype::kF32, rng),
              F2GNet(tiny_f2g(), Dtype::kF32, rng),
              DetectorNet(tiny_det(), Dtype::kF32, rng)};
}

AnnotatedStream random_stream(int64_t t, uint64_t seed) {
  Rng rng(seed);
  AnnotatedStream s;
  s.id = "r" + std::to_string(seed);
  s.frames = Tensor::uniform({t, 1, 16, 16}, 0.0, 1.0, rng, Dtype::kF32);
  return s;
}

// Pin the PR head so its argmax is a fixed label regardless of the input.
void force_pr_decision(C3DNet& net, int label) {
  for (Parameter* p : net.parameters()) {
    if (p->name == "out.w")
      for (float& v : p->value.buf<float>()) v = 0.0f;
    if (p->name == "out.b") {
      auto b = p->value.buf<float>();
      for (float& v : b) v = 0.0f;
      b[static_cast<size_t>(label)] = 5.0f;
    }
  }
}

WindowPrediction pred_at(int64_t t, int label, std::vector<double> probs) {
  WindowPrediction p;
  p.t = t;
  p.label = label;
  p.probs = std::move(probs);
  return p;
}

PipelineConfig base_cfg() {
  PipelineConfig cfg;
  cfg.tau = 16;
  cfg.test_stride = 8;
  cfg.train_stride = 16;
  cfg.horizon = 8;
  return cfg;
}

}  // namespace

TEST_CASE("predictions warm up at t = 15 and then arrive every 8 frames") {
  Nets n = make_nets(40);
  PipelineConfig cfg = base_cfg();
  OnlinePipeline pipe(cfg, n.pr, n.ar, &n.f2g, n.det);

  Rng rng(2);
  std::vector<int64_t> emitted;
  for (int64_t t = 0; t < 60; ++t) {
    Tensor frame = Tensor::uniform({1, 16, 16}, 0.0, 1.0, rng, Dtype::kF32);
    auto p = pipe.step(frame);
    if (p) {
      emitted.push_back(p->t);
      CHECK(p->t == t);
      CHECK(p->probs.size() == 4);
      double sum = 0;
      for (double v : p->probs) sum += v;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(p->label >= 0);
      CHECK(p->label <= 3);
    }
  }
  CHECK(emitted == std::vector<int64_t>{15, 23, 31, 39, 47, 55});

  // Reset restarts the schedule from scratch.
  pipe.reset();
  Tensor f0 = Tensor::zeros({1, 16, 16}, Dtype::kF32);
  for (int i = 0; i < 15; ++i) CHECK(!pipe.step(f0).has_value());
  CHECK(pipe.step(f0).has_value());
}

TEST_CASE("window features concatenate as [pr, pr_future, ar, ar_future]") {
  Nets n = make_nets(41);
  PipelineConfig cfg = base_cfg();
  Rng rng(3);
  Tensor window = Tensor::uniform({16, 1, 16, 16}, 0.0, 1.0, rng, Dtype::kF32);
  int64_t ar_calls = 0;
  WindowFeatures wf = extract_window_features(window, cfg, n.pr, n.ar, &n.f2g,
                                              Tensor(), &ar_calls);
  CHECK(ar_calls == 2);
  CHECK(wf.pr.shape() == Shape{1, 8});
  Tensor cat = wf.concat();
  CHECK(cat.shape() == Shape{1, 32});
  auto cb = cat.buf<float>();
  const Tensor* parts[4] = {&wf.pr, &wf.pr_future, &wf.ar, &wf.ar_future};
  for (int j = 0; j < 4; ++j) {
    auto pb = parts[j]->buf<float>();
    for (int64_t i = 0; i < 8; ++i)
      CHECK(cb[static_cast<size_t>(8 * j + i)] == pb[static_cast<size_t>(i)]);
  }

  // Without either future source the future slots are zeros.
  PipelineConfig off = cfg;
  off.use_f2g = false;
  WindowFeatures wo = extract_window_features(window, off, n.pr, n.ar, nullptr,
                                              Tensor(), nullptr);
  for (float v : wo.pr_future.buf<float>()) CHECK(v == 0.0f);
  for (float v : wo.ar_future.buf<float>()) CHECK(v == 0.0f);
  CHECK(test::bytes_equal(wo.pr, wf.pr));
}

TEST_CASE("the serial cascade skips AR whenever PR says background") {
  Nets n = make_nets(42);
  AnnotatedStream s = random_stream(40, 9);
  PipelineConfig cfg = base_cfg();
  cfg.serial_cascade = true;

  force_pr_decision(n.pr, kPrBackground);
  StreamResult bg = run_stream(s, cfg, n.pr, n.ar, &n.f2g, n.det);
  CHECK(bg.predictions.size() == 4);  // t = 15, 23, 31, 39
  CHECK(bg.ar_forwards == 0);

  force_pr_decision(n.pr, kPrAction);
  StreamResult fg = run_stream(s, cfg, n.pr, n.ar, &n.f2g, n.det);
  CHECK(fg.ar_forwards == 8);  // current + future window, every emission

  // Without the cascade AR always runs.
  cfg.serial_cascade = false;
  force_pr_decision(n.pr, kPrBackground);
  StreamResult always = run_stream(s, cfg, n.pr, n.ar, &n.f2g, n.det);
  CHECK(always.ar_forwards == 8);
}

TEST_CASE("emitted predictions never depend on frames after their window") {
  Nets n = make_nets(43);
  PipelineConfig cfg = base_cfg();
  AnnotatedStream s = random_stream(44, 10);

  StreamResult full = run_stream(s, cfg, n.pr, n.ar, &n.f2g, n.det);
  REQUIRE(full.predictions.size() == 4);  // t = 15, 23, 31, 39

  // Corrupt everything after frame 23 and run again.
  AnnotatedStream mutated = s;
  mutated.frames = s.frames.clone();
  {
    Rng wild(999);
    auto b = mutated.frames.buf<float>();
    const int64_t chw = 16 * 16;
    for (int64_t t = 24; t < 44; ++t)
      for (int64_t i = 0; i < chw; ++i)
        b[static_cast<size_t>(t * chw + i)] =
            static_cast<float>(wild.uniform(0.0, 1.0));
  }
  StreamResult cut = run_stream(mutated, cfg, n.pr, n.ar, &n.f2g, n.det);
  REQUIRE(cut.predictions.size() == 4);
  for (size_t i = 0; i < 2; ++i) {  // emissions at t = 15 and t = 23
    CHECK(cut.predictions[i].t == full.predictions[i].t);
    CHECK(cut.predictions[i].label == full.predictions[i].label);
    CHECK(cut.predictions[i].probs == full.predictions[i].probs);
  }
  CHECK(full.causal);
  CHECK(cut.causal);
}

TEST_CASE("oracle future frames flip the causality flag") {
  Nets n = make_nets(44);
  PipelineConfig cfg = base_cfg();
  cfg.oracle_future = true;
  AnnotatedStream s = random_stream(32, 11);
  StreamResult res = run_stream(s, cfg, n.pr, n.ar, &n.f2g, n.det);
  CHECK(!res.causal);
  CHECK(res.predictions.size() == 3);
  const std::string line = detection_json(s.id, cfg, res);
  CHECK(line.find("\"causal\":false") != std::string::npos);

  // Stepping in oracle mode without future frames is a state error.
  OnlinePipeline pipe(cfg, n.pr, n.ar, &n.f2g, n.det);
  Tensor f0 = Tensor::zeros({1, 16, 16}, Dtype::kF32);
  for (int i = 0; i < 15; ++i) pipe.step(f0);
  CHECK_THROWS_AS((void)pipe.step(f0), Error);
}

TEST_CASE("windows merge into events while background breaks runs") {
  PipelineConfig cfg = base_cfg();
  const int k = 3;
  std::vector<WindowPrediction> preds = {
      pred_at(15, 3, {0.1, 0.1, 0.1, 0.7}),
      pred_at(23, 1, {0.1, 0.8, 0.05, 0.05}),
      pred_at(31, 1, {0.2, 0.6, 0.1, 0.1}),
      pred_at(39, 3, {0.2, 0.2, 0.2, 0.4}),
      pred_at(47, 0, {0.9, 0.05, 0.03, 0.02}),
  };
  auto events = events_from_predictions(preds, cfg, k);
  REQUIRE(events.size() == 2);
  CHECK(events[0].class_id == 1);
  CHECK(events[0].start == 16);  // 23 - 8 + 1
  CHECK(events[0].end == 32);
  CHECK(events[0].confidence == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(events[1].class_id == 0);
  CHECK(events[1].start == 40);
  CHECK(events[1].end == 48);
  CHECK(events[1].confidence == doctest::Approx(0.9).epsilon(1e-12));

  // A label change flushes without an intervening background window.
  auto flip = events_from_predictions(
      {pred_at(15, 0, {0.8, 0.1, 0.05, 0.05}),
       pred_at(23, 2, {0.1, 0.1, 0.7, 0.1})},
      cfg, k);
  REQUIRE(flip.size() == 2);
  CHECK(flip[0].class_id == 0);
  CHECK(flip[0].start == 8);
  CHECK(flip[0].end == 16);
  CHECK(flip[1].class_id == 2);
  CHECK(flip[1].start == 16);
  CHECK(flip[1].end == 24);

  // A schedule gap breaks a run even at the same label.
  auto gap = events_from_predictions(
      {pred_at(15, 0, {0.8, 0.1, 0.05, 0.05}),
       pred_at(31, 0, {0.8, 0.1, 0.05, 0.05})},
      cfg, k);
  CHECK(gap.size() == 2);

  // The first window clamps its span at frame zero.
  PipelineConfig wide = cfg;
  wide.test_stride = 20;
  auto clamp = events_from_predictions({pred_at(15, 2, {0, 0, 1, 0})}, wide, k);
  REQUIRE(clamp.size() == 1);
  CHECK(clamp[0].start == 0);
  CHECK(clamp[0].end == 16);

  // Short events are dropped under min_event_windows.
  PipelineConfig strict = cfg;
  strict.min_event_windows = 2;
  CHECK(events_from_predictions(preds, strict, k).size() == 1);

  // Labels outside [0, K] are rejected.
  CHECK_THROWS_AS(
      (void)events_from_predictions({pred_at(15, 5, {1, 0, 0, 0})}, cfg, k),
      Error);
}

TEST_CASE("per-frame scores paint each window span and default to background") {
  PipelineConfig cfg = base_cfg();
  auto scores = per_frame_scores({pred_at(15, 1, {0.1, 0.6, 0.2, 0.1})}, cfg,
                                 20, 3);
  REQUIRE(scores.size() == 20);
  for (int64_t f = 0; f < 8; ++f) {
    CHECK(scores[static_cast<size_t>(f)] ==
          std::vector<double>{0.0, 0.0, 0.0, 1.0});
  }
  for (int64_t f = 8; f <= 15; ++f)
    CHECK(scores[static_cast<size_t>(f)] ==
          std::vector<double>{0.1, 0.6, 0.2, 0.1});
  for (int64_t f = 16; f < 20; ++f)
    CHECK(scores[static_cast<size_t>(f)] ==
          std::vector<double>{0.0, 0.0, 0.0, 1.0});
}

TEST_CASE("detection records round-trip through JSON lines") {
  PipelineConfig cfg = base_cfg();
  cfg.serial_cascade = true;
  StreamResult res;
  res.causal = true;
  res.events.push_back({1, 16, 48, 0.875});
  res.events.push_back({0, 96, 120, 0.5});
  const std::string line = detection_json("stream-07", cfg, res);
  CHECK(line.find('\n') == std::string::npos);  // one record per line
  for (const char* key : {"\"stream_id\"", "\"config\"", "\"events\"",
                          "\"causal\"", "\"class\"", "\"start\"", "\"end\"",
                          "\"confidence\"", "\"tau\"", "\"test_stride\"",
                          "\"serial_cascade\""})
    CHECK(line.find(key) != std::string::npos);

  std::string id;
  StreamResult back = detection_from_json(line, &id);
  CHECK(id == "stream-07");
  CHECK(back.causal);
  REQUIRE(back.events.size() == 2);
  CHECK(back.events[0].class_id == 1);
  CHECK(back.events[0].start == 16);
  CHECK(back.events[0].end == 48);
  CHECK(back.events[0].confidence == 0.875);
  CHECK(back.events[1].class_id == 0);

  CHECK_THROWS_AS((void)detection_from_json("{\"nope\":1}", nullptr), Error);
  CHECK_THROWS_AS((void)detection_from_json("not json", nullptr), Error);
}

TEST_CASE("frame slicing repeats the last frame past the end") {
  Tensor frames = Tensor::zeros({5, 1, 2, 2}, Dtype::kF32);
  {
    auto b = frames.buf<float>();
    for (int64_t t = 0; t < 5; ++t)
      for (int64_t i = 0; i < 4; ++i)
        b[static_cast<size_t>(t * 4 + i)] = static_cast<float>(t);
  }
  Tensor got = slice_frames(frames, 3, 4);
  CHECK(got.shape() == Shape{4, 1, 2, 2});
  auto g = got.buf<float>();
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(g[static_cast<size_t>(0 * 4 + i)] == 3.0f);
    CHECK(g[static_cast<size_t>(1 * 4 + i)] == 4.0f);
    CHECK(g[static_cast<size_t>(2 * 4 + i)] == 4.0f);
    CHECK(g[static_cast<size_t>(3 * 4 + i)] == 4.0f);
  }
}

TEST_CASE("window transposition maps [tau,C,H,W] onto [1,C,tau,H,W]") {
  Tensor w = Tensor::zeros({3, 2, 2, 2}, Dtype::kF32);
  {
    auto b = w.buf<float>();
    for (size_t i = 0; i < b.size(); ++i) b[i] = static_cast<float>(i);
  }
  Tensor x = window_to_input(w);
  CHECK(x.shape() == Shape{1, 2, 3, 2, 2});
  auto wb = w.buf<float>();
  auto xb = x.buf<float>();
  for (int64_t t = 0; t < 3; ++t)
    for (int64_t c = 0; c < 2; ++c)
      for (int64_t i = 0; i < 4; ++i)
        CHECK(xb[static_cast<size_t>((c * 3 + t) * 4 + i)] ==
              wb[static_cast<size_t>((t * 2 + c) * 4 + i)]);

  // stack_window produces the [tau,C,H,W] layout from single frames.
  std::vector<Tensor> frames;
  for (int i = 0; i < 3; ++i)
    frames.push_back(Tensor::full({2, 2, 2}, i, Dtype::kF32));
  Tensor stacked = stack_window(frames);
  CHECK(stacked.shape() == Shape{3, 2, 2, 2});
  CHECK(stacked.buf<float>()[0] == 0.0f);
  CHECK(stacked.buf<float>()[8] == 1.0f);
  CHECK(stacked.buf<float>()[16] == 2.0f);
  frames.push_back(Tensor::zeros({2, 2, 3}, Dtype::kF32));
  CHECK_THROWS_AS((void)stack_window(frames), Error);
}

TEST_CASE("pipeline construction rejects mismatched pieces") {
  Nets n = make_nets(45);
  PipelineConfig cfg = base_cfg();

  DetectorConfig wrong = tiny_det();
  wrong.input_dim = 64;
  Rng rng(1);
  DetectorNet bad_det(wrong, Dtype::kF32, rng);
  CHECK_THROWS_AS(OnlinePipeline(cfg, n.pr, n.ar, &n.f2g, bad_det), Error);

  PipelineConfig bad_tau = cfg;
  bad_tau.tau = 12;
  CHECK_THROWS_AS(OnlinePipeline(bad_tau, n.pr, n.ar, &n.f2g, n.det), Error);

  PipelineConfig bad_h = cfg;
  bad_h.horizon = 4;  // generator produces 8
  CHECK_THROWS_AS(OnlinePipeline(bad_h, n.pr, n.ar, &n.f2g, n.det), Error);

  PipelineConfig no_gen = cfg;
  CHECK_THROWS_AS(OnlinePipeline(no_gen, n.pr, n.ar, nullptr, n.det), Error);

  // AR with a different feature width cannot feed the same detector.
  C3DConfig thin = tiny_c3d(6);
  thin.feature_dim = 4;
  C3DNet thin_ar(thin, Dtype::kF32, rng);
  CHECK_THROWS_AS(OnlinePipeline(cfg, n.pr, thin_ar, &n.f2g, n.det), Error);

  PipelineConfig bad_horizon = cfg;
  bad_horizon.horizon = 16;  // must stay below tau
  CHECK_THROWS_AS(bad_horizon.validate(), Error);
}
