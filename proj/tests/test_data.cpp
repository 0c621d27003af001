// Synthetic corpus generation, window labels, and dataset container I/O.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "streamloc/data.hpp"
#include "streamloc/tensor.hpp"
#include "streamloc/trainer.hpp"
#include "test_util.hpp"

using namespace streamloc;
namespace fs = std::filesystem;

namespace {

AnnotatedStream make_stream(int64_t length,
                            std::vector<Interval> intervals) {
  AnnotatedStream s;
  s.id = "hand";
  s.frames = Tensor::zeros({length, 1, 8, 8}, Dtype::kF32);
  s.intervals = std::move(intervals);
  return s;
}

}  // namespace

TEST_CASE("generated streams are deterministic and within spec bounds") {
  StreamSpec spec;
  spec.num_instances = 3;
  spec.num_classes = 3;
  spec.height = 32;
  spec.width = 32;
  spec.duration_min = 20;
  spec.duration_max = 40;
  spec.gap_min = 8;
  spec.gap_max = 16;
  spec.seed = 77;
  spec.id = "s";

  AnnotatedStream a = generate_stream(spec);
  AnnotatedStream b = generate_stream(spec);
  CHECK(test::bytes_equal(a.frames, b.frames));
  REQUIRE(a.intervals.size() == 3);

  int64_t prev_end = -1;
  for (const Interval& iv : a.intervals) {
    CHECK(iv.length() >= spec.duration_min);
    CHECK(iv.length() <= spec.duration_max);
    CHECK(iv.start > prev_end);  // separated by at least one gap frame
    CHECK(iv.start - (prev_end < 0 ? 0 : prev_end) >= spec.gap_min);
    CHECK(iv.class_id >= 0);
    CHECK(iv.class_id < 3);
    CHECK(iv.switch_frame() > iv.start);
    CHECK(iv.switch_frame() < iv.end);
    prev_end = iv.end;
  }
  CHECK(a.length() >= prev_end + spec.gap_min);

  // Pixels stay in [0, 1].
  auto px = a.frames.buf<float>();
  for (float v : px) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  // A different seed changes the content.
  spec.seed = 78;
  AnnotatedStream c = generate_stream(spec);
  CHECK(!test::bytes_equal(a.frames, c.frames));
}

TEST_CASE("the three default classes carry distinct motion programs") {
  CHECK(default_class_names().size() == 3);
  StreamSpec spec;
  spec.num_instances = 2;
  spec.seed = 5;
  AnnotatedStream s = generate_stream(spec);
  // Consecutive frames differ inside an action (there is motion).
  const Interval& iv = s.intervals.front();
  auto frame_diff = [&](int64_t t) {
    double d = 0.0;
    auto b = s.frames.buf<float>();
    const int64_t chw = s.frames.numel() / s.length();
    for (int64_t i = 0; i < chw; ++i)
      d += std::abs(static_cast<double>(b[t * chw + i]) -
                    static_cast<double>(b[(t + 1) * chw + i]));
    return d;
  };
  CHECK(frame_diff(iv.start + iv.length() / 2) > 0.0);
}

TEST_CASE("infeasible fixed-length specs are rejected") {
  StreamSpec spec;
  spec.num_instances = 10;
  spec.duration_min = 50;
  spec.duration_max = 50;
  spec.gap_min = 20;
  spec.gap_max = 20;
  spec.length = 100;  // cannot hold 10 * 50 + gaps
  CHECK_THROWS_AS((void)generate_stream(spec), Error);
}

TEST_CASE("PR window label: action iff at least half the frames are covered") {
  // One interval [10, 20) on a 40-frame stream, tau = 16.
  AnnotatedStream s = make_stream(40, {{10, 20, 1, -1}});
  // Window [0,16) overlaps 6 frames -> background.
  CHECK(derive_pr_labels(s, 0, 16) == kPrBackground);
  // Window [4,20) overlaps 10 frames -> action (10 >= 8).
  CHECK(derive_pr_labels(s, 4, 16) == kPrAction);
  // Window [12,28) overlaps 8 frames -> action (exactly half).
  CHECK(derive_pr_labels(s, 12, 16) == kPrAction);
  // Window [13,29) overlaps 7 frames -> background.
  CHECK(derive_pr_labels(s, 13, 16) == kPrBackground);
  // Out-of-range windows are an error.
  CHECK_THROWS_AS((void)derive_pr_labels(s, 30, 16), Error);
  CHECK_THROWS_AS((void)derive_pr_labels(s, -1, 16), Error);
}

TEST_CASE("AR subclass: 2c before the phase switch, 2c+1 after") {
  // Interval [0, 32) of class 2 with the switch at frame 16.
  AnnotatedStream s = make_stream(48, {{0, 32, 2, 16}});
  // Window [0,16): center 8 < 16 -> beginning subclass 4.
  CHECK(derive_ar_labels(s, 0, 16) == 4);
  // Window [12,28): center 20 >= 16 -> finishing subclass 5.
  CHECK(derive_ar_labels(s, 12, 16) == 5);
  // Background window is a labeling error.
  CHECK_THROWS_AS((void)derive_ar_labels(s, 32, 16), Error);

  // Without an explicit switch the midpoint of the interval is used.
  AnnotatedStream m = make_stream(48, {{0, 32, 0, -1}});
  CHECK(m.intervals[0].switch_frame() == 16);
  CHECK(derive_ar_labels(m, 0, 16) == 0);
  CHECK(derive_ar_labels(m, 12, 16) == 1);
}

TEST_CASE("detection label: class id for action windows, K for background") {
  AnnotatedStream s = make_stream(64, {{8, 40, 1, 24}});
  CHECK(derive_det_labels(s, 12, 3, 16) == 1);
  CHECK(derive_det_labels(s, 44, 3, 16) == 3);  // background id == K
  AnnotatedStream bad = make_stream(64, {{8, 40, 7, -1}});
  CHECK_THROWS_AS((void)derive_det_labels(bad, 12, 3, 16), Error);
}

TEST_CASE("window enumeration: 300 frames at stride 16 give 18 PR windows") {
  Dataset ds;
  ds.class_names = default_class_names();
  ds.streams.push_back(make_stream(300, {{50, 100, 0, -1}}));
  auto wins = enumerate_windows(ds, 16, 16, LabelKind::kPr);
  CHECK(wins.size() == 18);  // floor((300 - 16) / 16) + 1
  auto det = enumerate_windows(ds, 16, 16, LabelKind::kDet);
  CHECK(det.size() == 18);
  // AR keeps only action windows.
  auto ar = enumerate_windows(ds, 16, 16, LabelKind::kAr);
  CHECK(ar.size() > 0);
  CHECK(ar.size() < 18);
  for (const WindowRef& w : ar)
    CHECK(derive_pr_labels(ds.streams[0], w.start, 16) == kPrAction);
}

TEST_CASE("SLVD frames container round-trips bit-exactly") {
  const std::string dir = test::scratch_dir("data-slvd");
  Rng rng(3);
  Tensor frames = Tensor::uniform({7, 1, 6, 5}, 0.0, 1.0, rng, Dtype::kF32);
  const std::string path = dir + "/x.slvd";
  write_frames_file(frames, path);

  // Magic bytes first.
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "SLVD");
  in.close();

  Tensor back = read_frames_file(path);
  CHECK(test::bytes_equal(frames, back));

  // Truncation is detected.
  fs::resize_file(path, fs::file_size(path) - 13);
  CHECK_THROWS_AS((void)read_frames_file(path), Error);
  // Wrong magic is detected.
  {
    std::ofstream out(dir + "/bad.slvd", std::ios::binary);
    out.write("NOPE", 4);
  }
  CHECK_THROWS_AS((void)read_frames_file(dir + "/bad.slvd"), Error);
}

TEST_CASE("dataset directory round-trips annotations and frames") {
  const std::string dir = test::scratch_dir("data-ds");
  StreamSpec spec;
  spec.num_instances = 2;
  spec.duration_min = 20;
  spec.duration_max = 30;
  Dataset ds;
  ds.class_names = default_class_names();
  for (uint64_t i = 0; i < 3; ++i) {
    spec.seed = 100 + i;
    spec.id = "s-" + std::to_string(i);
    ds.streams.push_back(generate_stream(spec));
  }
  ds.streams[1].intervals[0].phase_switch = -1;  // exercise both encodings

  write_dataset(ds, dir);
  CHECK(fs::exists(dir + "/annotations.json"));
  Dataset back = read_dataset(dir);
  REQUIRE(back.streams.size() == 3);
  CHECK(back.class_names == ds.class_names);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back.streams[i].id == ds.streams[i].id);
    CHECK(test::bytes_equal(back.streams[i].frames, ds.streams[i].frames));
    REQUIRE(back.streams[i].intervals.size() == ds.streams[i].intervals.size());
    for (size_t j = 0; j < ds.streams[i].intervals.size(); ++j) {
      CHECK(back.streams[i].intervals[j].start == ds.streams[i].intervals[j].start);
      CHECK(back.streams[i].intervals[j].end == ds.streams[i].intervals[j].end);
      CHECK(back.streams[i].intervals[j].class_id == ds.streams[i].intervals[j].class_id);
      CHECK(back.streams[i].intervals[j].phase_switch == ds.streams[i].intervals[j].phase_switch);
    }
  }

  // Writing again produces byte-identical files.
  const std::string dir2 = test::scratch_dir("data-ds2");
  write_dataset(ds, dir2);
  int files_compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const fs::path other = fs::path(dir2) / fs::relative(e.path(), dir);
    REQUIRE(fs::exists(other));
    std::ifstream f1(e.path(), std::ios::binary), f2(other, std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), {});
    std::string c2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(c1 == c2);
    ++files_compared;
  }
  CHECK(files_compared == 4);  // annotations.json + three frames files

  // A missing frames file referenced by the annotations is a data error.
  fs::remove(fs::path(dir) / "frames" / "s-0.slvd");
  CHECK_THROWS_AS((void)read_dataset(dir), Error);
}

TEST_CASE("corpus split synthesizes per-stream variation") {
  CorpusConfig cfg;
  cfg.min_instances = 2;
  cfg.max_instances = 5;
  cfg.proto.num_classes = 3;
  cfg.proto.duration_min = 20;
  cfg.proto.duration_max = 30;
  Dataset ds = make_corpus_split(cfg, 8, 42, "tr");
  REQUIRE(ds.streams.size() == 8);
  CHECK(ds.class_names.size() == 3);
  std::set<std::string> ids;
  std::set<int64_t> lengths;
  for (const auto& s : ds.streams) {
    ids.insert(s.id);
    lengths.insert(s.length());
    CHECK(s.intervals.size() >= 2);
    CHECK(s.intervals.size() <= 5);
  }
  CHECK(ids.size() == 8);
  CHECK(lengths.size() > 2);  // streams genuinely differ
  Dataset again = make_corpus_split(cfg, 8, 42, "tr");
  CHECK(test::bytes_equal(again.streams[3].frames, ds.streams[3].frames));
  Dataset other = make_corpus_split(cfg, 8, 43, "tr");
  CHECK(!test::bytes_equal(other.streams[3].frames, ds.streams[3].frames));
}

TEST_CASE("THUMOS-style annotations map seconds to frame intervals") {
  const std::string dir = test::scratch_dir("data-thumos");
  const std::string path = dir + "/video_val_01.txt";
  {
    std::ofstream out(path);
    out << "jump 1.0 2.5\n";
    out << "run 10.0 12.0\n";
  }
  auto ivs = read_thumos_annotations(path, 4.0, {"run", "jump"});
  REQUIRE(ivs.size() == 2);
  CHECK(ivs[0].class_id == 1);
  CHECK(ivs[0].start == 4);
  CHECK(ivs[0].end == 10);
  CHECK(ivs[1].class_id == 0);
  CHECK(ivs[1].start == 40);
  CHECK(ivs[1].end == 48);
  {
    std::ofstream out(path);
    out << "fly 0.0 1.0\n";
  }
  CHECK_THROWS_AS((void)read_thumos_annotations(path, 4.0, {"run"}), Error);
}
