// Temporal augmentation: frame interpolation, speed-up, slow-down.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "streamloc/augment.hpp"
#include "streamloc/data.hpp"
#include "test_util.hpp"

using namespace streamloc;

namespace {

// A [1,H,W] frame with the given pixels set to 1 on a zero background.
Tensor dot_frame(int64_t h, int64_t w,
                 std::vector<std::pair<int64_t, int64_t>> dots) {
  Tensor f = Tensor::zeros({1, h, w}, Dtype::kF32);
  auto b = f.buf<float>();
  for (auto [y, x] : dots) b[static_cast<size_t>(y * w + x)] = 1.0f;
  return f;
}

float px(const Tensor& f, int64_t y, int64_t x) {
  return f.buf<float>()[static_cast<size_t>(y * f.dim(2) + x)];
}

// Frame t of a [T,C,H,W] stack as a span of floats.
std::vector<float> frame_at(const Tensor& frames, int64_t t) {
  const int64_t chw = frames.numel() / frames.dim(0);
  auto b = frames.buf<float>();
  return std::vector<float>(b.begin() + t * chw, b.begin() + (t + 1) * chw);
}

AnnotatedStream ramp_stream(int64_t t, int64_t h, int64_t w) {
  AnnotatedStream s;
  s.id = "ramp";
  s.frames = Tensor::zeros({t, 1, h, w}, Dtype::kF32);
  auto b = s.frames.buf<float>();
  for (size_t i = 0; i < b.size(); ++i)
    b[i] = static_cast<float>(i % 977) / 977.0f;
  return s;
}

}  // namespace

TEST_CASE("interpolation endpoints are bit-exact copies for both kernels") {
  Rng rng(11);
  Tensor a = Tensor::uniform({1, 16, 16}, 0.0, 1.0, rng, Dtype::kF32);
  Tensor b = Tensor::uniform({1, 16, 16}, 0.0, 1.0, rng, Dtype::kF32);
  for (InterpKernel k : {InterpKernel::kBlend, InterpKernel::kFlow}) {
    CHECK(test::bytes_equal(interpolate_pair(a, b, 0.0, k), a));
    CHECK(test::bytes_equal(interpolate_pair(a, b, 1.0, k), b));
  }
}

TEST_CASE("blend kernel is a plain cross-fade") {
  Tensor a = dot_frame(8, 8, {{4, 2}});
  Tensor b = dot_frame(8, 8, {{4, 6}});
  Tensor mid = interpolate_pair(a, b, 0.5, InterpKernel::kBlend);
  // Ghosting: two half-intensity copies.
  CHECK(px(mid, 4, 2) == 0.5f);
  CHECK(px(mid, 4, 6) == 0.5f);
  CHECK(px(mid, 4, 4) == 0.0f);
  Tensor q = interpolate_pair(a, b, 0.25, InterpKernel::kBlend);
  CHECK(px(q, 4, 2) == 0.75f);
  CHECK(px(q, 4, 6) == 0.25f);
}

TEST_CASE("flow kernel moves translating content to the midpoint") {
  // One bright pixel moving 4 px right inside a single 8x8 motion block. The
  // unique zero-SAD displacement is (0, +4), so the half-way interpolation
  // must place the full-intensity pixel at the midpoint instead of ghosting.
  Tensor a = dot_frame(8, 8, {{4, 2}});
  Tensor b = dot_frame(8, 8, {{4, 6}});
  Tensor mid = interpolate_pair(a, b, 0.5, InterpKernel::kFlow);
  CHECK(px(mid, 4, 4) == 1.0f);
  CHECK(px(mid, 4, 2) == 0.0f);
  CHECK(px(mid, 4, 6) == 0.0f);
  double total = 0.0;
  for (float v : mid.buf<float>()) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("interpolation rejects bad arguments") {
  Tensor a = Tensor::zeros({1, 8, 8}, Dtype::kF32);
  Tensor b = Tensor::zeros({1, 8, 9}, Dtype::kF32);
  CHECK_THROWS_AS((void)interpolate_pair(a, b, 0.5, InterpKernel::kBlend), Error);
  CHECK_THROWS_AS((void)interpolate_pair(a, a, 1.5, InterpKernel::kBlend), Error);
  CHECK_THROWS_AS((void)interpolate_pair(a, a, -0.1, InterpKernel::kFlow), Error);
  Tensor r4 = Tensor::zeros({1, 1, 8, 8}, Dtype::kF32);
  CHECK_THROWS_AS((void)interpolate_pair(r4, r4, 0.5, InterpKernel::kBlend), Error);
}

TEST_CASE("speed-up keeps every factor-th frame and remaps intervals") {
  AnnotatedStream s = ramp_stream(60, 8, 8);
  s.intervals = {{20, 60, 1, 30}};
  SpeedUpResult r = speed_up(s, 2);
  CHECK(r.dropped_intervals == 0);
  CHECK(r.stream.id == "ramp-sp2");
  CHECK(r.stream.length() == 30);
  for (int64_t j = 0; j < 30; ++j)
    CHECK(frame_at(r.stream.frames, j) == frame_at(s.frames, 2 * j));
  REQUIRE(r.stream.intervals.size() == 1);
  CHECK(r.stream.intervals[0].start == 10);
  CHECK(r.stream.intervals[0].end == 30);
  CHECK(r.stream.intervals[0].class_id == 1);
  CHECK(r.stream.intervals[0].phase_switch == 15);

  // ceil remap: [5, 9) at factor 4 -> [2, 3), too short to keep a switch.
  s.intervals = {{5, 9, 0, 7}};
  SpeedUpResult r4 = speed_up(s, 4);
  REQUIRE(r4.stream.intervals.size() == 1);
  CHECK(r4.stream.intervals[0].start == 2);
  CHECK(r4.stream.intervals[0].end == 3);
  CHECK(r4.stream.intervals[0].phase_switch == -1);
  CHECK(r4.stream.length() == 15);

  // Degenerate intervals are dropped and counted.
  s.intervals = {{3, 4, 0, -1}, {20, 40, 1, -1}};
  SpeedUpResult rd = speed_up(s, 4);
  CHECK(rd.dropped_intervals == 1);
  REQUIRE(rd.stream.intervals.size() == 1);
  CHECK(rd.stream.intervals[0].start == 5);
  CHECK(rd.stream.intervals[0].end == 10);

  CHECK_THROWS_AS((void)speed_up(s, 0), Error);
}

TEST_CASE("slow-down doubles the frame rate around bit-exact originals") {
  AnnotatedStream s = ramp_stream(5, 16, 16);
  s.intervals = {{2, 4, 2, 3}, {4, 5, 0, -1}};
  for (InterpKernel k : {InterpKernel::kBlend, InterpKernel::kFlow}) {
    AnnotatedStream out = slow_down(s, k);
    CHECK(out.id == "ramp-sl2");
    CHECK(out.length() == 9);  // 2T - 1
    for (int64_t i = 0; i < 5; ++i)
      CHECK(frame_at(out.frames, 2 * i) == frame_at(s.frames, i));
    // Odd frames equal the pairwise interpolation at alpha = 0.5.
    for (int64_t i = 0; i + 1 < 5; ++i) {
      Tensor fa = Tensor::zeros({1, 16, 16}, Dtype::kF32);
      Tensor fb = Tensor::zeros({1, 16, 16}, Dtype::kF32);
      auto va = frame_at(s.frames, i);
      auto vb = frame_at(s.frames, i + 1);
      std::copy(va.begin(), va.end(), fa.buf<float>().begin());
      std::copy(vb.begin(), vb.end(), fb.buf<float>().begin());
      Tensor want = interpolate_pair(fa, fb, 0.5, k);
      auto wb = want.buf<float>();
      CHECK(frame_at(out.frames, 2 * i + 1) ==
            std::vector<float>(wb.begin(), wb.end()));
    }
    REQUIRE(out.intervals.size() == 2);
    CHECK(out.intervals[0].start == 4);
    CHECK(out.intervals[0].end == 8);
    CHECK(out.intervals[0].phase_switch == 6);
    CHECK(out.intervals[1].start == 8);
    CHECK(out.intervals[1].end == 9);  // clipped to the last frame
    CHECK(out.intervals[1].phase_switch == -1);
  }
}

TEST_CASE("the dataset recipe appends sped-up and slowed-down variants") {
  StreamSpec spec;
  spec.num_instances = 2;
  spec.duration_min = 16;
  spec.duration_max = 24;
  spec.gap_min = 8;
  spec.gap_max = 12;
  spec.height = 16;
  spec.width = 16;
  Dataset ds;
  ds.class_names = default_class_names();
  for (uint64_t i = 0; i < 2; ++i) {
    spec.seed = 900 + i;
    spec.id = "v" + std::to_string(i);
    ds.streams.push_back(generate_stream(spec));
  }

  int dropped = -1;
  Dataset aug = augment_dataset(ds, &dropped);
  CHECK(dropped == 0);
  REQUIRE(aug.streams.size() == 6);
  CHECK(aug.class_names == ds.class_names);
  // Originals first, then the two variants of each stream.
  CHECK(aug.streams[0].id == "v0");
  CHECK(aug.streams[1].id == "v1");
  CHECK(aug.streams[2].id == "v0-sp2");
  CHECK(aug.streams[3].id == "v0-sl2");
  CHECK(aug.streams[4].id == "v1-sp2");
  CHECK(aug.streams[5].id == "v1-sl2");
  CHECK(test::bytes_equal(aug.streams[0].frames, ds.streams[0].frames));
  CHECK(aug.streams[2].length() == (ds.streams[0].length() + 1) / 2);
  CHECK(aug.streams[3].length() == 2 * ds.streams[0].length() - 1);
  CHECK(aug.streams[0].provenance.empty());
  CHECK(!aug.streams[2].provenance.empty());
  CHECK(!aug.streams[3].provenance.empty());

  // The recipe is deterministic.
  Dataset again = augment_dataset(ds);
  for (size_t i = 0; i < 6; ++i)
    CHECK(test::bytes_equal(again.streams[i].frames, aug.streams[i].frames));
}
