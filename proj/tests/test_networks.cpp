// Network construction, forward shapes, initialization, checkpoint I/O.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "streamloc/checkpoint.hpp"
#include "streamloc/networks.hpp"
#include "test_util.hpp"

using namespace streamloc;
namespace fs = std::filesystem;

namespace {

// Desk-scale configs mirroring the shipped defaults.
C3DConfig desk_c3d(int64_t out_dim) {
  C3DConfig c;
  c.in_channels = 1;
  c.height = 32;
  c.width = 32;
  c.widths = {4, 8, 16, 16, 32, 32, 32, 32};
  c.feature_dim = 128;
  c.out_dim = out_dim;
  return c;
}

F2GConfig desk_f2g() {
  F2GConfig c;
  c.in_channels = 1;
  c.height = 32;
  c.width = 32;
  c.content_widths = {12, 24};
  c.motion_widths = {12, 24};
  c.lstm_channels = 16;
  c.fuse_width = 40;
  c.decoder_widths = {24, 12};
  c.horizon = 8;
  return c;
}

DetectorConfig desk_det() {
  DetectorConfig c;
  c.input_dim = 4 * 128;
  c.lstm_width = 128;
  c.num_layers = 2;
  c.out_dim = 4;
  return c;
}

// Pool geometry: pool1 halves space only, pools 2-5 halve time and space,
// each clamped below at extent 1.
int64_t pooled_extent(int64_t d, int pools) {
  for (int i = 0; i < pools; ++i) d = std::max<int64_t>(1, d / 2);
  return d;
}

int64_t expected_c3d_params(const C3DConfig& c) {
  int64_t n = 0, cin = c.in_channels;
  for (int64_t w : c.widths) {
    n += w * cin * 27 + w;
    cin = w;
  }
  const int64_t flat = c.widths[7] * pooled_extent(16, 4) *
                       pooled_extent(c.height, 5) * pooled_extent(c.width, 5);
  n += c.feature_dim * flat + c.feature_dim;
  n += c.feature_dim * c.feature_dim + c.feature_dim;
  n += c.out_dim * c.feature_dim + c.out_dim;
  return n;
}

int64_t expected_f2g_params(const F2GConfig& c) {
  const int64_t cw0 = c.content_widths[0], cw1 = c.content_widths[1];
  const int64_t mw0 = c.motion_widths[0], mw1 = c.motion_widths[1];
  const int64_t L = c.lstm_channels, fw = c.fuse_width;
  const int64_t dw0 = c.decoder_widths[0], dw1 = c.decoder_widths[1];
  int64_t n = 0;
  n += cw0 * c.in_channels * 9 + cw0 + cw1 * cw0 * 9 + cw1;  // content
  n += mw0 * c.in_channels * 9 + mw0 + mw1 * mw0 * 9 + mw1;  // motion
  n += 4 * (L * mw1 * 9 + L * L * 9 + L);                    // convLSTM gates
  n += fw * (cw1 + L) * 9 + fw;                              // fuse
  n += fw * dw0 * 16 + dw0 + dw0 * dw1 * 16 + dw1;           // deconvs
  n += c.in_channels * dw1 * 9 + c.in_channels;              // output head
  return n;
}

int64_t expected_det_params(const DetectorConfig& c) {
  int64_t n = 0, din = c.input_dim;
  for (int64_t l = 0; l < c.num_layers; ++l) {
    n += 4 * (c.lstm_width * din + c.lstm_width * c.lstm_width + c.lstm_width);
    din = c.lstm_width;
  }
  return n + c.out_dim * c.lstm_width + c.out_dim;
}

const Parameter* find_param(const std::vector<Parameter*>& ps,
                            const std::string& name) {
  for (const Parameter* p : ps)
    if (p->name == name) return p;
  return nullptr;
}

bool all_equal(const Tensor& t, double v) {
  const float want = static_cast<float>(v);
  for (float x : t.buf<float>())
    if (x != want) return false;
  return true;
}

}  // namespace

TEST_CASE("label space encodes subclasses as 2c / 2c+1") {
  LabelSpace ls{{"a", "b", "c"}};
  CHECK(ls.k() == 3);
  CHECK(LabelSpace::kPrSize == 2);
  CHECK(ls.ar_size() == 6);
  CHECK(ls.det_size() == 4);
  CHECK(ls.det_background() == 3);
  CHECK(ls.ar_label(0, false) == 0);
  CHECK(ls.ar_label(0, true) == 1);
  CHECK(ls.ar_label(2, false) == 4);
  CHECK(ls.ar_label(2, true) == 5);
  CHECK(ls.ar_name(2) == "b.beginning");
  CHECK(ls.ar_name(5) == "c.finishing");
  CHECK_THROWS_AS((void)ls.ar_label(3, false), Error);
  CHECK_THROWS_AS((void)ls.ar_name(6), Error);
}

TEST_CASE("parameter counts match the layer arithmetic") {
  Rng rng(1);
  C3DNet pr(desk_c3d(2), Dtype::kF32, rng);
  CHECK(pr.param_count() == expected_c3d_params(desk_c3d(2)));
  CHECK(pr.param_count() == 129274);
  C3DNet ar(desk_c3d(6), Dtype::kF32, rng);
  CHECK(ar.param_count() == expected_c3d_params(desk_c3d(6)));
  F2GNet f2g(desk_f2g(), Dtype::kF32, rng);
  CHECK(f2g.param_count() == expected_f2g_params(desk_f2g()));
  CHECK(f2g.param_count() == 63129);
  DetectorNet det(desk_det(), Dtype::kF32, rng);
  CHECK(det.param_count() == expected_det_params(desk_det()));
  CHECK(det.param_count() == 460292);

  // param_count is the sum over the exposed parameter list.
  int64_t total = 0;
  for (Parameter* p : pr.parameters()) total += p->value.numel();
  CHECK(total == pr.param_count());

  // Paper-scale detector input: 4F with F = 4096.
  DetectorConfig paper = desk_det();
  paper.input_dim = 4 * 4096;
  CHECK(paper.input_dim == 16384);
  DetectorNet big(paper, Dtype::kF32, rng);
  CHECK(big.param_count() == expected_det_params(paper));
}

TEST_CASE("initialization: positive ReLU biases, open forget gates, zero heads") {
  Rng rng(3);
  C3DNet net(desk_c3d(2), Dtype::kF32, rng);
  auto ps = net.parameters();
  REQUIRE(find_param(ps, "conv1a.b") != nullptr);
  CHECK(all_equal(find_param(ps, "conv1a.b")->value, 0.01));
  CHECK(all_equal(find_param(ps, "conv5b.b")->value, 0.01));
  CHECK(all_equal(find_param(ps, "fc6.b")->value, 0.01));
  CHECK(all_equal(find_param(ps, "fc7.b")->value, 0.01));
  CHECK(all_equal(find_param(ps, "out.b")->value, 0.0));

  F2GNet f2g(desk_f2g(), Dtype::kF32, rng);
  auto fp = f2g.parameters();
  CHECK(all_equal(find_param(fp, "clstm.bf")->value, 1.0));
  CHECK(all_equal(find_param(fp, "clstm.bi")->value, 0.0));
  CHECK(all_equal(find_param(fp, "clstm.bo")->value, 0.0));
  CHECK(all_equal(find_param(fp, "content1.b")->value, 0.01));
  CHECK(all_equal(find_param(fp, "out.b")->value, 0.0));

  DetectorNet det(desk_det(), Dtype::kF32, rng);
  auto dp = det.parameters();
  const Parameter* head = find_param(dp, "out.b");
  REQUIRE(head != nullptr);
  CHECK(all_equal(head->value, 0.0));
}

TEST_CASE("C3D forward: logits and post-ReLU fc7 features") {
  Rng rng(7);
  C3DNet net(desk_c3d(6), Dtype::kF32, rng);
  Tensor x = Tensor::uniform({2, 1, 16, 32, 32}, 0.0, 1.0, rng, Dtype::kF32);
  C3DNet::Out out = net.forward(x, Mode::kEval);
  CHECK(out.logits.shape() == Shape{2, 6});
  CHECK(out.fc7.shape() == Shape{2, 128});
  for (float v : out.fc7.buf<float>()) CHECK(v >= 0.0f);

  // Eval mode is deterministic; train mode applies a random dropout mask.
  C3DNet::Out again = net.forward(x, Mode::kEval);
  CHECK(test::bytes_equal(out.logits, again.logits));
  Rng d1(11), d2(11), d3(12);
  C3DNet::Out t1 = net.forward(x, Mode::kTrain, &d1);
  C3DNet::Out t2 = net.forward(x, Mode::kTrain, &d2);
  C3DNet::Out t3 = net.forward(x, Mode::kTrain, &d3);
  CHECK(test::bytes_equal(t1.logits, t2.logits));
  CHECK(!test::bytes_equal(t1.logits, t3.logits));
  CHECK_THROWS_AS((void)net.forward(x, Mode::kTrain), Error);  // needs an rng

  // Wrong geometry is rejected.
  Tensor bad_t = Tensor::zeros({1, 1, 8, 32, 32}, Dtype::kF32);
  CHECK_THROWS_AS((void)net.forward(bad_t, Mode::kEval), Error);
  Tensor bad_hw = Tensor::zeros({1, 1, 16, 16, 16}, Dtype::kF32);
  CHECK_THROWS_AS((void)net.forward(bad_hw, Mode::kEval), Error);
  CHECK_THROWS_AS(C3DNet(C3DConfig{.widths = {4, 8}}, Dtype::kF32, rng), Error);
}

TEST_CASE("F2G generates a sigmoid-bounded horizon from a 16-frame context") {
  Rng rng(9);
  F2GNet net(desk_f2g(), Dtype::kF32, rng);
  Tensor ctx = Tensor::uniform({16, 1, 32, 32}, 0.0, 1.0, rng, Dtype::kF32);
  Tensor fut = net.generate(ctx);
  CHECK(fut.shape() == Shape{8, 1, 32, 32});
  for (float v : fut.buf<float>()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
  CHECK(test::bytes_equal(fut, net.generate(ctx)));

  // Training loss: finite scalar with a gradient path into every group.
  Tensor targets = Tensor::uniform({8, 1, 32, 32}, 0.0, 1.0, rng, Dtype::kF32);
  Tensor loss = net.train_loss(ctx, targets, 1.0);
  CHECK(loss.numel() == 1);
  const double lv = static_cast<double>(loss.buf<float>()[0]);
  CHECK(std::isfinite(lv));
  CHECK(lv > 0.0);

  CHECK_THROWS_AS((void)net.generate(Tensor::zeros({4, 1, 32, 32}, Dtype::kF32)),
                  Error);
  F2GConfig bad = desk_f2g();
  bad.height = 30;  // not divisible by 4
  CHECK_THROWS_AS(F2GNet(bad, Dtype::kF32, rng), Error);
}

TEST_CASE("detector LSTM carries explicit recurrent state") {
  Rng rng(5);
  DetectorNet net(desk_det(), Dtype::kF32, rng);
  DetectorNet::State s0 = net.initial_state(1);
  REQUIRE(s0.layers.size() == 2);
  CHECK(s0.layers[0].h.shape() == Shape{1, 128});
  CHECK(all_equal(s0.layers[0].h, 0.0));
  CHECK(all_equal(s0.layers[1].c, 0.0));

  Tensor f = Tensor::uniform({1, 512}, -1.0, 1.0, rng, Dtype::kF32);
  DetectorNet::Out o1 = net.forward(f, s0, Mode::kEval);
  CHECK(o1.logits.shape() == Shape{1, 4});
  CHECK(!all_equal(o1.state.layers[0].h, 0.0));

  // Same input from the same state is deterministic; state advances output.
  DetectorNet::Out o1b = net.forward(f, s0, Mode::kEval);
  CHECK(test::bytes_equal(o1.logits, o1b.logits));
  DetectorNet::Out o2 = net.forward(f, o1.state, Mode::kEval);
  CHECK(!test::bytes_equal(o1.logits, o2.logits));

  Tensor bad = Tensor::zeros({1, 100}, Dtype::kF32);
  CHECK_THROWS_AS((void)net.forward(bad, s0, Mode::kEval), Error);
}

TEST_CASE("checkpoints round-trip bit-exactly and reject mismatches") {
  const std::string dir = test::scratch_dir("networks-ckpt");
  const std::string path = dir + "/pr.ckpt";
  Rng rng(21);
  C3DConfig cfg = desk_c3d(2);
  C3DNet net(cfg, Dtype::kF32, rng);
  auto params = net.parameters();

  const std::string hash0 = checkpoint_params_hash(params);
  CHECK(hash0.size() == 64);
  CHECK(hash0.find_first_not_of("0123456789abcdef") == std::string::npos);
  save_checkpoint(path, cfg.str(), params);

  // Mutate every parameter, then restore.
  std::vector<Tensor> originals;
  for (Parameter* p : params) {
    originals.push_back(p->value.clone());
    auto b = p->value.buf<float>();
    for (float& v : b) v += 1.25f;
  }
  CHECK(checkpoint_params_hash(params) != hash0);
  load_checkpoint(path, cfg.str(), params);
  for (size_t i = 0; i < params.size(); ++i)
    CHECK(test::bytes_equal(params[i]->value, originals[i]));
  CHECK(checkpoint_params_hash(params) == hash0);

  // A different config string must not load, and must leave values alone.
  C3DConfig other = cfg;
  other.out_dim = 6;
  CHECK_THROWS_AS(load_checkpoint(path, other.str(), params), Error);
  CHECK(checkpoint_params_hash(params) == hash0);

  // Truncated files and foreign magic are rejected.
  const auto full_size = fs::file_size(path);
  fs::copy_file(path, dir + "/trunc.ckpt");
  fs::resize_file(dir + "/trunc.ckpt", full_size - 7);
  CHECK_THROWS_AS(load_checkpoint(dir + "/trunc.ckpt", cfg.str(), params), Error);
  CHECK(checkpoint_params_hash(params) == hash0);
  {
    std::ofstream os(dir + "/bad.ckpt", std::ios::binary);
    os << "JUNKJUNKJUNK";
  }
  CHECK_THROWS_AS(load_checkpoint(dir + "/bad.ckpt", cfg.str(), params), Error);

  // Checkpoint magic.
  std::ifstream is(path, std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  CHECK(std::string(magic, 4) == "SLCK");

  // Saving twice produces byte-identical files.
  save_checkpoint(dir + "/again.ckpt", cfg.str(), params);
  std::ifstream f1(path, std::ios::binary), f2(dir + "/again.ckpt", std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), {});
  std::string c2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(!c1.empty());
  CHECK(c1 == c2);

  // A parameter list with a renamed entry cannot consume the file.
  std::string saved_name = params[0]->name;
  params[0]->name = "imposter";
  CHECK_THROWS_AS(load_checkpoint(path, cfg.str(), params), Error);
  params[0]->name = saved_name;
}

TEST_CASE("canonical config strings distinguish shapes") {
  C3DConfig a = desk_c3d(2), b = desk_c3d(6);
  CHECK(a.str() != b.str());
  CHECK(a.str() == desk_c3d(2).str());
  F2GConfig f = desk_f2g(), g = desk_f2g();
  g.lstm_channels = 32;
  CHECK(f.str() != g.str());
  DetectorConfig d1 = desk_det(), d2 = desk_det();
  d2.num_layers = 1;
  CHECK(d1.str() != d2.str());
}
