// Tensor basics, elementwise/loss ops against hand-computed values, dropout
// statistics, and optimizer update rules against hand-stepped references.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "streamloc/ops.hpp"
#include "streamloc/optim.hpp"
#include "streamloc/rng.hpp"
#include "streamloc/tensor.hpp"
#include "test_util.hpp"

using namespace streamloc;

TEST_CASE("tensor constructors and shape accessors") {
  Tensor z = Tensor::zeros({2, 3}, Dtype::kF32);
  CHECK(z.numel() == 6);
  CHECK(z.rank() == 2);
  CHECK(z.dim(1) == 3);
  for (float v : z.buf<float>()) CHECK(v == 0.0f);

  Tensor f = Tensor::full({4}, 2.5, Dtype::kF64);
  for (double v : f.buf<double>()) CHECK(v == 2.5);

  Tensor v = Tensor::from_values({2, 2}, std::vector<double>{1, 2, 3, 4},
                                 Dtype::kF64);
  CHECK(v.buf<double>()[3] == 4.0);

  Tensor r = ops::reshape(v, {4});
  CHECK(r.shape() == Shape{4});
  CHECK(r.buf<double>()[2] == 3.0);

  CHECK_THROWS_AS((void)ops::reshape(v, {5}), Error);
}

TEST_CASE("elementwise ops match hand values") {
  Tensor x = Tensor::from_values({5}, std::vector<double>{-2, -0.5, 0, 0.5, 2},
                                 Dtype::kF64);
  {
    Tensor y = ops::relu(x);
    std::vector<double> want{0, 0, 0, 0.5, 2};
    for (int64_t i = 0; i < 5; ++i) CHECK(y.buf<double>()[i] == want[i]);
  }
  {
    Tensor y = ops::sigmoid(x);
    CHECK(y.buf<double>()[2] == doctest::Approx(0.5));
    CHECK(y.buf<double>()[4] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
  }
  {
    Tensor y = ops::tanh(x);
    CHECK(y.buf<double>()[2] == 0.0);
    CHECK(y.buf<double>()[0] == doctest::Approx(std::tanh(-2.0)));
  }
  {
    Tensor b = Tensor::full({5}, 3.0, Dtype::kF64);
    Tensor s = ops::add(x, b);
    CHECK(s.buf<double>()[0] == 1.0);
    Tensor d = ops::sub(x, b);
    CHECK(d.buf<double>()[4] == -1.0);
    Tensor m = ops::mul(x, b);
    CHECK(m.buf<double>()[1] == -1.5);
    Tensor sc = ops::scale(x, -2.0);
    CHECK(sc.buf<double>()[0] == 4.0);
  }
  CHECK(ops::sum(x).buf<double>()[0] == doctest::Approx(0.0));
  CHECK(ops::mean(x).buf<double>()[0] == doctest::Approx(0.0));
}

TEST_CASE("bias_add broadcasts over trailing axes") {
  Tensor x = Tensor::zeros({1, 2, 2, 2}, Dtype::kF64);
  Tensor b = Tensor::from_values({2}, std::vector<double>{1.0, -1.0},
                                 Dtype::kF64);
  Tensor y = ops::bias_add(x, b);
  auto ys = y.buf<double>();
  for (int64_t i = 0; i < 4; ++i) CHECK(ys[i] == 1.0);
  for (int64_t i = 4; i < 8; ++i) CHECK(ys[i] == -1.0);
}

TEST_CASE("dense multiplies [N,Din] by [Dout,Din] transposed") {
  Tensor x = Tensor::from_values({1, 3}, std::vector<double>{1, 2, 3},
                                 Dtype::kF64);
  Tensor w = Tensor::from_values({2, 3},
                                 std::vector<double>{1, 0, 0, 0, 1, 1},
                                 Dtype::kF64);
  Tensor b = Tensor::from_values({2}, std::vector<double>{10, 20}, Dtype::kF64);
  Tensor y = ops::dense(x, w, b);
  REQUIRE(y.shape() == Shape{1, 2});
  CHECK(y.buf<double>()[0] == 11.0);
  CHECK(y.buf<double>()[1] == 25.0);
}

TEST_CASE("concat_channels is order-sensitive and layout-exact") {
  Tensor a = Tensor::full({1, 2, 1, 1}, 1.0, Dtype::kF64);
  Tensor b = Tensor::full({1, 1, 1, 1}, 2.0, Dtype::kF64);
  Tensor ab = ops::concat_channels({a, b});
  Tensor ba = ops::concat_channels({b, a});
  REQUIRE(ab.shape() == Shape{1, 3, 1, 1});
  CHECK(ab.buf<double>()[0] == 1.0);
  CHECK(ab.buf<double>()[2] == 2.0);
  CHECK(ba.buf<double>()[0] == 2.0);
  CHECK(ba.buf<double>()[2] == 1.0);
}

TEST_CASE("softmax rows are simplex points; uniform logits give 1/K") {
  Rng rng(3);
  Tensor logits = Tensor::randn({4, 7}, 2.0, rng, Dtype::kF64);
  Tensor p = ops::softmax(logits);
  for (int64_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int64_t k = 0; k < 7; ++k) {
      const double v = p.buf<double>()[r * 7 + k];
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor flat = Tensor::zeros({1, 5}, Dtype::kF64);
  Tensor q = ops::softmax(flat);
  for (int64_t k = 0; k < 5; ++k)
    CHECK(q.buf<double>()[k] == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("cross-entropy of uniform logits equals ln K") {
  for (int64_t k : {2, 3, 5, 41, 201}) {
    Tensor logits = Tensor::zeros({1, k}, Dtype::kF64);
    Tensor onehot = Tensor::zeros({1, k}, Dtype::kF64);
    onehot.buf<double>()[static_cast<size_t>(k / 2)] = 1.0;
    Tensor loss = ops::softmax_cross_entropy(logits, onehot);
    CHECK(loss.buf<double>()[0] ==
          doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-12));
  }
}

TEST_CASE("weighted cross-entropy matches the hand-computed value") {
  // Rows: [1,0] target 0 and [0,1] target 1; both have p(target) = sigmoid(1).
  Tensor logits = Tensor::from_values({2, 2}, std::vector<double>{1, 0, 0, 1},
                                      Dtype::kF64);
  Tensor onehot = Tensor::from_values({2, 2}, std::vector<double>{1, 0, 0, 1},
                                      Dtype::kF64);
  Tensor w = Tensor::from_values({2}, std::vector<double>{1.0, 2.0},
                                 Dtype::kF64);
  const double nll = -std::log(1.0 / (1.0 + std::exp(-1.0)));
  Tensor plain = ops::softmax_cross_entropy(logits, onehot);
  CHECK(plain.buf<double>()[0] == doctest::Approx(nll).epsilon(1e-12));
  Tensor weighted = ops::softmax_cross_entropy(logits, onehot, w);
  CHECK(weighted.buf<double>()[0] ==
        doctest::Approx((1.0 * nll + 2.0 * nll) / 2.0).epsilon(1e-12));
}

TEST_CASE("cross-entropy rejects rows that are not one-hot") {
  Tensor logits = Tensor::zeros({1, 3}, Dtype::kF64);
  Tensor bad = Tensor::from_values({1, 3}, std::vector<double>{0.5, 0.5, 0},
                                   Dtype::kF64);
  CHECK_THROWS_AS((void)ops::softmax_cross_entropy(logits, bad), Error);
}

TEST_CASE("image_loss: zero at equality, pure L2 under constant shift") {
  Rng rng(5);
  Tensor t = Tensor::uniform({2, 1, 4, 4}, 0.0, 1.0, rng, Dtype::kF64);
  CHECK(ops::image_loss(t, t, 1.0).buf<double>()[0] == 0.0);
  // A constant shift leaves neighbour gradients unchanged: GDL term is zero,
  // and the L2 term is (pixels * c^2) / batch.
  Tensor shifted = ops::add(t, Tensor::full({2, 1, 4, 4}, 0.25, Dtype::kF64));
  const double want = 32.0 * 0.25 * 0.25 / 2.0;
  CHECK(ops::image_loss(shifted, t, 7.0).buf<double>()[0] ==
        doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("dropout: eval identity, train mask statistics and rescale") {
  Rng rng(11);
  Tensor x = Tensor::full({100000}, 1.0, Dtype::kF32);
  Tensor ev = ops::dropout(x, 0.5, Mode::kEval, rng);
  CHECK(test::bytes_equal(ev, x));

  Tensor tr = ops::dropout(x, 0.5, Mode::kTrain, rng);
  int64_t kept = 0;
  for (float v : tr.buf<float>()) {
    if (v != 0.0f) {
      CHECK(v == 2.0f);  // inverted dropout rescales by 1/(1-p)
      ++kept;
    }
  }
  const double frac = static_cast<double>(kept) / 100000.0;
  CHECK(frac > 0.49);
  CHECK(frac < 0.51);

  CHECK_THROWS_AS((void)ops::dropout(x, 1.0, Mode::kTrain, rng), Error);
}

TEST_CASE("sgd_step matches a hand-stepped reference") {
  // v' = mu v - lr (g + wd theta); theta' = theta + v'.
  Parameter p;
  p.name = "w";
  p.value = Tensor::from_values({1}, std::vector<double>{1.0}, Dtype::kF64);
  p.value.impl_->requires_grad = true;
  std::vector<Parameter*> ps{&p};
  init_sgd_state(ps);
  SgdConfig cfg;
  cfg.lr = 0.1;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.0;

  auto set_grad = [&](double g) {
    p.value.zero_grad();
    p.value.grad_buf<double>()[0] = g;
  };
  set_grad(0.5);
  sgd_step(ps, cfg);
  CHECK(p.value.buf<double>()[0] == doctest::Approx(0.95).epsilon(1e-12));
  set_grad(0.5);
  sgd_step(ps, cfg);
  // v2 = 0.9*(-0.05) - 0.05 = -0.095; theta = 0.95 - 0.095 = 0.855.
  CHECK(p.value.buf<double>()[0] == doctest::Approx(0.855).epsilon(1e-12));

  // Weight decay folds into the gradient.
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.1;
  p.value.buf<double>()[0] = 1.0;
  p.momentum.buf<double>()[0] = 0.0;
  set_grad(0.0);
  sgd_step(ps, cfg);
  CHECK(p.value.buf<double>()[0] == doctest::Approx(0.99).epsilon(1e-12));
}

TEST_CASE("rmsprop_step matches a hand-stepped reference") {
  // s' = rho s + (1-rho) g^2; theta' = theta - lr g / (sqrt(s') + eps).
  Parameter p;
  p.name = "w";
  p.value = Tensor::from_values({1}, std::vector<double>{2.0}, Dtype::kF64);
  p.value.impl_->requires_grad = true;
  std::vector<Parameter*> ps{&p};
  init_rmsprop_state(ps);
  RmspropConfig cfg;
  cfg.lr = 0.01;
  cfg.decay = 0.9;
  cfg.epsilon = 1e-8;

  p.value.zero_grad();
  p.value.grad_buf<double>()[0] = 0.4;
  rmsprop_step(ps, cfg);
  const double s1 = 0.1 * 0.16;
  const double want1 = 2.0 - 0.01 * 0.4 / (std::sqrt(s1) + 1e-8);
  CHECK(p.value.buf<double>()[0] == doctest::Approx(want1).epsilon(1e-12));

  p.value.zero_grad();
  p.value.grad_buf<double>()[0] = -0.2;
  rmsprop_step(ps, cfg);
  const double s2 = 0.9 * s1 + 0.1 * 0.04;
  const double want2 = want1 + 0.01 * 0.2 / (std::sqrt(s2) + 1e-8);
  CHECK(p.value.buf<double>()[0] == doctest::Approx(want2).epsilon(1e-12));
}

TEST_CASE("stepping without optimizer state is an error") {
  Parameter p;
  p.name = "w";
  p.value = Tensor::zeros({1}, Dtype::kF64);
  std::vector<Parameter*> ps{&p};
  CHECK_THROWS_AS(sgd_step(ps, SgdConfig{}), Error);
  CHECK_THROWS_AS(rmsprop_step(ps, RmspropConfig{}), Error);
}

TEST_CASE("rng forks are deterministic and tag-dependent") {
  Rng a(42), b(42);
  CHECK(a.fork("x").next_u64() == b.fork("x").next_u64());
  Rng c(42), d(42);
  CHECK(c.fork("x").next_u64() != d.fork("y").next_u64());
  Rng e(42);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double u = e.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  CHECK(lo < 0.05);
  CHECK(hi > 0.95);
}
