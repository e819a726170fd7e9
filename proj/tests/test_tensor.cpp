#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "capsforge/tensor.hpp"
#include "oracles.hpp"

using namespace capsforge;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false,
                     double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(size_t(numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(v), std::move(shape), requires_grad);
}

}  // namespace

TEST_CASE("conv2d all-ones 3x3 valid gives the element count") {
  Tensor x = Tensor::filled({1, 3, 3}, 1.0);
  Tensor k = Tensor::filled({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, k, 1, Padding::valid);
  REQUIRE(y.shape() == Shape{1, 1, 1});
  REQUIRE(y.value_at(0) == 9.0);
}

TEST_CASE("conv2d valid output shape arithmetic") {
  Tensor x = Tensor::filled({1, 4, 4}, 0.5);
  Tensor k = Tensor::filled({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, k, 1, Padding::valid);
  REQUIRE(y.shape() == Shape{1, 2, 2});
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tensor x = Tensor::filled({2, 4, 4}, 1.0);
  Tensor k = Tensor::filled({1, 3, 3, 3}, 1.0);
  REQUIRE_THROWS_AS(conv2d(x, k, 1, Padding::valid), Error);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(42);
  Tensor x = random_tensor({2, 8, 8}, rng);
  Tensor k = random_tensor({4, 2, 3, 3}, rng);
  Tensor y = conv2d(x, k, 2, Padding::valid);
  REQUIRE(y.shape() == Shape{4, 3, 3});
  auto ref = oracles::conv2d_loops(x.values(), 2, 8, 8, k.values(), 4, 3, 3, 2,
                                   0, 0, 3, 3);
  for (size_t i = 0; i < ref.size(); ++i)
    REQUIRE(std::abs(y.values()[i] - ref[i]) < 1e-12);
}

TEST_CASE("conv2d randomized against oracle, both paddings") {
  Rng rng(7);
  for (int trial = 0; trial < 120; ++trial) {
    const int c = int(rng.uniform_int(1, 3));
    const int h = int(rng.uniform_int(3, 9));
    const int w = int(rng.uniform_int(3, 9));
    const int f = int(rng.uniform_int(1, 4));
    const int k = 1 + 2 * int(rng.uniform_int(0, 1));
    const int stride = int(rng.uniform_int(1, 2));
    const bool same = rng.uniform() < 0.5;
    if (!same && (k > h || k > w)) continue;
    Tensor x = random_tensor({c, h, w}, rng);
    Tensor kern = random_tensor({f, c, k, k}, rng);
    const Padding pad = same ? Padding::same : Padding::valid;
    Tensor y = conv2d(x, kern, stride, pad);
    const ConvGeometry geo = conv_geometry(h, w, k, k, stride, pad);
    auto ref = oracles::conv2d_loops(x.values(), c, h, w, kern.values(), f, k,
                                     k, stride, geo.pad_top, geo.pad_left,
                                     geo.out_h, geo.out_w);
    REQUIRE(y.values().size() == ref.size());
    for (size_t i = 0; i < ref.size(); ++i)
      REQUIRE(std::abs(y.values()[i] - ref[i]) < 1e-12);
  }
}

TEST_CASE("same padding puts the extra pixel on the bottom/right") {
  // 4x4 input, 2x2 kernel, stride 1 same: pad total 1, so top/left get 0.
  const ConvGeometry geo = conv_geometry(4, 4, 2, 2, 1, Padding::same);
  REQUIRE(geo.out_h == 4);
  REQUIRE(geo.pad_top == 0);
  REQUIRE(geo.pad_left == 0);
  const ConvGeometry geo5 = conv_geometry(120, 160, 5, 5, 2, Padding::same);
  REQUIRE(geo5.out_h == 60);
  REQUIRE(geo5.out_w == 80);
  REQUIRE(geo5.pad_top == 1);  // total pad 3 splits 1 top / 2 bottom
}

TEST_CASE("dense identity and zero weights") {
  Tensor x = Tensor::from({1.0, -2.0, 3.0}, {3});
  std::vector<double> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  Tensor w = Tensor::from(eye, {3, 3});
  Tensor b0 = Tensor::zeros({3});
  Tensor y = dense(x, w, b0);
  REQUIRE(y.values() == x.values());

  Tensor wz = Tensor::zeros({2, 3});
  Tensor b = Tensor::from({0.5, -0.25}, {2});
  Tensor yb = dense(x, wz, b);
  REQUIRE(yb.values() == b.values());
}

TEST_CASE("dense rejects dimension mismatch") {
  Tensor x = Tensor::zeros({3});
  Tensor w = Tensor::zeros({2, 4});
  Tensor b = Tensor::zeros({2});
  REQUIRE_THROWS_AS(dense(x, w, b), Error);
}

TEST_CASE("dense randomized against loop oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = int(rng.uniform_int(1, 8));
    const int m = int(rng.uniform_int(1, 8));
    Tensor x = random_tensor({n}, rng);
    Tensor w = random_tensor({m, n}, rng);
    Tensor b = random_tensor({m}, rng);
    Tensor y = dense(x, w, b);
    auto ref = oracles::dense_loops(x.values(), w.values(), b.values(), m, n);
    for (int i = 0; i < m; ++i) REQUIRE(std::abs(y.value_at(i) - ref[size_t(i)]) < 1e-12);
  }
}

TEST_CASE("activation values") {
  Tensor t = Tensor::from({-1.0, 2.0, 0.0}, {3});
  Tensor r = relu(t);
  REQUIRE(r.values() == std::vector<double>{0.0, 2.0, 0.0});
  Tensor s = sigmoid(Tensor::scalar(0.0));
  REQUIRE(s.scalar_value() == 0.5);
  Tensor sm = softmax(Tensor::from({0.0, 0.0, 0.0}, {3}), 0);
  for (double v : sm.values()) REQUIRE(v == Catch::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("softmax slices sum to one and are positive") {
  Rng rng(3);
  Tensor t = random_tensor({4, 5}, rng, false, -3.0, 3.0);
  for (int axis = 0; axis < 2; ++axis) {
    Tensor s = softmax(t, axis);
    const int other = 1 - axis;
    for (int o = 0; o < t.shape()[other]; ++o) {
      double total = 0.0;
      for (int k = 0; k < t.shape()[axis]; ++k) {
        const int64_t idx = axis == 0 ? k * 5 + o : o * 5 + k;
        REQUIRE(s.value_at(idx) > 0.0);
        total += s.value_at(idx);
      }
      REQUIRE(total == Catch::Approx(1.0).margin(1e-12));
    }
  }
  REQUIRE_THROWS_AS(softmax(t, 2), Error);
}

TEST_CASE("backward of sum is all-ones") {
  Rng rng(5);
  Tensor x = random_tensor({2, 3, 4}, rng, true);
  Tensor loss = sum(x);
  backward(loss);
  for (double g : x.grad()) REQUIRE(g == 1.0);
}

TEST_CASE("backward of sigmoid(w*x) at w=0 x=1 is 0.25") {
  Tensor w = Tensor::from({0.0}, {1}, true);
  Tensor x = Tensor::from({1.0}, {1});
  Tensor loss = sum(sigmoid(mul(w, x)));
  backward(loss);
  REQUIRE(w.grad()[0] == Catch::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x = Tensor::zeros({3}, true);
  REQUIRE_THROWS_AS(backward(relu(x)), Error);
}

TEST_CASE("double backward on one graph is an error; fresh graphs accumulate") {
  Tensor w = Tensor::from({2.0}, {1}, true);
  Tensor loss = sum(mul(w, w));
  backward(loss);
  REQUIRE(w.grad()[0] == 4.0);
  REQUIRE_THROWS_AS(backward(loss), Error);

  Tensor loss2 = sum(mul(w, w));
  backward(loss2);  // accumulates into the shared leaf
  REQUIRE(w.grad()[0] == 8.0);
  w.zero_grad();
  REQUIRE(w.grad()[0] == 0.0);
}

TEST_CASE("backward is deterministic bit for bit") {
  Rng rng(17);
  Tensor x = random_tensor({2, 6, 6}, rng, true);
  Tensor k = random_tensor({3, 2, 3, 3}, rng, true);
  auto run = [&] {
    x.zero_grad();
    k.zero_grad();
    Tensor y = relu(conv2d(x, k, 1, Padding::same));
    backward(sum(mul(y, y)));
    auto g = x.grad();
    g.insert(g.end(), k.grad().begin(), k.grad().end());
    return g;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a == b);  // exact equality, not approximate
}

TEST_CASE("grad_check on x^2 is essentially exact") {
  auto f = [](const std::vector<Tensor>& in) {
    return sum(mul(in[0], in[0]));
  };
  const double err = grad_check(f, {Tensor::from({3.0}, {1})}, 1e-5);
  REQUIRE(err < 1e-9);
}

TEST_CASE("grad_check flags non-finite functions") {
  auto f = [](const std::vector<Tensor>& in) {
    return Tensor::scalar(std::log(in[0].value_at(0)));
  };
  REQUIRE_THROWS_AS(grad_check(f, {Tensor::from({-1.0}, {1})}, 1e-5), Error);
}

TEST_CASE("composite conv-relu-dense-sigmoid graph passes grad_check") {
  Rng rng(23);
  Tensor x = random_tensor({2, 5, 5}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  Tensor kb = random_tensor({3}, rng);
  Tensor w = random_tensor({4, 3 * 5 * 5}, rng);
  Tensor b = random_tensor({4}, rng);
  auto f = [](const std::vector<Tensor>& in) {
    Tensor h = relu(bias_channels(conv2d(in[0], in[1], 1, Padding::same), in[2]));
    Tensor d = sigmoid(dense(flatten(h), in[3], in[4]));
    return sum(d);
  };
  const double err = grad_check(f, {x, k, kb, w, b}, 1e-5);
  REQUIRE(err < 1e-4);
}

TEST_CASE("per-op gradients pass grad_check") {
  Rng rng(29);
  SECTION("softmax") {
    Tensor t = random_tensor({3, 4}, rng);
    Tensor sel = random_tensor({3, 4}, rng);
    auto f = [&](const std::vector<Tensor>& in) {
      return sum(mul(softmax(in[0], 1), detach(sel)));
    };
    REQUIRE(grad_check(f, {t}, 1e-6) < 1e-6);
  }
  SECTION("maxpool2") {
    Tensor t = random_tensor({2, 6, 6}, rng);
    auto f = [](const std::vector<Tensor>& in) {
      Tensor p = maxpool2(in[0]);
      return sum(mul(p, p));
    };
    REQUIRE(grad_check(f, {t}, 1e-6) < 1e-5);
  }
  SECTION("concat_channels and mask_rows") {
    Tensor a = random_tensor({2, 3, 3}, rng);
    Tensor b = random_tensor({1, 3, 3}, rng);
    std::vector<double> mask = {1.0, 0.0, 0.5};
    auto f = [mask](const std::vector<Tensor>& in) {
      Tensor c = concat_channels(in[0], in[1]);
      Tensor m = mask_rows(reshape(c, {3, 9}), mask);
      return sum(mul(m, m));
    };
    REQUIRE(grad_check(f, {a, b}, 1e-6) < 1e-6);
  }
  SECTION("bias_channels") {
    Tensor x = random_tensor({3, 4, 4}, rng);
    Tensor b = random_tensor({3}, rng);
    auto f = [](const std::vector<Tensor>& in) {
      Tensor y = bias_channels(in[0], in[1]);
      return sum(mul(y, y));
    };
    REQUIRE(grad_check(f, {x, b}, 1e-6) < 1e-6);
  }
  SECTION("pick") {
    Tensor t = random_tensor({5}, rng);
    auto f = [](const std::vector<Tensor>& in) {
      return mul(pick(in[0], 2), pick(in[0], 4));
    };
    REQUIRE(grad_check(f, {t}, 1e-6) < 1e-6);
  }
}

TEST_CASE("first_nonfinite_op names the culprit") {
  Tensor x = Tensor::from({1.0, std::nan("")}, {2}, true);
  x.set_label("weights0");
  Tensor loss = sum(x);
  const std::string where = first_nonfinite_op(loss);
  REQUIRE(where.find("weights0") != std::string::npos);
}

TEST_CASE("tensor invariants: shape/value agreement enforced") {
  REQUIRE_THROWS_AS(Tensor::from({1.0, 2.0}, {3}), Error);
  Tensor t = Tensor::zeros({2, 2});
  REQUIRE_THROWS_AS(reshape(t, {5}), Error);
}

TEST_CASE("dropout identity at inference, mask consistency in training") {
  Rng rng(31);
  Tensor x = random_tensor({100}, rng);
  Tensor y = dropout(x, 0.5, rng, false);
  REQUIRE(y.values() == x.values());

  Rng train_rng(77);
  Tensor xt = Tensor::from(x.values(), {100}, true);
  Tensor yt = dropout(xt, 0.5, train_rng, true);
  backward(sum(yt));
  for (size_t i = 0; i < 100; ++i) {
    if (yt.value_at(int64_t(i)) == 0.0 && x.value_at(int64_t(i)) != 0.0)
      REQUIRE(xt.grad()[i] == 0.0);
    else
      REQUIRE(xt.grad()[i] == 2.0);
  }
}
