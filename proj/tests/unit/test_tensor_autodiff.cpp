#include <doctest.h>

#include <cmath>
#include <limits>

#include "fmfnet/errors.hpp"
#include "fmfnet/gradcheck.hpp"
#include "fmfnet/model.hpp"
#include "fmfnet/ops.hpp"
#include "fmfnet/random.hpp"
#include "fmfnet/tensor.hpp"

using namespace fmfnet;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_vector(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("tensor construction and indexing") {
  const Tensor t = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 6.0);
  CHECK(shape_str(t.shape()) == "[2,3]");
  CHECK_THROWS_AS(Tensor::from_vector({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(add(t, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("identity 1x1 convolution reproduces the input") {
  Rng rng(1);
  const Tensor x = random_tensor({2, 3, 5, 4}, rng);
  std::vector<double> w(9, 0.0);
  for (int c = 0; c < 3; ++c) w[static_cast<std::size_t>(c * 3 + c)] = 1.0;
  const Tensor y = conv2d(x, Tensor::from_vector({3, 3, 1, 1}, w), Tensor::zeros({3}), 1, 0);
  CHECK(y.shape() == x.shape());
  CHECK(to_vec(y) == to_vec(x));
}

TEST_CASE("all-ones 3x3 convolution counts neighbours") {
  const Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor y = conv2d(x, Tensor::full({1, 1, 3, 3}, 1.0), Tensor(), 1, 1);
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.at({0, 0, 1, 1}) == 9.0);
  CHECK(y.at({0, 0, 0, 0}) == 4.0);
  CHECK(y.at({0, 0, 2, 2}) == 4.0);
  CHECK(y.at({0, 0, 0, 1}) == 6.0);

  const Tensor s = conv2d(Tensor::full({1, 1, 7, 7}, 1.0), Tensor::full({2, 1, 3, 3}, 1.0), Tensor(), 2, 1);
  CHECK(s.shape() == Shape{1, 2, 4, 4});
  CHECK_THROWS_AS(conv2d(x, Tensor::full({1, 2, 3, 3}, 1.0), Tensor(), 1, 1), ShapeError);
}

TEST_CASE("batch norm statistics") {
  Rng rng(2);
  const Tensor x = random_tensor({2, 3, 4, 4}, rng, false, -3.0, 5.0);
  BatchNorm bn = BatchNorm::create(3);
  const Tensor y = batch_norm(x, bn, Mode::kTrain);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    int n = 0;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
          const double v = y.at({b, c, i, j});
          s += v;
          s2 += v * v;
          ++n;
        }
      }
    }
    const double mu = s / n;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(s2 / n - mu * mu - 1.0) < 1e-4);
    CHECK(bn.running_mean[c] != 0.0);
  }

  BatchNorm fresh = BatchNorm::create(3);
  const Tensor z = batch_norm(x, fresh, Mode::kEval);
  const double k = 1.0 / std::sqrt(1.0 + fresh.eps);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(z.data()[i] == doctest::Approx(x.data()[i] * k).epsilon(1e-15));
  CHECK(fresh.running_mean == std::vector<double>(3, 0.0));

  BatchNorm wrong = BatchNorm::create(2);
  CHECK_THROWS_AS(batch_norm(x, wrong, Mode::kTrain), ShapeError);
}

TEST_CASE("elementwise activations") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  const Tensor big = sigmoid(Tensor::from_vector({2}, {800.0, -800.0}));
  CHECK(std::isfinite(big.data()[0]));
  CHECK(std::isfinite(big.data()[1]));
  CHECK(to_vec(relu(Tensor::from_vector({3}, {-1, 0, 2}))) == std::vector<double>{0, 0, 2});
}

TEST_CASE("pooling, concat and max") {
  const Tensor x = Tensor::from_vector({1, 1, 2, 3}, {1, 5, 2, 4, 3, 6});
  const Tensor p = max_pool2d(x, 3, 1, 1);
  CHECK(to_vec(p) == std::vector<double>{5, 6, 6, 5, 6, 6});

  const Tensor c = concat_channels({x, scale(x, 2.0)});
  CHECK(c.shape() == Shape{1, 2, 2, 3});
  CHECK(c.at({0, 1, 1, 2}) == 12.0);

  const Tensor m = max_over_axis(Tensor::from_vector({2, 3}, {1, 7, 2, 9, 0, 3}), 1);
  CHECK(to_vec(m) == std::vector<double>{7, 9});

  const Tensor u = upsample_nearest(Tensor::from_vector({1, 1, 1, 2}, {1, 2}), 2);
  CHECK(to_vec(u) == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2});

  const Tensor l = linear(Tensor::from_vector({1, 2}, {1, 2}), Tensor::from_vector({2, 2}, {1, 0, 1, 1}),
                          Tensor::from_vector({2}, {0.5, 0}));
  CHECK(to_vec(l) == std::vector<double>{1.5, 3});
}

TEST_CASE("scatter then gather recovers the features") {
  Rng rng(3);
  const int w = 7, h = 5;
  const Tensor feats = random_tensor({4, 3}, rng);
  const std::vector<std::int32_t> coords{0, 0, 6, 4, 2, 3, 5, 1};
  const Tensor grid = scatter_to_grid(feats, coords, w, h);
  REQUIRE(grid.shape() == Shape{1, 3, 5, 7});
  std::vector<std::array<int, 2>> pixels;
  for (std::size_t p = 0; p < 4; ++p) pixels.push_back({coords[2 * p + 1], coords[2 * p]});
  const Tensor back = gather_pixels(grid, pixels);
  CHECK(to_vec(back) == to_vec(feats));

  double total = 0;
  for (double v : grid.data()) total += std::abs(v);
  double used = 0;
  for (double v : feats.data()) used += std::abs(v);
  CHECK(total == doctest::Approx(used).epsilon(1e-15));

  const std::vector<std::int32_t> bad{0, 0, 7, 0, 1, 1, 2, 2};
  CHECK_THROWS_AS(scatter_to_grid(feats, bad, w, h), IndexError);
}

TEST_CASE("bilinear sampling with the identity grid is exact") {
  Rng rng(4);
  const Tensor map = random_tensor({1, 2, 6, 9}, rng);
  std::vector<double> g;
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 9; ++x) {
      g.push_back(x);
      g.push_back(y);
    }
  }
  const Tensor out = bilinear_sample(map, Tensor::from_vector({1, 6, 9, 2}, g));
  CHECK(to_vec(out) == to_vec(map));

  // Half-pixel sample averages neighbours; outside reads zero.
  const Tensor probe = bilinear_sample(map, Tensor::from_vector({1, 1, 2, 2}, {0.5, 0.0, -5.0, 2.0}));
  CHECK(probe.at({0, 0, 0, 0}) == doctest::Approx(0.5 * (map.at({0, 0, 0, 0}) + map.at({0, 0, 0, 1}))));
  CHECK(probe.at({0, 0, 0, 1}) == 0.0);
}

TEST_CASE("simple gradients") {
  Rng rng(5);
  Tensor x = random_tensor({3, 4}, rng, true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 2.0 * x.data()[i]);
}

TEST_CASE("backward requires a scalar loss") {
  const Tensor x = Tensor::full({2}, 1.0, true);
  CHECK_THROWS_AS(scale(x, 2.0).backward(), UsageError);
}

TEST_CASE("gradients accumulate across backward calls") {
  const Tensor x = Tensor::from_vector({3}, {1, 2, 3}, true);
  sum(scale(x, 3.0)).backward();
  sum(scale(x, 3.0)).backward();
  for (double g : x.grad()) CHECK(g == 6.0);
}

TEST_CASE("scaling the loss scales the gradients") {
  Rng rng(6);
  Tensor x = random_tensor({1, 2, 5, 5}, rng, true);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, true);
  auto loss = [&] { return sum(mul(sigmoid(conv2d(x, w, Tensor(), 1, 1)), sigmoid(conv2d(x, w, Tensor(), 1, 1)))); };
  loss().backward();
  const std::vector<double> gx(x.grad().begin(), x.grad().end());
  const std::vector<double> gw(w.grad().begin(), w.grad().end());
  for (double alpha : {4.0, 0.3}) {
    x.zero_grad();
    w.zero_grad();
    scale(loss(), alpha).backward();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (alpha == 4.0) {
        CHECK(x.grad()[i] == alpha * gx[i]);
      } else {
        CHECK(std::abs(x.grad()[i] - alpha * gx[i]) <= 1e-12 * std::max(1.0, std::abs(gx[i])));
      }
    }
    for (std::size_t i = 0; i < gw.size(); ++i) {
      CHECK(std::abs(w.grad()[i] - alpha * gw[i]) <= 1e-12 * std::max(1.0, std::abs(gw[i])));
    }
  }
}

TEST_CASE("no-grad mode records nothing") {
  const Tensor x = Tensor::from_vector({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(mul(x, x));
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(grad_mode_enabled());
}

TEST_CASE("forward passes are deterministic") {
  Rng a(9), b(9);
  const Tensor xa = random_tensor({1, 4, 8, 8}, a), wa = random_tensor({5, 4, 3, 3}, a);
  const Tensor xb = random_tensor({1, 4, 8, 8}, b), wb = random_tensor({5, 4, 3, 3}, b);
  CHECK(to_vec(conv2d(xa, wa, Tensor(), 1, 1)) == to_vec(conv2d(xb, wb, Tensor(), 1, 1)));
}

TEST_CASE("finite-difference check of conv2d weight gradient") {
  Rng rng(10);
  const Tensor x = random_tensor({1, 2, 6, 6}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, true);
  const auto r = check_gradients("conv2d weight", [&] { return sum(conv2d(x, w, Tensor(), 1, 1)); }, {w}, 1e-5);
  CHECK(r.checked == w.numel());
  CHECK(r.passed());
}

TEST_CASE("finite-difference suite over every differentiable op") {
  const auto results = op_gradcheck_suite();
  CHECK(results.size() >= 20);
  for (const auto& r : results) {
    INFO(r.name << " error " << r.max_error);
    CHECK(r.checked >= 10);
    CHECK(r.tolerance <= 1e-5);
    CHECK(r.passed());
  }
}

TEST_CASE("finite-difference check of the full loss on a tiny model") {
  CHECK(DetectorModel::param_count(tiny_model_config()) <= 5000);
  const auto r = model_gradcheck();
  INFO("error " << r.max_error);
  CHECK(r.checked == DetectorModel::param_count(tiny_model_config()));
  CHECK(r.tolerance <= 1e-4);
  CHECK(r.passed());
}
