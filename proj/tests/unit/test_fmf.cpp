#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fmfnet/errors.hpp"
#include "fmfnet/fmf.hpp"
#include "fmfnet/gradcheck.hpp"
#include "fmfnet/model.hpp"

using namespace fmfnet;

namespace {

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor random_map(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> v(c * h * w);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return Tensor::from_vector({1, c, h, w}, std::move(v));
}

// Sum of a few plane waves with wavelengths between 64 and 128 cells.
Tensor smooth_map(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> v(c * h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (int k = 0; k < 3; ++k) {
      const double lambda = rng.uniform(64, 128);
      const double dir = rng.uniform(0, 2 * std::numbers::pi);
      const double phase = rng.uniform(0, 2 * std::numbers::pi);
      const double kx = 2 * std::numbers::pi / lambda * std::cos(dir), ky = 2 * std::numbers::pi / lambda * std::sin(dir);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) v[(ch * h + y) * w + x] += std::sin(kx * x + ky * y + phase) / 3.0;
      }
    }
  }
  return Tensor::from_vector({1, c, h, w}, std::move(v));
}

BevGeometry square_geometry(int n, double cell) {
  return BevGeometry{-0.5 * n * cell, -0.5 * n * cell, cell, n, n};
}

FmfParams selector_params(int channels) {
  Rng rng(1);
  FmfParams p = FmfParams::create(channels, 3, rng);
  auto w = p.conv.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  const auto C = static_cast<std::size_t>(channels);
  for (std::size_t c = 0; c < C; ++c) w[((c * 2 * C + c) * 3 + 1) * 3 + 1] = 1.0;
  for (double& b : p.conv.bias.mutable_data()) b = 0.0;
  p.bn.eps = 0.0;
  return p;
}

}  // namespace

TEST_CASE("selector kernel passes the current map through relu") {
  FmfParams p = selector_params(3);
  Rng rng(2);
  const Tensor cur = random_map(3, 6, 7, rng);
  const Tensor prev = random_map(3, 6, 7, rng);
  const Tensor out = fmf_base(cur, prev, p, Mode::kEval);
  REQUIRE(out.shape() == cur.shape());
  for (std::size_t i = 0; i < cur.numel(); ++i) CHECK(out.data()[i] == std::max(0.0, cur.data()[i]));
}

TEST_CASE("fmf_base shape, determinism and zero input") {
  Rng rng(3);
  FmfParams p = FmfParams::create(4, 3, rng);
  const Tensor cur = random_map(4, 5, 5, rng);
  const auto a = to_vec(fmf_base(cur, cur, p, Mode::kEval));
  const auto b = to_vec(fmf_base(cur, cur, p, Mode::kEval));
  CHECK(a == b);
  for (double v : a) CHECK(std::isfinite(v));

  for (double& v : p.conv.bias.mutable_data()) v = 0.0;
  for (Mode m : {Mode::kEval, Mode::kTrain}) {
    const Tensor out = fmf_base(Tensor::zeros({1, 4, 5, 5}), Tensor::zeros({1, 4, 5, 5}), p, m);
    for (double v : out.data()) CHECK(v == 0.0);
  }
  CHECK_THROWS_AS(fmf_base(cur, Tensor::zeros({1, 4, 5, 6}), p, Mode::kEval), ShapeError);
  CHECK_THROWS_AS(fmf_base(Tensor::zeros({1, 3, 5, 5}), Tensor::zeros({1, 3, 5, 5}), p, Mode::kEval), ShapeError);
}

TEST_CASE("parameter count") {
  CHECK(FmfParams::param_count(64, 3) == 64 * 128 * 9 + 64 + 2 * 64);
  Rng rng(4);
  FmfParams p = FmfParams::create(8, 5, rng);
  ParamSet set;
  p.collect(set, "fmf");
  CHECK(set.count() == FmfParams::param_count(8, 5));
  FmfConfig cfg;
  cfg.kernel_size = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("identity pose warp is exact") {
  Rng rng(5);
  const Tensor m = random_map(2, 16, 16, rng);
  const auto g = square_geometry(16, 0.64);
  CHECK(to_vec(warp_feature_map(m, Pose2D{}, g)) == to_vec(m));
  CHECK(to_vec(bilinear_sample(m, warp_grid(Pose2D{}, g))) == to_vec(m));
}

TEST_CASE("integer-cell translations match an index shift") {
  Rng rng(6);
  const std::size_t H = 12, W = 15;
  const Tensor m = random_map(3, H, W, rng);
  const BevGeometry g{-4.8, -3.84, 0.64, static_cast<int>(W), static_cast<int>(H)};
  for (auto [n, k] : std::vector<std::pair<int, int>>{{3, 0}, {-2, 0}, {0, 4}, {5, -3}, {-1, 1}}) {
    const Tensor out = warp_feature_map(m, Pose2D{n * g.cell, k * g.cell, 0.0}, g);
    for (std::size_t c = 0; c < 3; ++c) {
      for (int y = 0; y < static_cast<int>(H); ++y) {
        for (int x = 0; x < static_cast<int>(W); ++x) {
          const int sx = x - n, sy = y - k;
          const bool inside = sx >= 0 && sy >= 0 && sx < static_cast<int>(W) && sy < static_cast<int>(H);
          const double expected = inside ? m.at({0, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)}) : 0.0;
          CHECK(out.at({0, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)}) == expected);
        }
      }
    }
  }
}

TEST_CASE("quarter-turn warp permutes pixels") {
  Rng rng(7);
  const Tensor m = random_map(1, 8, 8, rng);
  const auto g = square_geometry(8, 0.5);
  const Tensor out = warp_feature_map(m, Pose2D{0, 0, std::numbers::pi / 2}, g);
  // A point (x, y) of the previous frame appears at (-y, x).
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t x = 0; x < 8; ++x) CHECK(out.at({0, 0, x, 7 - y}) == doctest::Approx(m.at({0, 0, y, x})).epsilon(1e-12));
  }
}

TEST_CASE("warp followed by its inverse restores smooth maps") {
  Rng rng(8);
  const int n = 96;
  const auto g = square_geometry(n, 0.64);
  for (const Pose2D& T : {Pose2D{1.3, -0.7, 0.1}, Pose2D{-2.1, 0.9, -0.05}, Pose2D{0.32, 0.0, 0.0}}) {
    const Tensor m = smooth_map(2, n, n, rng);
    const Tensor back = warp_feature_map(warp_feature_map(m, T, g), invert_pose(T), g);
    const double reach = std::hypot(T.tx, T.ty) / g.cell + std::abs(T.yaw) * n / std::numbers::sqrt2;
    const int margin = static_cast<int>(std::ceil(reach)) + 2;
    double err = 0;
    int count = 0;
    for (std::size_t c = 0; c < 2; ++c) {
      for (int y = margin; y < n - margin; ++y) {
        for (int x = margin; x < n - margin; ++x) {
          const std::array<std::size_t, 4> at{0, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)};
          err += std::abs(back.at({at[0], at[1], at[2], at[3]}) - m.at({at[0], at[1], at[2], at[3]}));
          ++count;
        }
      }
    }
    REQUIRE(count > 1000);
    INFO("mean abs error " << err / count);
    CHECK(err / count < 1e-3);
  }
}

TEST_CASE("warp is linear in the map") {
  Rng rng(9);
  const auto g = square_geometry(20, 0.64);
  const Tensor a = random_map(2, 20, 20, rng), b = random_map(2, 20, 20, rng);
  const Pose2D T{0.9, -1.7, 0.3};
  for (double alpha : {2.0, -0.37}) {
    const Tensor lhs = warp_feature_map(add(scale(a, alpha), b), T, g);
    const Tensor rhs = add(scale(warp_feature_map(a, T, g), alpha), warp_feature_map(b, T, g));
    for (std::size_t i = 0; i < lhs.numel(); ++i) CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) <= 1e-12);
  }
}

TEST_CASE("cold start aggregates the map with itself") {
  Rng rng(10);
  FmfParams p = FmfParams::create(3, 3, rng);
  const Tensor cur = random_map(3, 6, 6, rng);
  const FmfStepResult r = fmf_step(cur, FmfState{}, p, Mode::kEval, FmfConfig{}, square_geometry(6, 0.64), Pose2D{});
  CHECK(to_vec(r.output) == to_vec(fmf_base(cur, cur, p, Mode::kEval)));
  CHECK(r.state.initialized);
  CHECK(to_vec(r.state.prev_map) == to_vec(cur));
  CHECK(r.state.prev_pose == Pose2D{});
}

TEST_CASE("shape change mid-sequence is a state error") {
  Rng rng(11);
  FmfParams p = FmfParams::create(2, 3, rng);
  const auto r = fmf_step(random_map(2, 4, 4, rng), FmfState{}, p, Mode::kEval, FmfConfig{}, square_geometry(4, 1.0),
                          std::nullopt);
  CHECK_THROWS_AS(fmf_step(random_map(2, 6, 6, rng), r.state, p, Mode::kEval, FmfConfig{}, square_geometry(6, 1.0),
                           std::nullopt),
                  StateError);
}

TEST_CASE("state carries the raw map, not the aggregated one") {
  Rng rng(12);
  FmfParams p = FmfParams::create(2, 3, rng);
  const auto g = square_geometry(6, 0.64);
  const Tensor sentinel = Tensor::full({1, 2, 6, 6}, 1234.5);
  const Tensor b = random_map(2, 6, 6, rng);
  const auto r1 = fmf_step(sentinel, FmfState{}, p, Mode::kEval, FmfConfig{}, g, std::nullopt);
  CHECK(to_vec(r1.state.prev_map) == to_vec(sentinel));
  CHECK(to_vec(r1.output) != to_vec(sentinel));
  const auto r2 = fmf_step(b, r1.state, p, Mode::kEval, FmfConfig{}, g, std::nullopt);
  CHECK(to_vec(r2.output) == to_vec(fmf_base(b, sentinel, p, Mode::kEval)));
  CHECK(to_vec(r2.output) != to_vec(fmf_base(b, r1.output, p, Mode::kEval)));
}

TEST_CASE("recurrence reaches back exactly one frame") {
  Rng rng(13);
  FmfParams p = FmfParams::create(2, 3, rng);
  const auto g = square_geometry(8, 0.64);
  FmfConfig cfg;
  cfg.use_odometry = true;
  const Tensor x0 = random_map(2, 8, 8, rng), x0b = random_map(2, 8, 8, rng);
  const Tensor x1 = random_map(2, 8, 8, rng), x2 = random_map(2, 8, 8, rng);
  const std::array<Pose2D, 3> poses{Pose2D{0, 0, 0}, Pose2D{0.7, 0.1, 0.05}, Pose2D{1.5, 0.1, 0.02}};
  auto run = [&](const Tensor& first) {
    FmfState s;
    std::vector<std::vector<double>> outs;
    const std::array<Tensor, 3> xs{first, x1, x2};
    for (std::size_t t = 0; t < 3; ++t) {
      auto r = fmf_step(xs[t], s, p, Mode::kEval, cfg, g, poses[t]);
      outs.push_back(to_vec(r.output));
      s = r.state;
    }
    return outs;
  };
  const auto a = run(x0), b = run(x0b);
  CHECK(a[1] != b[1]);
  CHECK(a[2] == b[2]);
}

TEST_CASE("odometry warps the stored map") {
  Rng rng(14);
  FmfParams p = FmfParams::create(2, 3, rng);
  const auto g = square_geometry(8, 0.64);
  FmfConfig cfg;
  cfg.use_odometry = true;
  const Tensor x0 = random_map(2, 8, 8, rng), x1 = random_map(2, 8, 8, rng);
  const Pose2D p0{0, 0, 0}, p1{1.28, 0, 0};
  const auto r0 = fmf_step(x0, FmfState{}, p, Mode::kEval, cfg, g, p0);
  const auto r1 = fmf_step(x1, r0.state, p, Mode::kEval, cfg, g, p1);
  const Tensor warped = warp_feature_map(x0, relative_pose(p0, p1), g);
  CHECK(to_vec(r1.output) == to_vec(fmf_base(x1, warped, p, Mode::kEval)));

  cfg.use_odometry = false;
  const auto r1b = fmf_step(x1, r0.state, p, Mode::kEval, cfg, g, p1);
  CHECK(to_vec(r1b.output) == to_vec(fmf_base(x1, x0, p, Mode::kEval)));
}

TEST_CASE("a static scene is a fixed point") {
  Rng rng(15);
  FmfParams p = FmfParams::create(3, 3, rng);
  const auto g = square_geometry(6, 0.64);
  FmfConfig cfg;
  cfg.use_odometry = true;
  const Tensor x = random_map(3, 6, 6, rng);
  FmfState s;
  std::vector<double> first;
  for (int t = 0; t < 5; ++t) {
    auto r = fmf_step(x, s, p, Mode::kEval, cfg, g, Pose2D{});
    if (t == 0) {
      first = to_vec(r.output);
    } else {
      CHECK(to_vec(r.output) == first);
    }
    s = r.state;
  }
}

TEST_CASE("gradients reach both inputs") {
  Rng rng(16);
  FmfParams p = FmfParams::create(2, 3, rng);
  Tensor a = random_map(2, 5, 5, rng), b = random_map(2, 5, 5, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  sum(fmf_base(a, b, p, Mode::kTrain)).backward();
  auto nonzero = [](std::span<const double> g) {
    return std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
  };
  CHECK(nonzero(a.grad()));
  CHECK(nonzero(b.grad()));
  const auto r = check_gradients("fmf_base", [&] { return sum(mul(fmf_base(a, b, p, Mode::kTrain), a)); }, {a, b}, 1e-5);
  INFO("error " << r.max_error);
  CHECK(r.passed());
}
