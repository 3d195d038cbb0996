#include "fmfnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Core>

#include "fmfnet/errors.hpp"

namespace fmfnet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.ndim() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd dydx) {
  auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return Tensor::make_result(a.shape(), std::move(out), {a}, [dydx](const OpContext& ctx) {
    if (!ctx.wants_grad(0)) return;
    auto g = ctx.grad_output();
    auto x = ctx.input(0);
    auto y = ctx.output();
    auto gx = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dydx(x[i], y[i]);
  });
}

struct ConvGeom {
  int C, H, W, kh, kw, stride, pad, Ho, Wo;
  int rows() const { return C * kh * kw; }
  int cols() const { return Ho * Wo; }
  bool trivial() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* x, const ConvGeom& g, double* cols) {
  const int hw = g.cols();
  for (int c = 0; c < g.C; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        double* row = cols + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * hw;
        for (int oy = 0; oy < g.Ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          double* dst = row + oy * g.Wo;
          if (iy < 0 || iy >= g.H) {
            std::fill(dst, dst + g.Wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * g.H + iy) * g.W;
          for (int ox = 0; ox < g.Wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeom& g, double* gx) {
  const int hw = g.cols();
  for (int c = 0; c < g.C; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * hw;
        for (int oy = 0; oy < g.Ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.H) continue;
          const double* src = row + oy * g.Wo;
          double* dst = gx + (static_cast<std::size_t>(c) * g.H + iy) * g.W;
          for (int ox = 0; ox < g.Wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](const OpContext& ctx) {
    auto g = ctx.grad_output();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.wants_grad(k)) continue;
      auto gi = ctx.input_grad(k);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](const OpContext& ctx) {
    auto g = ctx.grad_output();
    if (ctx.wants_grad(0)) {
      auto ga = ctx.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (ctx.wants_grad(1)) {
      auto gb = ctx.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](const OpContext& ctx) {
    auto g = ctx.grad_output();
    auto x = ctx.input(0);
    auto y = ctx.input(1);
    if (ctx.wants_grad(0)) {
      auto ga = ctx.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (ctx.wants_grad(1)) {
      auto gb = ctx.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result({}, {s}, {a}, [](const OpContext& ctx) {
    if (!ctx.wants_grad(0)) return;
    const double g = ctx.grad_output()[0];
    for (double& v : ctx.input_grad(0)) v += g;
  });
}

Tensor mean(const Tensor& a) {
  const auto n = static_cast<double>(a.numel());
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  auto in = a.data();
  return Tensor::make_result(std::move(shape), std::vector<double>(in.begin(), in.end()), {a},
                             [](const OpContext& ctx) {
                               if (!ctx.wants_grad(0)) return;
                               auto g = ctx.grad_output();
                               auto gi = ctx.input_grad(0);
                               for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                             });
}

// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const int N = static_cast<int>(x.dim(0));
  ConvGeom g{};
  g.C = static_cast<int>(x.dim(1));
  g.H = static_cast<int>(x.dim(2));
  g.W = static_cast<int>(x.dim(3));
  g.kh = static_cast<int>(w.dim(2));
  g.kw = static_cast<int>(w.dim(3));
  g.stride = stride;
  g.pad = padding;
  const int F = static_cast<int>(w.dim(0));
  if (static_cast<int>(w.dim(1)) != g.C) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " + shape_str(x.shape()));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ShapeError("conv2d: kernel sizes must be odd");
  if (bias.defined() && (bias.ndim() != 1 || static_cast<int>(bias.dim(0)) != F)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  if (g.H + 2 * padding < g.kh || g.W + 2 * padding < g.kw) throw ShapeError("conv2d: kernel larger than input");
  g.Ho = (g.H + 2 * padding - g.kh) / stride + 1;
  g.Wo = (g.W + 2 * padding - g.kw) / stride + 1;

  const std::size_t in_plane = static_cast<std::size_t>(g.C) * g.H * g.W;
  const std::size_t out_plane = static_cast<std::size_t>(F) * g.cols();
  std::vector<double> out(static_cast<std::size_t>(N) * out_plane);
  std::vector<double> cols(g.trivial() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
  ConstMatMap wm(w.data().data(), F, g.rows());
  for (int n = 0; n < N; ++n) {
    const double* xn = x.data().data() + n * in_plane;
    if (!g.trivial()) im2col(xn, g, cols.data());
    ConstMatMap cm(g.trivial() ? xn : cols.data(), g.rows(), g.cols());
    MatMap om(out.data() + n * out_plane, F, g.cols());
    om.noalias() = wm * cm;
    if (bias.defined()) {
      auto b = bias.data();
      for (int f = 0; f < F; ++f) om.row(f).array() += b[static_cast<std::size_t>(f)];
    }
  }

  Shape shape{static_cast<std::size_t>(N), static_cast<std::size_t>(F), static_cast<std::size_t>(g.Ho),
              static_cast<std::size_t>(g.Wo)};
  return Tensor::make_result(std::move(shape), std::move(out), {x, w, bias}, [g, N, F](const OpContext& ctx) {
    const std::size_t in_plane = static_cast<std::size_t>(g.C) * g.H * g.W;
    const std::size_t out_plane = static_cast<std::size_t>(F) * g.cols();
    auto gout = ctx.grad_output();
    ConstMatMap wm(ctx.input(1).data(), F, g.rows());
    std::vector<double> cols(static_cast<std::size_t>(g.rows()) * g.cols());
    for (int n = 0; n < N; ++n) {
      ConstMatMap go(gout.data() + n * out_plane, F, g.cols());
      const double* xn = ctx.input(0).data() + n * in_plane;
      if (ctx.wants_grad(1)) {
        if (!g.trivial()) im2col(xn, g, cols.data());
        ConstMatMap cm(g.trivial() ? xn : cols.data(), g.rows(), g.cols());
        MatMap gw(ctx.input_grad(1).data(), F, g.rows());
        gw.noalias() += go * cm.transpose();
      }
      if (ctx.wants_grad(0)) {
        double* gx = ctx.input_grad(0).data() + n * in_plane;
        if (g.trivial()) {
          MatMap gxm(gx, g.rows(), g.cols());
          gxm.noalias() += wm.transpose() * go;
        } else {
          MatMap gc(cols.data(), g.rows(), g.cols());
          gc.noalias() = wm.transpose() * go;
          col2im(cols.data(), g, gx);
        }
      }
      if (ctx.num_inputs() > 2 && ctx.wants_grad(2)) {
        auto gb = ctx.input_grad(2);
        for (int f = 0; f < F; ++f) gb[static_cast<std::size_t>(f)] += go.row(f).sum();
      }
    }
  });
}

BatchNorm BatchNorm::create(std::size_t channels) {
  BatchNorm bn;
  bn.gamma = Tensor::full({channels}, 1.0, true);
  bn.beta = Tensor::zeros({channels}, true);
  bn.running_mean.assign(channels, 0.0);
  bn.running_var.assign(channels, 1.0);
  return bn;
}

Tensor batch_norm(const Tensor& x, BatchNorm& bn, Mode mode) {
  if (x.ndim() < 2) throw ShapeError("batch_norm: input needs at least 2 dims, got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0);
  const std::size_t C = x.dim(1);
  if (C != bn.channels() || bn.gamma.numel() != C || bn.beta.numel() != C) {
    throw ShapeError("batch_norm: channel mismatch, input " + shape_str(x.shape()) + " vs " +
                     std::to_string(bn.channels()) + " parameters");
  }
  const std::size_t S = x.numel() / std::max<std::size_t>(1, N * C);
  const std::size_t count = N * S;
  if (count == 0) throw ShapeError("batch_norm: empty input");
  auto in = x.data();
  auto idx = [C, S](std::size_t n, std::size_t c, std::size_t s) { return (n * C + c) * S + s; };

  std::vector<double> mu(C), inv_std(C);
  if (mode == Mode::kTrain) {
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) m += in[idx(n, c, s)];
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) {
          const double d = in[idx(n, c, s)] - m;
          v += d * d;
        }
      const double var = v / static_cast<double>(count);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + bn.eps);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
      bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * m;
      bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = bn.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(bn.running_var[c] + bn.eps);
    }
  }

  auto gamma = bn.gamma.data();
  auto beta = bn.beta.data();
  std::vector<double> out(in.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = idx(n, c, s);
        out[i] = gamma[c] * ((in[i] - mu[c]) * inv_std[c]) + beta[c];
      }

  const bool train = mode == Mode::kTrain;
  return Tensor::make_result(
      x.shape(), std::move(out), {x, bn.gamma, bn.beta},
      [N, C, S, count, mu = std::move(mu), inv_std = std::move(inv_std), train](const OpContext& ctx) {
        auto g = ctx.grad_output();
        auto in = ctx.input(0);
        auto gamma = ctx.input(1);
        auto idx = [C, S](std::size_t n, std::size_t c, std::size_t s) { return (n * C + c) * S + s; };
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t s = 0; s < S; ++s) {
              const std::size_t i = idx(n, c, s);
              sum_g += g[i];
              sum_gx += g[i] * (in[i] - mu[c]) * inv_std[c];
            }
          if (ctx.wants_grad(1)) ctx.input_grad(1)[c] += sum_gx;
          if (ctx.wants_grad(2)) ctx.input_grad(2)[c] += sum_g;
          if (!ctx.wants_grad(0)) continue;
          auto gx = ctx.input_grad(0);
          const double k = gamma[c] * inv_std[c];
          if (train) {
            const double inv_n = 1.0 / static_cast<double>(count);
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t s = 0; s < S; ++s) {
                const std::size_t i = idx(n, c, s);
                const double xhat = (in[i] - mu[c]) * inv_std[c];
                gx[i] += k * (g[i] - inv_n * sum_g - xhat * inv_n * sum_gx);
              }
          } else {
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t s = 0; s < S; ++s) gx[idx(n, c, s)] += k * g[idx(n, c, s)];
          }
        }
      });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& p : parts) require_rank(p, 4, "concat_channels");
  const std::size_t N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  std::size_t C = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.dim(0) != N || p.dim(2) != H || p.dim(3) != W) {
      throw ShapeError("concat_channels: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                       shape_str(p.shape()));
    }
    offsets.push_back(C);
    C += p.dim(1);
  }
  const std::size_t plane = H * W;
  std::vector<double> out(N * C * plane);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto d = parts[k].data();
    const std::size_t ck = parts[k].dim(1);
    for (std::size_t n = 0; n < N; ++n) {
      std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(n * ck * plane), ck * plane,
                  out.begin() + static_cast<std::ptrdiff_t>((n * C + offsets[k]) * plane));
    }
  }
  return Tensor::make_result({N, C, H, W}, std::move(out), parts, [N, C, plane, offsets](const OpContext& ctx) {
    auto g = ctx.grad_output();
    for (std::size_t k = 0; k < ctx.num_inputs(); ++k) {
      if (!ctx.wants_grad(k)) continue;
      const std::size_t ck = ctx.input_shape(k)[1];
      auto gi = ctx.input_grad(k);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < ck * plane; ++j) gi[n * ck * plane + j] += g[(n * C + offsets[k]) * plane + j];
    }
  });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding) {
  require_rank(x, 4, "max_pool2d");
  if (kernel < 1 || stride < 1 || padding < 0) throw ShapeError("max_pool2d: invalid parameters");
  const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1));
  const int H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
  const int Ho = (H + 2 * padding - kernel) / stride + 1;
  const int Wo = (W + 2 * padding - kernel) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("max_pool2d: kernel larger than input");
  auto in = x.data();
  std::vector<double> out(static_cast<std::size_t>(N) * C * Ho * Wo);
  std::size_t o = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const double* plane = in.data() + static_cast<std::size_t>(nc) * H * W;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double m = -std::numeric_limits<double>::infinity();
        for (int ki = 0; ki < kernel; ++ki) {
          const int iy = oy * stride - padding + ki;
          if (iy < 0 || iy >= H) continue;
          for (int kj = 0; kj < kernel; ++kj) {
            const int ix = ox * stride - padding + kj;
            if (ix >= 0 && ix < W) m = std::max(m, plane[iy * W + ix]);
          }
        }
        out[o++] = m;
      }
  }
  return Tensor::from_vector({x.dim(0), x.dim(1), static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)},
                             std::move(out));
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  require_rank(x, 4, "upsample_nearest");
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t f = static_cast<std::size_t>(factor);
  const std::size_t Ho = H * f, Wo = W * f;
  auto in = x.data();
  std::vector<double> out(NC * Ho * Wo);
  for (std::size_t p = 0; p < NC; ++p)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx) out[(p * Ho + y) * Wo + xx] = in[(p * H + y / f) * W + xx / f];
  return Tensor::make_result({x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {x}, [NC, H, W, f](const OpContext& ctx) {
    if (!ctx.wants_grad(0)) return;
    auto g = ctx.grad_output();
    auto gi = ctx.input_grad(0);
    const std::size_t Ho = H * f, Wo = W * f;
    for (std::size_t p = 0; p < NC; ++p)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t xx = 0; xx < Wo; ++xx) gi[(p * H + y / f) * W + xx / f] += g[(p * Ho + y) * Wo + xx];
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  const std::size_t M = x.dim(0), in_dim = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in_dim) throw ShapeError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out_dim)) throw ShapeError("linear: bad bias shape");
  std::vector<double> out(M * out_dim);
  if (M > 0) {
    ConstMatMap xm(x.data().data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(in_dim));
    ConstMatMap wm(w.data().data(), static_cast<Eigen::Index>(out_dim), static_cast<Eigen::Index>(in_dim));
    MatMap om(out.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(out_dim));
    om.noalias() = xm * wm.transpose();
    if (bias.defined()) {
      auto b = bias.data();
      for (std::size_t j = 0; j < out_dim; ++j) om.col(static_cast<Eigen::Index>(j)).array() += b[j];
    }
  }
  return Tensor::make_result({M, out_dim}, std::move(out), {x, w, bias}, [M, in_dim, out_dim](const OpContext& ctx) {
    if (M == 0) return;
    const auto m = static_cast<Eigen::Index>(M), i = static_cast<Eigen::Index>(in_dim),
               o = static_cast<Eigen::Index>(out_dim);
    ConstMatMap go(ctx.grad_output().data(), m, o);
    if (ctx.wants_grad(0)) {
      MatMap gx(ctx.input_grad(0).data(), m, i);
      gx.noalias() += go * ConstMatMap(ctx.input(1).data(), o, i);
    }
    if (ctx.wants_grad(1)) {
      MatMap gw(ctx.input_grad(1).data(), o, i);
      gw.noalias() += go.transpose() * ConstMatMap(ctx.input(0).data(), m, i);
    }
    if (ctx.num_inputs() > 2 && ctx.wants_grad(2)) {
      auto gb = ctx.input_grad(2);
      for (Eigen::Index j = 0; j < o; ++j) gb[static_cast<std::size_t>(j)] += go.col(j).sum();
    }
  });
}

Tensor max_over_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) throw ShapeError("max_over_axis: axis out of range for " + shape_str(x.shape()));
  const Shape& s = x.shape();
  const std::size_t len = s[axis];
  if (len == 0) throw ShapeError("max_over_axis: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  auto in = x.data();
  std::vector<double> out(outer * inner);
  std::vector<std::size_t> arg(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < inner; ++k) {
      std::size_t best = (o * len) * inner + k;
      for (std::size_t a = 1; a < len; ++a) {
        const std::size_t i = (o * len + a) * inner + k;
        if (in[i] > in[best]) best = i;
      }
      out[o * inner + k] = in[best];
      arg[o * inner + k] = best;
    }
  return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [arg = std::move(arg)](const OpContext& ctx) {
    if (!ctx.wants_grad(0)) return;
    auto g = ctx.grad_output();
    auto gi = ctx.input_grad(0);
    for (std::size_t j = 0; j < arg.size(); ++j) gi[arg[j]] += g[j];
  });
}

Tensor segment_max(const Tensor& x, std::span<const std::int32_t> counts) {
  require_rank(x, 2, "segment_max");
  const std::size_t M = x.dim(0), C = x.dim(1);
  std::size_t total = 0;
  for (auto c : counts) {
    if (c <= 0) throw ShapeError("segment_max: empty segment");
    total += static_cast<std::size_t>(c);
  }
  if (total != M) throw ShapeError("segment_max: segment sizes do not sum to the row count");
  const std::size_t P = counts.size();
  auto in = x.data();
  std::vector<double> out(P * C);
  std::vector<std::size_t> arg(P * C);
  std::size_t row = 0;
  for (std::size_t p = 0; p < P; ++p) {
    const auto n = static_cast<std::size_t>(counts[p]);
    for (std::size_t c = 0; c < C; ++c) {
      std::size_t best = row * C + c;
      for (std::size_t r = 1; r < n; ++r) {
        const std::size_t i = (row + r) * C + c;
        if (in[i] > in[best]) best = i;
      }
      out[p * C + c] = in[best];
      arg[p * C + c] = best;
    }
    row += n;
  }
  return Tensor::make_result({P, C}, std::move(out), {x}, [arg = std::move(arg)](const OpContext& ctx) {
    if (!ctx.wants_grad(0)) return;
    auto g = ctx.grad_output();
    auto gi = ctx.input_grad(0);
    for (std::size_t j = 0; j < arg.size(); ++j) gi[arg[j]] += g[j];
  });
}

namespace {

std::vector<std::size_t> grid_targets(std::span<const std::int32_t> coords, std::size_t P, int width, int height,
                                      bool unique) {
  if (coords.size() != 2 * P) throw ShapeError("scatter: expected 2 coordinates per row");
  if (width < 1 || height < 1) throw ShapeError("scatter: grid dims must be positive");
  std::vector<std::size_t> cell(P);
  std::vector<bool> used(unique ? static_cast<std::size_t>(width) * height : 0, false);
  for (std::size_t p = 0; p < P; ++p) {
    const int ix = coords[2 * p], iy = coords[2 * p + 1];
    if (ix < 0 || ix >= width || iy < 0 || iy >= height) {
      throw IndexError("scatter: coordinate (" + std::to_string(ix) + "," + std::to_string(iy) + ") outside " +
                       std::to_string(width) + "x" + std::to_string(height) + " grid");
    }
    cell[p] = static_cast<std::size_t>(iy) * width + ix;
    if (unique) {
      if (used[cell[p]]) throw IndexError("scatter: duplicate coordinate");
      used[cell[p]] = true;
    }
  }
  return cell;
}

Tensor scatter_impl(const Tensor& features, std::span<const std::int32_t> coords, int width, int height,
                    double factor, bool unique) {
  require_rank(features, 2, "scatter");
  const std::size_t P = features.dim(0), C = features.dim(1);
  auto cell = grid_targets(coords, P, width, height, unique);
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  std::vector<double> out(C * plane, 0.0);
  auto f = features.data();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t c = 0; c < C; ++c) out[c * plane + cell[p]] += factor * f[p * C + c];
  return Tensor::make_result(
      {1, C, static_cast<std::size_t>(height), static_cast<std::size_t>(width)}, std::move(out), {features},
      [cell = std::move(cell), C, plane, factor](const OpContext& ctx) {
        if (!ctx.wants_grad(0)) return;
        auto g = ctx.grad_output();
        auto gf = ctx.input_grad(0);
        for (std::size_t p = 0; p < cell.size(); ++p)
          for (std::size_t c = 0; c < C; ++c) gf[p * C + c] += factor * g[c * plane + cell[p]];
      });
}

}  // namespace

Tensor scatter_to_grid(const Tensor& features, std::span<const std::int32_t> coords, int width, int height) {
  return scatter_impl(features, coords, width, height, 1.0, true);
}

Tensor scatter_add_to_grid(const Tensor& features, std::span<const std::int32_t> coords, int width, int height,
                           double factor) {
  return scatter_impl(features, coords, width, height, factor, false);
}

Tensor gather_pixels(const Tensor& map, std::span<const std::array<int, 2>> pixels) {
  require_rank(map, 4, "gather_pixels");
  if (map.dim(0) != 1) throw ShapeError("gather_pixels: batch size must be 1");
  const std::size_t C = map.dim(1), H = map.dim(2), W = map.dim(3);
  std::vector<std::size_t> offs;
  offs.reserve(pixels.size());
  for (const auto& px : pixels) {
    if (px[0] < 0 || px[1] < 0 || static_cast<std::size_t>(px[0]) >= H || static_cast<std::size_t>(px[1]) >= W) {
      throw IndexError("gather_pixels: pixel outside map");
    }
    offs.push_back(static_cast<std::size_t>(px[0]) * W + static_cast<std::size_t>(px[1]));
  }
  const std::size_t plane = H * W;
  auto m = map.data();
  std::vector<double> out(pixels.size() * C);
  for (std::size_t i = 0; i < offs.size(); ++i)
    for (std::size_t c = 0; c < C; ++c) out[i * C + c] = m[c * plane + offs[i]];
  return Tensor::make_result({pixels.size(), C}, std::move(out), {map},
                             [offs = std::move(offs), C, plane](const OpContext& ctx) {
                               if (!ctx.wants_grad(0)) return;
                               auto g = ctx.grad_output();
                               auto gm = ctx.input_grad(0);
                               for (std::size_t i = 0; i < offs.size(); ++i)
                                 for (std::size_t c = 0; c < C; ++c) gm[c * plane + offs[i]] += g[i * C + c];
                             });
}

Tensor bilinear_sample(const Tensor& map, const Tensor& grid) {
  require_rank(map, 4, "bilinear_sample map");
  require_rank(grid, 4, "bilinear_sample grid");
  const std::size_t N = map.dim(0), C = map.dim(1), H = map.dim(2), W = map.dim(3);
  if (grid.dim(0) != N || grid.dim(3) != 2) {
    throw ShapeError("bilinear_sample: grid " + shape_str(grid.shape()) + " incompatible with map " +
                     shape_str(map.shape()));
  }
  const std::size_t Ho = grid.dim(1), Wo = grid.dim(2);

  // Per output location: up to four (source offset, weight) taps.
  struct Tap {
    std::size_t src;
    double weight;
  };
  std::vector<std::array<Tap, 4>> taps(N * Ho * Wo);
  std::vector<std::uint8_t> ntaps(N * Ho * Wo, 0);
  auto gd = grid.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < Ho * Wo; ++i) {
      const std::size_t o = n * Ho * Wo + i;
      const double sx = gd[2 * o], sy = gd[2 * o + 1];
      if (!std::isfinite(sx) || !std::isfinite(sy)) continue;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      if (fx0 < -1.0 || fy0 < -1.0 || fx0 > static_cast<double>(W) || fy0 > static_cast<double>(H)) continue;
      const auto x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      const double ax = sx - fx0, ay = sy - fy0;
      const std::array<long, 4> xs{x0, x0 + 1, x0, x0 + 1};
      const std::array<long, 4> ys{y0, y0, y0 + 1, y0 + 1};
      const std::array<double, 4> ws{(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay};
      for (int k = 0; k < 4; ++k) {
        if (ws[k] == 0.0) continue;
        if (xs[k] < 0 || ys[k] < 0 || xs[k] >= static_cast<long>(W) || ys[k] >= static_cast<long>(H)) continue;
        taps[o][ntaps[o]++] = {static_cast<std::size_t>(ys[k]) * W + static_cast<std::size_t>(xs[k]), ws[k]};
      }
    }

  auto m = map.data();
  const std::size_t in_plane = H * W, out_plane = Ho * Wo;
  std::vector<double> out(N * C * out_plane, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = m.data() + (n * C + c) * in_plane;
      double* dst = out.data() + (n * C + c) * out_plane;
      for (std::size_t i = 0; i < out_plane; ++i) {
        const std::size_t o = n * out_plane + i;
        double v = 0.0;
        for (std::uint8_t k = 0; k < ntaps[o]; ++k) v += taps[o][k].weight * src[taps[o][k].src];
        dst[i] = v;
      }
    }
  return Tensor::make_result({N, C, Ho, Wo}, std::move(out), {map, grid},
                             [taps = std::move(taps), ntaps = std::move(ntaps), N, C, in_plane,
                              out_plane](const OpContext& ctx) {
                               if (!ctx.wants_grad(0)) return;
                               auto g = ctx.grad_output();
                               auto gm = ctx.input_grad(0);
                               for (std::size_t n = 0; n < N; ++n)
                                 for (std::size_t c = 0; c < C; ++c) {
                                   double* dst = gm.data() + (n * C + c) * in_plane;
                                   const double* go = g.data() + (n * C + c) * out_plane;
                                   for (std::size_t i = 0; i < out_plane; ++i) {
                                     const std::size_t o = n * out_plane + i;
                                     for (std::uint8_t k = 0; k < ntaps[o]; ++k)
                                       dst[taps[o][k].src] += taps[o][k].weight * go[i];
                                   }
                                 }
                             });
}

}  // namespace fmfnet
