#include <doctest.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "smagnet/ops.hpp"

using namespace smagnet;
using testutil::max_abs_diff;
using testutil::rand_tensor;

namespace {

// Direct sliding-window sum, accumulated in double.
std::vector<double> conv_oracle(const Tensor64& x, const Tensor64& w, const Tensor64& b, int stride, int pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(B * O * Ho * Wo);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double s = b.defined() ? b.data()[o] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = long(i * stride + u) - pad, q = long(j * stride + v) - pad;
                if (r < 0 || q < 0 || r >= long(H) || q >= long(W)) continue;
                s += x.at(n, c, r, q) * w.at(o, c, u, v);
              }
          out[((n * O + o) * Ho + i) * Wo + j] = s;
        }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_SUITE("tensor-autodiff") {
  TEST_CASE("conv2d matches the nested-loop oracle on random shapes") {
    Rng rng(11);
    for (int t = 0; t < 20; ++t) {
      const std::size_t B = 1 + rng.index(2), C = 1 + rng.index(4), O = 1 + rng.index(4);
      const std::size_t k = 1 + rng.index(3);
      const int stride = 1 + int(rng.index(2)), pad = int(rng.index(2));
      const std::size_t H = k + rng.index(6), W = k + rng.index(6);
      auto x = rand_tensor<double>(rng, {B, C, H, W});
      auto w = rand_tensor<double>(rng, {O, C, k, k});
      auto b = t % 3 == 0 ? Tensor64{} : rand_tensor<double>(rng, {O});
      const auto ref = conv_oracle(x, w, b, stride, pad);
      const auto y = ops::conv2d(x, w, b, stride, pad);
      CHECK(y.dim(2) == (H + 2 * pad - k) / stride + 1);
      CHECK(max_abs_diff(y.data(), ref) <= 1e-12);
      // 32-bit path against the same oracle.
      const auto yf = ops::conv2d(x.cast<float>(), w.cast<float>(), b.defined() ? b.cast<float>() : Tensor{}, stride, pad);
      double err = 0;
      for (std::size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::fabs(double(yf.data()[i]) - ref[i]));
      CHECK(err <= 1e-6);
    }
  }

  TEST_CASE("conv2d rejects channel mismatch naming both shapes") {
    auto x = Tensor::zeros({1, 3, 5, 5});
    auto w = Tensor::zeros({2, 4, 3, 3});
    try {
      ops::conv2d(x, w, Tensor{});
      FAIL("expected an exception");
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[1,3,5,5]") != std::string::npos);
      CHECK(msg.find("[2,4,3,3]") != std::string::npos);
    }
  }

  TEST_CASE("conv_transpose2d is the adjoint of the strided conv2d") {
    Rng rng(5);
    for (int t = 0; t < 5; ++t) {
      const std::size_t Ci = 1 + rng.index(3), Co = 1 + rng.index(3), H = 2 + rng.index(4), W = 2 + rng.index(4);
      auto x = rand_tensor<double>(rng, {1, Ci, H, W});
      auto w = rand_tensor<double>(rng, {Ci, Co, 2, 2});
      auto y = ops::conv_transpose2d(x, w, Tensor64{}, 2);
      REQUIRE(y.shape() == Shape{1, Co, 2 * H, 2 * W});
      auto z = rand_tensor<double>(rng, y.shape());
      // <T x, z> == <x, T* z> where T* is conv2d with the same weights.
      const auto adj = ops::conv2d(z, w, Tensor64{}, 2, 0);
      CHECK(std::fabs(dot(y.data(), z.data()) - dot(x.data(), adj.data())) <= 1e-10);
    }
  }

  TEST_CASE("conv_transpose2d scatters each input pixel into a kernel-sized block") {
    auto x = Tensor64::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto w = Tensor64::from({1, 1, 2, 2}, {1, 10, 100, 1000});
    auto b = Tensor64::from({1}, {0.5});
    auto y = ops::conv_transpose2d(x, w, b, 2);
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(1.5));
    CHECK(y.at(0, 0, 1, 1) == doctest::Approx(1000.5));
    CHECK(y.at(0, 0, 0, 3) == doctest::Approx(20.5));
    CHECK(y.at(0, 0, 3, 3) == doctest::Approx(4000.5));
  }

  TEST_CASE("pooling returns window means and maxima") {
    auto x = Tensor64::from({1, 1, 2, 4}, {1, 2, 5, 6, 3, 4, 7, 9});
    auto avg = ops::pool2d(ops::PoolKind::avg, x, 2, 2);
    auto mx = ops::pool2d(ops::PoolKind::max, x, 2, 2);
    CHECK(avg.data()[0] == doctest::Approx(2.5));
    CHECK(avg.data()[1] == doctest::Approx(6.75));
    CHECK(mx.data()[0] == 4);
    CHECK(mx.data()[1] == 9);
    CHECK_THROWS_AS(ops::pool2d(ops::PoolKind::max, x, 3, 1), std::invalid_argument);
  }

  TEST_CASE("max-pool backward routes to the first maximum on ties") {
    auto x = Tensor64::from({1, 1, 2, 2}, {3, 3, 3, 1}, true);
    backward(ops::sum(ops::pool2d(ops::PoolKind::max, x, 2, 2)));
    CHECK(x.grad()[0] == 1);
    CHECK(x.grad()[1] == 0);
    CHECK(x.grad()[2] == 0);
    CHECK(x.grad()[3] == 0);
  }

  TEST_CASE("sigmoid stays strictly inside (0,1) and BCE stays finite") {
    std::vector<float> logits;
    for (int i = -100; i <= 100; ++i) logits.push_back(float(i));
    auto l = Tensor::from({1, 1, 1, logits.size()}, logits);
    const auto s = ops::sigmoid(l);
    for (float v : s.data()) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
    for (float target : {0.0f, 1.0f}) {
      auto y = Tensor::full(l.shape(), target);
      CHECK(std::isfinite(ops::bce_with_logits(l, y).item()));
    }
  }

  TEST_CASE("bce_with_logits reference values") {
    auto one = Tensor64::from({1, 1, 1, 1}, {1.0});
    CHECK(ops::bce_with_logits(Tensor64::from({1, 1, 1, 1}, {0.0}), one).item() == doctest::Approx(std::log(2.0)));
    const double sat = ops::bce_with_logits(Tensor64::from({1, 1, 1, 1}, {40.0}), one).item();
    CHECK(std::isfinite(sat));
    CHECK(sat < 1e-15);
    CHECK_THROWS_AS(ops::bce_with_logits(one, Tensor64::from({1, 1, 1, 1}, {1.5})), std::invalid_argument);
  }

  TEST_CASE("bce_with_logits matches the probability-space formula") {
    Rng rng(3);
    auto l = rand_tensor<double>(rng, {2, 1, 4, 4}, -4, 4);
    auto y = rand_tensor<double>(rng, {2, 1, 4, 4}, 0, 1);
    double naive = 0;
    for (std::size_t i = 0; i < l.numel(); ++i) {
      const double p = 1 / (1 + std::exp(-l.data()[i]));
      naive -= y.data()[i] * std::log(p) + (1 - y.data()[i]) * std::log(1 - p);
    }
    naive /= double(l.numel());
    const double got = ops::bce_with_logits(l, y).item();
    CHECK(std::fabs(got - naive) / std::fabs(naive) <= 1e-6);
  }

  TEST_CASE("binary ops broadcast a single channel") {
    auto a = Tensor64::from({1, 2, 1, 2}, {1, 2, 3, 4});
    auto m = Tensor64::from({1, 1, 1, 2}, {10, 100});
    auto p = ops::mul(a, m);
    CHECK(p.data()[0] == 10);
    CHECK(p.data()[1] == 200);
    CHECK(p.data()[2] == 30);
    CHECK(p.data()[3] == 400);
    auto q = ops::add(m, a);
    CHECK(q.data()[3] == 104);
    CHECK_THROWS_AS(ops::add(a, Tensor64::zeros({1, 3, 1, 2})), std::invalid_argument);
  }

  TEST_CASE("concat and slice are inverse") {
    Rng rng(2);
    auto a = rand_tensor<double>(rng, {2, 2, 3, 3});
    auto b = rand_tensor<double>(rng, {2, 3, 3, 3});
    auto c = ops::concat_channels(a, b);
    CHECK(c.shape() == Shape{2, 5, 3, 3});
    CHECK(max_abs_diff(ops::slice_channels(c, 0, 2).data(), a.data()) == 0);
    CHECK(max_abs_diff(ops::slice_channels(c, 2, 5).data(), b.data()) == 0);
  }

  TEST_CASE("norm_layer standardizes per channel and tracks running statistics") {
    Rng rng(9);
    auto x = rand_tensor<double>(rng, {4, 2, 3, 3}, 2, 6);
    auto gamma = Tensor64::full({2}, 1.0);
    auto beta = Tensor64::zeros({2});
    ops::NormStatsBuffer<double> run{{0, 0}, {1, 1}};
    auto y = ops::norm_layer(x, gamma, beta, &run, ops::NormMode::batch_stats);
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0, ss = 0, xs = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 9; ++i) {
          const double v = y.data()[(n * 2 + c) * 9 + i];
          s += v;
          ss += v * v;
          xs += x.data()[(n * 2 + c) * 9 + i];
        }
      CHECK(std::fabs(s / 36) < 1e-12);
      CHECK(ss / 36 == doctest::Approx(1.0).epsilon(1e-4));
      CHECK(run.mean[c] == doctest::Approx(0.1 * xs / 36));
    }
    // Running mode normalizes with the stored statistics and leaves them alone.
    auto before = run;
    auto z = ops::norm_layer(x, gamma, beta, &run, ops::NormMode::running_stats);
    CHECK(run.mean == before.mean);
    CHECK(z.data()[0] == doctest::Approx((x.data()[0] - run.mean[0]) / std::sqrt(run.var[0] + 1e-5)));
  }

  TEST_CASE("backward of sum of squares is 2x") {
    Rng rng(1);
    auto x = rand_tensor<double>(rng, {1, 1, 2, 3}, -1, 1, true);
    auto unused = rand_tensor<double>(rng, {1, 1, 2, 3}, -1, 1, true);
    backward(ops::sum(ops::mul(x, x)));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]));
    for (std::size_t i = 0; i < unused.numel(); ++i) CHECK((!unused.has_grad() || unused.grad()[i] == 0));
  }

  TEST_CASE("gradients accumulate across fan-out and repeated calls") {
    Rng rng(4);
    auto x = rand_tensor<double>(rng, {1, 1, 2, 2}, -1, 1, true);
    auto f = [&] { return ops::sum(ops::mul(x, x)); };
    auto g = [&] { return ops::sum(ops::sigmoid(x)); };
    backward(ops::add(f(), g()));
    std::vector<double> both(x.grad().begin(), x.grad().end());
    x.zero_grad();
    backward(f());
    std::vector<double> gf(x.grad().begin(), x.grad().end());
    x.zero_grad();
    backward(g());
    for (std::size_t i = 0; i < both.size(); ++i) CHECK(std::fabs(both[i] - (gf[i] + x.grad()[i])) <= 1e-7);
    // A second call without reset adds the same gradient again.
    std::vector<double> once(x.grad().begin(), x.grad().end());
    backward(g());
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * once[i]));
  }

  TEST_CASE("backward rejects a non-scalar root") {
    auto x = Tensor64::zeros({1, 1, 2, 2}, true);
    CHECK_THROWS_AS(backward(ops::relu(x)), std::invalid_argument);
  }

  TEST_CASE("no graph is recorded under NoGradGuard") {
    auto x = Tensor64::zeros({1, 1, 2, 2}, true);
    NoGradGuard guard;
    auto y = ops::relu(x);
    CHECK_FALSE(y.requires_grad());
  }
}
