#include "smagnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "smagnet/decoder.hpp"
#include "smagnet/fusion.hpp"
#include "smagnet/ops.hpp"

namespace smagnet {

double grad_check(const ScalarClosure& f, std::vector<Tensor64>& inputs, double step) {
  for (auto& t : inputs) {
    if (t.requires_grad()) t.zero_grad();
  }
  backward(f(inputs));
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    auto values = t.mutable_data();
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + step;
      const double fp = f(inputs).item();
      values[i] = orig - step;
      const double fm = f(inputs).item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = std::abs(analytic[i] - numeric) /
                         std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

Tensor64 random_tensor(Rng& rng, Shape shape, double lo, double hi, bool requires_grad) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor64::from(std::move(shape), std::move(v), requires_grad);
}

Tensor64 weighted_sum(const Tensor64& out, Rng& rng) {
  return ops::sum(ops::mul(out, random_tensor(rng, out.shape(), -1.0, 1.0, false)));
}

namespace {

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

// Values bounded away from zero so relu has no kink within the step.
Tensor64 away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = (rng.coin() ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return Tensor64::from(std::move(shape), std::move(v), true);
}

// Distinct values spaced 0.05 apart so no max-pool window has a near tie.
Tensor64 distinct_values(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng.engine());
  for (auto& x : v) x = 0.05 * x - 1.0;
  return Tensor64::from(std::move(shape), std::move(v), true);
}

// Wraps a tensor-valued op into a scalar closure with frozen random weights.
ScalarClosure projected(std::function<Tensor64(const std::vector<Tensor64>&)> op, Rng& rng) {
  auto weights = std::make_shared<Tensor64>();
  auto seed = rng.engine()();
  return [op = std::move(op), weights, seed](const std::vector<Tensor64>& in) {
    Tensor64 out = op(in);
    if (!weights->defined()) {
      Rng local(seed);
      *weights = random_tensor(local, out.shape(), -1.0, 1.0, false);
    }
    return ops::sum(ops::mul(out, *weights));
  };
}

}  // namespace

std::vector<OpCase> registered_ops() {
  std::vector<OpCase> cases;

  cases.push_back({"conv2d", [](Rng& rng, int variant) {
                     const int stride = 1 + variant % 2;
                     const int pad = variant == 2 ? 0 : 1;
                     const std::size_t k = variant == 1 ? 1 : 3;
                     Shape xs{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 4, 6), pick(rng, 4, 6)};
                     auto x = random_tensor(rng, xs);
                     auto w = random_tensor(rng, {pick(rng, 1, 3), xs[1], k, k});
                     auto b = random_tensor(rng, {w.dim(0)});
                     return GradCase{{x, w, b}, projected([stride, pad](const auto& in) {
                                       return ops::conv2d(in[0], in[1], in[2], stride, pad);
                                     }, rng)};
                   }});

  cases.push_back({"conv_transpose2d", [](Rng& rng, int variant) {
                     const int stride = variant == 2 ? 1 : 2;
                     const std::size_t k = variant == 1 ? 3 : 2;
                     Shape xs{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 4), pick(rng, 2, 4)};
                     auto x = random_tensor(rng, xs);
                     auto w = random_tensor(rng, {xs[1], pick(rng, 1, 3), k, k});
                     auto b = random_tensor(rng, {w.dim(1)});
                     return GradCase{{x, w, b}, projected([stride](const auto& in) {
                                       return ops::conv_transpose2d(in[0], in[1], in[2], stride);
                                     }, rng)};
                   }});

  cases.push_back({"max_pool2d", [](Rng& rng, int variant) {
                     const int k = variant == 1 ? 3 : 2;
                     const int s = variant == 2 ? 1 : 2;
                     auto x = distinct_values(rng, {pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 4, 6), pick(rng, 4, 6)});
                     return GradCase{{x}, projected([k, s](const auto& in) {
                                       return ops::pool2d(ops::PoolKind::max, in[0], k, s);
                                     }, rng)};
                   }});

  cases.push_back({"avg_pool2d", [](Rng& rng, int variant) {
                     const int k = variant == 1 ? 3 : 2;
                     const int s = variant == 2 ? 1 : 2;
                     auto x = random_tensor(rng, {pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 4, 6), pick(rng, 4, 6)});
                     return GradCase{{x}, projected([k, s](const auto& in) {
                                       return ops::pool2d(ops::PoolKind::avg, in[0], k, s);
                                     }, rng)};
                   }});

  cases.push_back({"relu", [](Rng& rng, int) {
                     auto x = away_from_zero(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)});
                     return GradCase{{x}, projected([](const auto& in) { return ops::relu(in[0]); }, rng)};
                   }});

  cases.push_back({"sigmoid", [](Rng& rng, int) {
                     auto x = random_tensor(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)}, -4, 4);
                     return GradCase{{x}, projected([](const auto& in) { return ops::sigmoid(in[0]); }, rng)};
                   }});

  cases.push_back({"affine", [](Rng& rng, int) {
                     auto x = random_tensor(rng, {pick(rng, 1, 2), 1, pick(rng, 2, 5), pick(rng, 2, 5)});
                     const double scale = rng.uniform(-2, 2), shift = rng.uniform(-1, 1);
                     return GradCase{{x}, projected([scale, shift](const auto& in) {
                                       return ops::affine(in[0], scale, shift);
                                     }, rng)};
                   }});

  // Variant 0: equal shapes; 1: right operand broadcast; 2: left operand broadcast.
  for (auto kind : {ops::Binary::add, ops::Binary::mul}) {
    cases.push_back({kind == ops::Binary::add ? "add" : "mul", [kind](Rng& rng, int variant) {
                       Shape full{pick(rng, 1, 2), pick(rng, 2, 3), pick(rng, 2, 4), pick(rng, 2, 4)};
                       Shape narrow{full[0], 1, full[2], full[3]};
                       auto a = random_tensor(rng, variant == 2 ? narrow : full);
                       auto b = random_tensor(rng, variant == 1 ? narrow : full);
                       return GradCase{{a, b}, projected([kind](const auto& in) {
                                         return ops::binary(kind, in[0], in[1]);
                                       }, rng)};
                     }});
  }

  cases.push_back({"concat_channels", [](Rng& rng, int) {
                     const std::size_t B = pick(rng, 1, 2), H = pick(rng, 2, 4), W = pick(rng, 2, 4);
                     auto a = random_tensor(rng, {B, pick(rng, 1, 3), H, W});
                     auto b = random_tensor(rng, {B, pick(rng, 1, 3), H, W});
                     return GradCase{{a, b}, projected([](const auto& in) {
                                       return ops::concat_channels(in[0], in[1]);
                                     }, rng)};
                   }});

  cases.push_back({"slice_channels", [](Rng& rng, int) {
                     const std::size_t C = pick(rng, 2, 4);
                     auto x = random_tensor(rng, {pick(rng, 1, 2), C, pick(rng, 2, 4), pick(rng, 2, 4)});
                     const std::size_t begin = rng.index(C), end = begin + 1 + rng.index(C - begin);
                     return GradCase{{x}, projected([begin, end](const auto& in) {
                                       return ops::slice_channels(in[0], begin, end);
                                     }, rng)};
                   }});

  for (auto mode : {ops::NormMode::batch_stats, ops::NormMode::running_stats}) {
    cases.push_back({mode == ops::NormMode::batch_stats ? "norm_layer/batch" : "norm_layer/running",
                     [mode](Rng& rng, int) {
                       const std::size_t C = pick(rng, 1, 3);
                       auto x = random_tensor(rng, {pick(rng, 2, 3), C, pick(rng, 2, 4), pick(rng, 2, 4)}, -2, 2);
                       auto gamma = random_tensor(rng, {C}, 0.5, 1.5);
                       auto beta = random_tensor(rng, {C});
                       auto running = std::make_shared<ops::NormStatsBuffer<double>>();
                       for (std::size_t c = 0; c < C; ++c) {
                         running->mean.push_back(rng.uniform(-0.5, 0.5));
                         running->var.push_back(rng.uniform(0.5, 2.0));
                       }
                       return GradCase{{x, gamma, beta}, projected([mode, running](const auto& in) {
                                         return ops::norm_layer(in[0], in[1], in[2], running.get(), mode, false);
                                       }, rng)};
                     }});
  }

  cases.push_back({"bce_with_logits", [](Rng& rng, int variant) {
                     Shape s{pick(rng, 1, 2), 1, pick(rng, 2, 5), pick(rng, 2, 5)};
                     auto z = random_tensor(rng, s, -5, 5);
                     // Variant 2 uses soft targets.
                     std::vector<double> y(numel(s));
                     for (auto& v : y) v = variant == 2 ? rng.uniform() : (rng.coin() ? 1.0 : 0.0);
                     auto t = Tensor64::from(s, y, false);
                     return GradCase{{z, t}, [](const auto& in) { return ops::bce_with_logits(in[0], in[1]); }};
                   }});

  cases.push_back({"sum", [](Rng& rng, int) {
                     auto x = random_tensor(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 4), pick(rng, 2, 4)});
                     return GradCase{{x}, [](const auto& in) {
                                       return ops::sum(ops::mul(in[0], in[0]));
                                     }};
                   }});

  return cases;
}

GradCase fusion_decoder_case(Rng& rng, int mode_index) {
  const auto mode = static_cast<nn::FusionMode>(mode_index);
  const std::size_t c = 3, h = 2, skip_c = 2, out_c = 2;
  GradCase g;
  // Inputs: f_sar, f_msi, skip, gate convs (weight, bias) x2, up (w, b),
  // conv1 (w, b), conv2 (w, b). The mask is fixed and includes a zero.
  g.inputs.push_back(random_tensor(rng, {1, c, h, h}));
  g.inputs.push_back(random_tensor(rng, {1, c, h, h}));
  g.inputs.push_back(random_tensor(rng, {1, skip_c, 2 * h, 2 * h}));
  const std::size_t gate_in = mode == nn::FusionMode::cross ? c : 2 * c;
  for (int k = 0; k < 2; ++k) {
    g.inputs.push_back(random_tensor(rng, {1, gate_in, 1, 1}));
    g.inputs.push_back(random_tensor(rng, {1}));
  }
  g.inputs.push_back(random_tensor(rng, {c, out_c, 2, 2}));
  g.inputs.push_back(random_tensor(rng, {out_c}));
  g.inputs.push_back(random_tensor(rng, {out_c, out_c + skip_c, 3, 3}));
  g.inputs.push_back(random_tensor(rng, {out_c}));
  g.inputs.push_back(random_tensor(rng, {out_c, out_c, 3, 3}));
  g.inputs.push_back(random_tensor(rng, {out_c}));
  const auto mask = Tensor64::from({1, 1, h, h}, {0.0, 0.25, 1.0, 0.75});
  auto weights = random_tensor(rng, {1, out_c, 2 * h, 2 * h}, -1.0, 1.0, false);
  g.fn = [mode, mask, weights](const std::vector<Tensor64>& in) {
    nn::Conv2d<double> gate_a, gate_b;
    gate_a.weight = in[3];
    gate_a.bias = in[4];
    gate_b.weight = in[5];
    gate_b.bias = in[6];
    nn::DecoderBlock<double> block;
    block.up.weight = in[7];
    block.up.bias = in[8];
    block.conv1.weight = in[9];
    block.conv1.bias = in[10];
    block.conv1.pad = 1;
    block.conv2.weight = in[11];
    block.conv2.bias = in[12];
    block.conv2.pad = 1;
    nn::FuseResult<double> r;
    if (mode == nn::FusionMode::complementary) {
      r = nn::smag_fuse(in[0], in[1], nn::gate_map(in[0], in[1], gate_a), mask, mode);
    } else if (mode == nn::FusionMode::independent) {
      r = nn::smag_fuse(in[0], in[1], nn::gate_map(in[0], in[1], gate_a), mask, mode,
                        nn::gate_map(in[0], in[1], gate_b));
    } else {
      r = nn::smag_fuse(in[0], in[1], nn::gate_map(in[0], Tensor64{}, gate_a), mask, mode,
                        nn::gate_map(in[1], Tensor64{}, gate_b));
    }
    return ops::sum(ops::mul(block(r.fused, in[2]), weights));
  };
  return g;
}

}  // namespace smagnet
