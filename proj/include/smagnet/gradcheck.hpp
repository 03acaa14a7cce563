#pragma once

#include <functional>
#include <string>
#include <vector>

#include "smagnet/rng.hpp"
#include "smagnet/tensor.hpp"

namespace smagnet {

using ScalarClosure = std::function<Tensor64(const std::vector<Tensor64>&)>;

// Compares reverse-mode gradients of a scalar closure against central
// differences over every coordinate of every requires_grad input. Returns
// max |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double grad_check(const ScalarClosure& f, std::vector<Tensor64>& inputs, double step = 1e-3);

struct GradCase {
  std::vector<Tensor64> inputs;
  ScalarClosure fn;
};

struct OpCase {
  std::string name;
  // Builds a random instance; `variant` selects among small shape families.
  std::function<GradCase(Rng&, int variant)> make;
};

// One entry per differentiable operator. Inputs avoid kinks (relu at 0,
// max-pool ties) by more than the finite-difference step.
std::vector<OpCase> registered_ops();

// gate_map -> smag_fuse -> decoder_block with every feature map, gate and
// block parameter as a checked input. `mode_index` selects the fusion mode
// (0 complementary, 1 independent, 2 cross).
GradCase fusion_decoder_case(Rng& rng, int mode_index = 0);

// Random tensor with entries uniform in [lo, hi].
Tensor64 random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true);

// sum(out * weights) with fixed random weights, turning any op into a scalar.
Tensor64 weighted_sum(const Tensor64& out, Rng& rng);

}  // namespace smagnet
