#include <doctest.h>

#include <cmath>
#include <set>
#include <unordered_set>

#include "helpers.hpp"
#include "smagnet/model.hpp"
#include "smagnet/training.hpp"

using namespace smagnet;
using namespace smagnet::nn;
using testutil::conv_ref;
using testutil::max_abs_diff;
using testutil::rand_tensor;

namespace {

template <class T>
std::set<const void*> identities(const ParamList<T>& params) {
  std::set<const void*> out;
  for (const auto& [name, p] : params) out.insert(p.node());
  return out;
}

// Leaves reachable from `root`.
template <class T>
std::unordered_set<const void*> reachable_leaves(const BasicTensor<T>& root) {
  std::unordered_set<const void*> seen, leaves;
  std::vector<Node<T>*> stack{root.node()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (n->parents.empty()) leaves.insert(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  return leaves;
}

template <class T>
Batch<T> random_batch(Rng& rng, std::size_t B, std::size_t S, double valid_fraction) {
  Batch<T> b;
  b.sar = rand_tensor<T>(rng, {B, 2, S, S});
  b.msi = rand_tensor<T>(rng, {B, 4, S, S});
  std::vector<T> v(B * S * S), l(B * S * S);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = rng.uniform() < valid_fraction ? T(1) : T(0);
    l[i] = rng.uniform() < 0.3 ? T(1) : T(0);
  }
  b.validity = BasicTensor<T>::from({B, 1, S, S}, v);
  b.label = BasicTensor<T>::from({B, 1, S, S}, l);
  return b;
}

// BN in inference form, written out per element.
std::vector<double> norm_ref(const std::vector<double>& x, std::size_t B, std::size_t C, std::size_t P,
                             const Norm2d<double>& n) {
  std::vector<double> y(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const double v = x[(b * C + c) * P + p];
        y[(b * C + c) * P + p] =
            n.gamma.data()[c] * (v - n.running.mean[c]) / std::sqrt(n.running.var[c] + 1e-5) + n.beta.data()[c];
      }
  return y;
}

void randomize_norm(Norm2d<double>& n, Rng& rng) {
  for (auto& g : n.gamma.mutable_data()) g = rng.uniform(0.5, 1.5);
  for (auto& b : n.beta.mutable_data()) b = rng.uniform(-0.5, 0.5);
  for (auto& m : n.running.mean) m = rng.uniform(-0.3, 0.3);
  for (auto& v : n.running.var) v = rng.uniform(0.5, 2.0);
}

}  // namespace

TEST_SUITE("network") {
  TEST_CASE("residual block with a zero residual branch is relu of the input") {
    Rng rng(1);
    ResidualBlock<double> block(4, 4, 1, false, NormKind::batch, rng);
    CHECK_FALSE(block.has_proj);
    for (auto* c : {&block.conv1, &block.conv2})
      for (auto& w : c->weight.mutable_data()) w = 0;
    auto x = rand_tensor<double>(rng, {2, 4, 6, 6});
    auto y = block(x, true);
    auto r = ops::relu(x);
    CHECK(max_abs_diff(y.data(), r.data()) == 0);
    ResidualBlock<double> down(4, 8, 2, false, NormKind::batch, rng);
    CHECK(down(x, true).shape() == Shape{2, 8, 3, 3});
  }

  TEST_CASE("residual blocks match a straight-line oracle") {
    Rng rng(2);
    for (bool bottleneck : {false, true}) {
      ResidualBlock<double> block(8, 16, 2, bottleneck, NormKind::batch, rng);
      for (auto* n : {&block.norm1, &block.norm2, &block.norm3, &block.proj_norm})
        if (n->gamma.defined()) randomize_norm(*n, rng);
      auto x = rand_tensor<double>(rng, {1, 8, 8, 8});
      const auto y = block(x, false);
      auto relu = [](std::vector<double> v) {
        for (auto& e : v) e = std::max(0.0, e);
        return v;
      };
      auto as_tensor = [](const std::vector<double>& v, Shape s) { return Tensor64::from(std::move(s), v); };
      std::vector<double> h;
      Shape s;
      if (bottleneck) {
        h = relu(norm_ref(conv_ref(x, block.conv1.weight, Tensor64{}, 1, 0), 1, 4, 64, block.norm1));
        h = relu(norm_ref(conv_ref(as_tensor(h, {1, 4, 8, 8}), block.conv2.weight, Tensor64{}, 2, 1), 1, 4, 16,
                          block.norm2));
        h = norm_ref(conv_ref(as_tensor(h, {1, 4, 4, 4}), block.conv3.weight, Tensor64{}, 1, 0), 1, 16, 16,
                     block.norm3);
      } else {
        h = relu(norm_ref(conv_ref(x, block.conv1.weight, Tensor64{}, 2, 1), 1, 16, 16, block.norm1));
        h = norm_ref(conv_ref(as_tensor(h, {1, 16, 4, 4}), block.conv2.weight, Tensor64{}, 1, 1), 1, 16, 16,
                     block.norm2);
      }
      const auto sc = norm_ref(conv_ref(x, block.proj.weight, Tensor64{}, 2, 0), 1, 16, 16, block.proj_norm);
      for (std::size_t i = 0; i < h.size(); ++i) h[i] += sc[i];
      h = relu(h);
      CHECK(max_abs_diff(y.data(), h) <= 1e-6);
    }
  }

  TEST_CASE("tiny encoder pyramid shapes at 64x64") {
    Rng rng(3);
    Encoder<float> enc(EncoderConfig::make(Preset::tiny, 2), rng);
    NoGradGuard g;
    const auto p = enc.encode(rand_tensor<float>(rng, {1, 2, 64, 64}), false);
    const std::size_t sizes[] = {32, 16, 8, 4, 2}, widths[] = {16, 32, 64, 128, 256};
    for (std::size_t k = 0; k < 5; ++k) CHECK(p[k].shape() == Shape{1, widths[k], sizes[k], sizes[k]});
  }

  TEST_CASE("paper encoder pyramid shapes at 256x256") {
    Rng rng(4);
    Encoder<float> enc(EncoderConfig::make(Preset::paper, 4), rng);
    NoGradGuard g;
    const auto p = enc.encode(rand_tensor<float>(rng, {1, 4, 256, 256}), false);
    const std::size_t sizes[] = {128, 64, 32, 16, 8}, widths[] = {64, 256, 512, 1024, 2048};
    for (std::size_t k = 0; k < 5; ++k) CHECK(p[k].shape() == Shape{1, widths[k], sizes[k], sizes[k]});
  }

  TEST_CASE("pyramid shapes are a function of input shape and preset") {
    Rng rng(5);
    Encoder<float> enc(EncoderConfig::make(Preset::tiny, 2), rng);
    NoGradGuard g;
    for (int t = 0; t < 4; ++t) {
      const std::size_t H = 32 * (1 + rng.index(3)), W = 32 * (1 + rng.index(3));
      const auto p = enc.encode(rand_tensor<float>(rng, {1, 2, H, W}), false);
      for (std::size_t k = 0; k < 5; ++k) {
        CHECK(p[k].dim(2) == H >> (k + 1));
        CHECK(p[k].dim(3) == W >> (k + 1));
      }
    }
  }

  TEST_CASE("indivisible input extents are rejected naming the multiple") {
    Rng rng(6);
    Encoder<float> enc(EncoderConfig::make(Preset::tiny, 2), rng);
    try {
      enc.encode(Tensor::zeros({1, 2, 48, 64}), false);
      FAIL("expected an exception");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("32") != std::string::npos);
    }
  }

  TEST_CASE("identical weights and inputs give identical pyramids") {
    Rng r1(7), r2(7), rx(8);
    Encoder<float> a(EncoderConfig::make(Preset::tiny, 4), r1), b(EncoderConfig::make(Preset::tiny, 4), r2);
    auto x = rand_tensor<float>(rx, {2, 4, 32, 32});
    const auto pa = a.encode(x, true), pb = b.encode(x, true);
    for (std::size_t k = 0; k < 5; ++k) CHECK(max_abs_diff(pa[k].data(), pb[k].data()) == 0);
  }

  TEST_CASE("mask pyramid examples") {
    auto ones = Tensor64::full({1, 1, 64, 64}, 1.0);
    for (const auto& m : build_mask_pyramid(ones, {{32, 32}, {2, 2}}))
      for (double v : m.data()) CHECK(v == 1.0);
    std::vector<double> cb(16);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) cb[i * 4 + j] = double((i + j) % 2);
    const auto pooled = build_mask_pyramid(Tensor64::from({1, 1, 4, 4}, cb), {{2, 2}});
    for (double v : pooled[0].data()) CHECK(v == 0.5);
    std::vector<double> half(64 * 64, 1.0);
    for (std::size_t i = 0; i < 64; ++i)
      for (std::size_t j = 0; j < 32; ++j) half[i * 64 + j] = 0.0;
    const auto m = build_mask_pyramid(Tensor64::from({1, 1, 64, 64}, half), {{2, 2}})[0];
    CHECK(m.data()[0] == 0.0);
    CHECK(m.data()[1] == 1.0);
    CHECK_THROWS_AS(build_mask_pyramid(ones, {{5, 5}}), std::invalid_argument);
    const auto near = build_mask_pyramid(Tensor64::from({1, 1, 4, 4}, cb), {{2, 2}}, MaskDownsample::nearest)[0];
    for (double v : near.data()) CHECK(v == 0.0);
  }

  TEST_CASE("mask pyramid equals an average-pool oracle") {
    Rng rng(9);
    for (int t = 0; t < 10; ++t) {
      std::vector<float> v(2 * 64 * 64);
      for (auto& e : v) e = rng.coin() ? 1.0f : 0.0f;
      const auto val = Tensor::from({2, 1, 64, 64}, v);
      std::vector<std::pair<std::size_t, std::size_t>> shapes{{32, 32}, {16, 16}, {8, 8}, {4, 4}, {2, 2}};
      const auto pyr = build_mask_pyramid(val, shapes);
      for (std::size_t k = 0; k < shapes.size(); ++k) {
        const auto oracle = ops::pool2d(ops::PoolKind::avg, val.cast<double>(), int(64 / shapes[k].first),
                                        int(64 / shapes[k].first));
        for (std::size_t i = 0; i < oracle.numel(); ++i) CHECK(double(pyr[k].data()[i]) == oracle.data()[i]);
      }
    }
  }

  TEST_CASE("gate map examples and per-pixel oracle") {
    Rng rng(10);
    Conv2d<double> gate(6, 1, 1, 1, 0, true, rng, Init::fan_in);
    auto fs = rand_tensor<double>(rng, {1, 3, 4, 4}), fm = rand_tensor<double>(rng, {1, 3, 4, 4});
    const auto g = gate_map(fs, fm, gate);
    CHECK(g.shape() == Shape{1, 1, 4, 4});
    for (std::size_t p = 0; p < 16; ++p) {
      double s = gate.bias.data()[0];
      for (std::size_t c = 0; c < 3; ++c) {
        s += gate.weight.data()[c] * fs.data()[c * 16 + p];
        s += gate.weight.data()[3 + c] * fm.data()[c * 16 + p];
      }
      CHECK(std::fabs(g.data()[p] - 1 / (1 + std::exp(-s))) <= 1e-6);
    }
    for (auto& w : gate.weight.mutable_data()) w = 0;
    gate.bias.mutable_data()[0] = 0;
    const auto half = gate_map(fs, fm, gate);
    for (double v : half.data()) CHECK(v == 0.5);
    gate.bias.mutable_data()[0] = 40;
    const auto sat = gate_map(fs, fm, gate);
    for (double v : sat.data()) CHECK(v > 1 - 1e-12);
    CHECK_THROWS_AS(gate_map(fs, rand_tensor<double>(rng, {1, 2, 4, 4}), gate), std::invalid_argument);
  }

  TEST_CASE("smag_fuse examples") {
    Rng rng(11);
    auto fs = rand_tensor<float>(rng, {1, 3, 4, 4}), fm = rand_tensor<float>(rng, {1, 3, 4, 4});
    auto g = rand_tensor<float>(rng, {1, 1, 4, 4}, 0, 1);
    const auto r0 = smag_fuse(fs, fm, g, Tensor::zeros({1, 1, 4, 4}), FusionMode::complementary);
    for (std::size_t i = 0; i < fs.numel(); ++i) CHECK(r0.fused.data()[i] == fs.data()[i]);
    const auto r1 = smag_fuse(fs, fm, Tensor::full({1, 1, 4, 4}, 0.5f), Tensor::full({1, 1, 4, 4}, 1.0f),
                              FusionMode::complementary);
    for (std::size_t i = 0; i < fs.numel(); ++i)
      CHECK(r1.fused.data()[i] == doctest::Approx(0.5 * (fs.data()[i] + fm.data()[i])));
    CHECK_THROWS_AS(smag_fuse(fs, fm, g, g, FusionMode::independent), std::invalid_argument);
    CHECK_THROWS_AS(smag_fuse(fs, fm, g, g, FusionMode::complementary, g), std::invalid_argument);
  }

  TEST_CASE("smag_fuse matches a scalar-loop oracle in every mode") {
    Rng rng(12);
    for (auto mode : {FusionMode::complementary, FusionMode::independent, FusionMode::cross}) {
      auto fs = rand_tensor<double>(rng, {2, 3, 4, 4}), fm = rand_tensor<double>(rng, {2, 3, 4, 4});
      auto g2 = rand_tensor<double>(rng, {2, 1, 4, 4}, 0, 1), g1 = rand_tensor<double>(rng, {2, 1, 4, 4}, 0, 1);
      auto sm = rand_tensor<double>(rng, {2, 1, 4, 4}, 0, 1);
      const bool two = mode != FusionMode::complementary;
      const auto r = smag_fuse(fs, fm, g2, sm, mode, two ? g1 : Tensor64{});
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t p = 0; p < 16; ++p) {
            const std::size_t f = (b * 3 + c) * 16 + p, m = b * 16 + p;
            const double smg = sm.data()[m] * g2.data()[m];
            const double want = two ? fs.data()[f] * g1.data()[m] + fm.data()[f] * smg
                                    : fs.data()[f] * (1 - smg) + fm.data()[f] * smg;
            CHECK(std::fabs(r.fused.data()[f] - want) <= 1e-6);
          }
    }
  }

  TEST_CASE("fusion invariants on random inputs") {
    Rng rng(13);
    for (int t = 0; t < 20; ++t) {
      auto fs = rand_tensor<double>(rng, {1, 2, 4, 4}), fm = rand_tensor<double>(rng, {1, 2, 4, 4});
      auto g = rand_tensor<double>(rng, {1, 1, 4, 4}, 0, 1);
      auto sm = rand_tensor<double>(rng, {1, 1, 4, 4}, 0, 1);
      const auto r = smag_fuse(fs, fm, g, sm, FusionMode::complementary);
      for (std::size_t p = 0; p < 16; ++p) {
        const double smg = r.state.smg.data()[p];
        CHECK(smg <= sm.data()[p]);
        CHECK(smg <= g.data()[p]);
        CHECK(smg >= 0);
        CHECK(smg <= 1);
      }
      // Convexity.
      for (std::size_t i = 0; i < fs.numel(); ++i) {
        const double lo = std::min(fs.data()[i], fm.data()[i]), hi = std::max(fs.data()[i], fm.data()[i]);
        CHECK(r.fused.data()[i] >= lo - 1e-15);
        CHECK(r.fused.data()[i] <= hi + 1e-15);
      }
      // Monotone masking: a pointwise smaller mask never moves fused further from f_sar.
      std::vector<double> smaller(sm.data().begin(), sm.data().end());
      for (auto& v : smaller) v *= rng.uniform();
      const auto r2 = smag_fuse(fs, fm, g, Tensor64::from({1, 1, 4, 4}, smaller), FusionMode::complementary);
      for (std::size_t i = 0; i < fs.numel(); ++i)
        CHECK(std::fabs(r2.fused.data()[i] - fs.data()[i]) <= std::fabs(r.fused.data()[i] - fs.data()[i]) + 1e-15);
    }
  }

  TEST_CASE("no gradient reaches f_msi where the mask is zero") {
    Rng rng(14);
    FusionModule<double> ffm(FusionMode::complementary, {3, 3, 3, 3, 3}, rng);
    auto fs = rand_tensor<double>(rng, {1, 3, 4, 4}, -1, 1, true);
    auto fm = rand_tensor<double>(rng, {1, 3, 4, 4}, -1, 1, true);
    std::vector<double> mask(16, 1.0);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 2; ++j) mask[i * 4 + j] = 0.0;
    const auto r = ffm.fuse(0, fs, fm, Tensor64::from({1, 1, 4, 4}, mask));
    backward(ops::sum(ops::mul(r.fused, rand_tensor<double>(rng, r.fused.shape()))));
    bool some_live = false;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 16; ++p) {
        if (mask[p] == 0.0) CHECK(fm.grad()[c * 16 + p] == 0.0);
        else some_live = some_live || fm.grad()[c * 16 + p] != 0.0;
      }
    CHECK(some_live);
  }

  TEST_CASE("two-gate modes drop the MSI term where the mask is zero") {
    Rng rng(15);
    for (auto mode : {FusionMode::independent, FusionMode::cross}) {
      FusionModule<double> ffm(mode, {3, 3, 3, 3, 3}, rng);
      auto fs = rand_tensor<double>(rng, {1, 3, 4, 4}), fm = rand_tensor<double>(rng, {1, 3, 4, 4});
      const auto r = ffm.fuse(0, fs, fm, Tensor64::zeros({1, 1, 4, 4}));
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 16; ++p)
          CHECK(r.fused.data()[c * 16 + p] == fs.data()[c * 16 + p] * r.state.sar_gate.data()[p]);
      CHECK_FALSE(ffm.fuse(0, fs, fm, Tensor64::full({1, 1, 4, 4}, 1.0)).fused.data()[0] == r.fused.data()[0]);
    }
  }

  TEST_CASE("decoder block shapes, determinism and composition oracle") {
    Rng rng(16);
    DecoderBlock<double> block(6, 4, 5, rng);
    auto prev = rand_tensor<double>(rng, {1, 6, 8, 8}), skip = rand_tensor<double>(rng, {1, 4, 16, 16});
    const auto y = block(prev, skip);
    CHECK(y.shape() == Shape{1, 5, 16, 16});
    CHECK(max_abs_diff(block(prev, skip).data(), y.data()) == 0);
    // Oracle: scatter up-conv, concat, two padded convs with relu.
    std::vector<double> up(5 * 16 * 16);
    for (std::size_t o = 0; o < 5; ++o)
      for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j) {
          double s = block.up.bias.data()[o];
          for (std::size_t c = 0; c < 6; ++c) s += prev.at(0, c, i / 2, j / 2) * block.up.weight.at(c, o, i % 2, j % 2);
          up[(o * 16 + i) * 16 + j] = s;
        }
    std::vector<double> cat(up);
    cat.insert(cat.end(), skip.data().begin(), skip.data().end());
    auto h = conv_ref(Tensor64::from({1, 9, 16, 16}, cat), block.conv1.weight, block.conv1.bias, 1, 1);
    for (auto& v : h) v = std::max(0.0, v);
    h = conv_ref(Tensor64::from({1, 5, 16, 16}, h), block.conv2.weight, block.conv2.bias, 1, 1);
    for (auto& v : h) v = std::max(0.0, v);
    CHECK(max_abs_diff(y.data(), h) <= 1e-6);
    try {
      block(prev, rand_tensor<double>(rng, {1, 4, 12, 12}));
      FAIL("expected an exception");
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[1,4,12,12]") != std::string::npos);
      CHECK(msg.find("[1,5,16,16]") != std::string::npos);
    }
  }

  TEST_CASE("tiny model outputs full-resolution logits on both heads") {
    Rng rng(16);
    ModelConfig cfg;
    Model<float> m(cfg);
    const auto out = m.forward(random_batch<float>(rng, 2, 64, 0.5), false);
    CHECK(out.logits_fused.shape() == Shape{2, 1, 64, 64});
    CHECK(out.logits_sar.shape() == Shape{2, 1, 64, 64});
    CHECK(out.smg.size() == 5);
    for (auto kind : {ModelKind::unet_sar, ModelKind::unet_concat}) {
      ModelConfig c2;
      c2.kind = kind;
      Model<float> u(c2);
      const auto o = u.forward(random_batch<float>(rng, 1, 64, 0.5), false);
      CHECK(o.logits_fused.shape() == Shape{1, 1, 64, 64});
      CHECK_FALSE(o.logits_sar.defined());
    }
  }

  TEST_CASE("identical pyramids through the shared decoder give identical logits") {
    Rng rng(17);
    Decoder<float> dec(DecoderConfig::make(Preset::tiny), rng);
    Encoder<float> enc(EncoderConfig::make(Preset::tiny, 2), rng);
    const auto p = enc.encode(rand_tensor<float>(rng, {1, 2, 64, 64}), false);
    const auto out = decode_dual(p, p, dec);
    CHECK(max_abs_diff(out.fused.logits.data(), out.sar.logits.data()) == 0);
  }

  TEST_CASE("decoder parameter audit: one decoder when shared, two when independent") {
    // Hand count for the tiny decoder: stage k has up (cin*cout*4 + cout),
    // conv1 ((cout+skip)*cout*9 + cout), conv2 (cout*cout*9 + cout); head 8 + 1.
    const std::size_t widths[] = {64, 32, 16, 16, 8}, skips[] = {128, 64, 32, 16, 0};
    std::size_t cin = 256, expected = 0;
    for (int k = 0; k < 5; ++k) {
      const std::size_t co = widths[k];
      expected += cin * co * 4 + co + (co + skips[k]) * co * 9 + co + co * co * 9 + co;
      cin = co;
    }
    expected += 8 + 1;
    ModelConfig shared;
    Model<float> a(shared);
    ModelConfig indep = shared;
    indep.shared_decoder = false;
    Model<float> b(indep);
    std::size_t dec_a = 0, dec_b = 0;
    for (const auto& [name, p] : a.parameters())
      if (name.rfind("dec.", 0) == 0) dec_a += p.numel();
    for (const auto& [name, p] : b.parameters())
      if (name.rfind("dec_", 0) == 0) dec_b += p.numel();
    CHECK(dec_a == expected);
    CHECK(dec_b == 2 * expected);
    CHECK(b.parameter_count() == a.parameter_count() + expected);
  }

  TEST_CASE("checkpoint keys follow the documented naming") {
    ModelConfig cfg;
    Model<float> m(cfg);
    std::set<std::string> names;
    for (const auto& [name, p] : m.parameters()) names.insert(name);
    CHECK(names.count("enc_sar.stage1.block1.conv1.weight"));
    CHECK(names.count("enc_msi.stage5.block1.bn2.gamma"));
    CHECK(names.count("ffm.level3.gate.weight"));
    CHECK(names.count("dec.stage1.up.weight"));
    CHECK(names.count("dec.head.bias"));
    ModelConfig indep;
    indep.shared_decoder = false;
    Model<float> m2(indep);
    std::set<std::string> n2;
    for (const auto& [name, p] : m2.parameters()) n2.insert(name);
    CHECK(n2.count("dec_fused.stage5.conv2.weight"));
    CHECK(n2.count("dec_sar.stage5.conv2.weight"));
  }

  TEST_CASE("encoder streams never share parameters and every parameter gets a gradient") {
    Rng rng(18);
    ModelConfig cfg;
    Model<float> m(cfg);
    ParamList<float> sar, msi;
    m.sar_encoder().collect(sar, "s");
    m.msi_encoder().collect(msi, "m");
    const auto a = identities(sar), b = identities(msi);
    for (const auto* p : a) CHECK(b.count(p) == 0);
    const auto batch = random_batch<float>(rng, 2, 64, 0.6);
    const auto out = m.forward(batch, true);
    backward(train::total_loss(out, batch.label, 0.5));
    for (const auto& [name, p] : m.parameters()) {
      bool nonzero = false;
      if (p.has_grad())
        for (float g : p.grad()) nonzero = nonzero || g != 0.0f;
      INFO(name);
      CHECK(nonzero);
    }
  }

  TEST_CASE("both decoder paths touch the same decoder parameters") {
    Rng rng(19);
    ModelConfig cfg;
    Model<float> m(cfg);
    const auto out = m.forward(random_batch<float>(rng, 1, 64, 0.5), true);
    ParamList<float> dec;
    m.decoder().collect(dec, "dec");
    const auto fused = reachable_leaves(out.logits_fused), sar = reachable_leaves(out.logits_sar);
    for (const auto& [name, p] : dec) {
      CHECK(fused.count(p.node()) == 1);
      CHECK(sar.count(p.node()) == 1);
    }
  }

  TEST_CASE("gradients on shared decoder parameters superpose across paths") {
    Rng rng(20);
    ModelConfig cfg;
    Model<double> m(cfg);
    const auto batch = random_batch<double>(rng, 1, 32, 0.5);
    ParamList<double> dec;
    m.decoder().collect(dec, "dec");
    auto grads = [&](int which) {
      for (auto [n, p] : m.parameters()) p.zero_grad();
      const auto out = m.forward(batch, false);
      const auto lf = ops::bce_with_logits(out.logits_fused, batch.label);
      const auto ls = ops::bce_with_logits(out.logits_sar, batch.label);
      backward(which == 0 ? ops::add(lf, ls) : which == 1 ? lf : ls);
      std::vector<double> g;
      for (const auto& [n, p] : dec) g.insert(g.end(), p.grad().begin(), p.grad().end());
      return g;
    };
    const auto both = grads(0), f = grads(1), s = grads(2);
    double err = 0;
    for (std::size_t i = 0; i < both.size(); ++i) err = std::max(err, std::fabs(both[i] - f[i] - s[i]));
    CHECK(err <= 1e-6);
  }

  TEST_CASE("validity all zero makes the two heads agree") {
    Rng rng(21);
    for (bool training : {false, true}) {
      ModelConfig cfg;
      cfg.seed = 5;
      Model<float> m(cfg);
      auto batch = random_batch<float>(rng, 2, 64, 0.0);
      const auto out = m.forward(batch, training);
      CHECK(max_abs_diff(out.logits_fused.data(), out.logits_sar.data()) <= 1e-5);
      for (const auto& lvl : out.smg)
        for (float v : lvl.smg.data()) CHECK(v == 0.0f);
    }
  }
}
