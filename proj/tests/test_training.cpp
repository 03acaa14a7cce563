#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "helpers.hpp"
#include "smagnet/errors.hpp"
#include "smagnet/training.hpp"

using namespace smagnet;
using namespace smagnet::train;
using testutil::max_abs_diff;
using testutil::rand_tensor;

namespace {

double bce_ref(std::span<const double> z, std::span<const double> y) {
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = 1 / (1 + std::exp(-z[i]));
    s -= y[i] * std::log(p) + (1 - y[i]) * std::log(1 - p);
  }
  return s / double(z.size());
}

data::Dataset small_dataset(std::uint64_t seed, std::size_t count = 10) {
  data::GenParams gp;
  gp.size = 32;
  gp.seed = seed;
  return data::build_dataset(gp, count);
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.seed = 3;
  return c;
}

// IoU of (p >= t) computed from scratch.
double iou_at(std::span<const float> p, std::span<const std::uint8_t> y, float t) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pr = p[i] >= t;
    tp += pr && y[i];
    fp += pr && !y[i];
    fn += !pr && y[i];
  }
  return double(tp) / double(tp + fp + fn);
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("total loss examples and two-term oracle") {
    Rng rng(1);
    auto label = rand_tensor<double>(rng, {1, 1, 4, 4}, 0, 1);
    for (auto& v : label.mutable_data()) v = v < 0.5 ? 0 : 1;
    nn::ModelOutput<double> same;
    same.logits_fused = rand_tensor<double>(rng, {1, 1, 4, 4}, -3, 3);
    same.logits_sar = same.logits_fused;
    const double b = bce_ref(same.logits_fused.data(), label.data());
    for (double w : {0.0, 0.3, 1.0}) CHECK(total_loss(same, label, w).item() == doctest::Approx(b).epsilon(1e-12));
    nn::ModelOutput<double> out;
    out.logits_fused = rand_tensor<double>(rng, {1, 1, 4, 4}, -3, 3);
    out.logits_sar = rand_tensor<double>(rng, {1, 1, 4, 4}, -3, 3);
    const double want = 0.3 * bce_ref(out.logits_sar.data(), label.data()) +
                        0.7 * bce_ref(out.logits_fused.data(), label.data());
    CHECK(std::fabs(total_loss(out, label, 0.3).item() - want) <= 1e-7);
    CHECK_THROWS_AS(total_loss(out, label, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(total_loss(out, label, -0.1), std::invalid_argument);
  }

  TEST_CASE("w = 1 leaves the gate convolutions without gradient") {
    Rng rng(2);
    nn::Model<float> m(nn::ModelConfig{});
    nn::Batch<float> b;
    b.sar = rand_tensor<float>(rng, {1, 2, 32, 32});
    b.msi = rand_tensor<float>(rng, {1, 4, 32, 32});
    b.validity = Tensor::full({1, 1, 32, 32}, 1.0f);
    b.label = Tensor::zeros({1, 1, 32, 32});
    backward(total_loss(m.forward(b, true), b.label, 1.0));
    for (const auto& [name, p] : m.parameters())
      if (name.rfind("ffm.", 0) == 0) {
        INFO(name);
        for (float g : p.grad()) CHECK(g == 0.0f);
      }
  }

  TEST_CASE("adam oracles") {
    auto p = Tensor64::from({1}, {0.25}, true);
    nn::ParamList<double> params{{"p", p}};
    AdamState<double> st;
    p.mutable_grad()[0] = 0.0;
    adam_step(params, st, 5e-4);
    CHECK(p.data()[0] == 0.25);

    auto q = Tensor64::from({1}, {0.0}, true);
    nn::ParamList<double> qp{{"q", q}};
    AdamState<double> s2;
    double m = 0, v = 0, x = 0;
    const double lr = 5e-4;
    for (int t = 1; t <= 2; ++t) {
      q.mutable_grad()[0] = 1.0;
      adam_step(qp, s2, lr);
      m = 0.9 * m + 0.1;
      v = 0.999 * v + 0.001;
      x -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
      CHECK(std::fabs(q.data()[0] - x) <= 1e-9);
      if (t == 1) CHECK(std::fabs(q.data()[0] + lr / (1 + 1e-8)) <= 1e-9);
    }
    CHECK(s2.step == 2);
    CHECK(s2.m[0].size() == 1);
  }

  TEST_CASE("flips are involutions and preserve the water count") {
    const auto d = small_dataset(4, 3);
    const auto& s = d.scenes[0];
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
      const auto dec = draw_augment(s.height, s.width, rng, {0, true, true});
      const auto once = apply_augment(s, dec);
      CHECK(apply_augment(once, dec) == s);
      std::size_t a = 0, b = 0;
      for (auto l : s.label) a += l;
      for (auto l : once.label) b += l;
      CHECK(a == b);
    }
  }

  TEST_CASE("one crop window is shared by every raster") {
    const auto d = small_dataset(6, 3);
    data::Scene s = d.scenes[0];
    // Encode the pixel index into every raster so the window can be read back.
    for (std::size_t i = 0; i < s.pixels(); ++i) {
      s.sar[i] = float(i);
      s.msi[i] = float(i);
      s.label[i] = std::uint8_t(i % 251);
      s.validity[i] = std::uint8_t(i % 241);
    }
    AugmentDecision dec{0, 0, 32, true, false};
    const auto out = apply_augment(s, dec);
    for (std::size_t i = 0; i < out.pixels(); ++i) {
      const auto src = std::size_t(out.sar[i]);
      CHECK(out.msi[i] == float(src));
      CHECK(out.label[i] == std::uint8_t(src % 251));
      CHECK(out.validity[i] == std::uint8_t(src % 241));
    }
  }

  TEST_CASE("crop windows stay inside the raster over 1000 draws") {
    Rng rng(7);
    for (int t = 0; t < 1000; ++t) {
      const std::size_t H = 32 * (2 + rng.index(4)), W = 32 * (2 + rng.index(4));
      const std::size_t crop = 32 * (1 + rng.index(std::min(H, W) / 32));
      const auto d = draw_augment(H, W, rng, {crop, true, true});
      CHECK(d.size == crop);
      CHECK(d.top + d.size <= H);
      CHECK(d.left + d.size <= W);
    }
    CHECK_THROWS(draw_augment(64, 64, rng, {48, true, true}));
    CHECK_THROWS(draw_augment(64, 64, rng, {96, true, true}));
  }

  TEST_CASE("select_threshold examples") {
    const std::vector<float> p{0.1f, 0.9f};
    const std::vector<std::uint8_t> y{0, 1};
    const auto r = select_threshold(p, y);
    CHECK(r.threshold == doctest::Approx(0.9f));
    CHECK(r.iou == 1.0);
    CHECK_FALSE(r.degenerate);
    const std::vector<float> flat(6, 0.3f);
    const std::vector<std::uint8_t> mixed{0, 1, 0, 1, 1, 0};
    CHECK(select_threshold(flat, mixed).threshold == doctest::Approx(0.3f));
    const std::vector<std::uint8_t> none(6, 0);
    const auto dg = select_threshold(flat, none);
    CHECK(dg.degenerate);
    CHECK(dg.threshold == 0.5);
  }

  TEST_CASE("select_threshold equals an exhaustive scan on 50 instances") {
    Rng rng(8);
    for (int t = 0; t < 50; ++t) {
      std::vector<float> p(256);
      std::vector<std::uint8_t> y(256);
      for (std::size_t i = 0; i < 256; ++i) {
        // Coarse values force ties between candidates.
        p[i] = float(rng.index(40)) / 40.0f;
        y[i] = rng.uniform() < 0.2 + 0.6 * p[i];
      }
      y[0] = 1;
      y[1] = 0;
      std::set<float> unique(p.begin(), p.end());
      double best = -1;
      float best_t = 0;
      for (float u : unique) {
        const double i = iou_at(p, y, u);
        if (i > best) {
          best = i;
          best_t = u;
        }
      }
      const auto r = select_threshold(p, y);
      CHECK(r.threshold == double(best_t));
      CHECK(r.iou == best);
    }
  }

  TEST_CASE("lr = 0 leaves parameters unchanged") {
    const auto d = small_dataset(9);
    nn::Model<float> m(nn::ModelConfig{});
    std::vector<std::vector<float>> before;
    for (const auto& [n, p] : m.parameters()) before.emplace_back(p.data().begin(), p.data().end());
    auto cfg = quick_config();
    cfg.lr = 0;
    fit(m, cfg, d);
    const auto params = m.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(max_abs_diff(params[i].second.data(), before[i]) == 0);
  }

  TEST_CASE("fixed seed gives bit-identical histories and parameters") {
    const auto d = small_dataset(10);
    auto run = [&] {
      nn::ModelConfig mc;
      mc.seed = 3;
      auto m = std::make_unique<nn::Model<float>>(mc);
      auto r = fit(*m, quick_config(), d);
      return std::make_pair(std::move(m), r);
    };
    auto [m1, r1] = run();
    auto [m2, r2] = run();
    CHECK(history_csv(r1.history) == history_csv(r2.history));
    REQUIRE(r1.history.size() == 2);
    for (const auto& e : r1.history) {
      CHECK(std::isfinite(e.train_loss));
      CHECK(e.val_loss_total == doctest::Approx(0.5 * e.val_loss_sar + 0.5 * e.val_loss_fused));
    }
    const auto p1 = m1->parameters(), p2 = m2->parameters();
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(max_abs_diff(p1[i].second.data(), p2[i].second.data()) == 0);
    CHECK(r1.best_val_loss == r1.history[r1.best_epoch - 1].val_loss_total);
    CHECK(history_csv(r1.history).rfind("epoch,train_loss,val_loss_total,val_loss_sar,val_loss_fused\n", 0) == 0);
  }

  TEST_CASE("checkpoint round trip reproduces the forward pass bit for bit") {
    const auto d = small_dataset(11);
    nn::ModelConfig mc;
    mc.shared_decoder = false;
    nn::Model<float> m(mc);
    auto cfg = quick_config();
    cfg.epochs = 1;
    const auto r = fit(m, cfg, d);
    const auto path = (std::filesystem::temp_directory_path() / "smagnet_ckpt_test.bin").string();
    io::write_container(path, make_checkpoint(m, cfg, r));
    auto loaded = load_model(io::read_container(path));
    std::filesystem::remove(path);
    auto val = d.split("val");
    for (auto& s : val) s = data::normalize(s, d.stats, d.params.fill_value);
    const auto a = predict(m, val, 2, true), b = predict(loaded, val, 2, true);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].prob_fused == b[i].prob_fused);
      CHECK(a[i].prob_sar == b[i].prob_sar);
      CHECK(a[i].features_fused == b[i].features_fused);
    }
    CHECK(loaded.parameter_count() == m.parameter_count());
    auto c = make_checkpoint(m, cfg, r);
    REQUIRE(c.tensors.erase("dec_fused.head.bias") == 1);
    CHECK_THROWS(restore_parameters(loaded, c));
  }

  TEST_CASE("non-finite loss names the epoch and batch") {
    const auto d = small_dataset(12);
    nn::Model<float> m(nn::ModelConfig{});
    for (auto [name, p] : m.parameters())
      if (name == "dec.head.bias") p.mutable_data()[0] = NAN;
    try {
      fit(m, quick_config(), d);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()) == "non-finite loss at epoch 1 batch 1");
    }
  }

  TEST_CASE("gradient flow audit with partially missing MSI") {
    const auto d = small_dataset(13, 4);
    std::vector<data::Scene> norm;
    for (const auto& s : d.scenes) norm.push_back(data::normalize(s, d.stats, 0.0f));
    std::vector<const data::Scene*> ptrs;
    for (const auto& s : norm) ptrs.push_back(&s);
    auto batch = make_batch<float>(ptrs);
    auto v = batch.validity.mutable_data();
    for (std::size_t i = 0; i < v.size() / 3; ++i) v[i] = 0;
    nn::Model<float> m(nn::ModelConfig{});
    backward(total_loss(m.forward(batch, true), batch.label, 0.5));
    for (const auto& [name, p] : m.parameters()) {
      bool nz = false;
      for (float g : p.grad()) nz = nz || g != 0;
      INFO(name);
      CHECK(nz);
    }
  }
}
