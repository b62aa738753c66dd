#include <cmath>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "mvseg/error.hpp"
#include "mvseg/model.hpp"
#include "mvseg/rng.hpp"
#include "../support/oracles.hpp"
#include "../support/temp_dir.hpp"

using namespace mvseg;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.input_size = {8, 12};
  cfg.channel_widths = {3, 4, 5};
  cfg.convs_per_block = 2;
  cfg.seed = 17;
  return cfg;
}

std::vector<float> random_batch(Rng& rng, std::size_t count) {
  std::vector<float> x(count);
  for (auto& v : x) v = static_cast<float>(rng.normal());
  return x;
}

// Independent layer listing: (k, c_in, c_out) for the default topology.
std::vector<std::array<std::size_t, 3>> enumerate_layers(const ModelConfig& cfg) {
  std::vector<std::array<std::size_t, 3>> layers;
  const auto& w = cfg.channel_widths;
  std::size_t c = cfg.in_channels;
  for (std::size_t l = 0; l <= cfg.pool_stages; ++l) {
    for (std::size_t j = 0; j < cfg.convs_per_block; ++j) {
      layers.push_back({3, c, w[l]});
      c = w[l];
    }
  }
  for (std::size_t l = cfg.pool_stages; l-- > 0;) {
    c = c + w[l];
    for (std::size_t j = 0; j < cfg.convs_per_block; ++j) {
      layers.push_back({3, c, w[l]});
      c = w[l];
    }
  }
  layers.push_back({1, c, cfg.num_classes});
  return layers;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("default architecture: 16 layers, 2,841,154 parameters") {
    const ModelConfig cfg;
    CHECK(cfg.conv_layer_count() == 16);
    const auto layers = enumerate_layers(cfg);
    CHECK(layers.size() == 16);
    std::size_t by_hand = 0;
    for (const auto& [k, ci, co] : layers) by_hand += k * k * ci * co + co;
    CHECK(by_hand == 2841154);
    CHECK(expected_param_count(cfg) == 2841154);

    const TrainedModel m = build_model(cfg);
    CHECK(m.param_count() == 2841154);
    std::size_t from_store = 0;
    for (const auto& e : m.params.entries()) {
      std::size_t n = 1;
      for (auto d : e.shape) n *= d;
      CHECK(n == e.count);
      from_store += n;
    }
    CHECK(from_store == m.param_count());
    CHECK(m.params.entries().size() == 32);
    CHECK(m.convs.size() == 16);
    CHECK(m.convs.back().kernel == 1);
    CHECK(m.convs.back().in_channels == 64);
    CHECK_FALSE(m.convs.back().relu);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      CHECK(m.convs[i].kernel == layers[i][0]);
      CHECK(m.convs[i].in_channels == layers[i][1]);
      CHECK(m.convs[i].out_channels == layers[i][2]);
    }
  }

  TEST_CASE("config validation and JSON") {
    ModelConfig cfg;
    cfg.input_size = {181, 180};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(build_model(cfg), ConfigError);
    cfg.input_size = {180, 180};
    cfg.channel_widths = {64, 128};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    const ModelConfig back = ModelConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(expected_param_count(cfg) == build_model(cfg).param_count());
  }

  TEST_CASE("He initialisation: seeded, biases zero, sensible scale") {
    ModelConfig cfg = tiny_config();
    cfg.channel_widths = {32, 32, 32};
    const TrainedModel a = build_model(cfg), b = build_model(cfg);
    CHECK(std::equal(a.params.values().begin(), a.params.values().end(), b.params.values().begin()));
    cfg.seed = 18;
    const TrainedModel c = build_model(cfg);
    CHECK_FALSE(std::equal(a.params.values().begin(), a.params.values().end(), c.params.values().begin()));

    const auto& w = a.params.entries()[a.convs[1].weight];
    double ss = 0.0;
    for (float v : a.params.tensor(w)) ss += double(v) * v;
    const double expected = 2.0 / (9.0 * 32.0);
    CHECK(ss / w.count == doctest::Approx(expected).epsilon(0.15));
    for (float v : a.params.tensor(a.params.entries()[a.convs[1].bias])) CHECK(v == 0.0f);
  }

  TEST_CASE("forward: shape, softmax normalisation, determinism") {
    const TrainedModel m = build_model(tiny_config());
    Rng rng(4);
    const std::size_t n = 3, hw = 8 * 12;
    const auto x = random_batch(rng, n * hw);
    const auto out = forward(m, x, n);
    REQUIRE(out.size() == n * hw * 2);
    for (std::size_t i = 0; i < n * hw; ++i) {
      CHECK(out[2 * i] + out[2 * i + 1] == doctest::Approx(1.0f).epsilon(1e-5));
      CHECK(out[2 * i] >= 0.0f);
    }
    const auto again = forward(m, x, n);
    CHECK(std::memcmp(out.data(), again.data(), out.size() * 4) == 0);
    const auto fg = predict_foreground(m, x, n);
    for (std::size_t i = 0; i < n * hw; ++i) REQUIRE(fg[i] == out[2 * i + 1]);
    // The batch composition does not change a slice's output.
    const auto single = forward(m, std::span<const float>(x).subspan(hw, hw), 1);
    for (std::size_t i = 0; i < hw * 2; ++i) REQUIRE(single[i] == doctest::Approx(out[hw * 2 + i]).epsilon(1e-5));
    CHECK_THROWS_AS(forward(m, std::span<const float>(x).first(hw + 1), 1), ContractError);
  }

  TEST_CASE("softmax stays normalised under extreme weights") {
    TrainedModel m = build_model(tiny_config());
    Rng rng(5);
    for (auto& v : m.params.values()) v = static_cast<float>(rng.normal() * 3.0);
    const auto x = random_batch(rng, 2 * 96);
    const auto out = forward(m, x, 2);
    for (std::size_t i = 0; i < out.size(); i += 2) {
      REQUIRE(std::isfinite(out[i]));
      REQUIRE(out[i] + out[i + 1] == doctest::Approx(1.0f).epsilon(1e-5));
    }
  }

  TEST_CASE("zero head gives exactly one half") {
    TrainedModel m = build_model(tiny_config());
    const auto& head = m.convs.back();
    for (auto& v : m.params.tensor(m.params.entries()[head.weight])) v = 0.0f;
    for (auto& v : m.params.tensor(m.params.entries()[head.bias])) v = 0.0f;
    Rng rng(6);
    const auto out = forward(m, random_batch(rng, 4 * 96), 4);
    for (float v : out) REQUIRE(v == 0.5f);
  }

  TEST_CASE("batch of 30 full-size slices") {
    ModelConfig cfg;
    cfg.channel_widths = {2, 2, 2};
    const TrainedModel m = build_model(cfg);
    std::vector<float> x(30 * 180 * 180, 0.25f);
    CHECK(forward(m, x, 30).size() == 30u * 180 * 180 * 2);
  }

  TEST_CASE("dice loss examples") {
    std::vector<float> g(64, 0.0f);
    for (int i = 0; i < 13; ++i) g[i * 4] = 1.0f;
    CHECK(dice_loss(g, g, 1.0) == -1.0);
    std::vector<float> zeros(64, 0.0f);
    CHECK(dice_loss(zeros, zeros, 1.0) == -1.0);
    std::vector<float> z100(100, 0.0f), g99(100, 0.0f);
    for (int i = 0; i < 99; ++i) g99[i] = 1.0f;
    CHECK(dice_loss(z100, g99, 1.0) == -0.01);
    CHECK_THROWS_AS(dice_loss(z100, g, 1.0), ContractError);
    CHECK_THROWS_AS(dice_loss(zeros, zeros, 0.0), ContractError);
  }

  TEST_CASE("dice loss matches the oracle, is symmetric and monotone") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<float> p(64), g(64);
      for (std::size_t i = 0; i < 64; ++i) {
        p[i] = static_cast<float>(rng.uniform01());
        g[i] = rng.uniform01() < 0.3 ? 1.0f : 0.0f;
      }
      CHECK(dice_loss(p, g, 1.0) == doctest::Approx(oracle::dice_loss(p, g, 1.0)).epsilon(1e-12));
      const double l = dice_loss(p, g, 1.0);
      CHECK(l > -1.0 - 1e-12);
      CHECK(l <= 0.0);

      std::vector<float> b(64);
      for (std::size_t i = 0; i < 64; ++i) b[i] = rng.uniform01() < 0.5 ? 1.0f : 0.0f;
      CHECK(dice_loss(b, g, 1.0) == dice_loss(g, b, 1.0));

      double prev = 1.0;
      for (int s = 0; s <= 20; ++s) {
        std::vector<float> tg(64);
        for (std::size_t i = 0; i < 64; ++i) tg[i] = static_cast<float>(s / 20.0) * g[i];
        const double cur = dice_loss(tg, g, 1.0);
        REQUIRE(cur <= prev);
        prev = cur;
      }
    }
  }

  TEST_CASE("dice loss gradient against central differences") {
    Rng rng(13);
    auto check = [](const std::vector<float>& p, const std::vector<float>& g) {
      std::vector<float> grad(p.size());
      dice_loss_grad(p, g, 1.0, grad);
      const auto fd = oracle::dice_loss_fd(p, g, 1.0, 1e-4);
      double num = 0, den = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        num += (grad[i] - fd[i]) * (grad[i] - fd[i]);
        den += fd[i] * fd[i];
      }
      CHECK(std::sqrt(num / den) <= 1e-4);
    };
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<float> p(64), g(64);
      for (std::size_t i = 0; i < 64; ++i) {
        p[i] = static_cast<float>(rng.uniform(0.05, 0.95));
        g[i] = rng.uniform01() < 0.3 ? 1.0f : 0.0f;
      }
      check(p, g);
    }
    std::vector<float> p(64), zeros(64, 0.0f);
    for (auto& v : p) v = static_cast<float>(rng.uniform(0.05, 0.95));
    check(p, zeros);
    std::vector<float> half(64, 0.5f), single(64, 0.0f);
    single[9] = 1.0f;
    check(half, single);
  }

  TEST_CASE("network gradient against central differences") {
    ModelConfig cfg = tiny_config();
    cfg.input_size = {8, 8};
    cfg.channel_widths = {3, 3, 4};
    TrainedModel m = build_model(cfg);
    Rng rng(21);
    const std::size_t n = 2, hw = 64;
    const auto x = random_batch(rng, n * hw);
    std::vector<float> g(n * hw);
    for (auto& v : g) v = rng.uniform01() < 0.3 ? 1.0f : 0.0f;

    auto loss_of = [&](const TrainedModel& mm) {
      const auto fg = predict_foreground(mm, x, n);
      return dice_loss(fg, g, 1.0);
    };

    TrainingPass pass(m);
    const auto fg = pass.forward(x, n);
    std::vector<float> dfg(fg.size()), grads(m.param_count());
    dice_loss_grad(fg, g, 1.0, dfg);
    pass.backward(dfg, grads);

    // Largest gradients per tensor; ReLU kinks make tiny entries noisy.
    double num = 0, den = 0;
    std::size_t checked = 0;
    for (const auto& e : m.params.entries()) {
      std::size_t best = e.offset;
      for (std::size_t i = e.offset; i < e.offset + e.count; ++i)
        if (std::abs(grads[i]) > std::abs(grads[best])) best = i;
      const float orig = m.params.values()[best];
      const double h = 1e-3;
      m.params.values()[best] = static_cast<float>(orig + h);
      const double up = loss_of(m);
      m.params.values()[best] = static_cast<float>(orig - h);
      const double down = loss_of(m);
      m.params.values()[best] = orig;
      const double fd = (up - down) / (2 * h);
      num += (fd - grads[best]) * (fd - grads[best]);
      den += fd * fd;
      ++checked;
    }
    CHECK(checked == m.params.entries().size());
    CHECK(std::sqrt(num / den) <= 2e-2);
  }

  TEST_CASE("backward rejects mismatched buffers") {
    const TrainedModel m = build_model(tiny_config());
    TrainingPass pass(m);
    Rng rng(2);
    const auto x = random_batch(rng, 96);
    pass.forward(x, 1);
    std::vector<float> dfg(96), grads(m.param_count() - 1);
    CHECK_THROWS_AS(pass.backward(dfg, grads), ContractError);
    CHECK(pass.probabilities().size() == 2 * 96);
  }

  TEST_CASE("Adam follows the reference update") {
    AdamConfig cfg;
    cfg.learning_rate = 0.01f;
    AdamOptimizer opt(3, cfg);
    std::vector<float> w{1.0f, -2.0f, 0.5f};
    std::vector<double> ref(w.begin(), w.end()), m1(3, 0), m2(3, 0);
    for (int t = 1; t <= 5; ++t) {
      std::vector<float> grad{0.3f * t, -0.1f, 0.0f};
      opt.step(w, grad);
      for (int i = 0; i < 3; ++i) {
        m1[i] = 0.9 * m1[i] + 0.1 * grad[i];
        m2[i] = 0.999 * m2[i] + 0.001 * double(grad[i]) * grad[i];
        const double mh = m1[i] / (1 - std::pow(0.9, t)), vh = m2[i] / (1 - std::pow(0.999, t));
        ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-7);
      }
    }
    CHECK(opt.steps_taken() == 5);
    for (int i = 0; i < 3; ++i) CHECK(w[i] == doctest::Approx(ref[i]).epsilon(1e-5));
  }

  TEST_CASE("training steps reduce the loss on a fixed batch") {
    TrainedModel m = build_model(tiny_config());
    Rng rng(30);
    const std::size_t n = 4, hw = 96;
    auto x = random_batch(rng, n * hw);
    std::vector<float> g(n * hw);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = x[i] > 0.5f ? 1.0f : 0.0f;
    AdamConfig ac;
    ac.learning_rate = 1e-2f;
    AdamOptimizer opt(m.param_count(), ac);
    TrainingPass pass(m);
    std::vector<float> dfg(n * hw), grads(m.param_count());
    double first = 0, last = 0;
    for (int it = 0; it < 160; ++it) {
      const auto fg = pass.forward(x, n);
      const double l = dice_loss(fg, g, 1.0);
      if (it == 0) first = l;
      last = l;
      dice_loss_grad(fg, g, 1.0, dfg);
      pass.backward(dfg, grads);
      opt.step(m.params.values(), grads);
    }
    CHECK(last < first - 0.2);
  }

  TEST_CASE("checkpoint round trip and corruption") {
    TempDir dir("ckpt");
    TrainedModel m = build_model(tiny_config(), ViewAxis::coronal);
    Rng rng(1);
    for (auto& v : m.params.values()) v = static_cast<float>(rng.normal());
    const std::string path = dir / "m.ckpt";
    save_checkpoint(m, path);
    const TrainedModel back = load_checkpoint(path);
    CHECK(back.view == ViewAxis::coronal);
    CHECK(back.config.to_json() == m.config.to_json());
    REQUIRE(back.param_count() == m.param_count());
    CHECK(std::memcmp(back.params.values().data(), m.params.values().data(), m.param_count() * 4) == 0);

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    {
      std::ofstream(dir / "trunc.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 10);
      CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), FormatError);
    }
    {
      std::string bad = bytes;
      bad[0] = 'X';
      std::ofstream(dir / "magic.ckpt", std::ios::binary) << bad;
      CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), FormatError);
    }
    {
      std::string bad = bytes;
      const std::string key = "\"param_count\":" + std::to_string(m.param_count());
      const auto pos = bad.find(key);
      REQUIRE(pos != std::string::npos);
      char& last = bad[pos + key.size() - 1];
      last = last == '9' ? '8' : static_cast<char>(last + 1);
      std::ofstream(dir / "count.ckpt", std::ios::binary) << bad;
      CHECK_THROWS_AS(load_checkpoint(dir / "count.ckpt"), FormatError);
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), IoError);
  }
}
