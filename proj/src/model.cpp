#include "mvseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mvseg/error.hpp"
#include "mvseg/kernels.hpp"
#include "mvseg/rng.hpp"

namespace mvseg {

using kernels::Trans;

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (convs_per_block < 1) throw ConfigError("convs_per_block must be >= 1");
  if (channel_widths.size() != pool_stages + 1) {
    throw ConfigError("channel_widths needs pool_stages + 1 = " + std::to_string(pool_stages + 1) + " entries, got " +
                      std::to_string(channel_widths.size()));
  }
  for (std::size_t w : channel_widths) {
    if (w < 1) throw ConfigError("channel widths must be >= 1");
  }
  const std::size_t div = std::size_t{1} << pool_stages;
  for (std::size_t d : input_size) {
    if (d == 0 || d % div != 0) {
      throw ConfigError("input size " + std::to_string(d) + " is not divisible by 2^pool_stages = " +
                        std::to_string(div));
    }
  }
}

std::size_t ModelConfig::conv_layer_count() const { return (2 * pool_stages + 1) * convs_per_block + 1; }

nlohmann::json ModelConfig::to_json() const {
  return {{"input_size", input_size},
          {"in_channels", in_channels},
          {"num_classes", num_classes},
          {"pool_stages", pool_stages},
          {"convs_per_block", convs_per_block},
          {"channel_widths", channel_widths},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& doc) {
  ModelConfig cfg;
  try {
    if (doc.contains("input_size")) cfg.input_size = doc.at("input_size").get<std::array<std::size_t, 2>>();
    cfg.in_channels = doc.value("in_channels", cfg.in_channels);
    cfg.num_classes = doc.value("num_classes", cfg.num_classes);
    cfg.pool_stages = doc.value("pool_stages", cfg.pool_stages);
    cfg.convs_per_block = doc.value("convs_per_block", cfg.convs_per_block);
    if (doc.contains("channel_widths")) cfg.channel_widths = doc.at("channel_widths").get<std::vector<std::size_t>>();
    cfg.seed = doc.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameters

std::size_t ParameterStore::add(std::string name, std::vector<std::size_t> shape) {
  std::size_t count = 1;
  for (std::size_t d : shape) count *= d;
  entries_.push_back({std::move(name), std::move(shape), values_.size(), count});
  values_.resize(values_.size() + count, 0.0f);
  return entries_.size() - 1;
}

const ParameterStore::Entry& ParameterStore::entry(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw ContractError("no parameter tensor named " + name);
}

namespace {

void add_conv(TrainedModel& m, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
              bool relu) {
  ConvSpec spec;
  spec.in_channels = cin;
  spec.out_channels = cout;
  spec.kernel = k;
  spec.relu = relu;
  spec.weight = m.params.add(prefix + ".weight", {cout, cin, k, k});
  spec.bias = m.params.add(prefix + ".bias", {cout});
  m.convs.push_back(spec);
}

void layout(TrainedModel& m) {
  const auto& cfg = m.config;
  const std::size_t levels = cfg.pool_stages;
  const std::size_t blocks = cfg.convs_per_block;
  const auto& w = cfg.channel_widths;

  std::size_t channels = cfg.in_channels;
  for (std::size_t l = 0; l < levels; ++l) {
    for (std::size_t j = 0; j < blocks; ++j) {
      add_conv(m, "enc" + std::to_string(l) + ".conv" + std::to_string(j), channels, w[l], 3, true);
      channels = w[l];
    }
  }
  for (std::size_t j = 0; j < blocks; ++j) {
    add_conv(m, "bottleneck.conv" + std::to_string(j), channels, w[levels], 3, true);
    channels = w[levels];
  }
  for (std::size_t l = levels; l-- > 0;) {
    channels += w[l];  // concatenated skip
    for (std::size_t j = 0; j < blocks; ++j) {
      add_conv(m, "dec" + std::to_string(l) + ".conv" + std::to_string(j), channels, w[l], 3, true);
      channels = w[l];
    }
  }
  add_conv(m, "head.conv", channels, cfg.num_classes, 1, false);
}

}  // namespace

TrainedModel build_model(const ModelConfig& cfg, ViewAxis view) {
  cfg.validate();
  TrainedModel m;
  m.config = cfg;
  m.view = view;
  layout(m);

  Rng rng(cfg.seed);
  auto values = m.params.values();
  for (const auto& conv : m.convs) {
    const auto& e = m.params.entries()[conv.weight];
    const double fan_in = static_cast<double>(conv.in_channels * conv.kernel * conv.kernel);
    const double scale = std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < e.count; ++i) values[e.offset + i] = static_cast<float>(scale * rng.normal());
  }
  return m;
}

std::size_t expected_param_count(const ModelConfig& cfg) {
  cfg.validate();
  const auto& w = cfg.channel_widths;
  const std::size_t levels = cfg.pool_stages;
  const std::size_t blocks = cfg.convs_per_block;
  auto conv = [](std::size_t k, std::size_t cin, std::size_t cout) { return k * k * cin * cout + cout; };
  std::size_t total = 0;
  std::size_t c = cfg.in_channels;
  for (std::size_t l = 0; l <= levels; ++l) {
    total += conv(3, c, w[l]) + (blocks - 1) * conv(3, w[l], w[l]);
    c = w[l];
  }
  for (std::size_t l = levels; l-- > 0;) {
    total += conv(3, w[l + 1] + w[l], w[l]) + (blocks - 1) * conv(3, w[l], w[l]);
  }
  return total + conv(1, w[0], cfg.num_classes);
}

// ---------------------------------------------------------------------------
// Forward / backward machinery

namespace {

// Channel-major batch activation: C rows of N*H*W values.
struct Act {
  std::size_t c = 0, n = 0, h = 0, w = 0;
  std::vector<float> v;

  void resize(std::size_t c_, std::size_t n_, std::size_t h_, std::size_t w_) {
    c = c_, n = n_, h = h_, w = w_;
    v.resize(c * n * h * w);
  }
  std::size_t hw() const { return h * w; }
  std::size_t plane() const { return n * h * w; }
  float* row(std::size_t ch) { return v.data() + ch * plane(); }
  const float* row(std::size_t ch) const { return v.data() + ch * plane(); }
};

// 3x3, padding 1. col has (C*9) rows of H*W values for one sample.
// With flip set, the kernel taps are mirrored (used for input gradients).
void im2col3x3(const Act& src, std::size_t sample, float* col, bool flip) {
  const std::size_t h = src.h, w = src.w, hw = src.hw();
  for (std::size_t ch = 0; ch < src.c; ++ch) {
    const float* plane = src.row(ch) + sample * hw;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const long dy = flip ? 1 - static_cast<long>(ky) : static_cast<long>(ky) - 1;
        const long dx = flip ? 1 - static_cast<long>(kx) : static_cast<long>(kx) - 1;
        float* dst = col + (ch * 9 + ky * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          float* drow = dst + y * w;
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(drow, drow + w, 0.0f);
            continue;
          }
          const float* srow = plane + static_cast<std::size_t>(sy) * w;
          // Valid x range: 0 <= x + dx < w.
          const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
          const std::size_t x1 = dx > 0 ? w - static_cast<std::size_t>(dx) : w;
          std::fill(drow, drow + x0, 0.0f);
          std::memcpy(drow + x0, srow + static_cast<long>(x0) + dx, (x1 - x0) * sizeof(float));
          std::fill(drow + x1, drow + w, 0.0f);
        }
      }
    }
  }
}

void add_bias(Act& out, std::span<const float> bias) {
  const std::size_t plane = out.plane();
  for (std::size_t c = 0; c < out.c; ++c) {
    float* r = out.row(c);
    const float b = bias[c];
    for (std::size_t i = 0; i < plane; ++i) r[i] += b;
  }
}

void maxpool2(const Act& in, Act& out, std::vector<unsigned char>& argmax) {
  out.resize(in.c, in.n, in.h / 2, in.w / 2);
  argmax.resize(out.v.size());
  const std::size_t ow = out.w;
  const std::size_t images = in.c * in.n;
  for (std::size_t img = 0; img < images; ++img) {
    const float* src = in.v.data() + img * in.hw();
    float* dst = out.v.data() + img * out.hw();
    unsigned char* arg = argmax.data() + img * out.hw();
    for (std::size_t y = 0; y < out.h; ++y) {
      const float* r0 = src + (2 * y) * in.w;
      const float* r1 = r0 + in.w;
      for (std::size_t x = 0; x < ow; ++x) {
        float best = r0[2 * x];
        unsigned char which = 0;
        if (r0[2 * x + 1] > best) best = r0[2 * x + 1], which = 1;
        if (r1[2 * x] > best) best = r1[2 * x], which = 2;
        if (r1[2 * x + 1] > best) best = r1[2 * x + 1], which = 3;
        dst[y * ow + x] = best;
        arg[y * ow + x] = which;
      }
    }
  }
}

void maxpool2_backward(const Act& g_out, const std::vector<unsigned char>& argmax, Act& g_in) {
  std::fill(g_in.v.begin(), g_in.v.end(), 0.0f);
  const std::size_t images = g_out.c * g_out.n;
  for (std::size_t img = 0; img < images; ++img) {
    const float* src = g_out.v.data() + img * g_out.hw();
    const unsigned char* arg = argmax.data() + img * g_out.hw();
    float* dst = g_in.v.data() + img * g_in.hw();
    for (std::size_t y = 0; y < g_out.h; ++y) {
      for (std::size_t x = 0; x < g_out.w; ++x) {
        const unsigned char a = arg[y * g_out.w + x];
        dst[(2 * y + (a >> 1)) * g_in.w + 2 * x + (a & 1)] = src[y * g_out.w + x];
      }
    }
  }
}

// Nearest 2x upsample of `in` into rows [0, in.c) of `out` (already sized).
void upsample2_into(const Act& in, Act& out) {
  const std::size_t images = in.c * in.n;
  for (std::size_t img = 0; img < images; ++img) {
    const float* src = in.v.data() + img * in.hw();
    float* dst = out.v.data() + img * out.hw();
    for (std::size_t y = 0; y < out.h; ++y) {
      const float* srow = src + (y / 2) * in.w;
      float* drow = dst + y * out.w;
      for (std::size_t x = 0; x < out.w; ++x) drow[x] = srow[x / 2];
    }
  }
}

// Sum each 2x2 block of rows [0, g_in.c) of the concat gradient.
void upsample2_backward(const Act& g_cat, Act& g_in) {
  const std::size_t images = g_in.c * g_in.n;
  for (std::size_t img = 0; img < images; ++img) {
    const float* src = g_cat.v.data() + img * g_cat.hw();
    float* dst = g_in.v.data() + img * g_in.hw();
    for (std::size_t y = 0; y < g_in.h; ++y) {
      const float* r0 = src + (2 * y) * g_cat.w;
      const float* r1 = r0 + g_cat.w;
      for (std::size_t x = 0; x < g_in.w; ++x) {
        dst[y * g_in.w + x] = (r0[2 * x] + r0[2 * x + 1]) + (r1[2 * x] + r1[2 * x + 1]);
      }
    }
  }
}

}  // namespace

struct TrainingPass::State {
  std::size_t n = 0;
  Act input;
  std::vector<Act> out;  // per conv, post-activation (logits for the head)
  std::vector<Act> pooled;
  std::vector<std::vector<unsigned char>> argmax;
  std::vector<Act> cat;  // decoder inputs [upsampled, skip]
  std::vector<std::size_t> skip_conv;  // conv index producing the skip of level l
  Act probs;
  std::vector<float> fg;
  std::vector<float> col;
  std::vector<float> flipped;
  Act g_a, g_b;
  std::vector<Act> g_skip;
};

namespace {

const float* weights_of(const TrainedModel& m, const ConvSpec& c) {
  return m.params.values().data() + m.params.entries()[c.weight].offset;
}
const float* bias_of(const TrainedModel& m, const ConvSpec& c) {
  return m.params.values().data() + m.params.entries()[c.bias].offset;
}

void conv_forward(const TrainedModel& m, const ConvSpec& spec, const Act& in, Act& out, std::vector<float>& col) {
  const auto& ks = kernels::active();
  out.resize(spec.out_channels, in.n, in.h, in.w);
  const float* wts = weights_of(m, spec);
  const std::size_t hw = in.hw(), plane = in.plane();
  if (spec.kernel == 1) {
    ks.gemm(Trans::no, Trans::no, spec.out_channels, plane, spec.in_channels, wts, spec.in_channels, in.v.data(),
            plane, 0.0f, out.v.data(), plane);
  } else {
    const std::size_t k = spec.in_channels * 9;
    col.resize(k * hw);
    for (std::size_t s = 0; s < in.n; ++s) {
      im2col3x3(in, s, col.data(), false);
      ks.gemm(Trans::no, Trans::no, spec.out_channels, hw, k, wts, k, col.data(), hw, 0.0f,
              out.v.data() + s * hw, plane);
    }
  }
  add_bias(out, {bias_of(m, spec), spec.out_channels});
  if (spec.relu) ks.relu_forward(out.v.data(), out.v.data(), out.v.size());
}

// g_out holds d(loss)/d(conv output after activation) and is overwritten.
void conv_backward(const TrainedModel& m, const ConvSpec& spec, const Act& in, const Act& out, Act& g_out,
                   Act* g_in, std::span<float> grads, std::vector<float>& col, std::vector<float>& flipped) {
  const auto& ks = kernels::active();
  if (spec.relu) ks.relu_backward(out.v.data(), g_out.v.data(), g_out.v.size());

  const auto& we = m.params.entries()[spec.weight];
  const auto& be = m.params.entries()[spec.bias];
  float* dw = grads.data() + we.offset;
  float* db = grads.data() + be.offset;
  const std::size_t hw = in.hw(), plane = in.plane();
  for (std::size_t c = 0; c < spec.out_channels; ++c) db[c] += static_cast<float>(ks.sum(g_out.row(c), plane));

  const float* wts = weights_of(m, spec);
  if (spec.kernel == 1) {
    ks.gemm(Trans::no, Trans::yes, spec.out_channels, spec.in_channels, plane, g_out.v.data(), plane, in.v.data(),
            plane, 1.0f, dw, spec.in_channels);
    if (g_in) {
      g_in->resize(spec.in_channels, in.n, in.h, in.w);
      ks.gemm(Trans::yes, Trans::no, spec.in_channels, plane, spec.out_channels, wts, spec.in_channels,
              g_out.v.data(), plane, 0.0f, g_in->v.data(), plane);
    }
    return;
  }

  const std::size_t k = spec.in_channels * 9;
  col.resize(std::max(k, spec.out_channels * 9) * hw);
  for (std::size_t s = 0; s < in.n; ++s) {
    im2col3x3(in, s, col.data(), false);
    ks.gemm(Trans::no, Trans::yes, spec.out_channels, k, hw, g_out.v.data() + s * hw, plane, col.data(), hw, 1.0f,
            dw, k);
  }
  if (!g_in) return;

  // Input gradient as a correlation of g_out with the spatially flipped,
  // channel-transposed kernel: flipped[ci][co*9 + t] = w[co][ci*9 + t].
  const std::size_t kt = spec.out_channels * 9;
  flipped.resize(spec.in_channels * kt);
  for (std::size_t co = 0; co < spec.out_channels; ++co) {
    for (std::size_t ci = 0; ci < spec.in_channels; ++ci) {
      for (std::size_t t = 0; t < 9; ++t) flipped[ci * kt + co * 9 + t] = wts[co * k + ci * 9 + t];
    }
  }
  g_in->resize(spec.in_channels, in.n, in.h, in.w);
  for (std::size_t s = 0; s < in.n; ++s) {
    im2col3x3(g_out, s, col.data(), true);
    ks.gemm(Trans::no, Trans::no, spec.in_channels, hw, kt, flipped.data(), kt, col.data(), hw, 0.0f,
            g_in->v.data() + s * hw, plane);
  }
}

}  // namespace

TrainingPass::TrainingPass(const TrainedModel& model) : model_(model), state_(new State) {}
TrainingPass::~TrainingPass() { delete state_; }

std::span<const float> TrainingPass::forward(std::span<const float> batch, std::size_t n) {
  const auto& cfg = model_.config;
  const std::size_t h = cfg.input_size[0], w = cfg.input_size[1], hw = h * w;
  if (batch.size() != n * cfg.in_channels * hw) {
    throw ContractError("batch holds " + std::to_string(batch.size()) + " values, expected " +
                        std::to_string(n * cfg.in_channels * hw) + " for " + std::to_string(n) + " slices of " +
                        std::to_string(h) + "x" + std::to_string(w));
  }
  State& st = *state_;
  st.n = n;
  const std::size_t levels = cfg.pool_stages, blocks = cfg.convs_per_block;
  st.out.resize(model_.convs.size());
  st.pooled.resize(levels);
  st.argmax.resize(levels);
  st.cat.resize(levels);
  st.skip_conv.resize(levels);

  st.input.resize(cfg.in_channels, n, h, w);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < cfg.in_channels; ++c) {
      std::copy_n(batch.data() + (s * cfg.in_channels + c) * hw, hw, st.input.row(c) + s * hw);
    }
  }

  const Act* x = &st.input;
  std::size_t ci = 0;
  for (std::size_t l = 0; l < levels; ++l) {
    for (std::size_t j = 0; j < blocks; ++j, ++ci) {
      conv_forward(model_, model_.convs[ci], *x, st.out[ci], st.col);
      x = &st.out[ci];
    }
    st.skip_conv[l] = ci - 1;
    maxpool2(*x, st.pooled[l], st.argmax[l]);
    x = &st.pooled[l];
  }
  for (std::size_t j = 0; j < blocks; ++j, ++ci) {
    conv_forward(model_, model_.convs[ci], *x, st.out[ci], st.col);
    x = &st.out[ci];
  }
  for (std::size_t l = levels; l-- > 0;) {
    const Act& skip = st.out[st.skip_conv[l]];
    Act& cat = st.cat[l];
    cat.resize(x->c + skip.c, n, skip.h, skip.w);
    upsample2_into(*x, cat);
    std::copy(skip.v.begin(), skip.v.end(), cat.v.begin() + static_cast<long>(x->c * cat.plane()));
    x = &cat;
    for (std::size_t j = 0; j < blocks; ++j, ++ci) {
      conv_forward(model_, model_.convs[ci], *x, st.out[ci], st.col);
      x = &st.out[ci];
    }
  }
  conv_forward(model_, model_.convs[ci], *x, st.out[ci], st.col);

  // Softmax over classes, per pixel.
  const Act& logits = st.out[ci];
  const std::size_t classes = cfg.num_classes, plane = logits.plane();
  st.probs.resize(classes, n, h, w);
  for (std::size_t p = 0; p < plane; ++p) {
    float mx = logits.row(0)[p];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, logits.row(c)[p]);
    float total = 0.0f;
    for (std::size_t c = 0; c < classes; ++c) {
      const float e = std::exp(logits.row(c)[p] - mx);
      st.probs.row(c)[p] = e;
      total += e;
    }
    const float inv = 1.0f / total;
    for (std::size_t c = 0; c < classes; ++c) st.probs.row(c)[p] *= inv;
  }
  st.fg.assign(st.probs.row(1), st.probs.row(1) + plane);
  return st.fg;
}

void TrainingPass::backward(std::span<const float> d_foreground, std::span<float> grads) {
  State& st = *state_;
  const auto& cfg = model_.config;
  if (grads.size() != model_.param_count()) throw ContractError("gradient buffer size differs from parameter count");
  if (d_foreground.size() != st.fg.size()) throw ContractError("foreground gradient size differs from last forward");
  std::fill(grads.begin(), grads.end(), 0.0f);

  const std::size_t levels = cfg.pool_stages, blocks = cfg.convs_per_block, classes = cfg.num_classes;
  std::size_t ci = model_.convs.size() - 1;

  // d loss / d logit_c = dL/dp1 * p1 * (delta_c1 - p_c)
  Act* g = &st.g_a;
  Act* g_other = &st.g_b;
  const Act& logits = st.out[ci];
  g->resize(classes, st.n, logits.h, logits.w);
  const std::size_t plane = logits.plane();
  const float* p1 = st.probs.row(1);
  for (std::size_t c = 0; c < classes; ++c) {
    const float* pc = st.probs.row(c);
    float* gc = g->row(c);
    for (std::size_t p = 0; p < plane; ++p) {
      gc[p] = d_foreground[p] * p1[p] * ((c == 1 ? 1.0f : 0.0f) - pc[p]);
    }
  }

  auto input_of = [&](std::size_t conv_index) -> const Act& {
    // Mirrors the forward wiring.
    std::size_t idx = 0;
    const Act* x = &st.input;
    for (std::size_t l = 0; l < levels; ++l) {
      for (std::size_t j = 0; j < blocks; ++j, ++idx) {
        if (idx == conv_index) return *x;
        x = &st.out[idx];
      }
      x = &st.pooled[l];
    }
    for (std::size_t j = 0; j < blocks; ++j, ++idx) {
      if (idx == conv_index) return *x;
      x = &st.out[idx];
    }
    for (std::size_t l = levels; l-- > 0;) {
      x = &st.cat[l];
      for (std::size_t j = 0; j < blocks; ++j, ++idx) {
        if (idx == conv_index) return *x;
        x = &st.out[idx];
      }
    }
    return *x;
  };

  auto step_back = [&](std::size_t conv_index, bool need_input_grad) {
    conv_backward(model_, model_.convs[conv_index], input_of(conv_index), st.out[conv_index], *g,
                  need_input_grad ? g_other : nullptr, grads, st.col, st.flipped);
    std::swap(g, g_other);
  };

  step_back(ci, true);

  st.g_skip.resize(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    for (std::size_t j = 0; j < blocks; ++j) step_back(--ci, true);
    // g is now d loss / d cat[l]; split into upsampled and skip parts.
    const Act& skip = st.out[st.skip_conv[l]];
    const std::size_t up_channels = st.cat[l].c - skip.c;
    Act& gs = st.g_skip[l];
    gs.resize(skip.c, skip.n, skip.h, skip.w);
    std::copy(g->v.begin() + static_cast<long>(up_channels * g->plane()), g->v.end(), gs.v.begin());
    const Act& below = st.out[ci - 1];  // what was upsampled
    g_other->resize(below.c, below.n, below.h, below.w);
    upsample2_backward(*g, *g_other);
    std::swap(g, g_other);
  }
  for (std::size_t j = 0; j < blocks; ++j) step_back(--ci, true);
  for (std::size_t l = levels; l-- > 0;) {
    const Act& pre = st.out[st.skip_conv[l]];
    g_other->resize(pre.c, pre.n, pre.h, pre.w);
    maxpool2_backward(*g, st.argmax[l], *g_other);
    std::swap(g, g_other);
    const Act& gs = st.g_skip[l];
    for (std::size_t i = 0; i < g->v.size(); ++i) g->v[i] += gs.v[i];
    for (std::size_t j = 0; j < blocks; ++j) {
      --ci;
      step_back(ci, ci != 0);
    }
  }
}

std::span<const float> TrainingPass::probabilities() const { return state_->probs.v; }

namespace {

std::size_t activation_floats_per_sample(const ModelConfig& cfg) {
  const auto& w = cfg.channel_widths;
  std::size_t h = cfg.input_size[0], wd = cfg.input_size[1];
  std::size_t total = cfg.in_channels * h * wd;
  for (std::size_t l = 0; l <= cfg.pool_stages; ++l) {
    const std::size_t px = h * wd;
    total += cfg.convs_per_block * w[l] * px;  // encoder / bottleneck outputs
    if (l < cfg.pool_stages) {
      total += cfg.convs_per_block * w[l] * px + (w[l] + w[l + 1]) * px + w[l] * px / 4;
    }
    h /= 2, wd /= 2;
  }
  return total + 2 * cfg.num_classes * cfg.input_size[0] * cfg.input_size[1];
}

template <class Sink>
void run_chunked(const TrainedModel& model, std::span<const float> batch, std::size_t n, Sink&& sink) {
  const auto& cfg = model.config;
  const std::size_t per_sample = cfg.in_channels * cfg.input_size[0] * cfg.input_size[1];
  if (batch.size() != n * per_sample) throw ContractError("batch size does not match n x input_size");
  constexpr std::size_t kBudgetFloats = std::size_t{48} << 20;
  const std::size_t chunk = std::clamp<std::size_t>(kBudgetFloats / activation_floats_per_sample(cfg), 1, 32);
  TrainingPass pass(model);
  for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
    const std::size_t cn = std::min(chunk, n - s0);
    pass.forward(batch.subspan(s0 * per_sample, cn * per_sample), cn);
    sink(pass, s0, cn);
  }
}

}  // namespace

std::vector<float> forward(const TrainedModel& model, std::span<const float> batch, std::size_t n) {
  const auto& cfg = model.config;
  const std::size_t hw = cfg.input_size[0] * cfg.input_size[1], classes = cfg.num_classes;
  std::vector<float> out(n * hw * classes);
  run_chunked(model, batch, n, [&](TrainingPass& pass, std::size_t s0, std::size_t cn) {
    const auto probs = pass.probabilities();
    const std::size_t plane = cn * hw;
    for (std::size_t s = 0; s < cn; ++s) {
      for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t c = 0; c < classes; ++c) out[((s0 + s) * hw + p) * classes + c] = probs[c * plane + s * hw + p];
      }
    }
  });
  return out;
}

std::vector<float> predict_foreground(const TrainedModel& model, std::span<const float> batch, std::size_t n) {
  const std::size_t hw = model.config.input_size[0] * model.config.input_size[1];
  std::vector<float> out(n * hw);
  run_chunked(model, batch, n, [&](TrainingPass& pass, std::size_t s0, std::size_t cn) {
    std::copy_n(pass.probabilities().begin() + static_cast<long>(cn * hw), cn * hw, out.begin() + static_cast<long>(s0 * hw));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Loss and optimiser

namespace {

struct DiceSums {
  double intersection = 0.0;
  double pred = 0.0;
  double truth = 0.0;
};

DiceSums dice_sums(std::span<const float> pred, std::span<const float> gt, double smooth) {
  if (pred.size() != gt.size()) {
    throw ContractError("dice loss: prediction has " + std::to_string(pred.size()) + " values, ground truth " +
                        std::to_string(gt.size()));
  }
  if (!(smooth > 0.0)) throw ContractError("dice loss: smoothing term must be > 0");
  const auto& ks = kernels::active();
  return {ks.dot(pred.data(), gt.data(), pred.size()), ks.sum(pred.data(), pred.size()),
          ks.sum(gt.data(), gt.size())};
}

}  // namespace

double dice_loss(std::span<const float> pred_fg, std::span<const float> gt, double smooth) {
  const DiceSums s = dice_sums(pred_fg, gt, smooth);
  return -(2.0 * s.intersection + smooth) / (s.pred + s.truth + smooth);
}

void dice_loss_grad(std::span<const float> pred_fg, std::span<const float> gt, double smooth, std::span<float> grad) {
  const DiceSums s = dice_sums(pred_fg, gt, smooth);
  if (grad.size() != pred_fg.size()) throw ContractError("dice loss gradient buffer has the wrong size");
  // d/dp_i of -(N / D) with N = 2 sum(p g) + s, D = sum(p) + sum(g) + s.
  const double numer = 2.0 * s.intersection + smooth;
  const double denom = s.pred + s.truth + smooth;
  const double inv_d2 = 1.0 / (denom * denom);
  for (std::size_t i = 0; i < pred_fg.size(); ++i) {
    grad[i] = static_cast<float>(-(2.0 * gt[i] * denom - numer) * inv_d2);
  }
}

AdamOptimizer::AdamOptimizer(std::size_t parameter_count, AdamConfig config)
    : config_(config), m_(parameter_count, 0.0f), v_(parameter_count, 0.0f) {}

void AdamOptimizer::step(std::span<float> params, std::span<const float> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ContractError("optimizer state does not match the parameter count");
  }
  ++t_;
  kernels::AdamStep s;
  s.lr = config_.learning_rate;
  s.beta1 = config_.beta1;
  s.beta2 = config_.beta2;
  s.eps = config_.epsilon;
  s.bias_correction1 = static_cast<float>(1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(t_)));
  s.bias_correction2 = static_cast<float>(1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(t_)));
  kernels::active().adam_update(params.data(), grads.data(), m_.data(), v_.data(), params.size(), s);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'V', 'S', 'E', 'G', 'C', 'K', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path) {
  nlohmann::json header;
  header["config"] = model.config.to_json();
  header["view"] = std::string(to_string(model.view));
  header["param_count"] = model.param_count();
  header["tensors"] = nlohmann::json::array();
  for (const auto& e : model.params.entries()) {
    header["tensors"].push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}, {"count", e.count}});
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (float v : model.params.values()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                          static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

TrainedModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw FormatError("not an mvseg checkpoint: " + path.string());
  }
  const std::uint64_t len = read_u64(in);
  if (len > (std::uint64_t{1} << 26)) throw FormatError("checkpoint header too large: " + path.string());
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const auto view = parse_view_axis(header.value("view", std::string()));
  if (!view) throw FormatError("checkpoint names no valid view: " + path.string());

  TrainedModel model = build_model(ModelConfig::from_json(header.at("config")), *view);
  const auto stored = header.value("param_count", std::size_t{0});
  if (stored != model.param_count()) {
    throw FormatError("checkpoint parameter count " + std::to_string(stored) + " differs from architecture count " +
                      std::to_string(model.param_count()));
  }
  const auto& tensors = header.at("tensors");
  if (tensors.size() != model.params.entries().size()) throw FormatError("checkpoint tensor directory mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& e = model.params.entries()[i];
    if (tensors[i].value("name", std::string()) != e.name ||
        tensors[i].value("shape", std::vector<std::size_t>{}) != e.shape) {
      throw FormatError("checkpoint tensor " + std::to_string(i) + " does not match layer " + e.name);
    }
  }

  auto values = model.params.values();
  std::vector<unsigned char> raw(values.size() * 4);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError("truncated checkpoint weights: " + path.string());
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) | (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                               (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                               (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    std::memcpy(&values[i], &bits, 4);
  }
  return model;
}

}  // namespace mvseg
