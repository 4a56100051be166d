#include "wrcfusion/wa_moe.hpp"

#include <cmath>

#include "wrcfusion/error.hpp"
#include "wrcfusion/wavelet.hpp"

namespace wrc {

namespace {

Tensor he_conv(Shape shape, Rng& rng) {
  // fan_in = cin_g * kh * kw
  const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  Tensor t = Tensor::randn(shape, rng, std::sqrt(2.0 / fan_in));
  return t;
}

void fill_zero(Parameter* p) {
  auto r = p->tensor.raw();
  std::fill(r.begin(), r.end(), 0.0);
}

}  // namespace

void WAMoEConfig::validate() const {
  if (channels == 0) throw ConfigError("wa-moe: channels must be positive");
  if (num_experts == 0) throw ConfigError("wa-moe: needs at least one expert");
  if (top_k < 1 || top_k > num_experts)
    throw ConfigError("wa-moe: top_k=" + std::to_string(top_k) +
                      " outside [1, " + std::to_string(num_experts) + "]");
  if (conv_groups == 0 || (4 * channels) % conv_groups != 0)
    throw ConfigError("wa-moe: band channel count " + std::to_string(4 * channels) +
                      " not divisible by conv groups " + std::to_string(conv_groups));
  if (gate_temperature <= 0.0)
    throw ConfigError("wa-moe: gate temperature must be positive");
}

WAMoEBlock::WAMoEBlock(ParamStore& store, const std::string& prefix,
                       const WAMoEConfig& cfg, Rng& rng, bool zero_init)
    : cfg_(cfg) {
  cfg_.validate();
  const std::size_t c4 = 4 * cfg_.channels;
  const std::size_t c16 = 16 * cfg_.channels;
  const std::size_t g = cfg_.conv_groups;
  const std::size_t hid = cfg_.hidden();

  conv1_w_ = &store.create(prefix + ".conv1.w", he_conv({c4, c4 / g, 3, 3}, rng));
  conv1_b_ = &store.create(prefix + ".conv1.b", Tensor::zeros({c4}));
  conv2_w_ = &store.create(prefix + ".conv2.w", he_conv({c16, c16 / g, 1, 1}, rng));
  conv2_b_ = &store.create(prefix + ".conv2.b", Tensor::zeros({c16}));
  gate_w_ = &store.create(prefix + ".gate.w",
                          he_conv({cfg_.num_experts, c4, 1, 1}, rng));
  gate_b_ = &store.create(prefix + ".gate.b", Tensor::zeros({cfg_.num_experts}));
  for (std::size_t i = 0; i < cfg_.num_experts; ++i) {
    const std::string ep = prefix + ".expert" + std::to_string(i);
    Expert ex;
    ex.dw_w = &store.create(ep + ".dw.w", he_conv({c4, 1, 3, 3}, rng));
    ex.dw_b = &store.create(ep + ".dw.b", Tensor::zeros({c4}));
    ex.pw1_w = &store.create(ep + ".pw1.w", he_conv({hid, c4, 1, 1}, rng));
    ex.pw1_b = &store.create(ep + ".pw1.b", Tensor::zeros({hid}));
    ex.pw2_w = &store.create(ep + ".pw2.w", he_conv({c4, hid, 1, 1}, rng));
    ex.pw2_b = &store.create(ep + ".pw2.b", Tensor::zeros({c4}));
    experts_.push_back(ex);
  }
  if (zero_init) zero_init_all();
}

void WAMoEBlock::zero_init_all() {
  fill_zero(conv1_w_);
  fill_zero(conv1_b_);
  fill_zero(conv2_w_);
  fill_zero(conv2_b_);
  fill_zero(gate_w_);
  fill_zero(gate_b_);
  for (auto& ex : experts_) {
    fill_zero(ex.dw_w);
    fill_zero(ex.dw_b);
    fill_zero(ex.pw1_w);
    fill_zero(ex.pw1_b);
    fill_zero(ex.pw2_w);
    fill_zero(ex.pw2_b);
  }
}

MoEGate WAMoEBlock::gate(const Tensor& fused) const {
  Tensor logits = conv2d(fused, gate_w_->tensor, gate_b_->tensor, {});
  MoEGate out;
  out.weights = topk_softmax_gate(logits, cfg_.top_k, cfg_.gate_temperature);
  const Shape& s = out.weights.shape();
  const std::size_t hw = s[1] * s[2];
  out.active.resize(hw);
  auto ws = out.weights.data();
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t e = 0; e < s[0]; ++e)
      if (ws[e * hw + p] > 0.0) out.active[p].push_back(e);
  return out;
}

Tensor WAMoEBlock::expert_forward(const Tensor& fused, std::size_t expert_index) const {
  if (expert_index >= experts_.size())
    throw ConfigError("wa-moe: expert index " + std::to_string(expert_index) +
                      " out of range (" + std::to_string(experts_.size()) + " experts)");
  const Expert& ex = experts_[expert_index];
  const std::size_t c4 = 4 * cfg_.channels;
  Conv2dOpts dw_opts;
  dw_opts.padding = 1;
  dw_opts.groups = c4;
  Tensor y = conv2d(fused, ex.dw_w->tensor, ex.dw_b->tensor, dw_opts);
  y = conv2d(y, ex.pw1_w->tensor, ex.pw1_b->tensor, {});
  y = relu(y);
  y = conv2d(y, ex.pw2_w->tensor, ex.pw2_b->tensor, {});
  return y;
}

Tensor WAMoEBlock::forward(const Tensor& x) const {
  if (!x.defined() || x.rank() != 3)
    throw DimensionError("wa-moe: input must be [C x H x W]");
  const Shape& s = x.shape();
  if (s[0] != cfg_.channels)
    throw DimensionError("wa-moe: input channels " + std::to_string(s[0]) +
                         " != configured " + std::to_string(cfg_.channels));
  if (s[1] < 4 || s[2] < 4)
    throw DimensionError("wa-moe: spatial size " + std::to_string(s[1]) + "x" +
                         std::to_string(s[2]) + " too small for two analysis levels");
  const std::size_t h2 = (s[1] + 1) / 2, w2 = (s[2] + 1) / 2;

  Tensor bands = dwt2_concat(x);  // [4C x h2 x w2]

  Conv2dOpts c1_opts;
  c1_opts.padding = 1;
  c1_opts.groups = cfg_.conv_groups;
  Tensor f1 = conv2d(bands, conv1_w_->tensor, conv1_b_->tensor, c1_opts);

  Tensor second = dwt2_concat(bands);  // [16C x h4 x w4]
  Conv2dOpts c2_opts;
  c2_opts.groups = cfg_.conv_groups;
  second = conv2d(second, conv2_w_->tensor, conv2_b_->tensor, c2_opts);
  Tensor f2 = iwt2_concat(second, h2, w2);  // back to [4C x h2 x w2]

  Tensor fused = add(f1, f2);

  MoEGate g = gate(fused);
  Tensor moe;
  for (std::size_t e = 0; e < cfg_.num_experts; ++e) {
    Tensor plane = slice(g.weights, 0, e, 1);          // [1 x h2 x w2]
    Tensor weighted = mul(tile_channels(plane, 4 * cfg_.channels),
                          expert_forward(fused, e));
    moe = moe.defined() ? add(moe, weighted) : weighted;
  }

  Tensor back = iwt2_concat(moe, s[1], s[2]);  // [C x H x W]
  return add(back, x);
}

std::size_t WAMoEBlock::param_count(const WAMoEConfig& cfg) {
  const std::size_t c4 = 4 * cfg.channels;
  const std::size_t c16 = 16 * cfg.channels;
  const std::size_t g = cfg.conv_groups;
  const std::size_t hid = cfg.hidden();
  std::size_t n = 0;
  n += c4 * (c4 / g) * 9 + c4;            // conv1
  n += c16 * (c16 / g) + c16;             // conv2 (1x1)
  n += cfg.num_experts * c4 + cfg.num_experts;  // gate
  n += cfg.num_experts * (c4 * 9 + c4 +   // depthwise
                          hid * c4 + hid +  // pw1
                          c4 * hid + c4);   // pw2
  return n;
}

std::size_t WAMoEBlock::mac_count(const WAMoEConfig& cfg, std::size_t h,
                                  std::size_t w) {
  const std::size_t h2 = (h + 1) / 2, w2 = (w + 1) / 2;
  const std::size_t h4 = (h2 + 1) / 2, w4 = (w2 + 1) / 2;
  const std::size_t c4 = 4 * cfg.channels;
  const std::size_t c16 = 16 * cfg.channels;
  const std::size_t g = cfg.conv_groups;
  const std::size_t hid = cfg.hidden();
  std::size_t n = 0;
  n += h2 * w2 * c4 * (c4 / g) * 9;        // conv1
  n += h4 * w4 * c16 * (c16 / g);          // conv2
  n += h2 * w2 * cfg.num_experts * c4;     // gate logits
  n += cfg.num_experts * (h2 * w2 * c4 * 9 +        // depthwise
                          h2 * w2 * hid * c4 +      // pw1
                          h2 * w2 * c4 * hid);      // pw2
  return n;
}

// ---- FPN ----

void FPNConfig::validate() const {
  if (levels == 0) throw ConfigError("fpn: needs at least one level");
  if (widths.size() != levels)
    throw ConfigError("fpn: widths count " + std::to_string(widths.size()) +
                      " != level count " + std::to_string(levels));
  for (std::size_t w : widths)
    if (w == 0) throw ConfigError("fpn: level widths must be positive");
  for (std::size_t d : detect_levels)
    if (d >= levels) throw ConfigError("fpn: detect level out of range");
}

FPN::FPN(ParamStore& store, const std::string& prefix, const FPNConfig& cfg,
         std::span<const std::size_t> in_channels, const WAMoEConfig& moe_base,
         Rng& rng, bool identity_blocks)
    : cfg_(cfg) {
  cfg_.validate();
  if (in_channels.size() != cfg_.levels)
    throw ConfigError("fpn: input channel list length != level count");
  for (std::size_t i = 0; i < cfg_.levels; ++i) {
    const std::string lp = prefix + ".l" + std::to_string(i);
    lateral_w_.push_back(&store.create(
        lp + ".lateral.w", he_conv({cfg_.widths[i], in_channels[i], 1, 1}, rng)));
    lateral_b_.push_back(&store.create(lp + ".lateral.b", Tensor::zeros({cfg_.widths[i]})));
    if (i + 1 < cfg_.levels && cfg_.widths[i + 1] != cfg_.widths[i]) {
      td_w_.push_back(&store.create(
          lp + ".td.w", he_conv({cfg_.widths[i], cfg_.widths[i + 1], 1, 1}, rng)));
      td_b_.push_back(&store.create(lp + ".td.b", Tensor::zeros({cfg_.widths[i]})));
    } else {
      td_w_.push_back(nullptr);
      td_b_.push_back(nullptr);
    }
    WAMoEConfig mc = moe_base;
    mc.channels = cfg_.widths[i];
    blocks_.emplace_back(store, lp + ".wamoe", mc, rng, identity_blocks);
  }
}

std::vector<Tensor> FPN::forward(std::span<const Tensor> levels,
                                 FPNTaps* taps) const {
  if (levels.size() != cfg_.levels)
    throw ConfigError("fpn: got " + std::to_string(levels.size()) +
                      " backbone levels, configured for " +
                      std::to_string(cfg_.levels));
  for (std::size_t i = 0; i + 1 < levels.size(); ++i) {
    const Shape& fine = levels[i].shape();
    const Shape& coarse = levels[i + 1].shape();
    if (fine[1] != 2 * coarse[1] || fine[2] != 2 * coarse[2])
      throw ConfigError("fpn: level " + std::to_string(i + 1) + " " +
                        shape_str(coarse) + " does not halve level " +
                        std::to_string(i) + " " + shape_str(fine));
  }

  std::vector<Tensor> lateral(cfg_.levels);
  for (std::size_t i = 0; i < cfg_.levels; ++i)
    lateral[i] = conv2d(levels[i], lateral_w_[i]->tensor, lateral_b_[i]->tensor, {});

  std::vector<Tensor> merged(cfg_.levels);
  merged[cfg_.levels - 1] = lateral[cfg_.levels - 1];
  for (std::size_t i = cfg_.levels - 1; i-- > 0;) {
    Tensor td = upsample_nearest2x(merged[i + 1]);
    if (td_w_[i]) td = conv2d(td, td_w_[i]->tensor, td_b_[i]->tensor, {});
    merged[i] = add(lateral[i], td);
  }

  std::vector<Tensor> out(cfg_.levels);
  std::vector<Tensor> block_out(cfg_.levels);
  for (std::size_t i = 0; i < cfg_.levels; ++i) {
    block_out[i] = blocks_[i].forward(merged[i]);
    out[i] = add(block_out[i], lateral[i]);  // lateral skip
  }
  if (taps) {
    taps->laterals = lateral;
    taps->merged = merged;
    taps->block_out = block_out;
  }
  return out;
}

// ---- encoder ----

Encoder::Encoder(ParamStore& store, const std::string& prefix,
                 const EncoderConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  if (cfg_.channels.size() != cfg_.strides.size() || cfg_.channels.empty())
    throw ConfigError("encoder: channels/strides must be non-empty and equal length");
  std::size_t cin = cfg_.in_channels;
  for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
    const std::string sp = prefix + ".stage" + std::to_string(i);
    w_.push_back(&store.create(sp + ".w", he_conv({cfg_.channels[i], cin, 3, 3}, rng)));
    b_.push_back(&store.create(sp + ".b", Tensor::zeros({cfg_.channels[i]})));
    cin = cfg_.channels[i];
  }
}

std::vector<Tensor> Encoder::forward(const Tensor& x) const {
  std::vector<Tensor> outs;
  Tensor cur = x;
  for (std::size_t i = 0; i < w_.size(); ++i) {
    Conv2dOpts opts;
    opts.stride = cfg_.strides[i];
    opts.padding = 1;
    cur = relu(conv2d(cur, w_[i]->tensor, b_[i]->tensor, opts));
    outs.push_back(cur);
  }
  return outs;
}

}  // namespace wrc
