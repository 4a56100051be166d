#pragma once
#include <span>
#include <string>
#include <vector>

#include "wrcfusion/tensor.hpp"

namespace wrc {

struct WAMoEConfig {
  std::size_t channels = 32;      // C of the block input
  std::size_t num_experts = 4;
  std::size_t top_k = 2;
  std::size_t expert_hidden = 0;  // 0 -> use `channels`
  double gate_temperature = 1.0;
  std::size_t conv_groups = 4;    // groups of the two band-space convs

  std::size_t hidden() const { return expert_hidden ? expert_hidden : channels; }
  void validate() const;
};

struct MoEGate {
  Tensor weights;                                 // [N_e x h x w], rows sum to 1
  std::vector<std::vector<std::size_t>> active;   // selected experts per location
};

// Wavelet-domain block: two-branch band encoding, sparse expert mixture,
// inverse transform, residual add. Output shape equals input shape.
class WAMoEBlock {
 public:
  WAMoEBlock(ParamStore& store, const std::string& prefix,
             const WAMoEConfig& cfg, Rng& rng, bool zero_init = false);

  // full chain; requires H, W >= 4 so two analysis levels fit
  Tensor forward(const Tensor& x) const;

  // sparse gate over the fused band feature [4C x h x w]
  MoEGate gate(const Tensor& fused) const;

  // depthwise 3x3 -> pointwise to hidden -> relu -> pointwise back
  Tensor expert_forward(const Tensor& fused, std::size_t expert_index) const;

  const WAMoEConfig& config() const { return cfg_; }

  // zero every pre-residual stage so forward becomes the identity
  void zero_init_all();

  static std::size_t param_count(const WAMoEConfig& cfg);
  // conv multiply-accumulates of one forward at the given input size
  static std::size_t mac_count(const WAMoEConfig& cfg, std::size_t h, std::size_t w);

 private:
  WAMoEConfig cfg_;
  Parameter* conv1_w_;
  Parameter* conv1_b_;
  Parameter* conv2_w_;
  Parameter* conv2_b_;
  Parameter* gate_w_;
  Parameter* gate_b_;
  struct Expert {
    Parameter* dw_w;
    Parameter* dw_b;
    Parameter* pw1_w;
    Parameter* pw1_b;
    Parameter* pw2_w;
    Parameter* pw2_b;
  };
  std::vector<Expert> experts_;
};

struct FPNConfig {
  std::size_t levels = 2;
  std::vector<std::size_t> widths;         // per-level output channels
  std::vector<std::size_t> detect_levels;  // which outputs feed detection
  void validate() const;
};

struct FPNTaps {
  std::vector<Tensor> laterals;
  std::vector<Tensor> merged;     // top-down sums, WA-MoE inputs
  std::vector<Tensor> block_out;  // WA-MoE outputs before the lateral skip
};

// Lateral 1x1 projections, nearest-2x top-down pathway, one WA-MoE block per
// merged level, lateral skip onto the block output.
class FPN {
 public:
  FPN(ParamStore& store, const std::string& prefix, const FPNConfig& cfg,
      std::span<const std::size_t> in_channels, const WAMoEConfig& moe_base,
      Rng& rng, bool identity_blocks = false);

  // levels ordered fine -> coarse with exactly halving spatial sizes
  std::vector<Tensor> forward(std::span<const Tensor> levels,
                              FPNTaps* taps = nullptr) const;

  const FPNConfig& config() const { return cfg_; }
  const WAMoEBlock& block(std::size_t level) const { return blocks_[level]; }
  WAMoEBlock& block(std::size_t level) { return blocks_[level]; }

 private:
  FPNConfig cfg_;
  std::vector<Parameter*> lateral_w_, lateral_b_;
  std::vector<Parameter*> td_w_, td_b_;  // top-down channel maps (null if same width)
  std::vector<WAMoEBlock> blocks_;
};

// Tiny strided CNN stack standing in for the full-size backbones.
struct EncoderConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels;
  std::vector<std::size_t> strides;
};

class Encoder {
 public:
  Encoder(ParamStore& store, const std::string& prefix,
          const EncoderConfig& cfg, Rng& rng);
  // returns every stage output, fine -> coarse
  std::vector<Tensor> forward(const Tensor& x) const;
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  std::vector<Parameter*> w_, b_;
};

}  // namespace wrc
