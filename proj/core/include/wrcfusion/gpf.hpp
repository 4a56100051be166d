#pragma once
#include <array>
#include <span>
#include <string>
#include <vector>

#include "wrcfusion/tensor.hpp"

namespace wrc {

// ---- Stage 1: Geometry-driven Semantic Alignment ----

struct GSAConfig {
  std::size_t d = 64;          // embedding width of Q/K/V tokens
  std::size_t pooled_h = 4;    // pooled query grid, n = pooled_h * pooled_w
  std::size_t pooled_w = 4;
  std::size_t gdc_groups = 4;
  std::size_t gdc_dilation = 2;
  std::size_t heads = 1;       // d must divide evenly

  std::size_t n() const { return pooled_h * pooled_w; }
  void validate() const;
};

struct GSATaps {
  Tensor q;  // [N x d]
  Tensor k;  // [M x d]
  Tensor v;  // [M x d]
  Tensor a;  // [n x d]
};

// The two-stage sigmoid cross-attention core:
//   S    = sigmoid(A K^T / sqrt(d) + b) V     [n x d]
//   F_GS = sigmoid(Q A^T / sqrt(d) + b) S     [N x d]
// Attention weights are unnormalized, each in (0, 1).
Tensor gsa_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                     const Tensor& a, const Tensor& bias);

// Exact multiply-accumulate count of the two attention stages.
std::size_t gsa_op_count(std::size_t n_tokens, std::size_t pooled_len,
                         std::size_t k_len, std::size_t d);

// Aligns the EA geometry grid with image semantics through the pooled
// two-step attention. Each instance is bound to fixed grid sizes because the
// positional encodings are learned per cell.
class GSA {
 public:
  GSA(ParamStore& store, const std::string& prefix, const GSAConfig& cfg,
      std::size_t ea_channels, std::size_t img_channels, std::size_t ea_h,
      std::size_t ea_w, std::size_t img_h, std::size_t img_w, Rng& rng);

  // f_ea [C_ea x H_EA x W_EA], f_img [C_i x H_I x W_I] -> [N x d]
  Tensor forward(const Tensor& f_ea, const Tensor& f_img,
                 GSATaps* taps = nullptr) const;

  const GSAConfig& config() const { return cfg_; }
  std::size_t ea_h() const { return ea_h_; }
  std::size_t ea_w() const { return ea_w_; }

 private:
  GSAConfig cfg_;
  std::size_t ea_channels_, img_channels_, ea_h_, ea_w_, img_h_, img_w_;
  Parameter *q_w_, *q_b_, *k_w_, *k_b_, *v_w_, *v_b_;
  Parameter *pe_q_, *pe_k_, *pe_v_;
  Parameter* bias_;  // scalar b shared by both attention stages
};

// ---- Stage 2: Range-aware Geometric Refinement ----

// One candidate object: latent embedding plus its geometric state.
struct QueryState {
  Tensor embedding;               // [d]
  std::array<double, 2> anchor{}; // (u, v) grid anchor in [0,1]^2
  Tensor ref_point;               // [2], clamp(anchor + offset)
  Tensor confidence;              // [1] in (0,1)
  std::vector<Tensor> uncertainties;  // one [S*K] vector per attention path
};

// uniform sqrt(Nq) x sqrt(Nq) grid of cell centers; Nq must be square
std::vector<std::array<double, 2>> make_anchor_grid(std::size_t nq);

// single-head cross-attention of queries against a pooled feature grid
class PoolAttn {
 public:
  PoolAttn(ParamStore& store, const std::string& prefix, std::size_t d,
           std::size_t feat_channels, Rng& rng, std::size_t pool = 4);
  // queries [Nq x d], feat [C x H x W] -> [Nq x d]
  Tensor forward(const Tensor& queries, const Tensor& feat) const;

 private:
  std::size_t d_, pool_;
  Parameter *k_w_, *v_w_, *pe_k_, *pe_v_;
};

// Fuses the initial queries with pooled image/EA cues, then regresses the
// reference point offset and confidence.
class ReferencePointGenerator {
 public:
  ReferencePointGenerator(ParamStore& store, const std::string& prefix,
                          std::size_t d, std::size_t img_channels,
                          std::size_t ea_channels, Rng& rng);

  std::vector<QueryState> generate(
      const Tensor& q0, const Tensor& f_img, const Tensor& f_ea,
      const std::vector<std::array<double, 2>>& anchors) const;

 private:
  std::size_t d_;
  PoolAttn img_attn_, ea_attn_;
  Parameter *wq_, *w_delta_, *w_conf_;
};

struct DeformableConfig {
  std::size_t d = 64;
  std::size_t levels = 2;             // S
  std::size_t samples_per_level = 4;  // K
};

// Deformable uncertainty-weighted sampling over a feature pyramid. The GS
// and RA paths are two independently parameterized instances of this class.
class DeformableUncertainAttention {
 public:
  DeformableUncertainAttention(ParamStore& store, const std::string& prefix,
                               const DeformableConfig& cfg, Rng& rng);

  struct Taps {
    Tensor offsets;  // [S*K x 2]
    Tensor weights;  // [S*K], softmax over all samples
    Tensor u;        // [S*K], sigmoid
  };

  // pyramid levels are [d x H_s x W_s]; appends this path's uncertainties
  // onto the query
  Tensor forward(QueryState& query, std::span<const Tensor> pyramid,
                 Taps* taps = nullptr) const;

  const DeformableConfig& config() const { return cfg_; }

 private:
  DeformableConfig cfg_;
  Parameter *off_w_, *off_b_, *wt_w_, *wt_b_, *u_w_, *u_b_;
};

// Eq-style concat + learnable projection of the two path outputs.
class PathFusion {
 public:
  PathFusion(ParamStore& store, const std::string& prefix, std::size_t d,
             Rng& rng);
  Tensor forward(const Tensor& f_gs, const Tensor& f_ra) const;  // [d]

 private:
  std::size_t d_;
  Parameter *w_, *b_;
};

}  // namespace wrc
