#include "wrcfusion/gpf.hpp"

#include <cmath>

#include "wrcfusion/error.hpp"

namespace wrc {

namespace {

Tensor he_conv(Shape shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  return Tensor::randn(shape, rng, std::sqrt(2.0 / fan_in));
}

Tensor xavier(Shape shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape[0]);
  return Tensor::randn(shape, rng, std::sqrt(1.0 / fan_in));
}

}  // namespace

void GSAConfig::validate() const {
  if (d == 0) throw ConfigError("gsa: embedding dim must be positive");
  if (pooled_h == 0 || pooled_w == 0)
    throw ConfigError("gsa: pooled grid must be positive");
  if (heads == 0 || d % heads != 0)
    throw ConfigError("gsa: embedding dim " + std::to_string(d) +
                      " not divisible by head count " + std::to_string(heads));
  if (gdc_groups == 0 || gdc_dilation == 0)
    throw ConfigError("gsa: groups and dilation must be positive");
}

Tensor gsa_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                     const Tensor& a, const Tensor& bias) {
  const std::size_t d = q.shape()[1];
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  // S = sigmoid(A K^T / sqrt(d) + b) V
  Tensor s = matmul(sigmoid(add_scalar_tensor(
                        mul_scalar(matmul(a, transpose(k)), scale), bias)),
                    v);
  // F_GS = sigmoid(Q A^T / sqrt(d) + b) S
  return matmul(sigmoid(add_scalar_tensor(
                    mul_scalar(matmul(q, transpose(a)), scale), bias)),
                s);
}

std::size_t gsa_op_count(std::size_t n_tokens, std::size_t pooled_len,
                         std::size_t k_len, std::size_t d) {
  // per stage: score matmul + value matmul, d MACs per score cell each
  return 2 * d * (pooled_len * k_len + n_tokens * pooled_len);
}

GSA::GSA(ParamStore& store, const std::string& prefix, const GSAConfig& cfg,
         std::size_t ea_channels, std::size_t img_channels, std::size_t ea_h,
         std::size_t ea_w, std::size_t img_h, std::size_t img_w, Rng& rng)
    : cfg_(cfg),
      ea_channels_(ea_channels),
      img_channels_(img_channels),
      ea_h_(ea_h),
      ea_w_(ea_w),
      img_h_(img_h),
      img_w_(img_w) {
  cfg_.validate();
  if (ea_channels % cfg_.gdc_groups != 0 || img_channels % cfg_.gdc_groups != 0 ||
      cfg_.d % cfg_.gdc_groups != 0)
    throw ConfigError("gsa: channel counts must divide the GDC group count");
  q_w_ = &store.create(prefix + ".q.w",
                       he_conv({cfg_.d, ea_channels / cfg_.gdc_groups, 3, 3}, rng));
  q_b_ = &store.create(prefix + ".q.b", Tensor::zeros({cfg_.d}));
  k_w_ = &store.create(prefix + ".k.w",
                       he_conv({cfg_.d, img_channels / cfg_.gdc_groups, 3, 3}, rng));
  k_b_ = &store.create(prefix + ".k.b", Tensor::zeros({cfg_.d}));
  v_w_ = &store.create(prefix + ".v.w",
                       he_conv({cfg_.d, img_channels / cfg_.gdc_groups, 3, 3}, rng));
  v_b_ = &store.create(prefix + ".v.b", Tensor::zeros({cfg_.d}));
  pe_q_ = &store.create(prefix + ".pe_q",
                        Tensor::randn({cfg_.d, ea_h, ea_w}, rng, 0.02));
  pe_k_ = &store.create(prefix + ".pe_k",
                        Tensor::randn({cfg_.d, img_h, img_w}, rng, 0.02));
  pe_v_ = &store.create(prefix + ".pe_v",
                        Tensor::randn({cfg_.d, img_h, img_w}, rng, 0.02));
  bias_ = &store.create(prefix + ".bias", Tensor::zeros({1}));
}

Tensor GSA::forward(const Tensor& f_ea, const Tensor& f_img, GSATaps* taps) const {
  if (f_ea.rank() != 3 || f_ea.shape()[0] != ea_channels_ ||
      f_ea.shape()[1] != ea_h_ || f_ea.shape()[2] != ea_w_)
    throw ConfigError("gsa: EA feature shape " + shape_str(f_ea.shape()) +
                      " does not match configured grid");
  if (f_img.rank() != 3 || f_img.shape()[0] != img_channels_ ||
      f_img.shape()[1] != img_h_ || f_img.shape()[2] != img_w_)
    throw ConfigError("gsa: image feature shape " + shape_str(f_img.shape()) +
                      " does not match configured grid");
  const std::size_t n_tokens = ea_h_ * ea_w_;
  if (cfg_.n() >= n_tokens)
    throw ConfigError("gsa: pooled length " + std::to_string(cfg_.n()) +
                      " must be smaller than query length " +
                      std::to_string(n_tokens));

  Conv2dOpts gdc;
  gdc.dilation = cfg_.gdc_dilation;
  gdc.padding = cfg_.gdc_dilation;  // 3x3 kernel keeps spatial size
  gdc.groups = cfg_.gdc_groups;

  Tensor qg = add(conv2d(f_ea, q_w_->tensor, q_b_->tensor, gdc), pe_q_->tensor);
  Tensor kg = add(conv2d(f_img, k_w_->tensor, k_b_->tensor, gdc), pe_k_->tensor);
  Tensor vg = add(conv2d(f_img, v_w_->tensor, v_b_->tensor, gdc), pe_v_->tensor);

  Tensor q = flatten_spatial(qg);
  Tensor k = flatten_spatial(kg);
  Tensor v = flatten_spatial(vg);
  Tensor a = flatten_spatial(adaptive_max_pool2d(qg, cfg_.pooled_h, cfg_.pooled_w));

  if (taps) {
    taps->q = q;
    taps->k = k;
    taps->v = v;
    taps->a = a;
  }
  return gsa_attention(q, k, v, a, bias_->tensor);
}

// ---- anchors ----

std::vector<std::array<double, 2>> make_anchor_grid(std::size_t nq) {
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(nq))));
  if (g * g != nq)
    throw ConfigError("anchor grid: query count " + std::to_string(nq) +
                      " is not a perfect square");
  std::vector<std::array<double, 2>> anchors;
  anchors.reserve(nq);
  for (std::size_t row = 0; row < g; ++row)
    for (std::size_t col = 0; col < g; ++col)
      anchors.push_back({(static_cast<double>(col) + 0.5) / static_cast<double>(g),
                         (static_cast<double>(row) + 0.5) / static_cast<double>(g)});
  return anchors;
}

// ---- PoolAttn ----

PoolAttn::PoolAttn(ParamStore& store, const std::string& prefix, std::size_t d,
                   std::size_t feat_channels, Rng& rng, std::size_t pool)
    : d_(d), pool_(pool) {
  k_w_ = &store.create(prefix + ".k.w", xavier({feat_channels, d}, rng));
  v_w_ = &store.create(prefix + ".v.w", xavier({feat_channels, d}, rng));
  pe_k_ = &store.create(prefix + ".pe_k", Tensor::randn({pool * pool, d}, rng, 0.02));
  pe_v_ = &store.create(prefix + ".pe_v", Tensor::randn({pool * pool, d}, rng, 0.02));
}

Tensor PoolAttn::forward(const Tensor& queries, const Tensor& feat) const {
  if (queries.rank() != 2 || queries.shape()[1] != d_)
    throw DimensionError("pool-attn: queries must be [Nq x d]");
  const std::size_t ph = std::min(pool_, feat.shape()[1]);
  const std::size_t pw = std::min(pool_, feat.shape()[2]);
  Tensor tokens = flatten_spatial(adaptive_max_pool2d(feat, ph, pw));
  Tensor k = matmul(tokens, k_w_->tensor);
  Tensor v = matmul(tokens, v_w_->tensor);
  if (ph * pw == pool_ * pool_) {
    k = add(k, pe_k_->tensor);
    v = add(v, pe_v_->tensor);
  } else {  // small feature maps pool to fewer tokens; PE crops to match
    k = add(k, slice(pe_k_->tensor, 0, 0, ph * pw));
    v = add(v, slice(pe_v_->tensor, 0, 0, ph * pw));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_));
  Tensor attn = softmax(mul_scalar(matmul(queries, transpose(k)), scale), 1);
  return matmul(attn, v);
}

// ---- reference points ----

ReferencePointGenerator::ReferencePointGenerator(ParamStore& store,
                                                 const std::string& prefix,
                                                 std::size_t d,
                                                 std::size_t img_channels,
                                                 std::size_t ea_channels,
                                                 Rng& rng)
    : d_(d),
      img_attn_(store, prefix + ".img_attn", d, img_channels, rng),
      ea_attn_(store, prefix + ".ea_attn", d, ea_channels, rng) {
  wq_ = &store.create(prefix + ".wq", xavier({d, d}, rng));
  // zero-init so reference points start exactly on their anchors
  w_delta_ = &store.create(prefix + ".w_delta", Tensor::zeros({d, 2}));
  w_conf_ = &store.create(prefix + ".w_conf", Tensor::zeros({d, 1}));
}

std::vector<QueryState> ReferencePointGenerator::generate(
    const Tensor& q0, const Tensor& f_img, const Tensor& f_ea,
    const std::vector<std::array<double, 2>>& anchors) const {
  if (q0.rank() != 2 || q0.shape()[1] != d_)
    throw DimensionError("reference points: queries must be [Nq x d]");
  const std::size_t nq = q0.shape()[0];
  if (anchors.size() != nq)
    throw ContractError("reference points: " + std::to_string(anchors.size()) +
                        " anchors for " + std::to_string(nq) + " queries");

  Tensor fused = layer_norm(add(add(matmul(q0, wq_->tensor),
                                    img_attn_.forward(q0, f_img)),
                                ea_attn_.forward(q0, f_ea)));
  Tensor offsets = matmul(fused, w_delta_->tensor);     // [Nq x 2]
  Tensor conf = sigmoid(matmul(fused, w_conf_->tensor));  // [Nq x 1]

  std::vector<QueryState> queries(nq);
  for (std::size_t i = 0; i < nq; ++i) {
    QueryState& qs = queries[i];
    qs.embedding = row(fused, i);
    qs.anchor = anchors[i];
    Tensor anchor_t(Shape{2}, {anchors[i][0], anchors[i][1]});
    qs.ref_point = clamp(add(anchor_t, row(offsets, i)), 0.0, 1.0);
    qs.confidence = reshape(row(conf, i), Shape{1});
  }
  return queries;
}

// ---- deformable uncertain attention ----

DeformableUncertainAttention::DeformableUncertainAttention(
    ParamStore& store, const std::string& prefix, const DeformableConfig& cfg,
    Rng& rng)
    : cfg_(cfg) {
  if (cfg_.levels == 0 || cfg_.samples_per_level == 0)
    throw ConfigError("deformable attention: levels and samples must be positive");
  const std::size_t sk = cfg_.levels * cfg_.samples_per_level;
  // offsets start at zero: sampling begins exactly on the reference point
  off_w_ = &store.create(prefix + ".off.w", Tensor::zeros({cfg_.d, sk * 2}));
  off_b_ = &store.create(prefix + ".off.b", Tensor::zeros({sk * 2}));
  wt_w_ = &store.create(prefix + ".wt.w", xavier({cfg_.d, sk}, rng));
  wt_b_ = &store.create(prefix + ".wt.b", Tensor::zeros({sk}));
  u_w_ = &store.create(prefix + ".u.w", Tensor::zeros({cfg_.d, sk}));
  u_b_ = &store.create(prefix + ".u.b", Tensor::zeros({sk}));
}

Tensor DeformableUncertainAttention::forward(QueryState& query,
                                             std::span<const Tensor> pyramid,
                                             Taps* taps) const {
  if (pyramid.empty())
    throw ConfigError("deformable attention: empty feature pyramid");
  if (pyramid.size() != cfg_.levels)
    throw ConfigError("deformable attention: got " + std::to_string(pyramid.size()) +
                      " pyramid levels, configured for " + std::to_string(cfg_.levels));
  const std::size_t k = cfg_.samples_per_level;
  const std::size_t sk = cfg_.levels * k;

  Tensor offsets = reshape(linear(query.embedding, off_w_->tensor, off_b_->tensor),
                           Shape{sk, 2});
  Tensor weights = softmax(linear(query.embedding, wt_w_->tensor, wt_b_->tensor), 0);
  Tensor u = sigmoid(linear(query.embedding, u_w_->tensor, u_b_->tensor));
  Tensor uw = mul(u, weights);  // [S*K]

  Tensor out;
  for (std::size_t s = 0; s < cfg_.levels; ++s) {
    Tensor pts = add(tile_rows(query.ref_point, k), slice(offsets, 0, s * k, k));
    Tensor sampled = bilinear_sample(pyramid[s], pts);            // [K x d]
    Tensor coeff = reshape(slice(uw, 0, s * k, k), Shape{1, k});  // [1 x K]
    Tensor level_out = matmul(coeff, sampled);                    // [1 x d]
    out = out.defined() ? add(out, level_out) : level_out;
  }
  query.uncertainties.push_back(u);
  if (taps) {
    taps->offsets = offsets;
    taps->weights = weights;
    taps->u = u;
  }
  return reshape(out, Shape{cfg_.d});
}

// ---- path fusion ----

PathFusion::PathFusion(ParamStore& store, const std::string& prefix,
                       std::size_t d, Rng& rng)
    : d_(d) {
  w_ = &store.create(prefix + ".w", xavier({2 * d, d}, rng));
  b_ = &store.create(prefix + ".b", Tensor::zeros({d}));
}

Tensor PathFusion::forward(const Tensor& f_gs, const Tensor& f_ra) const {
  if (f_gs.size() != d_ || f_ra.size() != d_)
    throw DimensionError("path fusion: inputs must both be [" +
                         std::to_string(d_) + "], got " +
                         shape_str(f_gs.shape()) + " and " +
                         shape_str(f_ra.shape()));
  Tensor parts[] = {reshape(f_gs, Shape{d_}), reshape(f_ra, Shape{d_})};
  Tensor cat = concat(std::span<const Tensor>(parts, 2), 0);
  return linear(cat, w_->tensor, b_->tensor);
}

}  // namespace wrc
