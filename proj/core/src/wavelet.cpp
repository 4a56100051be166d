#include "wrcfusion/wavelet.hpp"

#include <cstring>

#include "wrcfusion/error.hpp"

namespace wrc {

namespace {

// padded source row/col index: the last row/col is replicated once when odd
inline std::size_t src_index(std::size_t i, std::size_t n) {
  return i < n ? i : n - 1;
}

}  // namespace

Tensor dwt2_concat(const Tensor& x) {
  if (!x.defined() || x.rank() != 3)
    throw DimensionError("dwt2: input must be [C x H x W]");
  const Shape& s = x.shape();
  const std::size_t c = s[0], h = s[1], w = s[2];
  if (h < 2 || w < 2)
    throw DimensionError("dwt2: spatial size " + std::to_string(h) + "x" +
                         std::to_string(w) + " is below the 2x2 analysis block");
  const std::size_t h2 = (h + 1) / 2, w2 = (w + 1) / 2;
  auto xs = x.data();
  // band layout: [4C x h2 x w2] with bands stacked ll(0..C), lh, hl, hh
  std::vector<double> out(4 * c * h2 * w2);
  const std::size_t band = c * h2 * w2;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = xs.data() + ch * h * w;
    for (std::size_t by = 0; by < h2; ++by)
      for (std::size_t bx = 0; bx < w2; ++bx) {
        const std::size_t y0 = 2 * by, x0 = 2 * bx;
        const double a = plane[src_index(y0, h) * w + src_index(x0, w)];
        const double b = plane[src_index(y0, h) * w + src_index(x0 + 1, w)];
        const double cc = plane[src_index(y0 + 1, h) * w + src_index(x0, w)];
        const double d = plane[src_index(y0 + 1, h) * w + src_index(x0 + 1, w)];
        const std::size_t o = (ch * h2 + by) * w2 + bx;
        out[0 * band + o] = 0.5 * (a + b + cc + d);
        out[1 * band + o] = 0.5 * (a + b - cc - d);
        out[2 * band + o] = 0.5 * (a - b + cc - d);
        out[3 * band + o] = 0.5 * (a - b - cc + d);
      }
  }
  detail::NodePtr xn = x.node();
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = Shape{4 * c, h2, w2};
  node->value = std::move(out);
  if (grad_enabled() && x.requires_grad()) {
    node->requires_grad = true;
    node->parents.push_back(xn);
    node->backprop = [xn, c, h, w, h2, w2, band](detail::TensorNode& self) {
      if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double* gplane = xn->grad.data() + ch * h * w;
        for (std::size_t by = 0; by < h2; ++by)
          for (std::size_t bx = 0; bx < w2; ++bx) {
            const std::size_t o = (ch * h2 + by) * w2 + bx;
            const double gll = self.grad[0 * band + o];
            const double glh = self.grad[1 * band + o];
            const double ghl = self.grad[2 * band + o];
            const double ghh = self.grad[3 * band + o];
            const std::size_t y0 = 2 * by, x0 = 2 * bx;
            gplane[src_index(y0, h) * w + src_index(x0, w)] +=
                0.5 * (gll + glh + ghl + ghh);
            gplane[src_index(y0, h) * w + src_index(x0 + 1, w)] +=
                0.5 * (gll + glh - ghl - ghh);
            gplane[src_index(y0 + 1, h) * w + src_index(x0, w)] +=
                0.5 * (gll - glh + ghl - ghh);
            gplane[src_index(y0 + 1, h) * w + src_index(x0 + 1, w)] +=
                0.5 * (gll - glh - ghl + ghh);
          }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor iwt2_concat(const Tensor& bands, std::size_t orig_h, std::size_t orig_w) {
  if (!bands.defined() || bands.rank() != 3)
    throw DimensionError("iwt2: bands must be [4C x H2 x W2]");
  const Shape& s = bands.shape();
  if (s[0] % 4 != 0)
    throw DimensionError("iwt2: channel count " + std::to_string(s[0]) +
                         " is not a multiple of 4 bands");
  const std::size_t c = s[0] / 4, h2 = s[1], w2 = s[2];
  if (orig_h == 0 || orig_w == 0 || (orig_h + 1) / 2 != h2 || (orig_w + 1) / 2 != w2)
    throw DimensionError("iwt2: stored original size " + std::to_string(orig_h) +
                         "x" + std::to_string(orig_w) +
                         " inconsistent with band size " + std::to_string(h2) +
                         "x" + std::to_string(w2));
  const std::size_t band = c * h2 * w2;
  auto bs = bands.data();
  std::vector<double> out(c * orig_h * orig_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double* plane = out.data() + ch * orig_h * orig_w;
    for (std::size_t by = 0; by < h2; ++by)
      for (std::size_t bx = 0; bx < w2; ++bx) {
        const std::size_t o = (ch * h2 + by) * w2 + bx;
        const double ll = bs[0 * band + o];
        const double lh = bs[1 * band + o];
        const double hl = bs[2 * band + o];
        const double hh = bs[3 * band + o];
        const double a = 0.5 * (ll + lh + hl + hh);
        const double b = 0.5 * (ll + lh - hl - hh);
        const double cc = 0.5 * (ll - lh + hl - hh);
        const double d = 0.5 * (ll - lh - hl + hh);
        const std::size_t y0 = 2 * by, x0 = 2 * bx;
        plane[y0 * orig_w + x0] = a;
        if (x0 + 1 < orig_w) plane[y0 * orig_w + x0 + 1] = b;
        if (y0 + 1 < orig_h) plane[(y0 + 1) * orig_w + x0] = cc;
        if (y0 + 1 < orig_h && x0 + 1 < orig_w) plane[(y0 + 1) * orig_w + x0 + 1] = d;
      }
  }
  detail::NodePtr bn = bands.node();
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = Shape{c, orig_h, orig_w};
  node->value = std::move(out);
  if (grad_enabled() && bands.requires_grad()) {
    node->requires_grad = true;
    node->parents.push_back(bn);
    node->backprop = [bn, c, h2, w2, band, orig_h, orig_w](detail::TensorNode& self) {
      if (bn->grad.empty()) bn->grad.assign(bn->value.size(), 0.0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* gplane = self.grad.data() + ch * orig_h * orig_w;
        for (std::size_t by = 0; by < h2; ++by)
          for (std::size_t bx = 0; bx < w2; ++bx) {
            const std::size_t y0 = 2 * by, x0 = 2 * bx;
            const double ga = gplane[y0 * orig_w + x0];
            const double gb = (x0 + 1 < orig_w) ? gplane[y0 * orig_w + x0 + 1] : 0.0;
            const double gc = (y0 + 1 < orig_h) ? gplane[(y0 + 1) * orig_w + x0] : 0.0;
            const double gd = (y0 + 1 < orig_h && x0 + 1 < orig_w)
                                  ? gplane[(y0 + 1) * orig_w + x0 + 1]
                                  : 0.0;
            const std::size_t o = (ch * h2 + by) * w2 + bx;
            bn->grad[0 * band + o] += 0.5 * (ga + gb + gc + gd);
            bn->grad[1 * band + o] += 0.5 * (ga + gb - gc - gd);
            bn->grad[2 * band + o] += 0.5 * (ga - gb + gc - gd);
            bn->grad[3 * band + o] += 0.5 * (ga - gb - gc + gd);
          }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Subbands dwt2(const Tensor& x) {
  Tensor bands = dwt2_concat(x);
  const std::size_t c = x.shape()[0];
  Subbands s;
  s.ll = slice(bands, 0, 0, c);
  s.lh = slice(bands, 0, c, c);
  s.hl = slice(bands, 0, 2 * c, c);
  s.hh = slice(bands, 0, 3 * c, c);
  s.orig_h = x.shape()[1];
  s.orig_w = x.shape()[2];
  return s;
}

Tensor iwt2(const Subbands& s) {
  if (!s.ll.defined() || !s.lh.defined() || !s.hl.defined() || !s.hh.defined())
    throw DimensionError("iwt2: undefined band");
  if (s.ll.shape() != s.lh.shape() || s.ll.shape() != s.hl.shape() ||
      s.ll.shape() != s.hh.shape())
    throw DimensionError("iwt2: band shapes differ: ll " + shape_str(s.ll.shape()) +
                         " lh " + shape_str(s.lh.shape()) + " hl " +
                         shape_str(s.hl.shape()) + " hh " + shape_str(s.hh.shape()));
  Tensor parts[] = {s.ll, s.lh, s.hl, s.hh};
  Tensor bands = concat(std::span<const Tensor>(parts, 4), 0);
  return iwt2_concat(bands, s.orig_h, s.orig_w);
}

}  // namespace wrc
