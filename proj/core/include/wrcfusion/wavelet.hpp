#pragma once
#include "wrcfusion/tensor.hpp"

namespace wrc {

// One level of 2D Haar analysis. All four bands share the shape
// [C x ceil(H/2) x ceil(W/2)]; the original size is kept so synthesis can
// crop the symmetric padding back off.
struct Subbands {
  Tensor ll, lh, hl, hh;
  std::size_t orig_h = 0;
  std::size_t orig_w = 0;
};

// Orthonormal 2D Haar analysis. On each 2x2 block [[a,b],[c,d]]:
//   ll=(a+b+c+d)/2, lh=(a+b-c-d)/2, hl=(a-b+c-d)/2, hh=(a-b-c+d)/2.
// Odd dimensions are symmetric-padded by one row/column first.
Subbands dwt2(const Tensor& x);

// Exact synthesis inverse of dwt2.
Tensor iwt2(const Subbands& s);

// Band-concatenated forms used by blocks that operate on the stacked
// [4C x H2 x W2] representation (band order ll, lh, hl, hh).
Tensor dwt2_concat(const Tensor& x);
Tensor iwt2_concat(const Tensor& bands, std::size_t orig_h, std::size_t orig_w);

}  // namespace wrc
