#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <type_traits>
#include <vector>

#include "tulip/autograd.hpp"
#include "tulip/rng.hpp"

// Differentiable primitives. Every op records itself on the tape of its
// inputs; inputs from different tapes are rejected with ShapeMismatch.
namespace tulip::ops {

// Elementwise with numpy-style broadcasting.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);

// a[..., m, k] x b[..., k, n]. b may be 2-D and is then shared by every
// leading batch of a; otherwise the batch dimensions must agree.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);

// x[..., d_in] * w[d_in, d_out] + b[d_out]; pass an invalid Var to skip bias.
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

// Normalises each trailing vector to zero mean / unit variance, then applies
// gamma and beta.
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps);

// Max-subtracted softmax along axis.
template <typename T> Var<T> softmax(Var<T> x, int axis);

// tanh approximation: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3))).
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> leaky_relu(Var<T> x, T slope);
template <typename T> Var<T> abs(Var<T> x);
// Gradient flows only where lo < x < hi.
template <typename T> Var<T> clamp(Var<T> x, T lo, T hi);

// Inverted dropout. When active, element i is dropped iff the 32-bit half
// (low for even i, high for odd i) of rng.fast_bits_at(i / 2) is below
// p * 2^32; survivors are scaled by 1 / (1 - p).
// Inactive or p == 0 returns x unchanged.
template <typename T> Var<T> dropout(Var<T> x, double p, const CounterRng& rng, bool active);

template <typename T> Var<T> reshape(Var<T> x, Shape shape);
template <typename T> Var<T> permute(Var<T> x, const std::vector<int>& perm);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);
template <typename T> Var<T> slice(Var<T> x, int axis, std::int64_t start, std::int64_t length);

// Row gather along axis 0: out[i, ...] = x[index[i], ...]; index -1 yields a
// zero row. Backward scatter-adds.
using RowIndex = std::shared_ptr<const std::vector<std::int64_t>>;
template <typename T> Var<T> gather_rows(Var<T> x, RowIndex index);

template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);

// Raw GEMM used by matmul/linear: C = alpha op(A) op(B) + beta C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc);

// exp(x). Doubles use std::exp; floats use a branch-free polynomial
// (within 2 ulp) so elementwise loops vectorize. Both return exactly 0 for
// -inf.
template <typename T>
inline T fast_exp(T x) {
  if constexpr (std::is_same_v<T, double>) {
    return std::exp(x);
  } else {
    constexpr float kHi = 88.3762626647949f;
    constexpr float kLo = -87.3365447505531f;
    constexpr float kRound = 12582912.0f;  // 1.5 * 2^23: adding it rounds to an integer
    const float xc = std::max(kLo, std::min(x, kHi));
    const float nf = (xc * 1.44269504088896341f + kRound) - kRound;
    const auto n = static_cast<std::int32_t>(nf);
    float r = xc - nf * 0.693359375f;
    r = r + nf * 2.12194440e-4f;
    const float r2 = r * r;
    float y = 1.9875691500e-4f;
    y = y * r + 1.3981999507e-3f;
    y = y * r + 8.3334519073e-3f;
    y = y * r + 4.1665795894e-2f;
    y = y * r + 1.6666665459e-1f;
    y = y * r + 5.0000001201e-1f;
    y = y * r2 + r + 1.0f;
    const float scale = std::bit_cast<float>(static_cast<std::uint32_t>(n + 127) << 23);
    const std::uint32_t keep = 0u - static_cast<std::uint32_t>(x >= kLo);
    return std::bit_cast<float>(std::bit_cast<std::uint32_t>(y * scale) & keep);
  }
}

}  // namespace tulip::ops
