#include "tulip/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "tulip/error.hpp"

namespace tulip::ops {

namespace {

template <typename T>
Tape<T>& tape_of(std::initializer_list<Var<T>> vars) {
  Tape<T>* tape = nullptr;
  for (const Var<T>& v : vars) {
    if (!v.valid()) continue;
    require(tape == nullptr || tape == v.tape, Errc::kShapeMismatch,
            "operands recorded on different tapes");
    tape = v.tape;
  }
  require(tape != nullptr, Errc::kInvalidArgument, "op called without a valid operand");
  return *tape;
}

// Strides of `shape` aligned to `out`, 0 on broadcast dimensions.
Shape broadcast_strides(const Shape& shape, const Shape& out) {
  Shape strides(out.size(), 0);
  const Shape own = row_major_strides(shape);
  const std::size_t offset = out.size() - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] != 1) strides[offset + i] = own[i];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    require(da == db || da == 1 || db == 1, Errc::kShapeMismatch,
            "cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Calls fn(out_index, a_offset, b_offset) over every output element.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, Fn&& fn) {
  const std::int64_t total = numel(out);
  if (total == 0) return;
  if (out.empty()) {
    fn(0, 0, 0);
    return;
  }
  const int rank = static_cast<int>(out.size());
  const std::int64_t inner = out.back();
  const std::int64_t ia = sa.back();
  const std::int64_t ib = sb.back();
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t oa = 0;
  std::int64_t ob = 0;
  for (std::int64_t o = 0; o < total; o += inner) {
    for (std::int64_t j = 0; j < inner; ++j) fn(o + j, oa + j * ia, ob + j * ib);
    for (int d = rank - 2; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, BinaryKind kind) {
  Tape<T>& tape = tape_of<T>({a, b});
  const Tensor<T>& va = a.value();
  const Tensor<T>& vb = b.value();
  const Shape out_shape = broadcast_shape(va.shape(), vb.shape());
  Tensor<T> out(out_shape);
  T* o = out.ptr();
  const T* pa = va.ptr();
  const T* pb = vb.ptr();
  const bool same = va.shape() == vb.shape();
  const Shape sa = same ? Shape{} : broadcast_strides(va.shape(), out_shape);
  const Shape sb = same ? Shape{} : broadcast_strides(vb.shape(), out_shape);
  auto apply = [&](auto op) {
    if (same) {
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = op(pa[i], pb[i]);
    } else {
      for_each_broadcast(out_shape, sa, sb, [&](std::int64_t i, std::int64_t x, std::int64_t y) {
        o[i] = op(pa[x], pb[y]);
      });
    }
  };
  switch (kind) {
    case BinaryKind::kAdd: apply([](T x, T y) { return x + y; }); break;
    case BinaryKind::kSub: apply([](T x, T y) { return x - y; }); break;
    case BinaryKind::kMul: apply([](T x, T y) { return x * y; }); break;
  }
  const int ida = a.id;
  const int idb = b.id;
  return tape.record(std::move(out), {ida, idb},
                     [ida, idb, kind, same, out_shape, sa, sb](Tape<T>& t, const Tensor<T>& g,
                                                               const Tensor<T>&) {
    const T* pg = g.ptr();
    const T* pa = t.value(ida).ptr();
    const T* pb = t.value(idb).ptr();
    T* ga = t.requires_grad(ida) ? t.grad_slot(ida).ptr() : nullptr;
    T* gb = t.requires_grad(idb) ? t.grad_slot(idb).ptr() : nullptr;
    auto body = [&](std::int64_t i, std::int64_t x, std::int64_t y) {
      switch (kind) {
        case BinaryKind::kAdd:
          if (ga) ga[x] += pg[i];
          if (gb) gb[y] += pg[i];
          break;
        case BinaryKind::kSub:
          if (ga) ga[x] += pg[i];
          if (gb) gb[y] -= pg[i];
          break;
        case BinaryKind::kMul:
          if (ga) ga[x] += pg[i] * pb[y];
          if (gb) gb[y] += pg[i] * pa[x];
          break;
      }
    };
    if (same) {
      const auto n = static_cast<std::int64_t>(g.size());
      for (std::int64_t i = 0; i < n; ++i) body(i, i, i);
    } else {
      for_each_broadcast(out_shape, sa, sb, body);
    }
  });
}

// Elementwise op whose derivative depends on the input only.
template <typename T, typename Fwd, typename Deriv>
Var<T> unary(Var<T> x, Fwd fwd, Deriv deriv) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& vx = x.value();
  Tensor<T> out(vx.shape());
  const T* px = vx.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = fwd(px[i]);
  const int id = x.id;
  return tape.record(std::move(out), {id},
                     [id, deriv](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    const T* px = t.value(id).ptr();
    const T* pg = g.ptr();
    T* gx = t.grad_slot(id).ptr();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += pg[i] * deriv(px[i]);
  });
}

struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t n = 1;
  std::int64_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) s.inner *= shape[i];
  return s;
}

// Copies src (shape `in`) into dst permuted by perm; with accumulate set it
// adds instead. inverse maps the permuted layout back onto the source.
template <typename T>
void permute_copy(const T* src, const Shape& in, const std::vector<int>& perm, T* dst,
                  bool inverse, bool accumulate) {
  const int rank = static_cast<int>(in.size());
  Shape out(rank);
  for (int i = 0; i < rank; ++i) out[i] = in[perm[i]];
  const Shape in_strides = row_major_strides(in);
  // Source stride walked by each output dimension.
  Shape walk(rank);
  for (int i = 0; i < rank; ++i) walk[i] = in_strides[perm[i]];
  const std::int64_t total = numel(out);
  if (total == 0) return;
  if (rank == 0) {
    dst[0] = accumulate ? dst[0] + src[0] : src[0];
    return;
  }
  const std::int64_t inner = out.back();
  const std::int64_t step = walk.back();
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t off = 0;
  for (std::int64_t o = 0; o < total; o += inner) {
    if (!inverse) {
      if (accumulate) {
        for (std::int64_t j = 0; j < inner; ++j) dst[o + j] += src[off + j * step];
      } else {
        for (std::int64_t j = 0; j < inner; ++j) dst[o + j] = src[off + j * step];
      }
    } else {
      // dst has the source layout, src the permuted one.
      if (accumulate) {
        for (std::int64_t j = 0; j < inner; ++j) dst[off + j * step] += src[o + j];
      } else {
        for (std::int64_t j = 0; j < inner; ++j) dst[off + j * step] = src[o + j];
      }
    }
    for (int d = rank - 2; d >= 0; --d) {
      ++idx[d];
      off += walk[d];
      if (idx[d] < out[d]) break;
      off -= walk[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

namespace {

constexpr std::int64_t kSmallGemmVolume = 32 * 32 * 32;

// Plain loops for the many tiny per-window products, where BLAS call
// overhead dominates.
template <typename T>
void small_gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
                const T* b, int ldb, T beta, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (beta == T(0)) {
      std::fill(ci, ci + n, T(0));
    } else if (beta != T(1)) {
      for (int j = 0; j < n; ++j) ci[j] *= beta;
    }
    if (trans_b) {
      for (int j = 0; j < n; ++j) {
        const T* bj = b + static_cast<std::ptrdiff_t>(j) * ldb;
        T acc = T(0);
        if (trans_a) {
          for (int p = 0; p < k; ++p) acc += a[static_cast<std::ptrdiff_t>(p) * lda + i] * bj[p];
        } else {
          const T* ai = a + static_cast<std::ptrdiff_t>(i) * lda;
          for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
        }
        ci[j] += alpha * acc;
      }
    } else {
      for (int p = 0; p < k; ++p) {
        const T aip =
            alpha * (trans_a ? a[static_cast<std::ptrdiff_t>(p) * lda + i]
                             : a[static_cast<std::ptrdiff_t>(i) * lda + p]);
        const T* bp = b + static_cast<std::ptrdiff_t>(p) * ldb;
        for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) c[i * ldc + j] *= beta;
    }
    return;
  }
  // OpenBLAS 0.3.20 dgemm returns wrong products for many shapes on AVX-512
  // cores (n = 256 among them); sgemm is fine. Double only backs the
  // reference and gradient checks, so it stays on the loops.
  if (std::is_same_v<T, double> || static_cast<std::int64_t>(m) * n * k <= kSmallGemmVolume) {
    small_gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  // Parallelism lives above GEMM; a single-threaded BLAS keeps results
  // independent of the thread count.
  static const bool single_threaded = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)single_threaded;
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(a, b, BinaryKind::kAdd);
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(a, b, BinaryKind::kSub);
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(a, b, BinaryKind::kMul);
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  return unary(a, [factor](T v) { return v * factor; }, [factor](T) { return factor; });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = tape_of<T>({a, b});
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() >= 2 && sb.size() >= 2, Errc::kShapeMismatch, "matmul needs rank >= 2");
  const std::int64_t m = sa[sa.size() - 2];
  const std::int64_t k = sa.back();
  require(sb[sb.size() - 2] == k, Errc::kShapeMismatch,
          "matmul inner dimensions differ: " + to_string(sa) + " x " + to_string(sb));
  const std::int64_t n = sb.back();
  const bool shared_b = sb.size() == 2;
  if (!shared_b) {
    require(sa.size() == sb.size() && std::equal(sa.begin(), sa.end() - 2, sb.begin()),
            Errc::kShapeMismatch,
            "matmul batch dimensions differ: " + to_string(sa) + " x " + to_string(sb));
  }
  std::int64_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  const int M = static_cast<int>(m);
  const int N = static_cast<int>(n);
  const int K = static_cast<int>(k);
  if (shared_b) {
    gemm<T>(false, false, static_cast<int>(batch) * M, N, K, T(1), pa, K, pb, N, T(0), out.ptr(), N);
  } else {
    for (std::int64_t i = 0; i < batch; ++i) {
      gemm<T>(false, false, M, N, K, T(1), pa + i * m * k, K, pb + i * k * n, N, T(0),
              out.ptr() + i * m * n, N);
    }
  }
  const int ida = a.id;
  const int idb = b.id;
  return tape.record(std::move(out), {ida, idb},
                     [=](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    const T* pa = t.value(ida).ptr();
    const T* pb = t.value(idb).ptr();
    if (t.requires_grad(ida)) {
      T* ga = t.grad_slot(ida).ptr();
      if (shared_b) {
        gemm<T>(false, true, static_cast<int>(batch) * M, K, N, T(1), g.ptr(), N, pb, N, T(1), ga, K);
      } else {
        for (std::int64_t i = 0; i < batch; ++i) {
          gemm<T>(false, true, M, K, N, T(1), g.ptr() + i * m * n, N, pb + i * k * n, N, T(1),
                  ga + i * m * k, K);
        }
      }
    }
    if (t.requires_grad(idb)) {
      T* gb = t.grad_slot(idb).ptr();
      if (shared_b) {
        gemm<T>(true, false, K, N, static_cast<int>(batch) * M, T(1), pa, K, g.ptr(), N, T(1), gb, N);
      } else {
        for (std::int64_t i = 0; i < batch; ++i) {
          gemm<T>(true, false, K, N, M, T(1), pa + i * m * k, K, g.ptr() + i * m * n, N, T(1),
                  gb + i * k * n, N);
        }
      }
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>& tape = tape_of<T>({x, w, b});
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  require(!sx.empty() && sw.size() == 2 && sx.back() == sw[0], Errc::kShapeMismatch,
          "linear: input " + to_string(sx) + " incompatible with weight " + to_string(sw));
  const std::int64_t d_in = sw[0];
  const std::int64_t d_out = sw[1];
  const bool has_bias = b.valid();
  if (has_bias) {
    require(b.shape() == Shape{d_out}, Errc::kShapeMismatch, "linear: bias shape mismatch");
  }
  const std::int64_t rows = d_in == 0 ? 0 : numel(sx) / d_in;
  Shape out_shape = sx;
  out_shape.back() = d_out;
  Tensor<T> out(out_shape);
  if (has_bias) {
    const T* pb = b.value().ptr();
    for (std::int64_t r = 0; r < rows; ++r) std::copy(pb, pb + d_out, out.ptr() + r * d_out);
  }
  const int R = static_cast<int>(rows);
  const int I = static_cast<int>(d_in);
  const int O = static_cast<int>(d_out);
  gemm<T>(false, false, R, O, I, T(1), x.value().ptr(), I, w.value().ptr(), O,
          has_bias ? T(1) : T(0), out.ptr(), O);
  const int idx = x.id;
  const int idw = w.id;
  const int idb = has_bias ? b.id : -1;
  std::vector<int> inputs{idx, idw};
  if (has_bias) inputs.push_back(idb);
  return tape.record(std::move(out), std::move(inputs),
                     [=](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    if (t.requires_grad(idx)) {
      gemm<T>(false, true, R, I, O, T(1), g.ptr(), O, t.value(idw).ptr(), O, T(1),
              t.grad_slot(idx).ptr(), I);
    }
    if (t.requires_grad(idw)) {
      gemm<T>(true, false, I, O, R, T(1), t.value(idx).ptr(), I, g.ptr(), O, T(1),
              t.grad_slot(idw).ptr(), O);
    }
    if (idb >= 0 && t.requires_grad(idb)) {
      T* gb = t.grad_slot(idb).ptr();
      for (int r = 0; r < R; ++r) {
        const T* row = g.ptr() + static_cast<std::int64_t>(r) * O;
        for (int j = 0; j < O; ++j) gb[j] += row[j];
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  Tape<T>& tape = tape_of<T>({x, gamma, beta});
  const Shape& sx = x.shape();
  require(!sx.empty() && sx.back() >= 1, Errc::kShapeMismatch, "layer_norm needs d >= 1");
  const std::int64_t d = sx.back();
  require(gamma.shape() == Shape{d} && beta.shape() == Shape{d}, Errc::kShapeMismatch,
          "layer_norm: affine parameter shape mismatch");
  const std::int64_t rows = numel(sx) / d;
  Tensor<T> out(sx);
  // Per-row (mean, 1/std), kept for the backward pass.
  auto stats = std::make_shared<std::vector<T>>(2 * rows);
  const T* px = x.value().ptr();
  const T* pg = gamma.value().ptr();
  const T* pb = beta.value().ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mu = 0;
    for (std::int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    (*stats)[2 * r] = mu;
    (*stats)[2 * r + 1] = rstd;
    T* o = out.ptr() + r * d;
    for (std::int64_t j = 0; j < d; ++j) o[j] = (row[j] - mu) * rstd * pg[j] + pb[j];
  }
  const int idx = x.id;
  const int idg = gamma.id;
  const int idb = beta.id;
  return tape.record(std::move(out), {idx, idg, idb},
                     [=](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    const T* px = t.value(idx).ptr();
    const T* pgam = t.value(idg).ptr();
    T* gx = t.requires_grad(idx) ? t.grad_slot(idx).ptr() : nullptr;
    T* gg = t.requires_grad(idg) ? t.grad_slot(idg).ptr() : nullptr;
    T* gbeta = t.requires_grad(idb) ? t.grad_slot(idb).ptr() : nullptr;
    std::vector<T> xhat(d), dxhat(d);
    for (std::int64_t r = 0; r < rows; ++r) {
      const T mu = (*stats)[2 * r];
      const T rstd = (*stats)[2 * r + 1];
      const T* row = px + r * d;
      const T* gr = g.ptr() + r * d;
      for (std::int64_t j = 0; j < d; ++j) {
        xhat[j] = (row[j] - mu) * rstd;
        dxhat[j] = gr[j] * pgam[j];
      }
      if (gg) {
        for (std::int64_t j = 0; j < d; ++j) gg[j] += gr[j] * xhat[j];
      }
      if (gbeta) {
        for (std::int64_t j = 0; j < d; ++j) gbeta[j] += gr[j];
      }
      if (!gx) continue;
      T mean_dxhat = 0;
      T mean_dxhat_xhat = 0;
      for (std::int64_t j = 0; j < d; ++j) {
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat[j];
      }
      mean_dxhat /= T(d);
      mean_dxhat_xhat /= T(d);
      T* gxr = gx + r * d;
      for (std::int64_t j = 0; j < d; ++j) {
        gxr[j] += rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
      }
    }
  });
}

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
  Tape<T>& tape = *x.tape;
  const Shape& sx = x.shape();
  const int ax = normalize_axis(axis, static_cast<int>(sx.size()));
  const AxisSplit s = split_axis(sx, ax);
  Tensor<T> out(sx);
  const T* px = x.value().ptr();
  T* po = out.ptr();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.n * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < s.n; ++j) mx = std::max(mx, px[base + j * s.inner]);
      T total = 0;
      for (std::int64_t j = 0; j < s.n; ++j) {
        const T e = fast_exp(px[base + j * s.inner] - mx);
        po[base + j * s.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::int64_t j = 0; j < s.n; ++j) po[base + j * s.inner] *= inv;
    }
  }
  const int idx = x.id;
  return tape.record(std::move(out), {idx},
                     [idx, s](Tape<T>& t, const Tensor<T>& g, const Tensor<T>& y) {
    T* gx = t.grad_slot(idx).ptr();
    const T* py = y.ptr();
    const T* pg = g.ptr();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = o * s.n * s.inner + in;
        T dot = 0;
        for (std::int64_t j = 0; j < s.n; ++j) {
          dot += pg[base + j * s.inner] * py[base + j * s.inner];
        }
        for (std::int64_t j = 0; j < s.n; ++j) {
          const std::int64_t p = base + j * s.inner;
          gx[p] += py[p] * (pg[p] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr T kC = T(0.7978845608);
  constexpr T kA = T(0.044715);
  Tape<T>& tape = *x.tape;
  const Tensor<T>& vx = x.value();
  Tensor<T> out(vx.shape());
  auto th = std::make_shared<std::vector<T>>(vx.size());
  const T* px = vx.ptr();
  T* po = out.ptr();
  T* pt = th->data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = px[i];
    // tanh(u) = 1 - 2 / (exp(2u) + 1); saturates cleanly when exp overflows.
    const T t = T(1) - T(2) / (fast_exp(T(2) * kC * (v + kA * v * v * v)) + T(1));
    pt[i] = t;
    po[i] = T(0.5) * v * (T(1) + t);
  }
  const int id = x.id;
  return tape.record(std::move(out), {id},
                     [id, th](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    const T* px = t.value(id).ptr();
    const T* pt = th->data();
    const T* pg = g.ptr();
    T* gx = t.grad_slot(id).ptr();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = px[i];
      const T d = T(0.5) * (T(1) + pt[i]) +
                  T(0.5) * v * (T(1) - pt[i] * pt[i]) * kC * (T(1) + T(3) * kA * v * v);
      gx[i] += pg[i] * d;
    }
  });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, T slope) {
  return unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> abs(Var<T> x) {
  return unary(
      x, [](T v) { return std::abs(v); },
      [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  return unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v) { return v > lo && v < hi ? T(1) : T(0); });
}

template <typename T>
Var<T> dropout(Var<T> x, double p, const CounterRng& rng, bool active) {
  require(p >= 0.0 && p < 1.0, Errc::kInvalidArgument, "dropout probability must lie in [0, 1)");
  if (!active || p == 0.0) return x;
  Tape<T>& tape = *x.tape;
  const Tensor<T>& vx = x.value();
  const T keep_scale = T(1.0 / (1.0 - p));
  // Each 64-bit draw decides two elements: element i is dropped when its
  // 32-bit half falls below p * 2^32.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(p, 32));
  auto mask = std::make_shared<std::vector<T>>(vx.size());
  Tensor<T> out(vx.shape());
  T* pm = mask->data();
  const T* px = vx.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < vx.size(); i += 2) {
    const std::uint64_t bits = rng.fast_bits_at(i >> 1);
    pm[i] = (bits & 0xffffffffULL) < threshold ? T(0) : keep_scale;
    po[i] = px[i] * pm[i];
    if (i + 1 < vx.size()) {
      pm[i + 1] = (bits >> 32) < threshold ? T(0) : keep_scale;
      po[i + 1] = px[i + 1] * pm[i + 1];
    }
  }
  const int id = x.id;
  return tape.record(std::move(out), {id},
                     [id, mask](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    T* gx = t.grad_slot(id).ptr();
    const T* pm = mask->data();
    const T* pg = g.ptr();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += pg[i] * pm[i];
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  const Tensor<T>& vx = x.value();
  require(numel(shape) == static_cast<std::int64_t>(vx.size()), Errc::kShapeMismatch,
          "cannot reshape " + to_string(vx.shape()) + " to " + to_string(shape));
  const int id = x.id;
  return x.tape->record(vx.reshaped(std::move(shape)), {id},
                        [id](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    T* gx = t.grad_slot(id).ptr();
    const T* pg = g.ptr();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += pg[i];
  });
}

template <typename T>
Var<T> permute(Var<T> x, const std::vector<int>& perm) {
  const Tensor<T>& vx = x.value();
  const int rank = vx.rank();
  require(static_cast<int>(perm.size()) == rank, Errc::kShapeMismatch,
          "permutation rank mismatch");
  std::vector<int> seen(rank, 0);
  for (int p : perm) {
    require(p >= 0 && p < rank && !seen[p], Errc::kShapeMismatch, "invalid permutation");
    seen[p] = 1;
  }
  Shape out_shape(rank);
  for (int i = 0; i < rank; ++i) out_shape[i] = vx.shape()[perm[i]];
  Tensor<T> out(out_shape);
  permute_copy(vx.ptr(), vx.shape(), perm, out.ptr(), false, false);
  const int id = x.id;
  const Shape in_shape = vx.shape();
  return x.tape->record(std::move(out), {id},
                        [id, in_shape, perm](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    permute_copy(g.ptr(), in_shape, perm, t.grad_slot(id).ptr(), true, true);
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  require(!xs.empty(), Errc::kInvalidArgument, "concat of nothing");
  Tape<T>& tape = *xs.front().tape;
  const Shape& first = xs.front().shape();
  const int ax = normalize_axis(axis, static_cast<int>(first.size()));
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::int64_t> widths;
  std::vector<int> ids;
  for (const Var<T>& v : xs) {
    require(v.tape == &tape, Errc::kShapeMismatch, "operands recorded on different tapes");
    const Shape& s = v.shape();
    require(s.size() == first.size(), Errc::kShapeMismatch, "concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      require(static_cast<int>(i) == ax || s[i] == first[i], Errc::kShapeMismatch,
              "concat: shapes " + to_string(first) + " and " + to_string(s) + " differ off-axis");
    }
    out_shape[ax] += s[ax];
    ids.push_back(v.id);
  }
  const AxisSplit so = split_axis(out_shape, ax);
  for (const Var<T>& v : xs) widths.push_back(v.shape()[ax] * so.inner);
  const std::int64_t row = so.n * so.inner;
  Tensor<T> out(out_shape);
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const T* src = xs[k].value().ptr();
    for (std::int64_t o = 0; o < so.outer; ++o) {
      std::copy(src + o * widths[k], src + (o + 1) * widths[k], out.ptr() + o * row + offset);
    }
    offset += widths[k];
  }
  return tape.record(std::move(out), ids,
                     [ids, widths, so, row](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        T* gx = t.grad_slot(ids[k]).ptr();
        for (std::int64_t o = 0; o < so.outer; ++o) {
          const T* src = g.ptr() + o * row + offset;
          T* dst = gx + o * widths[k];
          for (std::int64_t j = 0; j < widths[k]; ++j) dst[j] += src[j];
        }
      }
      offset += widths[k];
    }
  });
}

template <typename T>
Var<T> slice(Var<T> x, int axis, std::int64_t start, std::int64_t length) {
  const Shape& sx = x.shape();
  const int ax = normalize_axis(axis, static_cast<int>(sx.size()));
  require(start >= 0 && length >= 0 && start + length <= sx[ax], Errc::kShapeMismatch,
          "slice out of range on axis " + std::to_string(ax));
  const AxisSplit s = split_axis(sx, ax);
  Shape out_shape = sx;
  out_shape[ax] = length;
  Tensor<T> out(out_shape);
  const std::int64_t in_row = s.n * s.inner;
  const std::int64_t out_row = length * s.inner;
  const std::int64_t skip = start * s.inner;
  const T* px = x.value().ptr();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy(px + o * in_row + skip, px + o * in_row + skip + out_row, out.ptr() + o * out_row);
  }
  const int id = x.id;
  return x.tape->record(std::move(out), {id},
                        [=](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    T* gx = t.grad_slot(id).ptr();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      const T* src = g.ptr() + o * out_row;
      T* dst = gx + o * in_row + skip;
      for (std::int64_t j = 0; j < out_row; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, RowIndex index) {
  require(index != nullptr, Errc::kInvalidArgument, "gather_rows needs an index");
  const Shape& sx = x.shape();
  require(!sx.empty(), Errc::kShapeMismatch, "gather_rows needs rank >= 1");
  const std::int64_t rows = sx[0];
  const std::int64_t width = rows == 0 ? 0 : numel(sx) / rows;
  Shape out_shape = sx;
  out_shape[0] = static_cast<std::int64_t>(index->size());
  Tensor<T> out(out_shape);
  const T* px = x.value().ptr();
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::int64_t src = (*index)[i];
    require(src >= -1 && src < rows, Errc::kShapeMismatch, "gather_rows index out of range");
    if (src < 0) continue;
    std::copy(px + src * width, px + (src + 1) * width,
              out.ptr() + static_cast<std::int64_t>(i) * width);
  }
  const int id = x.id;
  return x.tape->record(std::move(out), {id},
                        [id, index, width](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    T* gx = t.grad_slot(id).ptr();
    for (std::size_t i = 0; i < index->size(); ++i) {
      const std::int64_t src = (*index)[i];
      if (src < 0) continue;
      const T* from = g.ptr() + static_cast<std::int64_t>(i) * width;
      T* to = gx + src * width;
      for (std::int64_t j = 0; j < width; ++j) to[j] += from[j];
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const Tensor<T>& vx = x.value();
  T total = 0;
  for (std::size_t i = 0; i < vx.size(); ++i) total += vx[i];
  const int id = x.id;
  return x.tape->record(Tensor<T>::scalar(total), {id},
                        [id](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T>& gx = t.grad_slot(id);
    const T gv = g[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  require(n > 0, Errc::kShapeMismatch, "mean of an empty tensor");
  return scale(sum(x), T(1) / T(n));
}

#define TULIP_INSTANTIATE_OPS(T)                                                        \
  template void gemm<T>(bool, bool, int, int, int, T, const T*, int, const T*, int, T, \
                        T*, int);                                                      \
  template Var<T> add<T>(Var<T>, Var<T>);                                              \
  template Var<T> sub<T>(Var<T>, Var<T>);                                              \
  template Var<T> mul<T>(Var<T>, Var<T>);                                              \
  template Var<T> scale<T>(Var<T>, T);                                                 \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                           \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                   \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                            \
  template Var<T> softmax<T>(Var<T>, int);                                             \
  template Var<T> gelu<T>(Var<T>);                                                     \
  template Var<T> leaky_relu<T>(Var<T>, T);                                            \
  template Var<T> abs<T>(Var<T>);                                                      \
  template Var<T> clamp<T>(Var<T>, T, T);                                              \
  template Var<T> dropout<T>(Var<T>, double, const CounterRng&, bool);                 \
  template Var<T> reshape<T>(Var<T>, Shape);                                           \
  template Var<T> permute<T>(Var<T>, const std::vector<int>&);                         \
  template Var<T> concat<T>(const std::vector<Var<T>>&, int);                          \
  template Var<T> slice<T>(Var<T>, int, std::int64_t, std::int64_t);                  \
  template Var<T> gather_rows<T>(Var<T>, RowIndex);                                    \
  template Var<T> sum<T>(Var<T>);                                                      \
  template Var<T> mean<T>(Var<T>);

TULIP_INSTANTIATE_OPS(float)
TULIP_INSTANTIATE_OPS(double)

#undef TULIP_INSTANTIATE_OPS

}  // namespace tulip::ops
