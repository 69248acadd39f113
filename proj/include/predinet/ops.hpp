#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "predinet/errors.hpp"
#include "predinet/graph.hpp"
#include "predinet/tensor.hpp"

namespace predinet {

namespace kernels {

// C[MxN] (+)= A[MxK] * B[KxN]
template <class T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T{0});
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T{0}) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[MxN] (+)= A[KxM]^T * B[KxN]
template <class T>
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T{0});
  for (std::size_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T av = a[i];
      if (av == T{0}) continue;
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C[MxN] (+)= A[MxK] * B[NxK]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C, bool accumulate) {
  std::vector<T> bt(K * N);
  transpose(N, K, B, bt.data());
  gemm_nn(M, K, N, A, bt.data(), C, accumulate);
}

}  // namespace kernels

namespace detail {

template <class T>
void require_same_graph(Var<T> a, Var<T> b, const char* op) {
  if (a.graph != b.graph) throw UsageError(std::string(op) + ": operands belong to different graphs");
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

}  // namespace detail

/// Standard 2-D matrix product.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_graph(a, b, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0),
                  "matmul: incompatible shapes " + to_string(A.shape()) + " and " + to_string(B.shape()));
  const std::size_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
  Tensor<T> out({M, N});
  kernels::gemm_nn(M, K, N, A.data().data(), B.data().data(), out.data().data(), false);
  return a.graph->record("matmul", {a.id, b.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto dC = g.node(self).grad.data();
    if (g.needs_grad(a.id)) {
      kernels::gemm_nt(M, N, K, dC, g.value(b.id).data().data(), g.grad_buffer(a.id).data(), true);
    }
    if (g.needs_grad(b.id)) {
      kernels::gemm_tn(K, M, N, g.value(a.id).data().data(), dC, g.grad_buffer(b.id).data(), true);
    }
  });
}

/// Batched product over the leading axis: [B,r,s] x [B,s,t] -> [B,r,t], or
/// [B,r,s] x [B,t,s]^T when `transpose_b` is set.
template <class T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false) {
  detail::require_same_graph(a, b, "bmm");
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require(A.rank() == 3 && B.rank() == 3 && A.dim(0) == B.dim(0),
                  "bmm: incompatible shapes " + to_string(A.shape()) + " and " + to_string(B.shape()));
  const std::size_t batch = A.dim(0), M = A.dim(1), K = A.dim(2);
  const std::size_t N = transpose_b ? B.dim(1) : B.dim(2);
  detail::require((transpose_b ? B.dim(2) : B.dim(1)) == K,
                  "bmm: inner dims differ for " + to_string(A.shape()) + " and " + to_string(B.shape()));
  Tensor<T> out({batch, M, N});
  for (std::size_t i = 0; i < batch; ++i) {
    const T* pa = A.data().data() + i * M * K;
    const T* pb = B.data().data() + i * K * N;
    T* pc = out.data().data() + i * M * N;
    if (transpose_b) kernels::gemm_nt(M, K, N, pa, pb, pc, false);
    else kernels::gemm_nn(M, K, N, pa, pb, pc, false);
  }
  return a.graph->record("bmm", {a.id, b.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const T* dC = g.node(self).grad.data();
    const T* Ad = g.value(a.id).data().data();
    const T* Bd = g.value(b.id).data().data();
    T* dA = g.needs_grad(a.id) ? g.grad_buffer(a.id).data() : nullptr;
    T* dB = g.needs_grad(b.id) ? g.grad_buffer(b.id).data() : nullptr;
    for (std::size_t i = 0; i < batch; ++i) {
      const T* dc = dC + i * M * N;
      const T* pa = Ad + i * M * K;
      const T* pb = Bd + i * K * N;
      if (transpose_b) {
        // C = A B^T: dA = dC B, dB = dC^T A
        if (dA) kernels::gemm_nn(M, N, K, dc, pb, dA + i * M * K, true);
        if (dB) kernels::gemm_tn(N, M, K, dc, pa, dB + i * K * N, true);
      } else {
        if (dA) kernels::gemm_nt(M, N, K, dc, pb, dA + i * M * K, true);
        if (dB) kernels::gemm_tn(K, M, N, pa, dc, dB + i * K * N, true);
      }
    }
  });
}

/// Valid-padding 2-D cross-correlation. `img` is [H,W,C] or [B,H,W,C],
/// `filters` is [F,F,C,O], `bias` is [O]. Output is [(B,)H',W',O].
template <class T>
Var<T> conv2d(Var<T> img, Var<T> filters, Var<T> bias, std::size_t stride) {
  detail::require_same_graph(img, filters, "conv2d");
  detail::require_same_graph(img, bias, "conv2d");
  const auto& X = img.value();
  const auto& Wt = filters.value();
  const auto& Bv = bias.value();
  const bool batched = X.rank() == 4;
  detail::require(X.rank() == 3 || batched, "conv2d: image must be [H,W,C] or [B,H,W,C], got " + to_string(X.shape()));
  detail::require(Wt.rank() == 4 && Wt.dim(0) == Wt.dim(1), "conv2d: filters must be [F,F,C,O], got " + to_string(Wt.shape()));
  const std::size_t batch = batched ? X.dim(0) : 1;
  const std::size_t H = X.dim(batched ? 1 : 0), W = X.dim(batched ? 2 : 1), C = X.dim(batched ? 3 : 2);
  const std::size_t F = Wt.dim(0), O = Wt.dim(3);
  detail::require(Wt.dim(2) == C, "conv2d: filter channels " + to_string(Wt.shape()) + " vs image " + to_string(X.shape()));
  detail::require(Bv.rank() == 1 && Bv.dim(0) == O, "conv2d: bias must be [" + std::to_string(O) + "], got " + to_string(Bv.shape()));
  if (stride == 0 || F > H || F > W || (H - F) % stride != 0 || (W - F) % stride != 0) {
    throw ConfigError("conv2d: output size (H-F)/stride+1 is not integral for H=" + std::to_string(H) +
                      " W=" + std::to_string(W) + " F=" + std::to_string(F) + " stride=" + std::to_string(stride));
  }
  const std::size_t Ho = (H - F) / stride + 1, Wo = (W - F) / stride + 1;
  const std::size_t P = batch * Ho * Wo, patch = F * F * C;

  // im2col: one row per output position, (ky, kx, c) ordering matches the
  // filter layout flattened to [F*F*C, O].
  std::vector<T> cols(P * patch);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T* row = cols.data() + ((b * Ho + oy) * Wo + ox) * patch;
        for (std::size_t ky = 0; ky < F; ++ky) {
          const T* src = X.data().data() + ((b * H + oy * stride + ky) * W + ox * stride) * C;
          std::copy(src, src + F * C, row + ky * F * C);
        }
      }
  Shape out_shape = batched ? Shape{batch, Ho, Wo, O} : Shape{Ho, Wo, O};
  Tensor<T> out(out_shape);
  T* po = out.data().data();
  for (std::size_t p = 0; p < P; ++p) std::copy(Bv.data().begin(), Bv.data().end(), po + p * O);
  kernels::gemm_nn(P, patch, O, cols.data(), Wt.data().data(), po, true);

  return img.graph->record(
      "conv2d", {img.id, filters.id, bias.id}, std::move(out),
      [=, cols = std::move(cols)](Graph<T>& g, std::size_t self) {
        const T* dY = g.node(self).grad.data();
        if (g.needs_grad(bias.id)) {
          auto db = g.grad_buffer(bias.id);
          for (std::size_t p = 0; p < P; ++p)
            for (std::size_t o = 0; o < O; ++o) db[o] += dY[p * O + o];
        }
        if (g.needs_grad(filters.id)) {
          kernels::gemm_tn(patch, P, O, cols.data(), dY, g.grad_buffer(filters.id).data(), true);
        }
        if (g.needs_grad(img.id)) {
          std::vector<T> dcols(P * patch);
          kernels::gemm_nt(P, O, patch, dY, g.value(filters.id).data().data(), dcols.data(), false);
          T* dX = g.grad_buffer(img.id).data();
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t oy = 0; oy < Ho; ++oy)
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const T* row = dcols.data() + ((b * Ho + oy) * Wo + ox) * patch;
                for (std::size_t ky = 0; ky < F; ++ky) {
                  T* dst = dX + ((b * H + oy * stride + ky) * W + ox * stride) * C;
                  const T* src = row + ky * F * C;
                  for (std::size_t t = 0; t < F * C; ++t) dst[t] += src[t];
                }
              }
        }
      });
}

/// Softmax over the last axis, stabilised by subtracting the row maximum.
template <class T>
Var<T> softmax_rows(Var<T> x) {
  const auto& X = x.value();
  detail::require(X.rank() >= 1, "softmax_rows: rank-0 input");
  const std::size_t cols = X.shape().back(), rows = X.size() / cols;
  Tensor<T> out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = X.data().data() + r * cols;
    T* y = out.data().data() + r * cols;
    T mx = in[0];
    for (std::size_t c = 0; c < cols; ++c) {
      if (std::isnan(in[c])) throw NumericError("softmax_rows: NaN input");
      mx = std::max(mx, in[c]);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: non-finite input");
    T sum{0};
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(in[c] - mx);
      sum += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= sum;
  }
  return x.graph->record("softmax_rows", {x.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& node = g.node(self);
    const T* y = node.value().data().data();
    const T* dy = node.grad.data();
    T* dx = g.grad_buffer(x.id).data();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < cols; ++c) dot += dy[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += y[r * cols + c] * (dy[r * cols + c] - dot);
    }
  });
}

template <class T>
Var<T> relu(Var<T> x) {
  const auto& X = x.value();
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] > T{0} ? X[i] : T{0};
  return x.graph->record("relu", {x.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& node = g.node(self);
    const auto& in = g.value(x.id);
    auto dx = g.grad_buffer(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (in[i] > T{0}) dx[i] += node.grad[i];
  });
}

namespace detail {

template <class T, class Fwd>
Var<T> binary_same_shape(const char* op, Var<T> a, Var<T> b, Fwd fwd, T sign_b, bool product) {
  require_same_graph(a, b, op);
  const auto& A = a.value();
  const auto& B = b.value();
  require(A.shape() == B.shape(), std::string(op) + ": shape mismatch " + to_string(A.shape()) + " vs " + to_string(B.shape()));
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = fwd(A[i], B[i]);
  return a.graph->record(op, {a.id, b.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.node(self).grad;
    if (g.needs_grad(a.id)) {
      auto da = g.grad_buffer(a.id);
      if (product) {
        const auto& bv = g.value(b.id);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * bv[i];
      } else {
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
      }
    }
    if (g.needs_grad(b.id)) {
      auto db = g.grad_buffer(b.id);
      if (product) {
        const auto& av = g.value(a.id);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * av[i];
      } else {
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += sign_b * dy[i];
      }
    }
  });
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary_same_shape<T>("add", a, b, [](T x, T y) { return x + y; }, T{1}, false);
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary_same_shape<T>("sub", a, b, [](T x, T y) { return x - y; }, T{-1}, false);
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary_same_shape<T>("mul", a, b, [](T x, T y) { return x * y; }, T{1}, true);
}

template <class T>
Var<T> scale(Var<T> x, T s) {
  const auto& X = x.value();
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] * s;
  return x.graph->record("scale", {x.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.node(self).grad;
    auto dx = g.grad_buffer(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * dy[i];
  });
}

/// Adds a bias vector [c] to every row of x [..., c].
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  detail::require_same_graph(x, bias, "add_bias");
  const auto& X = x.value();
  const auto& Bv = bias.value();
  detail::require(Bv.rank() == 1 && X.shape().back() == Bv.dim(0),
                  "add_bias: bias " + to_string(Bv.shape()) + " does not match " + to_string(X.shape()));
  const std::size_t c = Bv.dim(0), rows = X.size() / c;
  Tensor<T> out(X.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = X[r * c + j] + Bv[j];
  return x.graph->record("add_bias", {x.id, bias.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.node(self).grad;
    if (g.needs_grad(x.id)) {
      auto dx = g.grad_buffer(x.id);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    }
    if (g.needs_grad(bias.id)) {
      auto db = g.grad_buffer(bias.id);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) db[j] += dy[r * c + j];
    }
  });
}

/// Concatenation along the last axis; leading dims must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  Shape lead(first.begin(), first.end() - 1);
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_same_graph(parts.front(), p, "concat");
    const Shape& s = p.shape();
    detail::require(s.size() == first.size() && std::equal(lead.begin(), lead.end(), s.begin()),
                    "concat: leading dims differ, " + to_string(first) + " vs " + to_string(s));
    widths.push_back(s.back());
    ids.push_back(p.id);
    total += s.back();
  }
  const std::size_t rows = numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data().data() + r * widths[k], widths[k], out.data().data() + r * total + offset);
    offset += widths[k];
  }
  return parts.front().graph->record("concat", ids, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.node(self).grad;
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (g.needs_grad(ids[k])) {
        auto dx = g.grad_buffer(ids[k]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) dx[r * widths[k] + c] += dy[r * total + off + c];
      }
      off += widths[k];
    }
  });
}

template <class T>
Var<T> concat(std::initializer_list<Var<T>> parts) {
  return concat(std::vector<Var<T>>(parts));
}

/// Columns [begin, end) of the last axis.
template <class T>
Var<T> slice_last(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& X = x.value();
  const std::size_t cols = X.shape().back();
  detail::require(begin < end && end <= cols,
                  "slice_last: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + to_string(X.shape()));
  const std::size_t w = end - begin, rows = X.size() / cols;
  Shape s = X.shape();
  s.back() = w;
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(X.data().data() + r * cols + begin, w, out.data().data() + r * w);
  return x.graph->record("slice_last", {x.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.node(self).grad;
    auto dx = g.grad_buffer(x.id);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) dx[r * cols + begin + c] += dy[r * w + c];
  });
}

/// Splits the last axis into consecutive parts of the given widths.
template <class T>
std::vector<Var<T>> split(Var<T> x, const std::vector<std::size_t>& widths) {
  std::size_t total = 0;
  for (auto w : widths) total += w;
  detail::require(total == x.shape().back(), "split: widths do not cover " + to_string(x.shape()));
  std::vector<Var<T>> parts;
  std::size_t off = 0;
  for (auto w : widths) {
    parts.push_back(slice_last(x, off, off + w));
    off += w;
  }
  return parts;
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.graph->record("reshape", {x.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.node(self).grad;
    auto dx = g.grad_buffer(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  });
}

/// Collapses all but the leading axis: [B, ...] -> [B, prod(...)].
template <class T>
Var<T> flatten(Var<T> x) {
  const auto& s = x.shape();
  detail::require(!s.empty(), "flatten: rank-0 input");
  return reshape(x, Shape{s[0], x.value().size() / s[0]});
}

/// [a,b,c,d] -> [a,c,b,d]
template <class T>
Var<T> swap_axes12(Var<T> x) {
  const auto& X = x.value();
  detail::require(X.rank() == 4, "swap_axes12: expected rank 4, got " + to_string(X.shape()));
  const std::size_t A = X.dim(0), B = X.dim(1), C = X.dim(2), D = X.dim(3);
  Tensor<T> out({A, C, B, D});
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(X.data().data() + ((a * B + b) * C + c) * D, D, out.data().data() + ((a * C + c) * B + b) * D);
  return x.graph->record("swap_axes12", {x.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.node(self).grad;
    auto dx = g.grad_buffer(x.id);
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t d = 0; d < D; ++d)
            dx[((a * B + b) * C + c) * D + d] += dy[((a * C + c) * B + b) * D + d];
  });
}

/// Stacks `times` copies of x along a new leading axis.
template <class T>
Var<T> repeat(Var<T> x, std::size_t times) {
  const auto& X = x.value();
  detail::require(times > 0, "repeat: times must be positive");
  Shape s{times};
  s.insert(s.end(), X.shape().begin(), X.shape().end());
  Tensor<T> out(s);
  for (std::size_t t = 0; t < times; ++t) std::copy(X.data().begin(), X.data().end(), out.data().begin() + t * X.size());
  return x.graph->record("repeat", {x.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.node(self).grad;
    auto dx = g.grad_buffer(x.id);
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[t * dx.size() + i];
  });
}

/// All n^2 ordered pairs of rows: [B,n,m] -> [B,n*n,2m], row i*n+j = (x_i, x_j).
template <class T>
Var<T> pair_concat(Var<T> x) {
  const auto& X = x.value();
  detail::require(X.rank() == 3, "pair_concat: expected [B,n,m], got " + to_string(X.shape()));
  const std::size_t B = X.dim(0), n = X.dim(1), m = X.dim(2);
  Tensor<T> out({B, n * n, 2 * m});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T* dst = out.data().data() + ((b * n + i) * n + j) * 2 * m;
        std::copy_n(X.data().data() + (b * n + i) * m, m, dst);
        std::copy_n(X.data().data() + (b * n + j) * m, m, dst + m);
      }
  return x.graph->record("pair_concat", {x.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.node(self).grad;
    auto dx = g.grad_buffer(x.id);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T* src = dy.data() + ((b * n + i) * n + j) * 2 * m;
          for (std::size_t c = 0; c < m; ++c) {
            dx[(b * n + i) * m + c] += src[c];
            dx[(b * n + j) * m + c] += src[m + c];
          }
        }
  });
}

/// Mean over the middle axis: [B,N,c] -> [B,c].
template <class T>
Var<T> mean_axis1(Var<T> x) {
  const auto& X = x.value();
  detail::require(X.rank() == 3, "mean_axis1: expected rank 3, got " + to_string(X.shape()));
  const std::size_t B = X.dim(0), N = X.dim(1), C = X.dim(2);
  const T inv = T{1} / static_cast<T>(N);
  Tensor<T> out({B, C});
  for (std::size_t b = 0; b < B; ++b) {
    T* o = out.data().data() + b * C;
    for (std::size_t r = 0; r < N; ++r) {
      const T* src = X.data().data() + (b * N + r) * C;
      for (std::size_t c = 0; c < C; ++c) o[c] += src[c];
    }
    for (std::size_t c = 0; c < C; ++c) o[c] *= inv;
  }
  return x.graph->record("mean_axis1", {x.id}, std::move(out), [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.node(self).grad;
    auto dx = g.grad_buffer(x.id);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t c = 0; c < C; ++c) dx[(b * N + r) * C + c] += inv * dy[b * C + c];
  });
}

/// Sum of all elements, as a [1] tensor.
template <class T>
Var<T> sum(Var<T> x) {
  T s{0};
  for (auto v : x.value().data()) s += v;
  return x.graph->record("sum", {x.id}, Tensor<T>({1}, std::vector<T>{s}), [=](Graph<T>& g, std::size_t self) {
    const T dy = g.node(self).grad[0];
    auto dx = g.grad_buffer(x.id);
    for (auto& v : dx) v += dy;
  });
}

/// Mean over the batch of -log softmax(logits)[label]. Returns a [1] tensor.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<std::size_t>& labels) {
  const auto& Z = logits.value();
  detail::require(Z.rank() == 2, "softmax_cross_entropy: logits must be [b,c], got " + to_string(Z.shape()));
  const std::size_t B = Z.dim(0), C = Z.dim(1);
  if (labels.size() != B) {
    throw DataError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
  }
  for (auto l : labels)
    if (l >= C) throw DataError("softmax_cross_entropy: label " + std::to_string(l) + " out of range for " + std::to_string(C) + " classes");
  std::vector<T> probs(B * C);
  T loss{0};
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = Z.data().data() + b * C;
    T mx = *std::max_element(z, z + C);
    T s{0};
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
    const T logsum = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(z[c] - logsum);
    loss += logsum - z[labels[b]];
  }
  loss /= static_cast<T>(B);
  return logits.graph->record(
      "softmax_cross_entropy", {logits.id}, Tensor<T>({1}, std::vector<T>{loss}),
      [=, probs = std::move(probs)](Graph<T>& g, std::size_t self) {
        const T dy = g.node(self).grad[0] / static_cast<T>(B);
        auto dz = g.grad_buffer(logits.id);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            dz[b * C + c] += dy * (probs[b * C + c] - (c == labels[b] ? T{1} : T{0}));
      });
}

/// One-hot overload: every row of `onehot` [b,c] must contain a single 1.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& onehot) {
  if (onehot.shape() != logits.shape()) {
    throw DataError("softmax_cross_entropy: labels " + to_string(onehot.shape()) + " vs logits " + to_string(logits.shape()));
  }
  const std::size_t B = onehot.dim(0), C = onehot.dim(1);
  std::vector<std::size_t> idx(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const T v = onehot.at(b, c);
      if (v == T{1}) {
        idx[b] = c;
        ++ones;
      } else if (v != T{0}) {
        ones = 2;
      }
    }
    if (ones != 1) throw DataError("softmax_cross_entropy: row " + std::to_string(b) + " is not one-hot");
  }
  return softmax_cross_entropy(logits, idx);
}

}  // namespace predinet
