#ifndef CDSNAS_OPS_HPP_
#define CDSNAS_OPS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "cdsnas/tensor.hpp"

// Primitive forward ops with reverse-mode rules. Shape rules:
//
//   conv1x1:           x (N,C,H,W),  w (Co,C)        -> (N,Co,H,W)
//   dwconv3x3:         x (N,C,H,W),  w (C,3,3)       -> (N,C,H,W)    pad 1, stride 1
//   conv2d:            x (N,Ci,H,W), w (Co,Ci,kh,kw) -> (N,Co,Ho,Wo) Ho=(H+2p-kh)/s+1
//   batch_norm:        x (N,C) or (N,C,H,W), per-channel gamma/beta
//   max_pool3x3s2:     x (N,C,H,W) -> (N,C,(H-1)/2+1,(W-1)/2+1)      pad 1
//   avg_pool2x2s2:     x (N,C,H,W), H,W even -> (N,C,H/2,W/2)
//   global_avg_pool:   x (N,C,H,W) -> (N,C)
//   stripe_avg_pool:   x (N,C,H,W), rows [r0,r1) -> (N,C)
//   channel_weighted_sum: a,b (N,C,H,W), wa,wb (N,C) -> wa*a + wb*b
//   linear:            x (N,Di), w (Do,Di), b (Do) -> (N,Do)
//   softmax:           1-D vector, max-subtracted
//   concat_dim1:       rank >= 2, equal dims except dim 1
//   add/sub/mul:       elementwise, identical shapes
//   affine:            scale*x + shift with scalar constants
//   mul_entry:         s[j] * x for a 1-D gate vector s
//
// All ops are recorded on the thread's active tape whenever any input is
// tracked there.

namespace cdsnas {

namespace detail {

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    fail_shape(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

template <typename T>
void check_rank(const char* op, const Tensor<T>& t, int rank) {
  if (t.rank() != rank)
    fail_shape(op, ": expected rank ", rank, " tensor, got shape ", shape_str(t.shape()));
}

template <typename T>
void axpy(T a, const std::vector<T>& x, std::size_t xoff, std::vector<T>& y, std::size_t yoff,
          std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[yoff + i] += a * x[xoff + i];
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  detail::maybe_record<T>(out, {&a, &b},
                          [](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            for (int k = 0; k < 2; ++k)
                              if (gin[static_cast<std::size_t>(k)])
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  (*gin[static_cast<std::size_t>(k)])[i] += g[i];
                          });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  detail::maybe_record<T>(out, {&a, &b},
                          [](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            if (gin[0])
                              for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                            if (gin[1])
                              for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
                          });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  detail::maybe_record<T>(out, {&a, &b},
                          [a, b](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            const auto& av = a.data();
                            const auto& bv = b.data();
                            if (gin[0])
                              for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * bv[i];
                            if (gin[1])
                              for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * av[i];
                          });
  return out;
}

// scale * x + shift, scalar constants.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = scale * xv[i] + shift;
  detail::maybe_record<T>(out, {&x},
                          [scale](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            if (gin[0])
                              for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += scale * g[i];
                          });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  detail::maybe_record<T>(out, {&x},
                          [x](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            if (!gin[0]) return;
                            const auto& xv = x.data();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              if (xv[i] > T(0)) (*gin[0])[i] += g[i];
                          });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = T(1) / (T(1) + std::exp(-xv[i]));
  detail::maybe_record<T>(out, {&x},
                          [out](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            if (!gin[0]) return;
                            const auto& yv = out.data();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*gin[0])[i] += g[i] * yv[i] * (T(1) - yv[i]);
                          });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    fail_shape("reshape: ", shape_str(x.shape()), " -> ", shape_str(shape), " changes element count");
  Tensor<T> out(std::move(shape), x.data());
  detail::maybe_record<T>(out, {&x},
                          [](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            if (gin[0])
                              for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                          });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::maybe_record<T>(out, {&x},
                          [](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            if (gin[0])
                              for (auto& gi : *gin[0]) gi += g[0];
                          });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  T inv = T(1) / static_cast<T>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(acc * inv);
  detail::maybe_record<T>(out, {&x},
                          [inv](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            if (gin[0])
                              for (auto& gi : *gin[0]) gi += g[0] * inv;
                          });
  return out;
}

// s[j] * x; gradients flow to both x and the gate vector entry.
template <typename T>
Tensor<T> mul_entry(const Tensor<T>& x, const Tensor<T>& s, std::int64_t j) {
  detail::check_rank("mul_entry", s, 1);
  if (j < 0 || j >= s.numel())
    fail_shape("mul_entry: index ", j, " out of range for gate of length ", s.numel());
  T sv = s.data()[static_cast<std::size_t>(j)];
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = sv * xv[i];
  detail::maybe_record<T>(
      out, {&x, &s}, [x, sv, j](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        const auto& xv = x.data();
        if (gin[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += sv * g[i];
        if (gin[1]) {
          T acc = 0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
          (*gin[1])[static_cast<std::size_t>(j)] += acc;
        }
      });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  detail::check_rank("softmax", x, 1);
  for (T v : x.data())
    if (!std::isfinite(static_cast<double>(v))) fail_data("softmax: non-finite input entry");
  const auto& xv = x.data();
  T mx = *std::max_element(xv.begin(), xv.end());
  Tensor<T> out(x.shape());
  auto& ov = out.data();
  T z = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    ov[i] = std::exp(xv[i] - mx);
    z += ov[i];
  }
  for (auto& v : ov) v /= z;
  detail::maybe_record<T>(out, {&x},
                          [out](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            if (!gin[0]) return;
                            const auto& yv = out.data();
                            T dot = 0;
                            for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * yv[i];
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*gin[0])[i] += yv[i] * (g[i] - dot);
                          });
  return out;
}

template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w) {
  detail::check_rank("conv1x1", x, 4);
  detail::check_rank("conv1x1", w, 2);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t co = w.dim(0);
  if (w.dim(1) != c)
    fail_shape("conv1x1: weight ", shape_str(w.shape()), " does not match input ",
               shape_str(x.shape()));
  const std::size_t hw = static_cast<std::size_t>(h * wd);
  Tensor<T> out({n, co, h, wd});
  const auto& xv = x.data();
  const auto& wv = w.data();
  auto& ov = out.data();
  for (std::int64_t in = 0; in < n; ++in)
    for (std::int64_t oc = 0; oc < co; ++oc) {
      std::size_t obase = static_cast<std::size_t>((in * co + oc)) * hw;
      for (std::int64_t ic = 0; ic < c; ++ic) {
        T a = wv[static_cast<std::size_t>(oc * c + ic)];
        if (a == T(0)) continue;
        detail::axpy(a, xv, static_cast<std::size_t>((in * c + ic)) * hw, ov, obase, hw);
      }
    }
  detail::maybe_record<T>(
      out, {&x, &w},
      [x, w, n, c, co, hw](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        const auto& xv = x.data();
        const auto& wv = w.data();
        for (std::int64_t in = 0; in < n; ++in)
          for (std::int64_t oc = 0; oc < co; ++oc) {
            std::size_t obase = static_cast<std::size_t>((in * co + oc)) * hw;
            for (std::int64_t ic = 0; ic < c; ++ic) {
              std::size_t xbase = static_cast<std::size_t>((in * c + ic)) * hw;
              if (gin[0])
                detail::axpy(wv[static_cast<std::size_t>(oc * c + ic)], g, obase, *gin[0], xbase,
                             hw);
              if (gin[1]) {
                T acc = 0;
                for (std::size_t i = 0; i < hw; ++i) acc += g[obase + i] * xv[xbase + i];
                (*gin[1])[static_cast<std::size_t>(oc * c + ic)] += acc;
              }
            }
          }
      });
  return out;
}

template <typename T>
Tensor<T> dwconv3x3(const Tensor<T>& x, const Tensor<T>& w) {
  detail::check_rank("dwconv3x3", x, 4);
  if (w.rank() != 3 || w.dim(1) != 3 || w.dim(2) != 3 || w.dim(0) != x.dim(1))
    fail_shape("dwconv3x3: weight ", shape_str(w.shape()), " does not match input ",
               shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  Tensor<T> out(x.shape());
  const auto& xv = x.data();
  const auto& wv = w.data();
  auto& ov = out.data();
  for (std::int64_t in = 0; in < n; ++in)
    for (std::int64_t ic = 0; ic < c; ++ic) {
      const T* k = &wv[static_cast<std::size_t>(ic * 9)];
      std::size_t base = static_cast<std::size_t>((in * c + ic) * h * wd);
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < wd; ++xx) {
          T acc = 0;
          for (std::int64_t dy = -1; dy <= 1; ++dy) {
            std::int64_t sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
              std::int64_t sx = xx + dx;
              if (sx < 0 || sx >= wd) continue;
              acc += k[(dy + 1) * 3 + (dx + 1)] * xv[base + static_cast<std::size_t>(sy * wd + sx)];
            }
          }
          ov[base + static_cast<std::size_t>(y * wd + xx)] = acc;
        }
    }
  detail::maybe_record<T>(
      out, {&x, &w},
      [x, w, n, c, h, wd](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        const auto& xv = x.data();
        const auto& wv = w.data();
        for (std::int64_t in = 0; in < n; ++in)
          for (std::int64_t ic = 0; ic < c; ++ic) {
            const T* k = &wv[static_cast<std::size_t>(ic * 9)];
            std::size_t base = static_cast<std::size_t>((in * c + ic) * h * wd);
            for (std::int64_t y = 0; y < h; ++y)
              for (std::int64_t xx = 0; xx < wd; ++xx) {
                T go = g[base + static_cast<std::size_t>(y * wd + xx)];
                if (go == T(0)) continue;
                for (std::int64_t dy = -1; dy <= 1; ++dy) {
                  std::int64_t sy = y + dy;
                  if (sy < 0 || sy >= h) continue;
                  for (std::int64_t dx = -1; dx <= 1; ++dx) {
                    std::int64_t sx = xx + dx;
                    if (sx < 0 || sx >= wd) continue;
                    std::size_t si = base + static_cast<std::size_t>(sy * wd + sx);
                    if (gin[0]) (*gin[0])[si] += go * k[(dy + 1) * 3 + (dx + 1)];
                    if (gin[1])
                      (*gin[1])[static_cast<std::size_t>(ic * 9 + (dy + 1) * 3 + (dx + 1))] +=
                          go * xv[si];
                  }
                }
              }
          }
      });
  return out;
}

// Direct convolution, used by the stem's 7x7 stride-2 layer.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride, std::int64_t pad) {
  detail::check_rank("conv2d", x, 4);
  detail::check_rank("conv2d", w, 4);
  if (w.dim(1) != x.dim(1))
    fail_shape("conv2d: weight ", shape_str(w.shape()), " does not match input ",
               shape_str(x.shape()));
  const std::int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1)
    fail_shape("conv2d: kernel ", shape_str(w.shape()), " too large for input ",
               shape_str(x.shape()));
  Tensor<T> out({n, co, ho, wo});
  const auto& xv = x.data();
  const auto& wv = w.data();
  auto& ov = out.data();
  auto xi = [&](std::int64_t in, std::int64_t c, std::int64_t y, std::int64_t xx) {
    return static_cast<std::size_t>(((in * ci + c) * h + y) * wd + xx);
  };
  for (std::int64_t in = 0; in < n; ++in)
    for (std::int64_t oc = 0; oc < co; ++oc)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          T acc = 0;
          for (std::int64_t c = 0; c < ci; ++c)
            for (std::int64_t ky = 0; ky < kh; ++ky) {
              std::int64_t sy = oy * stride - pad + ky;
              if (sy < 0 || sy >= h) continue;
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                std::int64_t sx = ox * stride - pad + kx;
                if (sx < 0 || sx >= wd) continue;
                acc += wv[static_cast<std::size_t>(((oc * ci + c) * kh + ky) * kw + kx)] *
                       xv[xi(in, c, sy, sx)];
              }
            }
          ov[static_cast<std::size_t>(((in * co + oc) * ho + oy) * wo + ox)] = acc;
        }
  detail::maybe_record<T>(
      out, {&x, &w},
      [x, w, stride, pad, n, ci, h, wd, co, kh, kw, ho,
       wo](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        const auto& xv = x.data();
        const auto& wv = w.data();
        auto xi = [&](std::int64_t in, std::int64_t c, std::int64_t y, std::int64_t xx) {
          return static_cast<std::size_t>(((in * ci + c) * h + y) * wd + xx);
        };
        for (std::int64_t in = 0; in < n; ++in)
          for (std::int64_t oc = 0; oc < co; ++oc)
            for (std::int64_t oy = 0; oy < ho; ++oy)
              for (std::int64_t ox = 0; ox < wo; ++ox) {
                T go = g[static_cast<std::size_t>(((in * co + oc) * ho + oy) * wo + ox)];
                if (go == T(0)) continue;
                for (std::int64_t c = 0; c < ci; ++c)
                  for (std::int64_t ky = 0; ky < kh; ++ky) {
                    std::int64_t sy = oy * stride - pad + ky;
                    if (sy < 0 || sy >= h) continue;
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                      std::int64_t sx = ox * stride - pad + kx;
                      if (sx < 0 || sx >= wd) continue;
                      std::size_t widx =
                          static_cast<std::size_t>(((oc * ci + c) * kh + ky) * kw + kx);
                      if (gin[0]) (*gin[0])[xi(in, c, sy, sx)] += go * wv[widx];
                      if (gin[1]) (*gin[1])[widx] += go * xv[xi(in, c, sy, sx)];
                    }
                  }
              }
      });
  return out;
}

// Train mode normalizes with batch statistics and updates the running
// buffers in place (momentum convention: r <- (1-m)*r + m*batch). Inference
// mode normalizes with the running buffers.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 2 && x.rank() != 4)
    fail_shape("batch_norm: expected (N,C) or (N,C,H,W), got ", shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1);
  const std::int64_t s = x.numel() / (n * c);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    fail_shape("batch_norm: parameter length does not match ", c, " channels");
  const std::int64_t m = n * s;
  const auto& xv = x.data();
  std::vector<T> mu(static_cast<std::size_t>(c), T(0));
  std::vector<T> var(static_cast<std::size_t>(c), T(0));
  if (training) {
    for (std::int64_t in = 0; in < n; ++in)
      for (std::int64_t ic = 0; ic < c; ++ic) {
        std::size_t base = static_cast<std::size_t>((in * c + ic) * s);
        T acc = 0;
        for (std::int64_t i = 0; i < s; ++i) acc += xv[base + static_cast<std::size_t>(i)];
        mu[static_cast<std::size_t>(ic)] += acc;
      }
    for (auto& v : mu) v /= static_cast<T>(m);
    for (std::int64_t in = 0; in < n; ++in)
      for (std::int64_t ic = 0; ic < c; ++ic) {
        std::size_t base = static_cast<std::size_t>((in * c + ic) * s);
        T mv = mu[static_cast<std::size_t>(ic)];
        T acc = 0;
        for (std::int64_t i = 0; i < s; ++i) {
          T d = xv[base + static_cast<std::size_t>(i)] - mv;
          acc += d * d;
        }
        var[static_cast<std::size_t>(ic)] += acc;
      }
    for (auto& v : var) v /= static_cast<T>(m);
    // Running buffers track the unbiased variance.
    for (std::int64_t ic = 0; ic < c; ++ic) {
      auto i = static_cast<std::size_t>(ic);
      running_mean.data()[i] = (T(1) - momentum) * running_mean.data()[i] + momentum * mu[i];
      T unbiased = m > 1 ? var[i] * static_cast<T>(m) / static_cast<T>(m - 1) : var[i];
      running_var.data()[i] = (T(1) - momentum) * running_var.data()[i] + momentum * unbiased;
    }
  } else {
    for (std::int64_t ic = 0; ic < c; ++ic) {
      mu[static_cast<std::size_t>(ic)] = running_mean.data()[static_cast<std::size_t>(ic)];
      var[static_cast<std::size_t>(ic)] = running_var.data()[static_cast<std::size_t>(ic)];
    }
  }
  std::vector<T> inv(static_cast<std::size_t>(c));
  for (std::int64_t ic = 0; ic < c; ++ic) {
    auto i = static_cast<std::size_t>(ic);
    inv[i] = T(1) / std::sqrt(var[i] + eps);
  }
  Tensor<T> out(x.shape());
  auto& ov = out.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (std::int64_t in = 0; in < n; ++in)
    for (std::int64_t ic = 0; ic < c; ++ic) {
      auto i = static_cast<std::size_t>(ic);
      std::size_t base = static_cast<std::size_t>((in * c + ic) * s);
      for (std::int64_t k = 0; k < s; ++k) {
        std::size_t p = base + static_cast<std::size_t>(k);
        ov[p] = gv[i] * (xv[p] - mu[i]) * inv[i] + bv[i];
      }
    }
  detail::maybe_record<T>(
      out, {&x, &gamma, &beta},
      [x, gamma, mu, inv, training, n, c,
       s](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        const auto& xv = x.data();
        const auto& gv = gamma.data();
        const std::int64_t m = n * s;
        // Per-channel sums of g and g*xhat feed both the affine grads and
        // the train-mode input grad.
        std::vector<T> sum_g(static_cast<std::size_t>(c), T(0));
        std::vector<T> sum_gx(static_cast<std::size_t>(c), T(0));
        for (std::int64_t in = 0; in < n; ++in)
          for (std::int64_t ic = 0; ic < c; ++ic) {
            auto i = static_cast<std::size_t>(ic);
            std::size_t base = static_cast<std::size_t>((in * c + ic) * s);
            for (std::int64_t k = 0; k < s; ++k) {
              std::size_t p = base + static_cast<std::size_t>(k);
              T xh = (xv[p] - mu[i]) * inv[i];
              sum_g[i] += g[p];
              sum_gx[i] += g[p] * xh;
            }
          }
        if (gin[1])
          for (std::size_t i = 0; i < sum_gx.size(); ++i) (*gin[1])[i] += sum_gx[i];
        if (gin[2])
          for (std::size_t i = 0; i < sum_g.size(); ++i) (*gin[2])[i] += sum_g[i];
        if (!gin[0]) return;
        for (std::int64_t in = 0; in < n; ++in)
          for (std::int64_t ic = 0; ic < c; ++ic) {
            auto i = static_cast<std::size_t>(ic);
            std::size_t base = static_cast<std::size_t>((in * c + ic) * s);
            for (std::int64_t k = 0; k < s; ++k) {
              std::size_t p = base + static_cast<std::size_t>(k);
              if (training) {
                T xh = (xv[p] - mu[i]) * inv[i];
                (*gin[0])[p] += gv[i] * inv[i] *
                                (g[p] - sum_g[i] / static_cast<T>(m) -
                                 xh * sum_gx[i] / static_cast<T>(m));
              } else {
                (*gin[0])[p] += gv[i] * inv[i] * g[p];
              }
            }
          }
      });
  return out;
}

template <typename T>
Tensor<T> max_pool3x3s2(const Tensor<T>& x) {
  detail::check_rank("max_pool3x3s2", x, 4);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t ho = (h + 2 - 3) / 2 + 1, wo = (wd + 2 - 3) / 2 + 1;
  Tensor<T> out({n, c, ho, wo});
  const auto& xv = x.data();
  auto& ov = out.data();
  // Flat argmax per window; ties resolve to the first scanned position.
  auto argmax = std::make_shared<std::vector<std::int64_t>>(ov.size());
  std::size_t oi = 0;
  for (std::int64_t in = 0; in < n; ++in)
    for (std::int64_t ic = 0; ic < c; ++ic) {
      std::size_t base = static_cast<std::size_t>((in * c + ic) * h * wd);
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t besti = -1;
          for (std::int64_t ky = 0; ky < 3; ++ky) {
            std::int64_t sy = oy * 2 - 1 + ky;
            if (sy < 0 || sy >= h) continue;
            for (std::int64_t kx = 0; kx < 3; ++kx) {
              std::int64_t sx = ox * 2 - 1 + kx;
              if (sx < 0 || sx >= wd) continue;
              T v = xv[base + static_cast<std::size_t>(sy * wd + sx)];
              if (v > best) {
                best = v;
                besti = static_cast<std::int64_t>(base) + sy * wd + sx;
              }
            }
          }
          ov[oi] = best;
          (*argmax)[oi] = besti;
        }
    }
  detail::maybe_record<T>(out, {&x},
                          [argmax](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            if (!gin[0]) return;
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*gin[0])[static_cast<std::size_t>((*argmax)[i])] += g[i];
                          });
  return out;
}

template <typename T>
Tensor<T> avg_pool2x2s2(const Tensor<T>& x) {
  detail::check_rank("avg_pool2x2s2", x, 4);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (h % 2 != 0 || wd % 2 != 0)
    fail_shape("avg_pool2x2s2: spatial dims must be even, got ", shape_str(x.shape()));
  const std::int64_t ho = h / 2, wo = wd / 2;
  Tensor<T> out({n, c, ho, wo});
  const auto& xv = x.data();
  auto& ov = out.data();
  std::size_t oi = 0;
  for (std::int64_t in = 0; in < n; ++in)
    for (std::int64_t ic = 0; ic < c; ++ic) {
      std::size_t base = static_cast<std::size_t>((in * c + ic) * h * wd);
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox, ++oi) {
          std::size_t p = base + static_cast<std::size_t>(2 * oy * wd + 2 * ox);
          ov[oi] = (xv[p] + xv[p + 1] + xv[p + static_cast<std::size_t>(wd)] +
                    xv[p + static_cast<std::size_t>(wd) + 1]) /
                   T(4);
        }
    }
  detail::maybe_record<T>(
      out, {&x}, [n, c, h, wd, ho, wo](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        if (!gin[0]) return;
        std::size_t oi = 0;
        for (std::int64_t in = 0; in < n; ++in)
          for (std::int64_t ic = 0; ic < c; ++ic) {
            std::size_t base = static_cast<std::size_t>((in * c + ic) * h * wd);
            for (std::int64_t oy = 0; oy < ho; ++oy)
              for (std::int64_t ox = 0; ox < wo; ++ox, ++oi) {
                T q = g[oi] / T(4);
                std::size_t p = base + static_cast<std::size_t>(2 * oy * wd + 2 * ox);
                (*gin[0])[p] += q;
                (*gin[0])[p + 1] += q;
                (*gin[0])[p + static_cast<std::size_t>(wd)] += q;
                (*gin[0])[p + static_cast<std::size_t>(wd) + 1] += q;
              }
          }
      });
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::check_rank("global_avg_pool", x, 4);
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::int64_t i = 0; i < n * c; ++i) {
    std::size_t base = static_cast<std::size_t>(i * hw);
    T acc = 0;
    for (std::int64_t k = 0; k < hw; ++k) acc += xv[base + static_cast<std::size_t>(k)];
    ov[static_cast<std::size_t>(i)] = acc / static_cast<T>(hw);
  }
  detail::maybe_record<T>(out, {&x},
                          [hw](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
                            if (!gin[0]) return;
                            T inv = T(1) / static_cast<T>(hw);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              std::size_t base = i * static_cast<std::size_t>(hw);
                              for (std::int64_t k = 0; k < hw; ++k)
                                (*gin[0])[base + static_cast<std::size_t>(k)] += g[i] * inv;
                            }
                          });
  return out;
}

// Average over the row band [row0, row1) and all columns.
template <typename T>
Tensor<T> stripe_avg_pool(const Tensor<T>& x, std::int64_t row0, std::int64_t row1) {
  detail::check_rank("stripe_avg_pool", x, 4);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (row0 < 0 || row1 <= row0 || row1 > h)
    fail_shape("stripe_avg_pool: band [", row0, ",", row1, ") invalid for height ", h);
  Tensor<T> out({n, c});
  const auto& xv = x.data();
  auto& ov = out.data();
  const T inv = T(1) / static_cast<T>((row1 - row0) * wd);
  for (std::int64_t i = 0; i < n * c; ++i) {
    std::size_t base = static_cast<std::size_t>(i * h * wd);
    T acc = 0;
    for (std::int64_t y = row0; y < row1; ++y)
      for (std::int64_t xx = 0; xx < wd; ++xx)
        acc += xv[base + static_cast<std::size_t>(y * wd + xx)];
    ov[static_cast<std::size_t>(i)] = acc * inv;
  }
  detail::maybe_record<T>(
      out, {&x},
      [row0, row1, h, wd, inv](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) {
          std::size_t base = i * static_cast<std::size_t>(h * wd);
          T q = g[i] * inv;
          for (std::int64_t y = row0; y < row1; ++y)
            for (std::int64_t xx = 0; xx < wd; ++xx)
              (*gin[0])[base + static_cast<std::size_t>(y * wd + xx)] += q;
        }
      });
  return out;
}

// wa*a + wb*b with per-channel scalar weights broadcast over spatial dims.
template <typename T>
Tensor<T> channel_weighted_sum(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& wa,
                               const Tensor<T>& wb) {
  detail::check_same_shape("channel_weighted_sum", a, b);
  detail::check_rank("channel_weighted_sum", a, 4);
  const std::int64_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  if (wa.rank() != 2 || wa.dim(0) != n || wa.dim(1) != c || wb.shape() != wa.shape())
    fail_shape("channel_weighted_sum: weights ", shape_str(wa.shape()), "/",
               shape_str(wb.shape()), " do not match input ", shape_str(a.shape()));
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  const auto& wav = wa.data();
  const auto& wbv = wb.data();
  auto& ov = out.data();
  for (std::int64_t i = 0; i < n * c; ++i) {
    std::size_t base = static_cast<std::size_t>(i * hw);
    T ca = wav[static_cast<std::size_t>(i)], cb = wbv[static_cast<std::size_t>(i)];
    for (std::int64_t k = 0; k < hw; ++k) {
      std::size_t p = base + static_cast<std::size_t>(k);
      ov[p] = ca * av[p] + cb * bv[p];
    }
  }
  detail::maybe_record<T>(
      out, {&a, &b, &wa, &wb},
      [a, b, wa, wb, n, c, hw](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        const auto& av = a.data();
        const auto& bv = b.data();
        const auto& wav = wa.data();
        const auto& wbv = wb.data();
        for (std::int64_t i = 0; i < n * c; ++i) {
          std::size_t base = static_cast<std::size_t>(i * hw);
          auto wi = static_cast<std::size_t>(i);
          T acc_a = 0, acc_b = 0;
          for (std::int64_t k = 0; k < hw; ++k) {
            std::size_t p = base + static_cast<std::size_t>(k);
            if (gin[0]) (*gin[0])[p] += wav[wi] * g[p];
            if (gin[1]) (*gin[1])[p] += wbv[wi] * g[p];
            acc_a += g[p] * av[p];
            acc_b += g[p] * bv[p];
          }
          if (gin[2]) (*gin[2])[wi] += acc_a;
          if (gin[3]) (*gin[3])[wi] += acc_b;
        }
      });
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::check_rank("linear", x, 2);
  detail::check_rank("linear", w, 2);
  const std::int64_t n = x.dim(0), di = x.dim(1), dout = w.dim(0);
  if (w.dim(1) != di || b.numel() != dout)
    fail_shape("linear: weight ", shape_str(w.shape()), " bias ", shape_str(b.shape()),
               " do not match input ", shape_str(x.shape()));
  Tensor<T> out({n, dout});
  const auto& xv = x.data();
  const auto& wv = w.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::int64_t in = 0; in < n; ++in)
    for (std::int64_t o = 0; o < dout; ++o) {
      T acc = bv[static_cast<std::size_t>(o)];
      std::size_t xb = static_cast<std::size_t>(in * di);
      std::size_t wb = static_cast<std::size_t>(o * di);
      for (std::int64_t i = 0; i < di; ++i)
        acc += wv[wb + static_cast<std::size_t>(i)] * xv[xb + static_cast<std::size_t>(i)];
      ov[static_cast<std::size_t>(in * dout + o)] = acc;
    }
  detail::maybe_record<T>(
      out, {&x, &w, &b},
      [x, w, n, di, dout](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        const auto& xv = x.data();
        const auto& wv = w.data();
        for (std::int64_t in = 0; in < n; ++in)
          for (std::int64_t o = 0; o < dout; ++o) {
            T go = g[static_cast<std::size_t>(in * dout + o)];
            if (go == T(0)) continue;
            std::size_t xb = static_cast<std::size_t>(in * di);
            std::size_t wb = static_cast<std::size_t>(o * di);
            if (gin[0])
              for (std::int64_t i = 0; i < di; ++i)
                (*gin[0])[xb + static_cast<std::size_t>(i)] +=
                    go * wv[wb + static_cast<std::size_t>(i)];
            if (gin[1])
              for (std::int64_t i = 0; i < di; ++i)
                (*gin[1])[wb + static_cast<std::size_t>(i)] +=
                    go * xv[xb + static_cast<std::size_t>(i)];
            if (gin[2]) (*gin[2])[static_cast<std::size_t>(o)] += go;
          }
      });
  return out;
}

template <typename T>
Tensor<T> concat_dim1(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank())
    fail_shape("concat_dim1: ranks ", a.rank(), " vs ", b.rank());
  for (int i = 0; i < a.rank(); ++i)
    if (i != 1 && a.dim(i) != b.dim(i))
      fail_shape("concat_dim1: shapes ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  Shape os = a.shape();
  os[1] = a.dim(1) + b.dim(1);
  const std::int64_t n = a.dim(0);
  std::int64_t inner = 1;
  for (int i = 2; i < a.rank(); ++i) inner *= a.dim(i);
  const std::int64_t ablk = a.dim(1) * inner, bblk = b.dim(1) * inner;
  Tensor<T> out(os);
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::int64_t in = 0; in < n; ++in) {
    std::copy_n(av.begin() + in * ablk, ablk, ov.begin() + in * (ablk + bblk));
    std::copy_n(bv.begin() + in * bblk, bblk, ov.begin() + in * (ablk + bblk) + ablk);
  }
  detail::maybe_record<T>(
      out, {&a, &b},
      [n, ablk, bblk](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        for (std::int64_t in = 0; in < n; ++in) {
          std::size_t base = static_cast<std::size_t>(in * (ablk + bblk));
          if (gin[0])
            for (std::int64_t i = 0; i < ablk; ++i)
              (*gin[0])[static_cast<std::size_t>(in * ablk + i)] +=
                  g[base + static_cast<std::size_t>(i)];
          if (gin[1])
            for (std::int64_t i = 0; i < bblk; ++i)
              (*gin[1])[static_cast<std::size_t>(in * bblk + i)] +=
                  g[base + static_cast<std::size_t>(ablk + i)];
        }
      });
  return out;
}

// Batch-hard triplet loss with Euclidean distances: per anchor, hardest
// positive minus hardest negative, hinged at `margin`, averaged over anchors.
template <typename T>
Tensor<T> triplet_batch_hard(const Tensor<T>& features, const std::vector<int>& labels, T margin) {
  detail::check_rank("triplet_batch_hard", features, 2);
  const std::int64_t n = features.dim(0), d = features.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n)
    fail_shape("triplet_batch_hard: ", labels.size(), " labels for ", n, " rows");
  {
    std::vector<int> sorted(labels);
    std::sort(sorted.begin(), sorted.end());
    int distinct = static_cast<int>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
    if (distinct < 2)
      fail_data("triplet_batch_hard: degenerate batch with ", distinct, " identity");
  }
  for (std::int64_t i = 0; i < n; ++i) {
    bool has_pos = false;
    for (std::int64_t j = 0; j < n && !has_pos; ++j)
      has_pos = i != j && labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
    if (!has_pos)
      fail_data("triplet_batch_hard: anchor ", i, " (identity ",
                labels[static_cast<std::size_t>(i)], ") has no positive in the batch");
  }
  const auto& fv = features.data();
  auto dist = [&](std::int64_t i, std::int64_t j) {
    T acc = 0;
    std::size_t bi = static_cast<std::size_t>(i * d), bj = static_cast<std::size_t>(j * d);
    for (std::int64_t k = 0; k < d; ++k) {
      T diff = fv[bi + static_cast<std::size_t>(k)] - fv[bj + static_cast<std::size_t>(k)];
      acc += diff * diff;
    }
    return std::sqrt(acc);
  };
  auto hardest_pos = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n), -1);
  auto hardest_neg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n), -1);
  auto active = std::make_shared<std::vector<bool>>(static_cast<std::size_t>(n), false);
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    T dp = -1, dn = std::numeric_limits<T>::infinity();
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      T dij = dist(i, j);
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
        if (dij > dp) {
          dp = dij;
          (*hardest_pos)[static_cast<std::size_t>(i)] = j;
        }
      } else if (dij < dn) {
        dn = dij;
        (*hardest_neg)[static_cast<std::size_t>(i)] = j;
      }
    }
    T hinge = dp - dn + margin;
    if (hinge > T(0)) {
      loss += hinge;
      (*active)[static_cast<std::size_t>(i)] = true;
    }
  }
  loss /= static_cast<T>(n);
  Tensor<T> out = Tensor<T>::scalar(loss);
  detail::maybe_record<T>(
      out, {&features},
      [features, hardest_pos, hardest_neg, active, n,
       d](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        if (!gin[0]) return;
        const auto& fv = features.data();
        T scale = g[0] / static_cast<T>(n);
        // d(d(i,j))/df_i = (f_i - f_j)/d(i,j); zero-distance pairs get a zero
        // subgradient.
        auto route = [&](std::int64_t i, std::int64_t j, T sign) {
          std::size_t bi = static_cast<std::size_t>(i * d), bj = static_cast<std::size_t>(j * d);
          T acc = 0;
          for (std::int64_t k = 0; k < d; ++k) {
            T diff = fv[bi + static_cast<std::size_t>(k)] - fv[bj + static_cast<std::size_t>(k)];
            acc += diff * diff;
          }
          T dij = std::sqrt(acc);
          if (dij <= T(1e-12)) return;
          T q = sign * scale / dij;
          for (std::int64_t k = 0; k < d; ++k) {
            T diff = fv[bi + static_cast<std::size_t>(k)] - fv[bj + static_cast<std::size_t>(k)];
            (*gin[0])[bi + static_cast<std::size_t>(k)] += q * diff;
            (*gin[0])[bj + static_cast<std::size_t>(k)] -= q * diff;
          }
        };
        for (std::int64_t i = 0; i < n; ++i) {
          if (!(*active)[static_cast<std::size_t>(i)]) continue;
          route(i, (*hardest_pos)[static_cast<std::size_t>(i)], T(1));
          route(i, (*hardest_neg)[static_cast<std::size_t>(i)], T(-1));
        }
      });
  return out;
}

// Mean cross-entropy with a stable log-sum-exp.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  detail::check_rank("softmax_cross_entropy", logits, 2);
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n)
    fail_shape("softmax_cross_entropy: ", labels.size(), " labels for ", n, " rows");
  for (int lab : labels)
    if (lab < 0 || lab >= c)
      fail_data("softmax_cross_entropy: label ", lab, " out of range [0,", c, ")");
  const auto& zv = logits.data();
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::size_t base = static_cast<std::size_t>(i * c);
    T mx = zv[base];
    for (std::int64_t k = 1; k < c; ++k) mx = std::max(mx, zv[base + static_cast<std::size_t>(k)]);
    T z = 0;
    for (std::int64_t k = 0; k < c; ++k) z += std::exp(zv[base + static_cast<std::size_t>(k)] - mx);
    loss += std::log(z) + mx - zv[base + static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
  }
  loss /= static_cast<T>(n);
  Tensor<T> out = Tensor<T>::scalar(loss);
  detail::maybe_record<T>(
      out, {&logits},
      [logits, labels, n, c](const std::vector<T>& g, const std::vector<std::vector<T>*>& gin) {
        if (!gin[0]) return;
        const auto& zv = logits.data();
        T scale = g[0] / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i) {
          std::size_t base = static_cast<std::size_t>(i * c);
          T mx = zv[base];
          for (std::int64_t k = 1; k < c; ++k)
            mx = std::max(mx, zv[base + static_cast<std::size_t>(k)]);
          T z = 0;
          for (std::int64_t k = 0; k < c; ++k)
            z += std::exp(zv[base + static_cast<std::size_t>(k)] - mx);
          for (std::int64_t k = 0; k < c; ++k) {
            T p = std::exp(zv[base + static_cast<std::size_t>(k)] - mx) / z;
            T onehot = (k == labels[static_cast<std::size_t>(i)]) ? T(1) : T(0);
            (*gin[0])[base + static_cast<std::size_t>(k)] += scale * (p - onehot);
          }
        }
      });
  return out;
}

}  // namespace cdsnas

#endif  // CDSNAS_OPS_HPP_
