#include "smagnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace smagnet::ops {

namespace {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapM = Eigen::Map<const MatRM<T>>;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_rank4(const Shape& s, const char* op, const char* what) {
  require(s.size() == 4, std::string(op) + ": " + what + " must be 4-D [B,C,H,W], got " + shape_str(s));
}

struct ConvGeom {
  std::size_t channels, h, w;  // input image
  std::size_t kh, kw, stride, pad;
  std::size_t oh, ow;          // output grid
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return oh * ow; }
};

// col[(c*kh + i)*kw + j, oy*ow + ox] = x[c, oy*s + i - pad, ox*s + j - pad]
template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = col + ((c * g.kh + i) * g.kw + j) * ncols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          T* drow = dst + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(drow, drow + g.ow, T(0));
            continue;
          }
          const T* xrow = xc + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            drow[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : xrow[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
template <class T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* xc = x + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = col + ((c * g.kh + i) * g.kw + j) * ncols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* xrow = xc + static_cast<std::size_t>(iy) * g.w;
          const T* srow = src + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) xrow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise_conv(const ConvGeom& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace

// ---------------------------------------------------------------- conv2d

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                      int stride, int pad) {
  require_rank4(x.shape(), "conv2d", "input");
  require_rank4(w.shape(), "conv2d", "kernel");
  require(stride >= 1, "conv2d: stride must be >= 1, got " + std::to_string(stride));
  require(pad >= 0, "conv2d: padding must be >= 0");
  require(x.dim(1) == w.dim(1), "conv2d: input " + shape_str(x.shape()) + " has " +
                                    std::to_string(x.dim(1)) + " channels but kernel " +
                                    shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  const std::size_t B = x.dim(0), cout = w.dim(0);
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3),
             static_cast<std::size_t>(stride), static_cast<std::size_t>(pad), 0, 0};
  require(g.h + 2 * g.pad >= g.kh && g.w + 2 * g.pad >= g.kw,
          "conv2d: kernel " + shape_str(w.shape()) + " does not fit padded input " +
              shape_str(x.shape()));
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (b.defined()) {
    require(b.numel() == cout, "conv2d: bias " + shape_str(b.shape()) + " does not match " +
                                   std::to_string(cout) + " output channels");
  }

  const std::size_t K = g.rows(), P = g.cols(), in_sz = g.channels * g.h * g.w;
  std::vector<T> out(B * cout * P);
  std::vector<T> col(is_pointwise_conv(g) ? 0 : K * P);
  CMapM<T> W(w.data().data(), cout, K);
  for (std::size_t n = 0; n < B; ++n) {
    const T* xn = x.data().data() + n * in_sz;
    const T* cp = xn;
    if (!col.empty()) {
      im2col(xn, g, col.data());
      cp = col.data();
    }
    MapM<T> O(out.data() + n * cout * P, cout, P);
    O.noalias() = W * CMapM<T>(cp, K, P);
    if (b.defined()) {
      for (std::size_t c = 0; c < cout; ++c) O.row(c).array() += b.data()[c];
    }
  }

  std::vector<NodePtr<T>> parents{x.node_ptr(), w.node_ptr()};
  if (b.defined()) parents.push_back(b.node_ptr());
  return detail::make_result<T>(
      {B, cout, g.oh, g.ow}, std::move(out), "conv2d", std::move(parents),
      [g, B, cout](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        Node<T>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        const std::size_t K = g.rows(), P = g.cols(), in_sz = g.channels * g.h * g.w;
        const bool pw = is_pointwise_conv(g);
        std::vector<T> col(pw ? 0 : K * P), dcol(pw ? 0 : K * P);
        CMapM<T> W(wn.value.data(), cout, K);
        if (wn.requires_grad) wn.ensure_grad();
        if (xn.requires_grad) xn.ensure_grad();
        for (std::size_t n = 0; n < B; ++n) {
          CMapM<T> G(self.grad.data() + n * cout * P, cout, P);
          if (wn.requires_grad) {
            const T* cp = xn.value.data() + n * in_sz;
            if (!pw) {
              im2col(cp, g, col.data());
              cp = col.data();
            }
            MapM<T>(wn.grad.data(), cout, K).noalias() += G * CMapM<T>(cp, K, P).transpose();
          }
          if (xn.requires_grad) {
            if (pw) {
              MapM<T>(xn.grad.data() + n * in_sz, K, P).noalias() += W.transpose() * G;
            } else {
              MapM<T>(dcol.data(), K, P).noalias() = W.transpose() * G;
              col2im(dcol.data(), g, xn.grad.data() + n * in_sz);
            }
          }
          if (bn && bn->requires_grad) {
            bn->ensure_grad();
            // Plain loop: Eigen's vectorized sum depends on pointer alignment.
            for (std::size_t c = 0; c < cout; ++c) {
              T acc = 0;
              const T* gc = self.grad.data() + (n * cout + c) * P;
              for (std::size_t i = 0; i < P; ++i) acc += gc[i];
              bn->grad[c] += acc;
            }
          }
        }
      });
}

// ------------------------------------------------------ conv_transpose2d

template <class T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                const BasicTensor<T>& b, int stride) {
  require_rank4(x.shape(), "conv_transpose2d", "input");
  require_rank4(w.shape(), "conv_transpose2d", "kernel");
  require(stride >= 1, "conv_transpose2d: stride must be positive, got " + std::to_string(stride));
  require(x.dim(1) == w.dim(0), "conv_transpose2d: input " + shape_str(x.shape()) +
                                    " does not match kernel " + shape_str(w.shape()));
  const std::size_t B = x.dim(0), cin = x.dim(1), cout = w.dim(1), H = x.dim(2), Wd = x.dim(3);
  const std::size_t s = static_cast<std::size_t>(stride);
  // Geometry of the forward convolution this op is the adjoint of: it maps
  // the [cout, OH, OW] output grid down to the [cin, H, W] input grid.
  ConvGeom g{cout, (H - 1) * s + w.dim(2), (Wd - 1) * s + w.dim(3), w.dim(2), w.dim(3), s, 0, H, Wd};
  if (b.defined()) {
    require(b.numel() == cout, "conv_transpose2d: bias " + shape_str(b.shape()) +
                                   " does not match " + std::to_string(cout) + " output channels");
  }
  const std::size_t K = g.rows(), P = g.cols(), out_sz = cout * g.h * g.w;
  std::vector<T> out(B * out_sz, T(0));
  std::vector<T> col(K * P);
  CMapM<T> Wm(w.data().data(), cin, K);
  for (std::size_t n = 0; n < B; ++n) {
    MapM<T>(col.data(), K, P).noalias() = Wm.transpose() * CMapM<T>(x.data().data() + n * cin * P, cin, P);
    T* on = out.data() + n * out_sz;
    col2im(col.data(), g, on);
    if (b.defined()) {
      for (std::size_t c = 0; c < cout; ++c) {
        T* oc = on + c * g.h * g.w;
        for (std::size_t i = 0; i < g.h * g.w; ++i) oc[i] += b.data()[c];
      }
    }
  }

  std::vector<NodePtr<T>> parents{x.node_ptr(), w.node_ptr()};
  if (b.defined()) parents.push_back(b.node_ptr());
  return detail::make_result<T>(
      {B, cout, g.h, g.w}, std::move(out), "conv_transpose2d", std::move(parents),
      [g, B, cin, cout](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        Node<T>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        const std::size_t K = g.rows(), P = g.cols(), out_sz = cout * g.h * g.w;
        std::vector<T> gcol(K * P);
        CMapM<T> Wm(wn.value.data(), cin, K);
        if (wn.requires_grad) wn.ensure_grad();
        if (xn.requires_grad) xn.ensure_grad();
        for (std::size_t n = 0; n < B; ++n) {
          const T* gn = self.grad.data() + n * out_sz;
          im2col(gn, g, gcol.data());
          CMapM<T> GC(gcol.data(), K, P);
          if (xn.requires_grad) {
            MapM<T>(xn.grad.data() + n * cin * P, cin, P).noalias() += Wm * GC;
          }
          if (wn.requires_grad) {
            MapM<T>(wn.grad.data(), cin, K).noalias() +=
                CMapM<T>(xn.value.data() + n * cin * P, cin, P) * GC.transpose();
          }
          if (bn && bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t c = 0; c < cout; ++c) {
              T acc = 0;
              const T* gc = gn + c * g.h * g.w;
              for (std::size_t i = 0; i < g.h * g.w; ++i) acc += gc[i];
              bn->grad[c] += acc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------- pool2d

template <class T>
BasicTensor<T> pool2d(PoolKind kind, const BasicTensor<T>& x, int k, int stride) {
  require_rank4(x.shape(), "pool2d", "input");
  require(k >= 1 && stride >= 1, "pool2d: window and stride must be >= 1");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t kk = static_cast<std::size_t>(k), s = static_cast<std::size_t>(stride);
  require(kk <= H && kk <= W, "pool2d: window " + std::to_string(k) + " larger than input " +
                                  shape_str(x.shape()));
  const std::size_t OH = (H - kk) / s + 1, OW = (W - kk) / s + 1;
  std::vector<T> out(B * C * OH * OW);
  std::vector<std::size_t> argmax;
  if (kind == PoolKind::max) argmax.resize(out.size());
  const T* xv = x.data().data();
  const T inv = T(1) / static_cast<T>(kk * kk);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* plane = xv + bc * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        const std::size_t o = (bc * OH + oy) * OW + ox;
        if (kind == PoolKind::max) {
          std::size_t best = (oy * s) * W + ox * s;
          for (std::size_t i = 0; i < kk; ++i)
            for (std::size_t j = 0; j < kk; ++j) {
              const std::size_t idx = (oy * s + i) * W + ox * s + j;
              if (plane[idx] > plane[best]) best = idx;
            }
          out[o] = plane[best];
          argmax[o] = bc * H * W + best;
        } else {
          T acc = 0;
          for (std::size_t i = 0; i < kk; ++i)
            for (std::size_t j = 0; j < kk; ++j) acc += plane[(oy * s + i) * W + ox * s + j];
          out[o] = acc * inv;
        }
      }
    }
  }
  return detail::make_result<T>(
      {B, C, OH, OW}, std::move(out), kind == PoolKind::max ? "max_pool2d" : "avg_pool2d",
      {x.node_ptr()},
      [kind, argmax = std::move(argmax), B, C, H, W, OH, OW, kk, s, inv](Node<T>& self) {
        auto& xn = *self.parents[0];
        xn.ensure_grad();
        if (kind == PoolKind::max) {
          for (std::size_t o = 0; o < self.grad.size(); ++o) xn.grad[argmax[o]] += self.grad[o];
          return;
        }
        for (std::size_t bc = 0; bc < B * C; ++bc) {
          T* plane = xn.grad.data() + bc * H * W;
          for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
              const T gval = self.grad[(bc * OH + oy) * OW + ox] * inv;
              for (std::size_t i = 0; i < kk; ++i)
                for (std::size_t j = 0; j < kk; ++j) plane[(oy * s + i) * W + ox * s + j] += gval;
            }
        }
      });
}

// ------------------------------------------------------------- pointwise

template <class T>
BasicTensor<T> pointwise(Pointwise kind, const BasicTensor<T>& x) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  if (kind == Pointwise::relu) {
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  } else {
    for (std::size_t i = 0; i < xv.size(); ++i) {
      // Branch on sign so exp never overflows.
      const T v = xv[i];
      if (v >= T(0)) {
        out[i] = T(1) / (T(1) + std::exp(-v));
      } else {
        const T e = std::exp(v);
        out[i] = e / (T(1) + e);
      }
      // Keep the result strictly inside (0,1) in finite precision.
      out[i] = std::clamp(out[i], std::numeric_limits<T>::min(),
                          T(1) - std::numeric_limits<T>::epsilon() / T(2));
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out),
                                kind == Pointwise::relu ? "relu" : "sigmoid", {x.node_ptr()},
                                [kind](Node<T>& self) {
                                  auto& xn = *self.parents[0];
                                  xn.ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (kind == Pointwise::relu) {
                                      if (xn.value[i] > T(0)) xn.grad[i] += self.grad[i];
                                    } else {
                                      const T y = self.value[i];
                                      xn.grad[i] += self.grad[i] * y * (T(1) - y);
                                    }
                                  }
                                });
}

template <class T>
BasicTensor<T> affine(const BasicTensor<T>& x, T scale, T shift) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = scale * xv[i] + shift;
  return detail::make_result<T>(x.shape(), std::move(out), "affine", {x.node_ptr()},
                                [scale](Node<T>& self) {
                                  auto& xn = *self.parents[0];
                                  xn.ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    xn.grad[i] += scale * self.grad[i];
                                });
}

// ---------------------------------------------------------------- binary

template <class T>
BasicTensor<T> binary(Binary kind, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const char* name = kind == Binary::add ? "add" : "mul";
  // Which operand (if any) is broadcast over channels.
  int bcast = 0;
  if (a.shape() != b.shape()) {
    const bool ok4 = a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) &&
                     a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3);
    require(ok4 && (a.dim(1) == 1 || b.dim(1) == 1),
            std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
    bcast = b.dim(1) == 1 ? 2 : 1;
  }
  const BasicTensor<T>& full = bcast == 1 ? b : a;
  const Shape out_shape = full.shape();
  const std::size_t n = full.numel();
  std::size_t C = 1, HW = 1;
  if (bcast) {
    C = full.dim(1);
    HW = full.dim(2) * full.dim(3);
  }
  const T* av = a.data().data();
  const T* bv = b.data().data();
  std::vector<T> out(n);
  // Index of the broadcast operand's element for output element i.
  auto small_index = [C, HW](std::size_t i) { return (i / (C * HW)) * HW + i % HW; };
  for (std::size_t i = 0; i < n; ++i) {
    const T x = bcast == 1 ? av[small_index(i)] : av[i];
    const T y = bcast == 2 ? bv[small_index(i)] : bv[i];
    out[i] = kind == Binary::add ? x + y : x * y;
  }
  return detail::make_result<T>(
      out_shape, std::move(out), name, {a.node_ptr(), b.node_ptr()},
      [kind, bcast, small_index](Node<T>& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        const std::size_t n = self.grad.size();
        if (an.requires_grad) an.ensure_grad();
        if (bn.requires_grad) bn.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ia = bcast == 1 ? small_index(i) : i;
          const std::size_t ib = bcast == 2 ? small_index(i) : i;
          const T g = self.grad[i];
          if (kind == Binary::add) {
            if (an.requires_grad) an.grad[ia] += g;
            if (bn.requires_grad) bn.grad[ib] += g;
          } else {
            if (an.requires_grad) an.grad[ia] += g * bn.value[ib];
            if (bn.requires_grad) bn.grad[ib] += g * an.value[ia];
          }
        }
      });
}

// ---------------------------------------------------------------- concat

template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank4(a.shape(), "concat_channels", "first operand");
  require_rank4(b.shape(), "concat_channels", "second operand");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: mismatched batch/spatial extents " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  const std::size_t B = a.dim(0), ca = a.dim(1), cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  std::vector<T> out(B * (ca + cb) * HW);
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(a.data().data() + n * ca * HW, ca * HW, out.data() + n * (ca + cb) * HW);
    std::copy_n(b.data().data() + n * cb * HW, cb * HW, out.data() + (n * (ca + cb) + ca) * HW);
  }
  return detail::make_result<T>({B, ca + cb, a.dim(2), a.dim(3)}, std::move(out), "concat",
                                {a.node_ptr(), b.node_ptr()}, [B, ca, cb, HW](Node<T>& self) {
                                  auto& an = *self.parents[0];
                                  auto& bn = *self.parents[1];
                                  for (std::size_t n = 0; n < B; ++n) {
                                    const T* g = self.grad.data() + n * (ca + cb) * HW;
                                    if (an.requires_grad) {
                                      an.ensure_grad();
                                      T* d = an.grad.data() + n * ca * HW;
                                      for (std::size_t i = 0; i < ca * HW; ++i) d[i] += g[i];
                                    }
                                    if (bn.requires_grad) {
                                      bn.ensure_grad();
                                      T* d = bn.grad.data() + n * cb * HW;
                                      for (std::size_t i = 0; i < cb * HW; ++i) d[i] += g[ca * HW + i];
                                    }
                                  }
                                });
}

template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank4(x.shape(), "slice_channels", "input");
  require(begin <= end && end <= x.dim(1), "slice_channels: range [" + std::to_string(begin) + "," +
                                               std::to_string(end) + ") outside " +
                                               shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3), k = end - begin;
  std::vector<T> out(B * k * HW);
  for (std::size_t n = 0; n < B; ++n)
    std::copy_n(x.data().data() + (n * C + begin) * HW, k * HW, out.data() + n * k * HW);
  return detail::make_result<T>({B, k, x.dim(2), x.dim(3)}, std::move(out), "slice_channels",
                                {x.node_ptr()}, [B, C, HW, k, begin](Node<T>& self) {
                                  auto& xn = *self.parents[0];
                                  xn.ensure_grad();
                                  for (std::size_t n = 0; n < B; ++n) {
                                    T* d = xn.grad.data() + (n * C + begin) * HW;
                                    const T* g = self.grad.data() + n * k * HW;
                                    for (std::size_t i = 0; i < k * HW; ++i) d[i] += g[i];
                                  }
                                });
}

// ------------------------------------------------------------ norm_layer

template <class T>
BasicTensor<T> norm_layer(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, NormStatsBuffer<T>* running, NormMode mode,
                          bool update_running) {
  require_rank4(x.shape(), "norm_layer", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3), N = B * HW;
  require(gamma.numel() == C && beta.numel() == C,
          "norm_layer: gamma/beta must have " + std::to_string(C) + " entries");
  if (mode == NormMode::running_stats) {
    require(running && running->mean.size() == C && running->var.size() == C,
            "norm_layer: running statistics missing or wrong size");
  }
  const T eps = static_cast<T>(kNormEps);
  const T* xv = x.data().data();
  std::vector<T> mean(C), invstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (mode == NormMode::batch_stats) {
      // Two-pass mean/variance.
      double m = 0;
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) m += xv[(n * C + c) * HW + i];
      m /= static_cast<double>(N);
      double v = 0;
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = xv[(n * C + c) * HW + i] - m;
          v += d * d;
        }
      const double biased = v / static_cast<double>(N);
      mean[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(biased + kNormEps));
      if (running && update_running && grad_enabled() && running->mean.size() == C) {
        const double unbiased = N > 1 ? v / static_cast<double>(N - 1) : biased;
        const T mom = static_cast<T>(kNormMomentum);
        running->mean[c] = (T(1) - mom) * running->mean[c] + mom * static_cast<T>(m);
        running->var[c] = (T(1) - mom) * running->var[c] + mom * static_cast<T>(unbiased);
      }
    } else {
      mean[c] = running->mean[c];
      invstd[c] = T(1) / std::sqrt(running->var[c] + eps);
    }
  }
  std::vector<T> xhat(x.numel()), out(x.numel());
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        xhat[base + i] = (xv[base + i] - mean[c]) * invstd[c];
        out[base + i] = gamma.data()[c] * xhat[base + i] + beta.data()[c];
      }
    }
  const bool batch = mode == NormMode::batch_stats;
  return detail::make_result<T>(
      x.shape(), std::move(out), "norm_layer", {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
      [xhat = std::move(xhat), invstd = std::move(invstd), B, C, HW, N, batch](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& gn = *self.parents[1];
        auto& bn = *self.parents[2];
        if (xn.requires_grad) xn.ensure_grad();
        if (gn.requires_grad) gn.ensure_grad();
        if (bn.requires_grad) bn.ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t n = 0; n < B; ++n)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (n * C + c) * HW + i;
              sum_dy += self.grad[idx];
              sum_dy_xhat += self.grad[idx] * xhat[idx];
            }
          if (gn.requires_grad) gn.grad[c] += sum_dy_xhat;
          if (bn.requires_grad) bn.grad[c] += sum_dy;
          if (!xn.requires_grad) continue;
          const T g = gn.value[c];
          const T inv_n = T(1) / static_cast<T>(N);
          for (std::size_t n = 0; n < B; ++n)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (n * C + c) * HW + i;
              if (batch) {
                xn.grad[idx] += g * invstd[c] * inv_n *
                                (static_cast<T>(N) * self.grad[idx] - sum_dy - xhat[idx] * sum_dy_xhat);
              } else {
                xn.grad[idx] += g * invstd[c] * self.grad[idx];
              }
            }
        }
      });
}

// ------------------------------------------------------- bce_with_logits

template <class T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& target) {
  require(logits.shape() == target.shape(), "bce_with_logits: logits " + shape_str(logits.shape()) +
                                                " vs target " + shape_str(target.shape()));
  const auto z = logits.data();
  const auto y = target.data();
  double acc = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    require(y[i] >= T(0) && y[i] <= T(1),
            "bce_with_logits: target value " + std::to_string(y[i]) + " outside [0,1]");
    const double zi = z[i];
    acc += std::max(zi, 0.0) - zi * y[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  const std::size_t n = z.size();
  return detail::make_result<T>({}, {static_cast<T>(acc / static_cast<double>(n))}, "bce_with_logits",
                                {logits.node_ptr(), target.node_ptr()}, [n](Node<T>& self) {
                                  auto& zn = *self.parents[0];
                                  auto& yn = *self.parents[1];
                                  const T scale = self.grad[0] / static_cast<T>(n);
                                  if (zn.requires_grad) {
                                    zn.ensure_grad();
                                    for (std::size_t i = 0; i < n; ++i) {
                                      const T v = zn.value[i];
                                      const T p = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                                                            : std::exp(v) / (T(1) + std::exp(v));
                                      zn.grad[i] += scale * (p - yn.value[i]);
                                    }
                                  }
                                  if (yn.requires_grad) {
                                    yn.ensure_grad();
                                    for (std::size_t i = 0; i < n; ++i) yn.grad[i] -= scale * zn.value[i];
                                  }
                                });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  return detail::make_result<T>({}, {static_cast<T>(acc)}, "sum", {x.node_ptr()}, [](Node<T>& self) {
    auto& xn = *self.parents[0];
    xn.ensure_grad();
    for (auto& g : xn.grad) g += self.grad[0];
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return affine(sum(x), T(1) / static_cast<T>(x.numel()), T(0));
}

#define SMAGNET_INSTANTIATE_OPS(T)                                                                  \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                                 const BasicTensor<T>&, int, int);                                 \
  template BasicTensor<T> conv_transpose2d(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                           const BasicTensor<T>&, int);                            \
  template BasicTensor<T> pool2d(PoolKind, const BasicTensor<T>&, int, int);                       \
  template BasicTensor<T> pointwise(Pointwise, const BasicTensor<T>&);                             \
  template BasicTensor<T> affine(const BasicTensor<T>&, T, T);                                     \
  template BasicTensor<T> binary(Binary, const BasicTensor<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> slice_channels(const BasicTensor<T>&, std::size_t, std::size_t);         \
  template BasicTensor<T> norm_layer(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                     const BasicTensor<T>&, NormStatsBuffer<T>*, NormMode, bool);  \
  template BasicTensor<T> bce_with_logits(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                              \
  template BasicTensor<T> mean(const BasicTensor<T>&);

SMAGNET_INSTANTIATE_OPS(float)
SMAGNET_INSTANTIATE_OPS(double)

#undef SMAGNET_INSTANTIATE_OPS

}  // namespace smagnet::ops
