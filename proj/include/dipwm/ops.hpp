#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "dipwm/tape.hpp"

namespace dipwm::ops {

template <typename Scalar>
using Var = typename Tape<Scalar>::Var;

/// Output extent of a strided window sweep.
constexpr int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

namespace detail {

/// Output columns [lo, hi) whose input column ox * stride - pad + kx lies
/// inside [0, w).
inline std::pair<int, int> valid_columns(int w, int kx, int stride, int pad, int ow) {
  const int first = pad - kx;  // smallest ox * stride that is in range
  const int lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  const int end = w + pad - kx;
  const int hi = end <= 0 ? 0 : std::min(ow, (end + stride - 1) / stride);
  return {std::min(lo, hi), hi};
}

template <typename Scalar>
void im2col(const Scalar* img, int channels, int h, int w, int k, int stride, int pad, int oh,
            int ow, Scalar* cols) {
  const Eigen::Index ohw = Eigen::Index(oh) * ow;
  for (int c = 0; c < channels; ++c) {
    const Scalar* src = img + Eigen::Index(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Scalar* dst = cols + ((Eigen::Index(c) * k + ky) * k + kx) * ohw;
        const auto [lo, hi] = valid_columns(w, kx, stride, pad, ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          Scalar* row = dst + Eigen::Index(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + ow, Scalar(0));
            continue;
          }
          std::fill(row, row + lo, Scalar(0));
          std::fill(row + hi, row + ow, Scalar(0));
          const Scalar* line = src + Eigen::Index(iy) * w - pad + kx;
          if (stride == 1) {
            std::copy(line + lo, line + hi, row + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) row[ox] = line[ox * stride];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* cols, int channels, int h, int w, int k, int stride, int pad, int oh,
            int ow, Scalar* img) {
  const Eigen::Index ohw = Eigen::Index(oh) * ow;
  for (int c = 0; c < channels; ++c) {
    Scalar* dst = img + Eigen::Index(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Scalar* src = cols + ((Eigen::Index(c) * k + ky) * k + kx) * ohw;
        const auto [lo, hi] = valid_columns(w, kx, stride, pad, ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const Scalar* row = src + Eigen::Index(oy) * ow;
          Scalar* line = dst + Eigen::Index(iy) * w - pad + kx;
          if (stride == 1) {
            for (int ox = lo; ox < hi; ++ox) line[ox] += row[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) line[ox * stride] += row[ox];
          }
        }
      }
    }
  }
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace detail

/// 2-d cross-correlation. `w` is [Cout, Cin, k, k], `b` is [Cout,1,1,1].
template <typename Scalar>
Var<Scalar> conv2d(Tape<Scalar>& tape, Var<Scalar> x, Var<Scalar> w, Var<Scalar> b, int stride,
                   int pad) {
  const Shape xs = tape.shape(x);
  const Shape ws = tape.shape(w);
  detail::require(ws.c == xs.c && ws.h == ws.w,
                  "conv2d: weight " + to_string(ws) + " incompatible with input " + to_string(xs));
  const int k = ws.h;
  const int oh = conv_out(xs.h, k, stride, pad);
  const int ow = conv_out(xs.w, k, stride, pad);
  const bool pointwise = k == 1 && stride == 1 && pad == 0;
  const Eigen::Index rows = Eigen::Index(xs.c) * k * k;

  Tensor<Scalar> out(Shape{xs.n, ws.n, oh, ow});
  ConstMatrixMap<Scalar> wm(tape.value(w).data.data(), ws.n, rows);
  const auto& bias = tape.value(b).data;
  RowMatrix<Scalar> cols;
  if (!pointwise) cols.resize(rows, Eigen::Index(oh) * ow);
  for (int n = 0; n < xs.n; ++n) {
    auto o = out.matrix(n);
    if (pointwise) {
      o.noalias() = wm * tape.value(x).matrix(n);
    } else {
      detail::im2col(tape.value(x).item(n), xs.c, xs.h, xs.w, k, stride, pad, oh, ow, cols.data());
      o.noalias() = wm * cols;
    }
    o.colwise() += bias.matrix();
  }

  return tape.record(std::move(out), tape.any_needs_grad(x, w, b),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    ConstMatrixMap<Scalar> wm(t.value(w).data.data(), ws.n, rows);
    RowMatrix<Scalar> gw = RowMatrix<Scalar>::Zero(ws.n, rows);
    RowMatrix<Scalar> cols;
    RowMatrix<Scalar> gcols;
    if (!pointwise) cols.resize(rows, Eigen::Index(oh) * ow);
    const bool need_x = t.needs_grad(x);
    const bool need_w = t.needs_grad(w);
    for (int n = 0; n < xs.n; ++n) {
      auto go = g.matrix(n);
      if (need_w) {
        if (pointwise) {
          gw.noalias() += go * t.value(x).matrix(n).transpose();
        } else {
          detail::im2col(t.value(x).item(n), xs.c, xs.h, xs.w, k, stride, pad, oh, ow, cols.data());
          gw.noalias() += go * cols.transpose();
        }
      }
      if (need_x) {
        if (pointwise) {
          t.grad_ref(x).matrix(n).noalias() += wm.transpose() * go;
        } else {
          gcols.noalias() = wm.transpose() * go;
          detail::col2im(gcols.data(), xs.c, xs.h, xs.w, k, stride, pad, oh, ow,
                         t.grad_ref(x).item(n));
        }
      }
      if (t.needs_grad(b)) t.grad_ref(b).data += go.rowwise().sum().array();
    }
    if (need_w) t.grad_ref(w).data += Eigen::Map<const typename Tensor<Scalar>::Array>(gw.data(), gw.size());
  });
}

/// Transposed convolution. `w` is [Cin, Cout, k, k]; output side is
/// (in - 1) * stride - 2 * pad + k.
template <typename Scalar>
Var<Scalar> conv_transpose2d(Tape<Scalar>& tape, Var<Scalar> x, Var<Scalar> w, Var<Scalar> b,
                             int stride, int pad) {
  const Shape xs = tape.shape(x);
  const Shape ws = tape.shape(w);
  detail::require(ws.n == xs.c && ws.h == ws.w,
                  "conv_transpose2d: weight " + to_string(ws) + " incompatible with input " +
                      to_string(xs));
  const int k = ws.h;
  const int cout = ws.c;
  const int oh = (xs.h - 1) * stride - 2 * pad + k;
  const int ow = (xs.w - 1) * stride - 2 * pad + k;
  const Eigen::Index rows = Eigen::Index(cout) * k * k;

  Tensor<Scalar> out(Shape{xs.n, cout, oh, ow});
  ConstMatrixMap<Scalar> wm(tape.value(w).data.data(), xs.c, rows);
  const auto& bias = tape.value(b).data;
  RowMatrix<Scalar> cols;
  for (int n = 0; n < xs.n; ++n) {
    cols.noalias() = wm.transpose() * tape.value(x).matrix(n);
    detail::col2im(cols.data(), cout, oh, ow, k, stride, pad, xs.h, xs.w, out.item(n));
    out.matrix(n).colwise() += bias.matrix();
  }

  return tape.record(std::move(out), tape.any_needs_grad(x, w, b),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    ConstMatrixMap<Scalar> wm(t.value(w).data.data(), xs.c, rows);
    RowMatrix<Scalar> gw = RowMatrix<Scalar>::Zero(xs.c, rows);
    RowMatrix<Scalar> gcols(rows, Eigen::Index(xs.h) * xs.w);
    for (int n = 0; n < xs.n; ++n) {
      detail::im2col(g.item(n), cout, oh, ow, k, stride, pad, xs.h, xs.w, gcols.data());
      if (t.needs_grad(x)) t.grad_ref(x).matrix(n).noalias() += wm * gcols;
      if (t.needs_grad(w)) gw.noalias() += t.value(x).matrix(n) * gcols.transpose();
      if (t.needs_grad(b)) t.grad_ref(b).data += g.matrix(n).rowwise().sum().array();
    }
    if (t.needs_grad(w)) {
      t.grad_ref(w).data += Eigen::Map<const typename Tensor<Scalar>::Array>(gw.data(), gw.size());
    }
  });
}

/// Per-channel convolution. `w` is [C, 1, k, k].
template <typename Scalar>
Var<Scalar> depthwise_conv2d(Tape<Scalar>& tape, Var<Scalar> x, Var<Scalar> w, Var<Scalar> b,
                             int stride, int pad) {
  const Shape xs = tape.shape(x);
  const Shape ws = tape.shape(w);
  detail::require(ws.n == xs.c && ws.c == 1 && ws.h == ws.w, "depthwise_conv2d: bad weight shape");
  const int k = ws.h;
  const int oh = conv_out(xs.h, k, stride, pad);
  const int ow = conv_out(xs.w, k, stride, pad);
  Tensor<Scalar> out(Shape{xs.n, xs.c, oh, ow});
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(w);
  const auto& bv = tape.value(b);
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          Scalar acc = bv.data[c];
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= xs.h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= xs.w) continue;
              acc += wv(c, 0, ky, kx) * xv(n, c, iy, ix);
            }
          }
          out(n, c, oy, ox) = acc;
        }
      }
    }
  }
  return tape.record(std::move(out), tape.any_needs_grad(x, w, b),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    Tensor<Scalar> gx(xs);
    Tensor<Scalar> gw(ws);
    Tensor<Scalar> gb(t.shape(b));
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const Scalar go = g(n, c, oy, ox);
            gb.data[c] += go;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= xs.h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= xs.w) continue;
                gw(c, 0, ky, kx) += go * xv(n, c, iy, ix);
                gx(n, c, iy, ix) += go * wv(c, 0, ky, kx);
              }
            }
          }
        }
      }
    }
    if (t.needs_grad(x)) t.grad_ref(x).data += gx.data;
    if (t.needs_grad(w)) t.grad_ref(w).data += gw.data;
    if (t.needs_grad(b)) t.grad_ref(b).data += gb.data;
  });
}

/// Fully-connected layer over flattened items. `w` is [Out, In, 1, 1].
template <typename Scalar>
Var<Scalar> linear(Tape<Scalar>& tape, Var<Scalar> x, Var<Scalar> w, Var<Scalar> b) {
  const Shape xs = tape.shape(x);
  const Shape ws = tape.shape(w);
  const Eigen::Index in = xs.per_item();
  detail::require(ws.c == in, "linear: weight " + to_string(ws) + " incompatible with input " +
                                  to_string(xs));
  Tensor<Scalar> out(Shape{xs.n, ws.n, 1, 1});
  ConstMatrixMap<Scalar> xm(tape.value(x).data.data(), xs.n, in);
  ConstMatrixMap<Scalar> wm(tape.value(w).data.data(), ws.n, in);
  MatrixMap<Scalar> om(out.data.data(), xs.n, ws.n);
  om.noalias() = xm * wm.transpose();
  om.rowwise() += tape.value(b).data.matrix().transpose();
  return tape.record(std::move(out), tape.any_needs_grad(x, w, b),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    ConstMatrixMap<Scalar> gm(g.data.data(), xs.n, ws.n);
    ConstMatrixMap<Scalar> xm(t.value(x).data.data(), xs.n, in);
    ConstMatrixMap<Scalar> wm(t.value(w).data.data(), ws.n, in);
    if (t.needs_grad(x)) MatrixMap<Scalar>(t.grad_ref(x).data.data(), xs.n, in).noalias() += gm * wm;
    if (t.needs_grad(w)) {
      MatrixMap<Scalar>(t.grad_ref(w).data.data(), ws.n, in).noalias() += gm.transpose() * xm;
    }
    if (t.needs_grad(b)) t.grad_ref(b).data += gm.colwise().sum().transpose().array();
  });
}

template <typename Scalar>
Var<Scalar> relu(Tape<Scalar>& tape, Var<Scalar> x) {
  Tensor<Scalar> out = tape.value(x);
  out.data = out.data.max(Scalar(0));
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_ref(x).data += (t.value(x).data > Scalar(0)).select(g.data, Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Tape<Scalar>& tape, Var<Scalar> x) {
  Tensor<Scalar> out = tape.value(x);
  out.data = Scalar(1) / (Scalar(1) + (-out.data).exp());
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto y = Scalar(1) / (Scalar(1) + (-t.value(x).data).exp());
    t.grad_ref(x).data += g.data * y * (Scalar(1) - y);
  });
}

template <typename Scalar>
Var<Scalar> tanh(Tape<Scalar>& tape, Var<Scalar> x) {
  Tensor<Scalar> out = tape.value(x);
  out.data = out.data.tanh();
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto y = t.value(x).data.tanh();
    t.grad_ref(x).data += g.data * (Scalar(1) - y.square());
  });
}

template <typename Scalar>
Var<Scalar> scale(Tape<Scalar>& tape, Var<Scalar> x, Scalar s) {
  Tensor<Scalar> out = tape.value(x);
  out.data *= s;
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) { t.grad_ref(x).data += s * g.data; });
}

template <typename Scalar>
Var<Scalar> add(Tape<Scalar>& tape, Var<Scalar> a, Var<Scalar> b) {
  detail::require(tape.shape(a) == tape.shape(b), "add: shape mismatch " + to_string(tape.shape(a)) +
                                                      " vs " + to_string(tape.shape(b)));
  Tensor<Scalar> out = tape.value(a);
  out.data += tape.value(b).data;
  return tape.record(std::move(out), tape.any_needs_grad(a, b),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.needs_grad(a)) t.grad_ref(a).data += g.data;
    if (t.needs_grad(b)) t.grad_ref(b).data += g.data;
  });
}

/// Element-wise product of equal shapes.
template <typename Scalar>
Var<Scalar> mul(Tape<Scalar>& tape, Var<Scalar> a, Var<Scalar> b) {
  detail::require(tape.shape(a) == tape.shape(b), "mul: shape mismatch");
  Tensor<Scalar> out = tape.value(a);
  out.data *= tape.value(b).data;
  return tape.record(std::move(out), tape.any_needs_grad(a, b),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.needs_grad(a)) t.grad_ref(a).data += g.data * t.value(b).data;
    if (t.needs_grad(b)) t.grad_ref(b).data += g.data * t.value(a).data;
  });
}

/// Clamp to [lo, hi]; gradient passes only where the input was inside.
template <typename Scalar>
Var<Scalar> clamp(Tape<Scalar>& tape, Var<Scalar> x, Scalar lo, Scalar hi) {
  Tensor<Scalar> out = tape.value(x);
  out.data = out.data.max(lo).min(hi);
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& v = t.value(x).data;
    t.grad_ref(x).data += (v >= lo && v <= hi).select(g.data, Scalar(0));
  });
}

/// x[n,c,:,:] * gate[n,c]
template <typename Scalar>
Var<Scalar> mul_channel(Tape<Scalar>& tape, Var<Scalar> x, Var<Scalar> gate) {
  const Shape xs = tape.shape(x);
  detail::require(tape.shape(gate) == (Shape{xs.n, xs.c, 1, 1}), "mul_channel: gate shape");
  Tensor<Scalar> out = tape.value(x);
  const auto& gv = tape.value(gate).data;
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      out.matrix(n).row(c) *= gv[n * xs.c + c];
    }
  }
  return tape.record(std::move(out), tape.any_needs_grad(x, gate),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& gv = t.value(gate).data;
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        const auto gr = g.matrix(n).row(c);
        if (t.needs_grad(x)) t.grad_ref(x).matrix(n).row(c) += gv[n * xs.c + c] * gr;
        if (t.needs_grad(gate)) {
          t.grad_ref(gate).data[n * xs.c + c] += gr.dot(t.value(x).matrix(n).row(c));
        }
      }
    }
  });
}

/// x[n,c,y,x] * gate[n,0,y,x]
template <typename Scalar>
Var<Scalar> mul_spatial(Tape<Scalar>& tape, Var<Scalar> x, Var<Scalar> gate) {
  const Shape xs = tape.shape(x);
  detail::require(tape.shape(gate) == (Shape{xs.n, 1, xs.h, xs.w}), "mul_spatial: gate shape");
  Tensor<Scalar> out = tape.value(x);
  for (int n = 0; n < xs.n; ++n) {
    out.matrix(n).array().rowwise() *= tape.value(gate).matrix(n).array().row(0);
  }
  return tape.record(std::move(out), tape.any_needs_grad(x, gate),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    for (int n = 0; n < xs.n; ++n) {
      if (t.needs_grad(x)) {
        auto gx = g.matrix(n).array().rowwise() * t.value(gate).matrix(n).array().row(0);
        t.grad_ref(x).matrix(n).array() += gx;
      }
      if (t.needs_grad(gate)) {
        t.grad_ref(gate).matrix(n).array().row(0) +=
            (g.matrix(n).array() * t.value(x).matrix(n).array()).colwise().sum();
      }
    }
  });
}

/// Mean over H, W -> [N, C, 1, 1].
template <typename Scalar>
Var<Scalar> global_avg_pool(Tape<Scalar>& tape, Var<Scalar> x) {
  const Shape xs = tape.shape(x);
  Tensor<Scalar> out(Shape{xs.n, xs.c, 1, 1});
  for (int n = 0; n < xs.n; ++n) {
    out.data.segment(Eigen::Index(n) * xs.c, xs.c) = tape.value(x).matrix(n).rowwise().mean().array();
  }
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const Scalar inv = Scalar(1) / Scalar(xs.plane());
    for (int n = 0; n < xs.n; ++n) {
      auto gx = t.grad_ref(x).matrix(n);
      for (int c = 0; c < xs.c; ++c) gx.row(c).array() += inv * g.data[n * xs.c + c];
    }
  });
}

/// Max over H, W -> [N, C, 1, 1]; gradient routed to the first arg-max.
template <typename Scalar>
Var<Scalar> global_max_pool(Tape<Scalar>& tape, Var<Scalar> x) {
  const Shape xs = tape.shape(x);
  Tensor<Scalar> out(Shape{xs.n, xs.c, 1, 1});
  std::vector<Eigen::Index> arg(std::size_t(xs.n) * xs.c);
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      Eigen::Index j = 0;
      out.data[n * xs.c + c] = tape.value(x).matrix(n).row(c).maxCoeff(&j);
      arg[std::size_t(n) * xs.c + c] = j;
    }
  }
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        t.grad_ref(x).matrix(n)(c, arg[std::size_t(n) * xs.c + c]) += g.data[n * xs.c + c];
      }
    }
  });
}

/// Mean over channels -> [N, 1, H, W].
template <typename Scalar>
Var<Scalar> channel_mean(Tape<Scalar>& tape, Var<Scalar> x) {
  const Shape xs = tape.shape(x);
  Tensor<Scalar> out(Shape{xs.n, 1, xs.h, xs.w});
  for (int n = 0; n < xs.n; ++n) out.matrix(n) = tape.value(x).matrix(n).colwise().mean();
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const Scalar inv = Scalar(1) / Scalar(xs.c);
    for (int n = 0; n < xs.n; ++n) {
      t.grad_ref(x).matrix(n).rowwise() += inv * g.matrix(n).row(0);
    }
  });
}

/// Max over channels -> [N, 1, H, W]; gradient routed to the first arg-max.
template <typename Scalar>
Var<Scalar> channel_max(Tape<Scalar>& tape, Var<Scalar> x) {
  const Shape xs = tape.shape(x);
  Tensor<Scalar> out(Shape{xs.n, 1, xs.h, xs.w});
  std::vector<int> arg(std::size_t(xs.n) * xs.plane());
  for (int n = 0; n < xs.n; ++n) {
    auto m = tape.value(x).matrix(n);
    for (Eigen::Index p = 0; p < xs.plane(); ++p) {
      Eigen::Index j = 0;
      out.data[n * xs.plane() + p] = m.col(p).maxCoeff(&j);
      arg[std::size_t(n * xs.plane() + p)] = int(j);
    }
  }
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    for (int n = 0; n < xs.n; ++n) {
      auto gx = t.grad_ref(x).matrix(n);
      for (Eigen::Index p = 0; p < xs.plane(); ++p) {
        gx(arg[std::size_t(n * xs.plane() + p)], p) += g.data[n * xs.plane() + p];
      }
    }
  });
}

/// Channel concatenation of two maps with equal N, H, W.
template <typename Scalar>
Var<Scalar> concat_channels(Tape<Scalar>& tape, Var<Scalar> a, Var<Scalar> b) {
  const Shape as = tape.shape(a);
  const Shape bs = tape.shape(b);
  detail::require(as.n == bs.n && as.h == bs.h && as.w == bs.w,
                  "concat_channels: " + to_string(as) + " vs " + to_string(bs));
  Tensor<Scalar> out(Shape{as.n, as.c + bs.c, as.h, as.w});
  for (int n = 0; n < as.n; ++n) {
    out.matrix(n).topRows(as.c) = tape.value(a).matrix(n);
    out.matrix(n).bottomRows(bs.c) = tape.value(b).matrix(n);
  }
  return tape.record(std::move(out), tape.any_needs_grad(a, b),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    for (int n = 0; n < as.n; ++n) {
      if (t.needs_grad(a)) t.grad_ref(a).matrix(n) += g.matrix(n).topRows(as.c);
      if (t.needs_grad(b)) t.grad_ref(b).matrix(n) += g.matrix(n).bottomRows(bs.c);
    }
  });
}

template <typename Scalar>
Var<Scalar> reshape(Tape<Scalar>& tape, Var<Scalar> x, Shape s) {
  return tape.record(tape.value(x).reshaped(s), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) { t.grad_ref(x).data += g.data; });
}

/// Row-wise L2 normalisation of [N, F, 1, 1] (or any shape, per item).
template <typename Scalar>
Var<Scalar> l2_normalize(Tape<Scalar>& tape, Var<Scalar> x, Scalar eps = Scalar(1e-12)) {
  const Shape xs = tape.shape(x);
  const Eigen::Index f = xs.per_item();
  Tensor<Scalar> out = tape.value(x);
  for (int n = 0; n < xs.n; ++n) {
    auto row = out.data.segment(n * f, f);
    row /= std::max(std::sqrt(row.square().sum()), eps);
  }
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    for (int n = 0; n < xs.n; ++n) {
      const auto xr = t.value(x).data.segment(n * f, f);
      const Scalar norm = std::max(std::sqrt(xr.square().sum()), eps);
      const auto gr = g.data.segment(n * f, f);
      const Scalar dot = (xr * gr).sum() / norm;
      t.grad_ref(x).data.segment(n * f, f) += (gr - (xr / norm) * dot) / norm;
    }
  });
}

/// Channels [first, first + count).
template <typename Scalar>
Var<Scalar> slice_channels(Tape<Scalar>& tape, Var<Scalar> x, int first, int count) {
  const Shape xs = tape.shape(x);
  detail::require(first >= 0 && count > 0 && first + count <= xs.c, "slice_channels: out of range");
  Tensor<Scalar> out(Shape{xs.n, count, xs.h, xs.w});
  for (int n = 0; n < xs.n; ++n) out.matrix(n) = tape.value(x).matrix(n).middleRows(first, count);
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    for (int n = 0; n < xs.n; ++n) t.grad_ref(x).matrix(n).middleRows(first, count) += g.matrix(n);
  });
}

namespace detail {

/// Mirror index into [0, n) without repeating the edge sample, folding as
/// often as needed.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace detail

/// Extends bottom/right edges by mirroring to the given size.
template <typename Scalar>
Var<Scalar> pad_reflect(Tape<Scalar>& tape, Var<Scalar> x, int h, int w) {
  const Shape xs = tape.shape(x);
  detail::require(h >= xs.h && w >= xs.w, "pad_reflect: target smaller than input");
  if (h == xs.h && w == xs.w) return x;
  Tensor<Scalar> out(Shape{xs.n, xs.c, h, w});
  const auto& v = tape.value(x);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          out(n, c, y, xx) = v(n, c, detail::reflect_index(y, xs.h), detail::reflect_index(xx, xs.w));
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto& gx = t.grad_ref(x);
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            gx(n, c, detail::reflect_index(y, xs.h), detail::reflect_index(xx, xs.w)) += g(n, c, y, xx);
  });
}

/// Top-left [h, w] window.
template <typename Scalar>
Var<Scalar> crop(Tape<Scalar>& tape, Var<Scalar> x, int h, int w) {
  const Shape xs = tape.shape(x);
  detail::require(h <= xs.h && w <= xs.w, "crop: window larger than input");
  if (h == xs.h && w == xs.w) return x;
  Tensor<Scalar> out(Shape{xs.n, xs.c, h, w});
  const auto& v = tape.value(x);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) out(n, c, y, xx) = v(n, c, y, xx);
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto& gx = t.grad_ref(x);
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) gx(n, c, y, xx) += g(n, c, y, xx);
  });
}

}  // namespace dipwm::ops
