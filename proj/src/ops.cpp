#include "shuffle_former/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace shuffle_former {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
  // b > 0; works for negative a.
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

}  // namespace

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape new_shape) {
  if (shape_numel(new_shape) != t.numel()) {
    throw ShapeError("cannot reshape " + shape_str(t.shape()) + " to " + shape_str(new_shape));
  }
  NodePtr<T> src = t.node();
  return detail::make_result<T>(std::move(new_shape), t.values(), {src},
                                [src](const std::vector<T>& g) {
                                  auto& pg = src->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
                                });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& t, IndexMap index, Shape out_shape) {
  if (shape_numel(out_shape) != static_cast<std::int64_t>(index->size())) {
    throw ShapeError("gather index of size " + std::to_string(index->size()) +
                     " does not fill " + shape_str(out_shape));
  }
  const auto& src_data = t.values();
  const auto n_src = static_cast<std::int64_t>(src_data.size());
  std::vector<T> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto k = (*index)[i];
    if (k < 0 || k >= n_src) throw ShapeError("gather index out of range");
    out[i] = src_data[static_cast<std::size_t>(k)];
  }
  NodePtr<T> src = t.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), {src},
                                [src, index](const std::vector<T>& g) {
                                  auto& pg = src->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    pg[static_cast<std::size_t>((*index)[i])] += g[i];
                                  }
                                });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& t, const std::vector<int>& axes) {
  const Shape& in_shape = t.shape();
  const std::size_t rank = in_shape.size();
  if (axes.size() != rank) throw ShapeError("permutation rank mismatch for " + shape_str(in_shape));
  std::vector<bool> used(rank, false);
  for (int a : axes) {
    if (a < 0 || static_cast<std::size_t>(a) >= rank || used[static_cast<std::size_t>(a)]) {
      throw ShapeError("axis order is not a permutation");
    }
    used[static_cast<std::size_t>(a)] = true;
  }
  const Shape in_strides = row_major_strides(in_shape);
  Shape out_shape(rank);
  Shape src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
    src_strides[i] = in_strides[static_cast<std::size_t>(axes[i])];
  }
  auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(t.numel()));
  std::vector<std::int64_t> coord(rank, 0);
  std::int64_t src = 0;
  for (auto& slot : *index) {
    slot = src;
    // Odometer increment over out_shape, tracking the source offset.
    for (std::size_t d = rank; d-- > 0;) {
      if (++coord[d] < out_shape[d]) {
        src += src_strides[d];
        break;
      }
      src -= src_strides[d] * (out_shape[d] - 1);
      coord[d] = 0;
    }
  }
  return gather(t, std::move(index), std::move(out_shape));
}

template <typename T>
Tensor<T> reshape_permute(const Tensor<T>& t, Shape new_shape, const std::vector<int>& axis_order) {
  return permute(reshape(t, std::move(new_shape)), axis_order);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3))) {
    throw ShapeError("matmul expects 2-D x 2-D or 3-D x 3-D, got " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  const std::int64_t batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) {
    throw ShapeError("matmul batch mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(a.rank() - 2);
  const std::int64_t k = a.dim(a.rank() - 1);
  const std::int64_t n = b.dim(b.rank() - 1);
  if (b.dim(b.rank() - 2) != k) {
    throw ShapeError("matmul inner extent mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(static_cast<std::size_t>(batch * m * n), T(0));
  for (std::int64_t s = 0; s < batch; ++s) {
    const T* ap = av.data() + s * m * k;
    const T* bp = bv.data() + s * k * n;
    T* cp = out.data() + s * m * n;
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t p = 0; p < k; ++p) {
        const T aip = ap[i * k + p];
        const T* brow = bp + p * n;
        T* crow = cp + i * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  NodePtr<T> an = a.node();
  NodePtr<T> bn = b.node();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {an, bn},
      [an, bn, batch, m, k, n](const std::vector<T>& g) {
        const auto& av = an->data;
        const auto& bv = bn->data;
        if (an->requires_grad) {
          auto& ga = an->ensure_grad();
          for (std::int64_t s = 0; s < batch; ++s) {
            const T* gp = g.data() + s * m * n;
            const T* bp = bv.data() + s * k * n;
            T* gap = ga.data() + s * m * k;
            for (std::int64_t i = 0; i < m; ++i) {
              for (std::int64_t p = 0; p < k; ++p) {
                T acc = 0;
                for (std::int64_t j = 0; j < n; ++j) acc += gp[i * n + j] * bp[p * n + j];
                gap[i * k + p] += acc;
              }
            }
          }
        }
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          for (std::int64_t s = 0; s < batch; ++s) {
            const T* gp = g.data() + s * m * n;
            const T* ap = av.data() + s * m * k;
            T* gbp = gb.data() + s * k * n;
            for (std::int64_t i = 0; i < m; ++i) {
              for (std::int64_t p = 0; p < k; ++p) {
                const T aip = ap[i * k + p];
                for (std::int64_t j = 0; j < n; ++j) gbp[p * n + j] += aip * gp[i * n + j];
              }
            }
          }
        }
      });
}

template <typename T>
void validate_finite(const Tensor<T>& t, const char* what) {
  const auto& v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string(what) + ": non-finite value at index " + std::to_string(i));
    }
  }
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& t, Validation validation) {
  if (validation == Validation::on) validate_finite(t, "softmax input");
  const std::int64_t cols = t.dim(t.rank() - 1);
  const std::int64_t rows = t.numel() / cols;
  const auto& in = t.values();
  std::vector<T> out(in.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = in.data() + r * cols;
    T* y = out.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T total = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    for (std::int64_t j = 0; j < cols; ++j) y[j] /= total;
  }
  NodePtr<T> src = t.node();
  auto result = detail::make_result<T>(t.shape(), std::move(out), {src}, nullptr);
  if (result.requires_grad()) {
    std::weak_ptr<detail::Node<T>> self = result.node();
    result.node()->backward_fn = [src, self, rows, cols](const std::vector<T>& g) {
      const auto& y = self.lock()->data;
      auto& pg = src->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t o = r * cols;
        T dot = 0;
        for (std::int64_t j = 0; j < cols; ++j) dot += g[o + j] * y[o + j];
        for (std::int64_t j = 0; j < cols; ++j) pg[o + j] += y[o + j] * (g[o + j] - dot);
      }
    };
  }
  return result;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv2dOptions& opt) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d expects 4-D input and weight, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  const std::int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t cout = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::int64_t groups = opt.groups;
  if (groups <= 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cg) {
    throw ConfigError("conv2d groups=" + std::to_string(groups) + " incompatible with input " +
                      shape_str(x.shape()) + " and weight " + shape_str(w.shape()));
  }
  if (opt.stride <= 0) throw ConfigError("conv2d stride must be positive");
  const auto& pad = opt.padding;
  const std::int64_t stride = opt.stride;
  const std::int64_t span_h = h + pad.top + pad.bottom - kh;
  const std::int64_t span_w = wd + pad.left + pad.right - kw;
  if (span_h < 0 || span_w < 0) throw ShapeError("conv2d kernel larger than padded input");
  const std::int64_t oh = span_h / stride + 1;
  const std::int64_t ow = span_w / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                     " output channels");
  }
  const std::int64_t cout_g = cout / groups;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad.top == 0 && pad.left == 0 &&
                         pad.bottom == 0 && pad.right == 0;

  // Calls fn(x_offset, y_offset, count, step) for every contiguous run of
  // output row positions touched by kernel tap (ky, kx) on output row oy.
  struct Geometry {
    std::int64_t h, w, oh, ow, stride, pt, pl;
  };
  const Geometry geo{h, wd, oh, ow, stride, pad.top, pad.left};
  auto for_each_tap = [geo](std::int64_t ky, std::int64_t kx, auto&& fn) {
    const std::int64_t ox_lo = std::max<std::int64_t>(0, ceil_div(geo.pl - kx, geo.stride));
    const std::int64_t ox_hi =
        std::min<std::int64_t>(geo.ow - 1, floor_div(geo.w - 1 + geo.pl - kx, geo.stride));
    if (ox_lo > ox_hi) return;
    for (std::int64_t oy = 0; oy < geo.oh; ++oy) {
      const std::int64_t iy = oy * geo.stride - geo.pt + ky;
      if (iy < 0 || iy >= geo.h) continue;
      const std::int64_t ix0 = ox_lo * geo.stride - geo.pl + kx;
      fn(iy * geo.w + ix0, oy * geo.ow + ox_lo, ox_hi - ox_lo + 1);
    }
  };

  const auto& xv = x.values();
  const auto& wv = w.values();
  const std::int64_t plane_in = h * wd;
  const std::int64_t plane_out = oh * ow;
  std::vector<T> out(static_cast<std::size_t>(batch * cout * plane_out), T(0));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t oc = 0; oc < cout; ++oc) {
      const std::int64_t g = oc / cout_g;
      T* y = out.data() + (b * cout + oc) * plane_out;
      if (has_bias) std::fill(y, y + plane_out, bias.values()[static_cast<std::size_t>(oc)]);
      for (std::int64_t icg = 0; icg < cg; ++icg) {
        const T* xp = xv.data() + (b * cin + g * cg + icg) * plane_in;
        const T* wp = wv.data() + (oc * cg + icg) * kh * kw;
        if (pointwise) {
          const T wval = wp[0];
          for (std::int64_t i = 0; i < plane_out; ++i) y[i] += wval * xp[i];
          continue;
        }
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const T wval = wp[ky * kw + kx];
            for_each_tap(ky, kx, [&](std::int64_t xo, std::int64_t yo, std::int64_t count) {
              const T* xs = xp + xo;
              T* ys = y + yo;
              for (std::int64_t i = 0; i < count; ++i) ys[i] += wval * xs[i * stride];
            });
          }
        }
      }
    }
  }

  NodePtr<T> xn = x.node();
  NodePtr<T> wn = w.node();
  std::vector<NodePtr<T>> parents{xn, wn};
  NodePtr<T> bn = has_bias ? bias.node() : nullptr;
  if (bn) parents.push_back(bn);
  return detail::make_result<T>(
      Shape{batch, cout, oh, ow}, std::move(out), std::move(parents),
      [=](const std::vector<T>& gy) {
        const auto& xv = xn->data;
        const auto& wv = wn->data;
        T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        T* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
        if (bn && bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          for (std::int64_t b = 0; b < batch; ++b) {
            for (std::int64_t oc = 0; oc < cout; ++oc) {
              const T* g = gy.data() + (b * cout + oc) * plane_out;
              T acc = 0;
              for (std::int64_t i = 0; i < plane_out; ++i) acc += g[i];
              gb[static_cast<std::size_t>(oc)] += acc;
            }
          }
        }
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t oc = 0; oc < cout; ++oc) {
            const std::int64_t grp = oc / cout_g;
            const T* g = gy.data() + (b * cout + oc) * plane_out;
            for (std::int64_t icg = 0; icg < cg; ++icg) {
              const std::int64_t xoff = (b * cin + grp * cg + icg) * plane_in;
              const std::int64_t woff = (oc * cg + icg) * kh * kw;
              const T* xp = xv.data() + xoff;
              for (std::int64_t ky = 0; ky < kh; ++ky) {
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                  const T wval = wv[static_cast<std::size_t>(woff + ky * kw + kx)];
                  T wacc = 0;
                  auto run = [&](std::int64_t xo, std::int64_t yo, std::int64_t count) {
                    const T* gs = g + yo;
                    if (gx) {
                      T* gxs = gx + xoff + xo;
                      for (std::int64_t i = 0; i < count; ++i) gxs[i * stride] += wval * gs[i];
                    }
                    if (gw) {
                      const T* xs = xp + xo;
                      for (std::int64_t i = 0; i < count; ++i) wacc += gs[i] * xs[i * stride];
                    }
                  };
                  if (pointwise) {
                    run(0, 0, plane_out);
                  } else {
                    for_each_tap(ky, kx, run);
                  }
                  if (gw) gw[woff + ky * kw + kx] += wacc;
                }
              }
            }
          }
        }
      });
}

template <typename T>
BatchNormState<T> BatchNormState<T>::identity(std::int64_t channels) {
  BatchNormState s;
  s.gamma = Tensor<T>::full({channels}, T(1), true);
  s.beta = Tensor<T>::zeros({channels}, true);
  s.running_mean = Tensor<T>::zeros({channels});
  s.running_var = Tensor<T>::full({channels}, T(1));
  return s;
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormState<T>& st, NormMode mode) {
  if (x.rank() != 4) throw ShapeError("batchnorm2d expects (B, C, H, W), got " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (const Tensor<T>* p : {&st.gamma, &st.beta, &st.running_mean, &st.running_var}) {
    if (p->rank() != 1 || p->dim(0) != ch) {
      throw ShapeError("batchnorm2d parameter " + shape_str(p->shape()) + " for " +
                       std::to_string(ch) + " channels");
    }
  }
  const std::int64_t count = batch * plane;
  const bool train = mode == NormMode::train;
  if (train && count < 2) {
    throw DegenerateBatchError("train-mode batchnorm needs at least 2 values per channel, got " +
                               std::to_string(count));
  }
  const auto& xv = x.values();
  std::vector<T> mean(static_cast<std::size_t>(ch)), inv_std(static_cast<std::size_t>(ch));
  for (std::int64_t c = 0; c < ch; ++c) {
    double mu, var;
    if (train) {
      double s = 0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* p = xv.data() + (b * ch + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      }
      mu = s / static_cast<double>(count);
      double ss = 0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* p = xv.data() + (b * ch + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      var = ss / static_cast<double>(count);
      auto rm = st.running_mean.mutable_data();
      auto rv = st.running_var.mutable_data();
      const double unbiased = ss / static_cast<double>(count - 1);
      rm[static_cast<std::size_t>(c)] =
          static_cast<T>((1.0 - st.momentum) * rm[static_cast<std::size_t>(c)] + st.momentum * mu);
      rv[static_cast<std::size_t>(c)] = static_cast<T>(
          (1.0 - st.momentum) * rv[static_cast<std::size_t>(c)] + st.momentum * unbiased);
    } else {
      mu = st.running_mean.values()[static_cast<std::size_t>(c)];
      var = st.running_var.values()[static_cast<std::size_t>(c)];
    }
    mean[static_cast<std::size_t>(c)] = static_cast<T>(mu);
    inv_std[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + st.eps));
  }
  const auto& gv = st.gamma.values();
  const auto& bv = st.beta.values();
  std::vector<T> xhat(xv.size()), out(xv.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < ch; ++c) {
      const auto cu = static_cast<std::size_t>(c);
      const std::int64_t o = (b * ch + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        const T xh = (xv[o + i] - mean[cu]) * inv_std[cu];
        xhat[o + i] = xh;
        out[o + i] = gv[cu] * xh + bv[cu];
      }
    }
  }
  NodePtr<T> xn = x.node(), gn = st.gamma.node(), bnode = st.beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {xn, gn, bnode},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](const std::vector<T>& gy) {
        const auto& gamma = gn->data;
        std::vector<double> sum_dy(static_cast<std::size_t>(ch), 0.0),
            sum_dy_xhat(static_cast<std::size_t>(ch), 0.0);
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t c = 0; c < ch; ++c) {
            const std::int64_t o = (b * ch + c) * plane;
            double s1 = 0, s2 = 0;
            for (std::int64_t i = 0; i < plane; ++i) {
              s1 += gy[o + i];
              s2 += gy[o + i] * xhat[o + i];
            }
            sum_dy[static_cast<std::size_t>(c)] += s1;
            sum_dy_xhat[static_cast<std::size_t>(c)] += s2;
          }
        }
        if (gn->requires_grad) {
          auto& gg = gn->ensure_grad();
          for (std::int64_t c = 0; c < ch; ++c) gg[c] += static_cast<T>(sum_dy_xhat[c]);
        }
        if (bnode->requires_grad) {
          auto& gb = bnode->ensure_grad();
          for (std::int64_t c = 0; c < ch; ++c) gb[c] += static_cast<T>(sum_dy[c]);
        }
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad();
        const double n = static_cast<double>(count);
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t c = 0; c < ch; ++c) {
            const auto cu = static_cast<std::size_t>(c);
            const std::int64_t o = (b * ch + c) * plane;
            const T k = gamma[cu] * inv_std[cu];
            if (train) {
              const T m1 = static_cast<T>(sum_dy[cu] / n);
              const T m2 = static_cast<T>(sum_dy_xhat[cu] / n);
              for (std::int64_t i = 0; i < plane; ++i) {
                gx[o + i] += k * (gy[o + i] - m1 - xhat[o + i] * m2);
              }
            } else {
              for (std::int64_t i = 0; i < plane; ++i) gx[o + i] += k * gy[o + i];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& t) {
  const auto& in = t.values();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = T(0.5) * in[i] * (T(1) + std::erf(in[i] * T(std::numbers::sqrt2 / 2)));
  }
  NodePtr<T> src = t.node();
  return detail::make_result<T>(t.shape(), std::move(out), {src}, [src](const std::vector<T>& g) {
    auto& pg = src->ensure_grad();
    const auto& x = src->data;
    const T inv_sqrt_2pi = T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * T(std::numbers::sqrt2 / 2)));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
      pg[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  NodePtr<T> an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {an, bn},
                                [an, bn](const std::vector<T>& g) {
                                  for (const auto& p : {an, bn}) {
                                    if (!p->requires_grad) continue;
                                    auto& pg = p->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  NodePtr<T> an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {an, bn},
                                [an, bn](const std::vector<T>& g) {
                                  if (an->requires_grad) {
                                    auto& pg = an->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * bn->data[i];
                                  }
                                  if (bn->requires_grad) {
                                    auto& pg = bn->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * an->data[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& t, T factor) {
  const auto& in = t.values();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factor;
  NodePtr<T> src = t.node();
  return detail::make_result<T>(t.shape(), std::move(out), {src},
                                [src, factor](const std::vector<T>& g) {
                                  auto& pg = src->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * factor;
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& t) {
  const auto& in = t.values();
  const T total = std::accumulate(in.begin(), in.end(), T(0));
  NodePtr<T> src = t.node();
  return detail::make_result<T>(Shape{1}, {total}, {src}, [src](const std::vector<T>& g) {
    auto& pg = src->ensure_grad();
    for (auto& v : pg) v += g[0];
  });
}

template <typename T>
Tensor<T> mean_pool_hw(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("mean_pool_hw expects (B, C, H, W), got " + shape_str(x.shape()));
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::int64_t plane = x.dim(2) * x.dim(3);
  const auto& in = x.values();
  std::vector<T> out(static_cast<std::size_t>(planes));
  for (std::int64_t p = 0; p < planes; ++p) {
    T s = 0;
    for (std::int64_t i = 0; i < plane; ++i) s += in[p * plane + i];
    out[p] = s / static_cast<T>(plane);
  }
  NodePtr<T> src = x.node();
  return detail::make_result<T>(Shape{x.dim(0), x.dim(1)}, std::move(out), {src},
                                [src, planes, plane](const std::vector<T>& g) {
                                  auto& pg = src->ensure_grad();
                                  for (std::int64_t p = 0; p < planes; ++p) {
                                    const T v = g[p] / static_cast<T>(plane);
                                    for (std::int64_t i = 0; i < plane; ++i) pg[p * plane + i] += v;
                                  }
                                });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("linear input " + shape_str(x.shape()) + " with weight " + shape_str(w.shape()));
  }
  const std::int64_t batch = x.dim(0), in = x.dim(1), outf = w.dim(0);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != outf)) {
    throw ShapeError("linear bias " + shape_str(bias.shape()));
  }
  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<T> out(static_cast<std::size_t>(batch * outf));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t o = 0; o < outf; ++o) {
      T acc = has_bias ? bias.values()[o] : T(0);
      for (std::int64_t i = 0; i < in; ++i) acc += xv[b * in + i] * wv[o * in + i];
      out[b * outf + o] = acc;
    }
  }
  NodePtr<T> xn = x.node(), wn = w.node();
  std::vector<NodePtr<T>> parents{xn, wn};
  NodePtr<T> bn = has_bias ? bias.node() : nullptr;
  if (bn) parents.push_back(bn);
  return detail::make_result<T>(
      Shape{batch, outf}, std::move(out), std::move(parents), [=](const std::vector<T>& g) {
        if (xn->requires_grad) {
          auto& gx = xn->ensure_grad();
          for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t o = 0; o < outf; ++o)
              for (std::int64_t i = 0; i < in; ++i) gx[b * in + i] += g[b * outf + o] * wn->data[o * in + i];
        }
        if (wn->requires_grad) {
          auto& gw = wn->ensure_grad();
          for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t o = 0; o < outf; ++o)
              for (std::int64_t i = 0; i < in; ++i) gw[o * in + i] += g[b * outf + o] * xn->data[b * in + i];
        }
        if (bn && bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t o = 0; o < outf; ++o) gb[o] += g[b * outf + o];
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw ShapeError("cross_entropy logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::int64_t batch = logits.dim(0), k = logits.dim(1);
  for (int l : labels) {
    if (l < 0 || l >= k) throw CallError("label " + std::to_string(l) + " out of range");
  }
  const auto& z = logits.values();
  auto probs = std::make_shared<std::vector<T>>(z.size());
  double loss = 0;
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* row = z.data() + b * k;
    T* p = probs->data() + b * k;
    const T mx = *std::max_element(row, row + k);
    T total = 0;
    for (std::int64_t j = 0; j < k; ++j) total += (p[j] = std::exp(row[j] - mx));
    for (std::int64_t j = 0; j < k; ++j) p[j] /= total;
    loss += std::log(total) + mx - row[labels[static_cast<std::size_t>(b)]];
  }
  NodePtr<T> src = logits.node();
  return detail::make_result<T>(
      Shape{1}, {static_cast<T>(loss / static_cast<double>(batch))}, {src},
      [src, probs, labels, batch, k](const std::vector<T>& g) {
        auto& pg = src->ensure_grad();
        const T s = g[0] / static_cast<T>(batch);
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t j = 0; j < k; ++j) {
            const T onehot = j == labels[static_cast<std::size_t>(b)] ? T(1) : T(0);
            pg[b * k + j] += s * ((*probs)[b * k + j] - onehot);
          }
        }
      });
}

#define SF_INSTANTIATE(T)                                                                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                      \
  template Tensor<T> reshape_permute(const Tensor<T>&, Shape, const std::vector<int>&);       \
  template Tensor<T> gather(const Tensor<T>&, IndexMap, Shape);                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> softmax_lastdim(const Tensor<T>&, Validation);                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                            const Conv2dOptions&);                                            \
  template struct BatchNormState<T>;                                                          \
  template Tensor<T> batchnorm2d(const Tensor<T>&, BatchNormState<T>&, NormMode);             \
  template Tensor<T> gelu(const Tensor<T>&);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean_pool_hw(const Tensor<T>&);                                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int>&);                \
  template void validate_finite(const Tensor<T>&, const char*);

SF_INSTANTIATE(float)
SF_INSTANTIATE(double)

#undef SF_INSTANTIATE

}  // namespace shuffle_former
