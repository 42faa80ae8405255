#include "echosyn/ops.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace echosyn::ag {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;
template <typename T>
using OuterMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using COuterMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using StridedCMap = Eigen::Map<const RowMat<T>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;

// Gradient buffer of the i-th parent, or nullptr if it does not need one.
template <typename T>
Tensor<T>* pgrad(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

template <typename T>
const Tensor<T>& pval(Node<T>& self, std::size_t i) {
  return self.parents[i]->value;
}

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) throw ContractError(std::string(what) + ": expected C x K x H x W, got " + shape_str(s));
}

struct ConvGeom {
  std::int64_t cin, frames, h, w;
  std::int64_t cout, kt, kh, kw;
  int stride;
  std::int64_t ho, wo;
  std::int64_t rows() const { return cin * kt * kh * kw; }
  std::int64_t cols() const { return frames * ho * wo; }
  bool pointwise() const { return kt == 1 && kh == 1 && kw == 1 && stride == 1; }
};

// Column matrix for output frame k: rows (ci, dt, dy, dx), cols (oy, ox).
template <typename T>
void im2col_frame(const T* x, const ConvGeom& g, std::int64_t k, T* col) {
  const std::int64_t pt = g.kt / 2, ph = g.kh / 2, pw = g.kw / 2;
  const std::int64_t ncols = g.ho * g.wo;
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + ci * g.frames * g.h * g.w;
    for (std::int64_t dt = 0; dt < g.kt; ++dt) {
      const std::int64_t kk = k + dt - pt;
      for (std::int64_t dy = 0; dy < g.kh; ++dy) {
        for (std::int64_t dx = 0; dx < g.kw; ++dx, ++r) {
          T* out = col + r * ncols;
          if (kk < 0 || kk >= g.frames) {
            std::fill(out, out + ncols, T{0});
            continue;
          }
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            T* o = out + oy * g.wo;
            const std::int64_t iy = oy * g.stride + dy - ph;
            if (iy < 0 || iy >= g.h) {
              std::fill(o, o + g.wo, T{0});
              continue;
            }
            const T* xr = xc + (kk * g.h + iy) * g.w;
            if (g.stride == 1) {
              const std::int64_t lo = std::max<std::int64_t>(0, pw - dx);
              const std::int64_t hi = std::max(lo, std::min<std::int64_t>(g.wo, g.w + pw - dx));
              for (std::int64_t ox = 0; ox < lo; ++ox) o[ox] = T{0};
              for (std::int64_t ox = lo; ox < hi; ++ox) o[ox] = xr[ox + dx - pw];
              for (std::int64_t ox = hi; ox < g.wo; ++ox) o[ox] = T{0};
            } else {
              for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                const std::int64_t ix = ox * g.stride + dx - pw;
                o[ox] = (ix >= 0 && ix < g.w) ? xr[ix] : T{0};
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_frame(const T* col, const ConvGeom& g, std::int64_t k, T* x) {
  const std::int64_t pt = g.kt / 2, ph = g.kh / 2, pw = g.kw / 2;
  const std::int64_t ncols = g.ho * g.wo;
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    T* xc = x + ci * g.frames * g.h * g.w;
    for (std::int64_t dt = 0; dt < g.kt; ++dt) {
      const std::int64_t kk = k + dt - pt;
      for (std::int64_t dy = 0; dy < g.kh; ++dy) {
        for (std::int64_t dx = 0; dx < g.kw; ++dx, ++r) {
          if (kk < 0 || kk >= g.frames) continue;
          const T* in = col + r * ncols;
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride + dy - ph;
            if (iy < 0 || iy >= g.h) continue;
            const T* o = in + oy * g.wo;
            T* xr = xc + (kk * g.h + iy) * g.w;
            if (g.stride == 1) {
              const std::int64_t lo = std::max<std::int64_t>(0, pw - dx);
              const std::int64_t hi = std::min<std::int64_t>(g.wo, g.w + pw - dx);
              for (std::int64_t ox = lo; ox < hi; ++ox) xr[ox + dx - pw] += o[ox];
            } else {
              for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                const std::int64_t ix = ox * g.stride + dx - pw;
                if (ix >= 0 && ix < g.w) xr[ix] += o[ox];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, auto&& f) {
  Tensor<T> out(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  auto out = elementwise(a.value(), b.value(), [](T x, T y) { return x + y; });
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (auto* g = pgrad(self, i)) {
        for (std::int64_t j = 0; j < g->numel(); ++j) (*g)[j] += self.grad[j];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  auto out = elementwise(a.value(), b.value(), [](T x, T y) { return x - y; });
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t j = 0; j < g->numel(); ++j) (*g)[j] += self.grad[j];
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::int64_t j = 0; j < g->numel(); ++j) (*g)[j] -= self.grad[j];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  auto out = elementwise(a.value(), b.value(), [](T x, T y) { return x * y; });
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = pval(self, 0);
    const auto& bv = pval(self, 1);
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t j = 0; j < g->numel(); ++j) (*g)[j] += self.grad[j] * bv[j];
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::int64_t j = 0; j < g->numel(); ++j) (*g)[j] += self.grad[j] * av[j];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * c;
  return make_result<T>(std::move(out), {a}, [c](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t j = 0; j < g->numel(); ++j) (*g)[j] += self.grad[j] * c;
    }
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + c;
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t j = 0; j < g->numel(); ++j) (*g)[j] += self.grad[j];
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto n = a.value().numel();
  Tensor<T> out(a.shape());
  Eigen::Map<const Arr> x(a.value().data(), n);
  Eigen::Map<Arr>(out.data(), n) = x / (T{1} + (-x).exp());
  return make_result<T>(std::move(out), {a}, [n](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      Eigen::Map<const Arr> xv(pval(self, 0).data(), n);
      Eigen::Map<const Arr> d(self.grad.data(), n);
      const Arr s = T{1} / (T{1} + (-xv).exp());
      Eigen::Map<Arr>(g->data(), n) += d * s * (T{1} + xv * (T{1} - s));
    }
  });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  require_rank4(x.shape(), "add_bias");
  const auto c = x.shape()[0], frames = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  const auto& bs = bias.shape();
  if (bs.size() != 2 || bs[0] != c || (bs[1] != 1 && bs[1] != frames)) {
    throw ContractError("add_bias: bias " + shape_str(bs) + " incompatible with " + shape_str(x.shape()));
  }
  const bool per_frame = bs[1] == frames && frames != 1;
  Tensor<T> out = x.value();
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t k = 0; k < frames; ++k) {
      const T b = bias.value()[ci * bs[1] + (per_frame ? k : 0)];
      T* o = out.data() + (ci * frames + k) * hw;
      for (std::int64_t i = 0; i < hw; ++i) o[i] += b;
    }
  }
  return make_result<T>(std::move(out), {x, bias}, [c, frames, hw, per_frame](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t j = 0; j < g->numel(); ++j) (*g)[j] += self.grad[j];
    }
    if (auto* g = pgrad(self, 1)) {
      const std::int64_t kb = per_frame ? frames : 1;
      for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t k = 0; k < frames; ++k) {
          const T* d = self.grad.data() + (ci * frames + k) * hw;
          T acc{0};
          for (std::int64_t i = 0; i < hw; ++i) acc += d[i];
          (*g)[ci * kb + (per_frame ? k : 0)] += acc;
        }
      }
    }
  });
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int spatial_stride) {
  require_rank4(x.shape(), "conv3d");
  const auto& ws = w.shape();
  if (ws.size() != 5 || ws[1] != x.shape()[0]) {
    throw ContractError("conv3d: weight " + shape_str(ws) + " incompatible with input " + shape_str(x.shape()));
  }
  if (spatial_stride < 1) throw ContractError("conv3d: stride must be >= 1");
  ConvGeom g{x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], ws[0], ws[2], ws[3], ws[4], spatial_stride, 0, 0};
  if (g.kt % 2 == 0 || g.kh % 2 == 0 || g.kw % 2 == 0) throw ContractError("conv3d: kernel sizes must be odd");
  g.ho = (g.h + 2 * (g.kh / 2) - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * (g.kw / 2) - g.kw) / g.stride + 1;
  const bool has_bias = static_cast<bool>(b);
  if (has_bias && (b.shape().size() != 1 || b.shape()[0] != g.cout)) throw ContractError("conv3d: bias shape");

  Tensor<T> out({g.cout, g.frames, g.ho, g.wo});
  CMapM<T> wm(w.value().data(), g.cout, g.rows());
  if (g.pointwise()) {
    MapM<T>(out.data(), g.cout, g.cols()).noalias() = wm * CMapM<T>(x.value().data(), g.rows(), g.cols());
  } else {
    // One output frame at a time keeps the column buffer cache-resident.
    const std::int64_t fc = g.ho * g.wo;
    std::vector<T> col(static_cast<std::size_t>(g.rows() * fc));
    for (std::int64_t k = 0; k < g.frames; ++k) {
      im2col_frame(x.value().data(), g, k, col.data());
      OuterMap<T>(out.data() + k * fc, g.cout, fc, Eigen::OuterStride<>(g.cols())).noalias() =
          wm * CMapM<T>(col.data(), g.rows(), fc);
    }
  }
  if (has_bias) {
    MapM<T> ym(out.data(), g.cout, g.cols());
    for (std::int64_t o = 0; o < g.cout; ++o) ym.row(o).array() += b.value()[o];
  }

  std::vector<Var<T>> parents{x, w};
  if (has_bias) parents.push_back(b);
  return make_result<T>(std::move(out), std::move(parents), [g, has_bias](Node<T>& self) {
    CMapM<T> dy(self.grad.data(), g.cout, g.cols());
    const auto& xv = pval(self, 0);
    CMapM<T> wm(pval(self, 1).data(), g.cout, g.rows());
    auto* gx = pgrad(self, 0);
    auto* gw = pgrad(self, 1);
    if (g.pointwise()) {
      if (gw) MapM<T>(gw->data(), g.cout, g.rows()).noalias() += dy * CMapM<T>(xv.data(), g.rows(), g.cols()).transpose();
      if (gx) MapM<T>(gx->data(), g.rows(), g.cols()).noalias() += wm.transpose() * dy;
    } else {
      const std::int64_t fc = g.ho * g.wo;
      std::vector<T> col(static_cast<std::size_t>(g.rows() * fc));
      RowMat<T> dcol(g.rows(), fc);
      for (std::int64_t k = 0; k < g.frames; ++k) {
        COuterMap<T> dyk(self.grad.data() + k * fc, g.cout, fc, Eigen::OuterStride<>(g.cols()));
        if (gw) {
          im2col_frame(xv.data(), g, k, col.data());
          MapM<T>(gw->data(), g.cout, g.rows()).noalias() += dyk * CMapM<T>(col.data(), g.rows(), fc).transpose();
        }
        if (gx) {
          dcol.noalias() = wm.transpose() * dyk;
          col2im_frame(dcol.data(), g, k, gx->data());
        }
      }
    }
    if (has_bias) {
      if (auto* gb = pgrad(self, 2)) {
        for (std::int64_t o = 0; o < g.cout; ++o) (*gb)[o] += dy.row(o).sum();
      }
    }
  });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, T eps) {
  require_rank4(x.shape(), "group_norm");
  const auto c = x.shape()[0], frames = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (groups < 1 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) + " groups");
  }
  const std::int64_t cg = c / groups;
  const double n = static_cast<double>(cg * hw);
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(groups * frames));
  const auto& xv = x.value();
  for (std::int64_t gi = 0; gi < groups; ++gi) {
    for (std::int64_t k = 0; k < frames; ++k) {
      double s = 0, s2 = 0;
      for (std::int64_t ci = gi * cg; ci < (gi + 1) * cg; ++ci) {
        const T* p = xv.data() + (ci * frames + k) * hw;
        for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      }
      const double mean = s / n;
      for (std::int64_t ci = gi * cg; ci < (gi + 1) * cg; ++ci) {
        const T* p = xv.data() + (ci * frames + k) * hw;
        for (std::int64_t i = 0; i < hw; ++i) s2 += (p[i] - mean) * (p[i] - mean);
      }
      const double istd = 1.0 / std::sqrt(s2 / n + static_cast<double>(eps));
      inv_std[gi * frames + k] = static_cast<T>(istd);
      for (std::int64_t ci = gi * cg; ci < (gi + 1) * cg; ++ci) {
        const T* p = xv.data() + (ci * frames + k) * hw;
        T* o = out.data() + (ci * frames + k) * hw;
        for (std::int64_t i = 0; i < hw; ++i) o[i] = static_cast<T>((p[i] - mean) * istd);
      }
    }
  }
  return make_result<T>(std::move(out), {x}, [=, inv_std = std::move(inv_std)](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    const auto& y = self.value;
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      for (std::int64_t k = 0; k < frames; ++k) {
        double sd = 0, sdy = 0;
        for (std::int64_t ci = gi * cg; ci < (gi + 1) * cg; ++ci) {
          const std::int64_t off = (ci * frames + k) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            sd += self.grad[off + i];
            sdy += self.grad[off + i] * y[off + i];
          }
        }
        const double md = sd / n, mdy = sdy / n;
        const double istd = inv_std[gi * frames + k];
        for (std::int64_t ci = gi * cg; ci < (gi + 1) * cg; ++ci) {
          const std::int64_t off = (ci * frames + k) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            (*g)[off + i] += static_cast<T>(istd * (self.grad[off + i] - md - y[off + i] * mdy));
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& scale_v, const Var<T>& shift_v) {
  require_rank4(x.shape(), "channel_affine");
  const auto c = x.shape()[0];
  const auto inner = x.shape()[1] * x.shape()[2] * x.shape()[3];
  if (scale_v.value().numel() != c || shift_v.value().numel() != c) throw ContractError("channel_affine: parameter size");
  Tensor<T> out(x.shape());
  for (std::int64_t ci = 0; ci < c; ++ci) {
    const T s = scale_v.value()[ci], b = shift_v.value()[ci];
    const T* p = x.value().data() + ci * inner;
    T* o = out.data() + ci * inner;
    for (std::int64_t i = 0; i < inner; ++i) o[i] = p[i] * s + b;
  }
  return make_result<T>(std::move(out), {x, scale_v, shift_v}, [c, inner](Node<T>& self) {
    const auto& xv = pval(self, 0);
    const auto& sv = pval(self, 1);
    auto* gx = pgrad(self, 0);
    auto* gs = pgrad(self, 1);
    auto* gb = pgrad(self, 2);
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const T* d = self.grad.data() + ci * inner;
      const T* p = xv.data() + ci * inner;
      T ds{0}, db{0};
      for (std::int64_t i = 0; i < inner; ++i) {
        ds += d[i] * p[i];
        db += d[i];
      }
      if (gs) (*gs)[ci] += ds;
      if (gb) (*gb)[ci] += db;
      if (gx) {
        T* o = gx->data() + ci * inner;
        for (std::int64_t i = 0; i < inner; ++i) o[i] += d[i] * sv[ci];
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank4(a.shape(), "concat_channels");
  require_rank4(b.shape(), "concat_channels");
  if (!std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ContractError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Shape s = a.shape();
  s[0] += b.shape()[0];
  Tensor<T> out(s);
  std::copy(a.value().vec().begin(), a.value().vec().end(), out.data());
  std::copy(b.value().vec().begin(), b.value().vec().end(), out.data() + a.value().numel());
  const auto na = a.value().numel();
  return make_result<T>(std::move(out), {a, b}, [na](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t j = 0; j < na; ++j) (*g)[j] += self.grad[j];
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::int64_t j = 0; j < g->numel(); ++j) (*g)[j] += self.grad[na + j];
    }
  });
}

template <typename T>
Var<T> repeat_frames(const Var<T>& x, std::int64_t frames) {
  require_rank4(x.shape(), "repeat_frames");
  if (x.shape()[1] != 1) throw ContractError("repeat_frames: input must hold a single frame");
  const auto c = x.shape()[0], hw = x.shape()[2] * x.shape()[3];
  Tensor<T> out({c, frames, x.shape()[2], x.shape()[3]});
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t k = 0; k < frames; ++k) {
      std::copy_n(x.value().data() + ci * hw, hw, out.data() + (ci * frames + k) * hw);
    }
  }
  return make_result<T>(std::move(out), {x}, [c, frames, hw](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t k = 0; k < frames; ++k) {
          const T* d = self.grad.data() + (ci * frames + k) * hw;
          T* o = g->data() + ci * hw;
          for (std::int64_t i = 0; i < hw; ++i) o[i] += d[i];
        }
      }
    }
  });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  require_rank4(x.shape(), "upsample_nearest2x");
  const auto planes = x.shape()[0] * x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  Tensor<T> out({x.shape()[0], x.shape()[1], 2 * h, 2 * w});
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* in = x.value().data() + p * h * w;
    T* o = out.data() + p * 4 * h * w;
    for (std::int64_t y = 0; y < 2 * h; ++y) {
      for (std::int64_t xx = 0; xx < 2 * w; ++xx) o[y * 2 * w + xx] = in[(y / 2) * w + xx / 2];
    }
  }
  return make_result<T>(std::move(out), {x}, [planes, h, w](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t p = 0; p < planes; ++p) {
        const T* d = self.grad.data() + p * 4 * h * w;
        T* o = g->data() + p * h * w;
        for (std::int64_t y = 0; y < 2 * h; ++y) {
          for (std::int64_t xx = 0; xx < 2 * w; ++xx) o[(y / 2) * w + xx / 2] += d[y * 2 * w + xx];
        }
      }
    }
  });
}

template <typename T>
Var<T> linear_cols(const Var<T>& w, const Var<T>& x, const Var<T>& b) {
  const auto& ws = w.shape();
  const auto& xs = x.shape();
  if (ws.size() != 2 || xs.size() != 2 || ws[1] != xs[0] || b.value().numel() != ws[0]) {
    throw ConfigError("linear: weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  }
  const auto m = ws[0], n = ws[1], cols = xs[1];
  Tensor<T> out({m, cols});
  MapM<T> ym(out.data(), m, cols);
  ym.noalias() = CMapM<T>(w.value().data(), m, n) * CMapM<T>(x.value().data(), n, cols);
  for (std::int64_t i = 0; i < m; ++i) ym.row(i).array() += b.value()[i];
  return make_result<T>(std::move(out), {w, x, b}, [m, n, cols](Node<T>& self) {
    CMapM<T> dy(self.grad.data(), m, cols);
    if (auto* g = pgrad(self, 0)) {
      MapM<T>(g->data(), m, n).noalias() += dy * CMapM<T>(pval(self, 1).data(), n, cols).transpose();
    }
    if (auto* g = pgrad(self, 1)) {
      MapM<T>(g->data(), n, cols).noalias() += CMapM<T>(pval(self, 0).data(), m, n).transpose() * dy;
    }
    if (auto* g = pgrad(self, 2)) {
      for (std::int64_t i = 0; i < m; ++i) (*g)[i] += dy.row(i).sum();
    }
  });
}

namespace {

// Layout of one attention problem inside a C x K x H x W tensor.
struct AttnLayout {
  std::int64_t c, frames, hw;
  int heads;
  AttentionAxis axis;
  std::int64_t head_dim() const { return c / heads; }
  std::int64_t problems() const { return axis == AttentionAxis::kSpatial ? frames : hw; }
  std::int64_t tokens() const { return axis == AttentionAxis::kSpatial ? hw : frames; }
  std::int64_t row_stride() const { return frames * hw; }
  std::int64_t col_stride() const { return axis == AttentionAxis::kSpatial ? 1 : hw; }
  std::int64_t base(std::int64_t problem, int head) const {
    const std::int64_t off = axis == AttentionAxis::kSpatial ? problem * hw : problem;
    return head * head_dim() * row_stride() + off;
  }
};

template <typename T>
RowMat<T> gather(const Tensor<T>& t, const AttnLayout& l, std::int64_t p, int h) {
  StridedCMap<T> m(t.data() + l.base(p, h), l.head_dim(), l.tokens(),
                   Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(l.row_stride(), l.col_stride()));
  return m;
}

template <typename T>
StridedMap<T> view(Tensor<T>& t, const AttnLayout& l, std::int64_t p, int h) {
  return StridedMap<T>(t.data() + l.base(p, h), l.head_dim(), l.tokens(),
                       Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(l.row_stride(), l.col_stride()));
}

// Row-wise softmax of Q^T K * scale.
template <typename T>
RowMat<T> attention_probs(const RowMat<T>& q, const RowMat<T>& k, T scale) {
  RowMat<T> s = (q.transpose() * k) * scale;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const T mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    s.row(i) /= s.row(i).sum();
  }
  return s;
}

}  // namespace

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, AttentionAxis axis) {
  require_rank4(q.shape(), "attention");
  require_same_shape(q.shape(), k.shape(), "attention");
  require_same_shape(q.shape(), v.shape(), "attention");
  const auto& s = q.shape();
  if (heads < 1 || s[0] % heads != 0) throw ConfigError("attention: channels not divisible by heads");
  const AttnLayout l{s[0], s[1], s[2] * s[3], heads, axis};
  const T sc = T{1} / std::sqrt(static_cast<T>(l.head_dim()));
  Tensor<T> out(s);
  for (std::int64_t p = 0; p < l.problems(); ++p) {
    for (int h = 0; h < heads; ++h) {
      const RowMat<T> qm = gather(q.value(), l, p, h);
      const RowMat<T> km = gather(k.value(), l, p, h);
      const RowMat<T> vm = gather(v.value(), l, p, h);
      const RowMat<T> probs = attention_probs(qm, km, sc);
      view(out, l, p, h) = vm * probs.transpose();
    }
  }
  return make_result<T>(std::move(out), {q, k, v}, [l, sc](Node<T>& self) {
    auto* gq = pgrad(self, 0);
    auto* gk = pgrad(self, 1);
    auto* gv = pgrad(self, 2);
    for (std::int64_t p = 0; p < l.problems(); ++p) {
      for (int h = 0; h < l.heads; ++h) {
        const RowMat<T> qm = gather(pval(self, 0), l, p, h);
        const RowMat<T> km = gather(pval(self, 1), l, p, h);
        const RowMat<T> vm = gather(pval(self, 2), l, p, h);
        const RowMat<T> dout = gather(self.grad, l, p, h);
        const RowMat<T> probs = attention_probs(qm, km, sc);
        if (gv) view(*gv, l, p, h) += dout * probs;
        if (gq || gk) {
          RowMat<T> dp = dout.transpose() * vm;
          for (Eigen::Index i = 0; i < dp.rows(); ++i) {
            const T rs = (dp.row(i).array() * probs.row(i).array()).sum();
            dp.row(i) = probs.row(i).array() * (dp.row(i).array() - rs);
          }
          if (gq) view(*gq, l, p, h) += sc * (km * dp.transpose());
          if (gk) view(*gk, l, p, h) += sc * (qm * dp);
        }
      }
    }
  });
}

template <typename T>
Var<T> swap_leading(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() < 2) throw ContractError("swap_leading: rank < 2");
  const auto a = s[0], b = s[1];
  const auto inner = x.value().numel() / (a * b);
  Shape os = s;
  std::swap(os[0], os[1]);
  Tensor<T> out(os);
  for (std::int64_t i = 0; i < a; ++i) {
    for (std::int64_t j = 0; j < b; ++j) {
      std::copy_n(x.value().data() + (i * b + j) * inner, inner, out.data() + (j * a + i) * inner);
    }
  }
  return make_result<T>(std::move(out), {x}, [a, b, inner](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t i = 0; i < a; ++i) {
        for (std::int64_t j = 0; j < b; ++j) {
          const T* d = self.grad.data() + (j * a + i) * inner;
          T* o = g->data() + (i * b + j) * inner;
          for (std::int64_t r = 0; r < inner; ++r) o[r] += d[r];
        }
      }
    }
  });
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  const auto n = a.value().numel();
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.value()[i]) - static_cast<double>(b.value()[i]);
    acc += d * d;
  }
  Tensor<T> out({1}, static_cast<T>(acc / static_cast<double>(n)));
  return make_result<T>(std::move(out), {a, b}, [n](Node<T>& self) {
    const auto& av = pval(self, 0);
    const auto& bv = pval(self, 1);
    const T c = T{2} * self.grad[0] / static_cast<T>(n);
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t j = 0; j < n; ++j) (*g)[j] += c * (av[j] - bv[j]);
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::int64_t j = 0; j < n; ++j) (*g)[j] -= c * (av[j] - bv[j]);
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0;
  for (auto v : a.value().vec()) acc += v;
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc)), {a}, [](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::int64_t j = 0; j < g->numel(); ++j) (*g)[j] += self.grad[0];
    }
  });
}

#define ECHOSYN_INSTANTIATE_OPS(T)                                                          \
  template Var<T> add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> scale(const Var<T>&, T);                                                  \
  template Var<T> add_scalar(const Var<T>&, T);                                             \
  template Var<T> silu(const Var<T>&);                                                      \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                   \
  template Var<T> conv3d(const Var<T>&, const Var<T>&, const Var<T>&, int);                 \
  template Var<T> group_norm(const Var<T>&, int, T);                                        \
  template Var<T> channel_affine(const Var<T>&, const Var<T>&, const Var<T>&);              \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                            \
  template Var<T> repeat_frames(const Var<T>&, std::int64_t);                               \
  template Var<T> upsample_nearest2x(const Var<T>&);                                        \
  template Var<T> linear_cols(const Var<T>&, const Var<T>&, const Var<T>&);                 \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int, AttentionAxis); \
  template Var<T> swap_leading(const Var<T>&);                                              \
  template Var<T> mse(const Var<T>&, const Var<T>&);                                        \
  template Var<T> sum(const Var<T>&);

ECHOSYN_INSTANTIATE_OPS(float)
ECHOSYN_INSTANTIATE_OPS(double)

}  // namespace echosyn::ag
