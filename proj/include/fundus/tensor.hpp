#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fundus/common.hpp"

namespace fundus::ad {

// Reverse-mode automatic differentiation on a tape, templated on the scalar
// so the same graph code runs in float for training and in double for
// finite-difference verification. Activations are (1,C,H,W); convolution
// weights use n as the output-channel axis.

struct Shape {
  int n = 1, c = 1, h = 1, w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * static_cast<std::size_t>(h) * w;
  }
  bool operator==(const Shape& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> v;
  std::vector<T> g;
  std::function<void()> bwd;
};

template <typename T>
class Tape;

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape<T>* tape, int idx) : tape_(tape), idx_(idx) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int idx() const { return idx_; }
  // By value: node storage moves when the tape grows, so references would dangle.
  Shape shape() const;
  std::vector<T>& v();
  const std::vector<T>& v() const;
  std::vector<T>& g();

 private:
  Tape<T>* tape_ = nullptr;
  int idx_ = -1;
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Tensor<T> alloc(const Shape& s) {
    Node<T> n;
    n.shape = s;
    n.v.assign(s.size(), T(0));
    if (recording_) n.g.assign(s.size(), T(0));
    nodes_.push_back(std::move(n));
    return Tensor<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  Tensor<T> leaf(const Shape& s, const T* data) {
    Tensor<T> t = alloc(s);
    std::copy(data, data + s.size(), node(t.idx()).v.begin());
    return t;
  }

  template <typename U>
  Tensor<T> leaf(const Shape& s, const std::vector<U>& data) {
    if (data.size() != s.size()) throw ContractError("leaf data does not match shape " + s.str());
    Tensor<T> t = alloc(s);
    std::transform(data.begin(), data.end(), node(t.idx()).v.begin(),
                   [](U x) { return static_cast<T>(x); });
    return t;
  }

  Node<T>& node(int i) { return nodes_[static_cast<std::size_t>(i)]; }
  const Node<T>& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape backwards. The tape is
  // built in topological order by construction, so one reverse pass suffices.
  void backward(const Tensor<T>& loss) {
    if (!recording_) throw ContractError("backward on a non-recording tape");
    if (loss.tape() != this) throw ContractError("loss tensor belongs to another tape");
    if (node(loss.idx()).shape.size() != 1) throw ContractError("backward needs a scalar loss");
    node(loss.idx()).g[0] = T(1);
    for (int i = loss.idx(); i >= 0; --i) {
      if (nodes_[static_cast<std::size_t>(i)].bwd) nodes_[static_cast<std::size_t>(i)].bwd();
    }
  }

 private:
  std::vector<Node<T>> nodes_;
  bool recording_;
};

template <typename T>
Shape Tensor<T>::shape() const {
  return tape_->node(idx_).shape;
}
template <typename T>
std::vector<T>& Tensor<T>::v() {
  return tape_->node(idx_).v;
}
template <typename T>
const std::vector<T>& Tensor<T>::v() const {
  return tape_->node(idx_).v;
}
template <typename T>
std::vector<T>& Tensor<T>::g() {
  return tape_->node(idx_).g;
}

namespace detail {

template <typename T>
Tape<T>& same_tape(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return *a.tape();
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!(a.shape() == b.shape())) {
    throw ContractError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " +
                        b.shape().str());
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Zero-padded im2col: rows index (channel, ki, kj), columns index output
// positions.
template <typename T>
void im2col(const T* x, int ic, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow,
            T* cols) {
  const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
  std::size_t row = 0;
  for (int c = 0; c < ic; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        T* dst = cols + row * ohw;
        for (int oi = 0; oi < oh; ++oi) {
          const int si = oi * stride - pad + ki;
          for (int oj = 0; oj < ow; ++oj) {
            const int sj = oj * stride - pad + kj;
            dst[oi * ow + oj] = (si >= 0 && si < h && sj >= 0 && sj < w)
                                    ? x[(static_cast<std::size_t>(c) * h + si) * w + sj]
                                    : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int ic, int h, int w, int kh, int kw, int stride, int pad, int oh,
                int ow, T* gx) {
  const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
  std::size_t row = 0;
  for (int c = 0; c < ic; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        const T* src = cols + row * ohw;
        for (int oi = 0; oi < oh; ++oi) {
          const int si = oi * stride - pad + ki;
          if (si < 0 || si >= h) continue;
          for (int oj = 0; oj < ow; ++oj) {
            const int sj = oj * stride - pad + kj;
            if (sj < 0 || sj >= w) continue;
            gx[(static_cast<std::size_t>(c) * h + si) * w + sj] += src[oi * ow + oj];
          }
        }
      }
    }
  }
}

inline int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}

struct Lerp {
  int i0, i1;
  double t;
};

inline std::vector<Lerp> lerp_axis(int in, int out) {
  std::vector<Lerp> m(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double f = (o + 0.5) * scale - 0.5;
    if (f < 0.0) f = 0.0;
    int i0 = static_cast<int>(f);
    if (i0 > in - 1) i0 = in - 1;
    m[o] = {i0, std::min(i0 + 1, in - 1), f - i0};
  }
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

// x: (1,IC,H,W); w: (OC,IC,KH,KW); b: (1,OC,1,1) or invalid for no bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride = 1,
                 int pad = 0) {
  Tape<T>& tape = detail::same_tape(x, w);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.n != 1) throw ContractError("conv2d expects a single image");
  if (ws.c != xs.c) {
    throw ContractError("conv2d channel mismatch: input " + xs.str() + " weight " + ws.str());
  }
  if (stride < 1 || pad < 0) throw ContractError("conv2d bad stride/pad");
  const int oc = ws.n, ic = ws.c, kh = ws.h, kw = ws.w;
  const int oh = (xs.h + 2 * pad - kh) / stride + 1;
  const int ow = (xs.w + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw ContractError("conv2d output collapses to zero size");
  const bool has_bias = b.valid();
  if (has_bias) {
    detail::same_tape(x, b);
    if (b.shape().size() != static_cast<std::size_t>(oc)) {
      throw ContractError("conv2d bias size mismatch");
    }
  }

  Tensor<T> out = tape.alloc({1, oc, oh, ow});
  const std::size_t krows = static_cast<std::size_t>(ic) * kh * kw;
  const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
  {
    std::vector<T> cols(krows * ohw);
    detail::im2col(x.v().data(), ic, xs.h, xs.w, kh, kw, stride, pad, oh, ow, cols.data());
    Eigen::Map<const detail::RowMat<T>> wm(w.v().data(), oc, static_cast<Eigen::Index>(krows));
    Eigen::Map<const detail::RowMat<T>> cm(cols.data(), static_cast<Eigen::Index>(krows),
                                           static_cast<Eigen::Index>(ohw));
    Eigen::Map<detail::RowMat<T>> om(out.v().data(), oc, static_cast<Eigen::Index>(ohw));
    om.noalias() = wm * cm;
    if (has_bias) {
      const std::vector<T>& bias = b.v();
      for (int o = 0; o < oc; ++o) om.row(o).array() += bias[static_cast<std::size_t>(o)];
    }
  }

  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int xi = x.idx(), wi = w.idx(), bi = has_bias ? b.idx() : -1, oi = out.idx();
    const int xh = xs.h, xw = xs.w;
    tape.node(out.idx()).bwd = [tp, xi, wi, bi, oi, ic, oc, kh, kw, stride, pad, oh, ow, xh,
                                xw]() {
      Node<T>& xn = tp->node(xi);
      Node<T>& wn = tp->node(wi);
      Node<T>& on = tp->node(oi);
      const std::size_t krows = static_cast<std::size_t>(ic) * kh * kw;
      const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
      std::vector<T> cols(krows * ohw);
      detail::im2col(xn.v.data(), ic, xh, xw, kh, kw, stride, pad, oh, ow, cols.data());
      Eigen::Map<const detail::RowMat<T>> cm(cols.data(), static_cast<Eigen::Index>(krows),
                                             static_cast<Eigen::Index>(ohw));
      Eigen::Map<const detail::RowMat<T>> gm(on.g.data(), oc, static_cast<Eigen::Index>(ohw));
      Eigen::Map<detail::RowMat<T>> gw(wn.g.data(), oc, static_cast<Eigen::Index>(krows));
      gw.noalias() += gm * cm.transpose();
      Eigen::Map<const detail::RowMat<T>> wm(wn.v.data(), oc, static_cast<Eigen::Index>(krows));
      detail::RowMat<T> gcols = wm.transpose() * gm;
      detail::col2im_add(gcols.data(), ic, xh, xw, kh, kw, stride, pad, oh, ow, xn.g.data());
      if (bi >= 0) {
        Node<T>& bn = tp->node(bi);
        for (int o = 0; o < oc; ++o) bn.g[static_cast<std::size_t>(o)] += gm.row(o).sum();
      }
    };
  }
  return out;
}

// Depthwise 3x3 Laplacian ([[0,1,0],[1,-4,1],[0,1,0]]) with reflect padding.
template <typename T>
Tensor<T> laplacian(const Tensor<T>& x) {
  Tape<T>& tape = *x.tape();
  const Shape& s = x.shape();
  Tensor<T> out = tape.alloc(s);
  const int h = s.h, w = s.w;
  const auto run = [h, w](const T* in, T* dst, int channels) {
    for (int c = 0; c < channels; ++c) {
      const T* p = in + static_cast<std::size_t>(c) * h * w;
      T* q = dst + static_cast<std::size_t>(c) * h * w;
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          q[i * w + j] = p[detail::reflect(i - 1, h) * w + j] +
                         p[detail::reflect(i + 1, h) * w + j] +
                         p[i * w + detail::reflect(j - 1, w)] +
                         p[i * w + detail::reflect(j + 1, w)] - T(4) * p[i * w + j];
        }
      }
    }
  };
  run(x.v().data(), out.v().data(), s.c);
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int xi = x.idx(), oi = out.idx(), c = s.c;
    tape.node(out.idx()).bwd = [tp, xi, oi, c, h, w]() {
      Node<T>& xn = tp->node(xi);
      Node<T>& on = tp->node(oi);
      // adjoint: scatter each output grad to the taps it read
      for (int ch = 0; ch < c; ++ch) {
        const T* g = on.g.data() + static_cast<std::size_t>(ch) * h * w;
        T* gx = xn.g.data() + static_cast<std::size_t>(ch) * h * w;
        for (int i = 0; i < h; ++i) {
          for (int j = 0; j < w; ++j) {
            const T gv = g[i * w + j];
            gx[detail::reflect(i - 1, h) * w + j] += gv;
            gx[detail::reflect(i + 1, h) * w + j] += gv;
            gx[i * w + detail::reflect(j - 1, w)] += gv;
            gx[i * w + detail::reflect(j + 1, w)] += gv;
            gx[i * w + j] -= T(4) * gv;
          }
        }
      }
    };
  }
  return out;
}

// Half-pixel bilinear resampling (no corner alignment).
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int oh, int ow) {
  Tape<T>& tape = *x.tape();
  const Shape& s = x.shape();
  if (oh < 1 || ow < 1) throw ContractError("bilinear_resize bad target size");
  Tensor<T> out = tape.alloc({s.n, s.c, oh, ow});
  const auto rows = detail::lerp_axis(s.h, oh);
  const auto cols = detail::lerp_axis(s.w, ow);
  const int channels = s.n * s.c;
  const int h = s.h, w = s.w;
  {
    const T* in = x.v().data();
    T* dst = out.v().data();
    for (int c = 0; c < channels; ++c) {
      const T* p = in + static_cast<std::size_t>(c) * h * w;
      T* q = dst + static_cast<std::size_t>(c) * oh * ow;
      for (int i = 0; i < oh; ++i) {
        const auto& ri = rows[static_cast<std::size_t>(i)];
        for (int j = 0; j < ow; ++j) {
          const auto& cj = cols[static_cast<std::size_t>(j)];
          const T a = p[ri.i0 * w + cj.i0], bv = p[ri.i0 * w + cj.i1];
          const T cc = p[ri.i1 * w + cj.i0], d = p[ri.i1 * w + cj.i1];
          const T top = a + static_cast<T>(cj.t) * (bv - a);
          const T bot = cc + static_cast<T>(cj.t) * (d - cc);
          q[i * ow + j] = top + static_cast<T>(ri.t) * (bot - top);
        }
      }
    }
  }
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int xi = x.idx(), oi = out.idx();
    tape.node(out.idx()).bwd = [tp, xi, oi, rows, cols, channels, h, w, oh, ow]() {
      Node<T>& xn = tp->node(xi);
      Node<T>& on = tp->node(oi);
      for (int c = 0; c < channels; ++c) {
        const T* g = on.g.data() + static_cast<std::size_t>(c) * oh * ow;
        T* gx = xn.g.data() + static_cast<std::size_t>(c) * h * w;
        for (int i = 0; i < oh; ++i) {
          const auto& ri = rows[static_cast<std::size_t>(i)];
          for (int j = 0; j < ow; ++j) {
            const auto& cj = cols[static_cast<std::size_t>(j)];
            const T gv = g[i * ow + j];
            const T ti = static_cast<T>(ri.t), tj = static_cast<T>(cj.t);
            gx[ri.i0 * w + cj.i0] += (T(1) - ti) * (T(1) - tj) * gv;
            gx[ri.i0 * w + cj.i1] += (T(1) - ti) * tj * gv;
            gx[ri.i1 * w + cj.i0] += ti * (T(1) - tj) * gv;
            gx[ri.i1 * w + cj.i1] += ti * tj * gv;
          }
        }
      }
    };
  }
  return out;
}

namespace detail {

// Elementwise op scaffold: forward fn(x) and backward dfn(x, y) * grad.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F fn, DF dfn) {
  Tape<T>& tape = *x.tape();
  Tensor<T> out = tape.alloc(x.shape());
  const std::vector<T>& xv = x.v();
  std::vector<T>& ov = out.v();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fn(xv[i]);
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int xi = x.idx(), oi = out.idx();
    tape.node(out.idx()).bwd = [tp, xi, oi, dfn]() {
      Node<T>& xn = tp->node(xi);
      Node<T>& on = tp->node(oi);
      for (std::size_t i = 0; i < xn.v.size(); ++i) xn.g[i] += dfn(xn.v[i], on.v[i]) * on.g[i];
    };
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// Subgradient 0 at y == 0, where the true derivative is unbounded.
template <typename T>
Tensor<T> sqrt_val(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::sqrt(v); },
      [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <typename T>
Tensor<T> abs_val(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

namespace detail {

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* what, F fn, DA da, DB db) {
  Tape<T>& tape = same_tape(a, b);
  require_same(a, b, what);
  Tensor<T> out = tape.alloc(a.shape());
  const std::vector<T>& av = a.v();
  const std::vector<T>& bv = b.v();
  std::vector<T>& ov = out.v();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fn(av[i], bv[i]);
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int ai = a.idx(), bi = b.idx(), oi = out.idx();
    tape.node(out.idx()).bwd = [tp, ai, bi, oi, da, db]() {
      Node<T>& an = tp->node(ai);
      Node<T>& bn = tp->node(bi);
      Node<T>& on = tp->node(oi);
      for (std::size_t i = 0; i < an.v.size(); ++i) {
        an.g[i] += da(an.v[i], bn.v[i]) * on.g[i];
        bn.g[i] += db(an.v[i], bn.v[i]) * on.g[i];
      }
    };
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

// (1,C,H,W) -> (1,C,1,1)
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  Tape<T>& tape = *x.tape();
  const Shape& s = x.shape();
  Tensor<T> out = tape.alloc({1, s.c, 1, 1});
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  for (int c = 0; c < s.c; ++c) {
    T acc = T(0);
    const T* p = x.v().data() + static_cast<std::size_t>(c) * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += p[i];
    out.v()[static_cast<std::size_t>(c)] = acc / static_cast<T>(hw);
  }
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int xi = x.idx(), oi = out.idx(), c = s.c;
    tape.node(out.idx()).bwd = [tp, xi, oi, c, hw]() {
      Node<T>& xn = tp->node(xi);
      Node<T>& on = tp->node(oi);
      for (int ch = 0; ch < c; ++ch) {
        const T gv = on.g[static_cast<std::size_t>(ch)] / static_cast<T>(hw);
        T* gx = xn.g.data() + static_cast<std::size_t>(ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) gx[i] += gv;
      }
    };
  }
  return out;
}

// x: (1,C,H,W) scaled per channel by s: (1,C,1,1).
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  Tape<T>& tape = detail::same_tape(x, s);
  const Shape& xs = x.shape();
  if (s.shape().c != xs.c || s.shape().h != 1 || s.shape().w != 1) {
    throw ContractError("scale_channels: gate shape " + s.shape().str() + " vs " + xs.str());
  }
  Tensor<T> out = tape.alloc(xs);
  const std::size_t hw = static_cast<std::size_t>(xs.h) * xs.w;
  for (int c = 0; c < xs.c; ++c) {
    const T sv = s.v()[static_cast<std::size_t>(c)];
    const T* p = x.v().data() + static_cast<std::size_t>(c) * hw;
    T* q = out.v().data() + static_cast<std::size_t>(c) * hw;
    for (std::size_t i = 0; i < hw; ++i) q[i] = p[i] * sv;
  }
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int xi = x.idx(), si = s.idx(), oi = out.idx(), c = xs.c;
    tape.node(out.idx()).bwd = [tp, xi, si, oi, c, hw]() {
      Node<T>& xn = tp->node(xi);
      Node<T>& sn = tp->node(si);
      Node<T>& on = tp->node(oi);
      for (int ch = 0; ch < c; ++ch) {
        const T sv = sn.v[static_cast<std::size_t>(ch)];
        const T* p = xn.v.data() + static_cast<std::size_t>(ch) * hw;
        const T* g = on.g.data() + static_cast<std::size_t>(ch) * hw;
        T* gx = xn.g.data() + static_cast<std::size_t>(ch) * hw;
        T acc = T(0);
        for (std::size_t i = 0; i < hw; ++i) {
          gx[i] += sv * g[i];
          acc += p[i] * g[i];
        }
        sn.g[static_cast<std::size_t>(ch)] += acc;
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat_ch(const Tensor<T>& a, const Tensor<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ContractError("concat_ch: spatial mismatch " + as.str() + " vs " + bs.str());
  }
  Tensor<T> out = tape.alloc({as.n, as.c + bs.c, as.h, as.w});
  std::copy(a.v().begin(), a.v().end(), out.v().begin());
  std::copy(b.v().begin(), b.v().end(), out.v().begin() + static_cast<long>(a.v().size()));
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int ai = a.idx(), bi = b.idx(), oi = out.idx();
    tape.node(out.idx()).bwd = [tp, ai, bi, oi]() {
      Node<T>& an = tp->node(ai);
      Node<T>& bn = tp->node(bi);
      Node<T>& on = tp->node(oi);
      for (std::size_t i = 0; i < an.g.size(); ++i) an.g[i] += on.g[i];
      for (std::size_t i = 0; i < bn.g.size(); ++i) bn.g[i] += on.g[an.g.size() + i];
    };
  }
  return out;
}

// Width window [j0, j0+ww) of every channel.
template <typename T>
Tensor<T> crop_w(const Tensor<T>& x, int j0, int ww) {
  Tape<T>& tape = *x.tape();
  const Shape& s = x.shape();
  if (j0 < 0 || ww < 1 || j0 + ww > s.w) throw ContractError("crop_w window out of range");
  Tensor<T> out = tape.alloc({s.n, s.c, s.h, ww});
  const int channels = s.n * s.c;
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < s.h; ++i) {
      const T* p = x.v().data() + (static_cast<std::size_t>(c) * s.h + i) * s.w + j0;
      T* q = out.v().data() + (static_cast<std::size_t>(c) * s.h + i) * ww;
      std::copy(p, p + ww, q);
    }
  }
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int xi = x.idx(), oi = out.idx(), h = s.h, w = s.w;
    tape.node(out.idx()).bwd = [tp, xi, oi, j0, ww, channels, h, w]() {
      Node<T>& xn = tp->node(xi);
      Node<T>& on = tp->node(oi);
      for (int c = 0; c < channels; ++c) {
        for (int i = 0; i < h; ++i) {
          const T* g = on.g.data() + (static_cast<std::size_t>(c) * h + i) * ww;
          T* gx = xn.g.data() + (static_cast<std::size_t>(c) * h + i) * w + j0;
          for (int j = 0; j < ww; ++j) gx[j] += g[j];
        }
      }
    };
  }
  return out;
}

// Side-by-side reassembly along width.
template <typename T>
Tensor<T> concat_w(const Tensor<T>& a, const Tensor<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.n != bs.n || as.c != bs.c || as.h != bs.h) {
    throw ContractError("concat_w: shape mismatch " + as.str() + " vs " + bs.str());
  }
  const int w = as.w + bs.w;
  Tensor<T> out = tape.alloc({as.n, as.c, as.h, w});
  const int channels = as.n * as.c;
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < as.h; ++i) {
      T* q = out.v().data() + (static_cast<std::size_t>(c) * as.h + i) * w;
      const T* pa = a.v().data() + (static_cast<std::size_t>(c) * as.h + i) * as.w;
      const T* pb = b.v().data() + (static_cast<std::size_t>(c) * as.h + i) * bs.w;
      std::copy(pa, pa + as.w, q);
      std::copy(pb, pb + bs.w, q + as.w);
    }
  }
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int ai = a.idx(), bi = b.idx(), oi = out.idx(), h = as.h, wa = as.w, wb = bs.w;
    tape.node(out.idx()).bwd = [tp, ai, bi, oi, channels, h, wa, wb]() {
      Node<T>& an = tp->node(ai);
      Node<T>& bn = tp->node(bi);
      Node<T>& on = tp->node(oi);
      const int w = wa + wb;
      for (int c = 0; c < channels; ++c) {
        for (int i = 0; i < h; ++i) {
          const T* g = on.g.data() + (static_cast<std::size_t>(c) * h + i) * w;
          T* ga = an.g.data() + (static_cast<std::size_t>(c) * h + i) * wa;
          T* gb = bn.g.data() + (static_cast<std::size_t>(c) * h + i) * wb;
          for (int j = 0; j < wa; ++j) ga[j] += g[j];
          for (int j = 0; j < wb; ++j) gb[j] += g[wa + j];
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  Tape<T>& tape = *x.tape();
  Tensor<T> out = tape.alloc({1, 1, 1, 1});
  const std::vector<T>& xv = x.v();
  T acc = T(0);
  for (T v : xv) acc += v;
  out.v()[0] = acc / static_cast<T>(xv.size());
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int xi = x.idx(), oi = out.idx();
    tape.node(out.idx()).bwd = [tp, xi, oi]() {
      Node<T>& xn = tp->node(xi);
      const T gv = tp->node(oi).g[0] / static_cast<T>(xn.v.size());
      for (std::size_t i = 0; i < xn.g.size(); ++i) xn.g[i] += gv;
    };
  }
  return out;
}

// Charbonnier penalty, floor-anchored so identical inputs yield exactly eps:
// eps + mean(hypot(pred - target, eps) - eps).
template <typename T>
Tensor<T> charbonnier_mean(const Tensor<T>& pred, const Tensor<T>& target, T eps) {
  Tape<T>& tape = detail::same_tape(pred, target);
  detail::require_same(pred, target, "charbonnier");
  if (!(eps > T(0))) throw ParamError("charbonnier eps must be > 0");
  Tensor<T> out = tape.alloc({1, 1, 1, 1});
  const std::vector<T>& pv = pred.v();
  const std::vector<T>& tv = target.v();
  T acc = T(0);
  for (std::size_t i = 0; i < pv.size(); ++i) acc += std::hypot(pv[i] - tv[i], eps) - eps;
  out.v()[0] = eps + acc / static_cast<T>(pv.size());
  if (tape.recording()) {
    Tape<T>* tp = &tape;
    const int pi = pred.idx(), ti = target.idx(), oi = out.idx();
    tape.node(out.idx()).bwd = [tp, pi, ti, oi, eps]() {
      Node<T>& pn = tp->node(pi);
      Node<T>& tn = tp->node(ti);
      const T gv = tp->node(oi).g[0] / static_cast<T>(pn.v.size());
      for (std::size_t i = 0; i < pn.v.size(); ++i) {
        const T d = pn.v[i] - tn.v[i];
        const T slope = d / std::hypot(d, eps);
        pn.g[i] += slope * gv;
        tn.g[i] -= slope * gv;
      }
    };
  }
  return out;
}

}  // namespace fundus::ad
