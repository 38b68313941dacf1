#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mianet/random.hpp"
#include "mianet/tensor.hpp"
#include "mianet/tensor_io.hpp"

namespace mianet::ad {

/// Learnable tensor plus its accumulated gradient.
struct parameter {
  std::string name;
  tensor value;
  tensor gradient;

  parameter() = default;
  parameter(std::string n, tensor v) : name(std::move(n)), value(std::move(v)), gradient(value.shape()) {}

  void zero_grad() { std::fill(gradient.data().begin(), gradient.data().end(), 0.0); }
};

/// Uniform in [-a, a] with a = sqrt(6 / fan_in), rounded to float so a fresh
/// checkpoint reproduces the initialization exactly.
inline void init_uniform(parameter& p, std::size_t fan_in, rng& gen) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : p.value.data()) v = static_cast<double>(static_cast<float>(gen.uniform(-a, a)));
  p.zero_grad();
}

class tape;

/// Handle to a value recorded on a tape.
struct var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Record of forward operations. Values are immutable once recorded;
/// backward() walks the record in exact reverse order and may run once.
class tape {
 public:
  using backward_fn = std::function<void(tape&, const tensor& grad_out)>;

  var constant(tensor value) { return push(std::move(value), false, nullptr, {}); }

  var leaf(parameter& p) { return push(p.value, true, &p, {}); }

  /// Records an op output. `fn` runs during backward only if the output needs a gradient.
  var record(tensor value, std::initializer_list<var> inputs, backward_fn fn) {
    bool needs = false;
    for (auto in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : backward_fn{});
  }

  var record(tensor value, std::span<const var> inputs, backward_fn fn) {
    bool needs = false;
    for (auto in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : backward_fn{});
  }

  const tensor& value(var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of v, allocated on first use.
  tensor& grad(var v) {
    auto& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad = tensor(n.value.shape());
    return n.grad;
  }

  void accumulate(var v, const tensor& g) {
    if (!requires_grad(v)) return;
    auto& dst = grad(v);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates; parameter gradients are accumulated (+=).
  void backward(var loss) {
    if (consumed_) throw std::logic_error("backward already ran on this tape; record a new forward pass");
    if (value(loss).size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    consumed_ = true;
    if (!requires_grad(loss)) return;
    grad(loss)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param) {
        auto pg = n.param->gradient.data();
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      } else if (n.backward) {
        const tensor g = n.grad;
        n.backward(*this, g);
      }
    }
  }

 private:
  struct node {
    tensor value;
    tensor grad;
    bool requires_grad = false;
    parameter* param = nullptr;
    backward_fn backward;
  };

  var push(tensor value, bool needs, parameter* p, backward_fn fn) {
    nodes_.push_back(node{std::move(value), tensor{}, needs, p, std::move(fn)});
    return var{nodes_.size() - 1};
  }

  std::vector<node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Plain kernels (no tape), shared by the recorded ops and by frozen networks.

namespace kernel {

inline std::size_t conv_out(std::size_t n, int stride) { return (n + static_cast<std::size_t>(stride) - 1) / stride; }

// Range of output columns whose tap (ox*s + k - 1) lands inside [0, n).
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t n, std::size_t out, std::size_t k, std::size_t s) {
  const std::size_t lo = k == 0 ? 1 : 0;
  const std::size_t hi = std::min(out, (n + 1 - k + s - 1) / s);
  return {lo, hi};
}

/// Same-padding 3x3 convolution. x[cin,h,w], W[cout,cin,3,3], b[cout].
inline tensor conv3x3(const tensor& x, const tensor& W, const tensor& b, int stride) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv3x3: invalid stride " + std::to_string(stride));
  if (x.rank() != 3 || W.rank() != 4 || W.dim(2) != 3 || W.dim(3) != 3 || W.dim(1) != x.dim(0) || b.rank() != 1 ||
      b.size() != W.dim(0)) {
    throw std::invalid_argument("conv3x3: shape mismatch x" + shape_string(x.shape()) + " W" + shape_string(W.shape()) +
                                " b" + shape_string(b.shape()));
  }
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = W.dim(0);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t oh = conv_out(h, stride), ow = conv_out(w, stride);
  tensor out({cout, oh, ow});
  const double* xd = x.data().data();
  const double* wd = W.data().data();
  for (std::size_t co = 0; co < cout; ++co) {
    double* oplane = out.data().data() + co * oh * ow;
    std::fill_n(oplane, oh * ow, b[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* iplane = xd + ci * h * w;
      const double* k = wd + (co * cin + ci) * 9;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const auto [ylo, yhi] = tap_range(h, oh, ky, s);
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const double wv = k[ky * 3 + kx];
          if (wv == 0.0) continue;
          const auto [xlo, xhi] = tap_range(w, ow, kx, s);
          if (xlo >= xhi) continue;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            // first tap of the row sits at column xlo*s + kx - 1 >= 0
            const double* src = iplane + (oy * s + ky - 1) * w + xlo * s + kx - 1;
            double* orow = oplane + oy * ow + xlo;
            const std::size_t n = xhi - xlo;
            if (s == 1) {
              for (std::size_t j = 0; j < n; ++j) orow[j] += wv * src[j];
            } else {
              for (std::size_t j = 0; j < n; ++j) orow[j] += wv * src[2 * j];
            }
          }
        }
      }
    }
  }
  return out;
}

/// Gradients of conv3x3. Any of the output pointers may be null.
inline void conv3x3_backward(const tensor& x, const tensor& W, int stride, const tensor& g, tensor* gx, tensor* gW,
                             tensor* gb) {
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = W.dim(0);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t oh = g.dim(1), ow = g.dim(2);
  const double* xd = x.data().data();
  const double* wd = W.data().data();
  for (std::size_t co = 0; co < cout; ++co) {
    const double* gplane = g.data().data() + co * oh * ow;
    if (gb) {
      double sum = 0.0;
      for (std::size_t i = 0; i < oh * ow; ++i) sum += gplane[i];
      (*gb)[co] += sum;
    }
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* iplane = xd + ci * h * w;
      double* giplane = gx ? gx->data().data() + ci * h * w : nullptr;
      const double* k = wd + (co * cin + ci) * 9;
      double* gk = gW ? gW->data().data() + (co * cin + ci) * 9 : nullptr;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const auto [ylo, yhi] = tap_range(h, oh, ky, s);
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const double wv = k[ky * 3 + kx];
          const auto [xlo, xhi] = tap_range(w, ow, kx, s);
          double acc = 0.0;
          if (xlo >= xhi) continue;
          const std::size_t n = xhi - xlo;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t off = (oy * s + ky - 1) * w + xlo * s + kx - 1;
            const double* grow = gplane + oy * ow + xlo;
            if (gk) {
              const double* src = iplane + off;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * src[j * s];
            }
            if (giplane) {
              double* dst = giplane + off;
              for (std::size_t j = 0; j < n; ++j) dst[j * s] += wv * grow[j];
            }
          }
          if (gk) gk[ky * 3 + kx] += acc;
        }
      }
    }
  }
}

inline tensor relu(tensor x) {
  for (auto& v : x.data()) v = v > 0.0 ? v : 0.0;
  return x;
}

/// y = x W^T + b for x[n,in] (or a single row x[in]).
inline tensor linear(const tensor& x, const tensor& W, const tensor& b) {
  const bool vec = x.rank() == 1;
  const std::size_t n = vec ? 1 : x.dim(0);
  const std::size_t in = vec ? x.size() : x.dim(1);
  if (W.rank() != 2 || W.dim(1) != in || b.rank() != 1 || b.size() != W.dim(0) || (!vec && x.rank() != 2)) {
    throw std::invalid_argument("linear: shape mismatch x" + shape_string(x.shape()) + " W" + shape_string(W.shape()) +
                                " b" + shape_string(b.shape()));
  }
  const std::size_t out = W.dim(0);
  tensor y(vec ? tensor::shape_type{out} : tensor::shape_type{n, out});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * W[o * in + i];
      y[r * out + o] = acc;
    }
  }
  return y;
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Recorded ops.

inline var linear(tape& t, var x, var W, var b) {
  tensor y = kernel::linear(t.value(x), t.value(W), t.value(b));
  return t.record(std::move(y), {x, W, b}, [x, W, b](tape& tp, const tensor& g) {
    const tensor& xv = tp.value(x);
    const tensor& Wv = tp.value(W);
    const std::size_t out = Wv.dim(0), in = Wv.dim(1), n = xv.size() / in;
    if (tp.requires_grad(x)) {
      auto& gx = tp.grad(x);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out; ++o)
          for (std::size_t i = 0; i < in; ++i) gx[r * in + i] += g[r * out + o] * Wv[o * in + i];
    }
    if (tp.requires_grad(W)) {
      auto& gW = tp.grad(W);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out; ++o)
          for (std::size_t i = 0; i < in; ++i) gW[o * in + i] += g[r * out + o] * xv[r * in + i];
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out; ++o) gb[o] += g[r * out + o];
    }
  });
}

inline var conv3x3(tape& t, var x, var W, var b, int stride) {
  tensor y = kernel::conv3x3(t.value(x), t.value(W), t.value(b), stride);
  return t.record(std::move(y), {x, W, b}, [x, W, b, stride](tape& tp, const tensor& g) {
    kernel::conv3x3_backward(tp.value(x), tp.value(W), stride, g, tp.requires_grad(x) ? &tp.grad(x) : nullptr,
                             tp.requires_grad(W) ? &tp.grad(W) : nullptr, tp.requires_grad(b) ? &tp.grad(b) : nullptr);
  });
}

/// max(0, x); the subgradient at 0 is 0.
inline var relu(tape& t, var x) {
  return t.record(kernel::relu(t.value(x)), {x}, [x](tape& tp, const tensor& g) {
    const tensor& xv = tp.value(x);
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

/// Mean over pixels of -log softmax(logits)[target]. logits[2,H,W], target H x W.
inline var cross_entropy_2class(tape& t, var logits, const binary_mask& target) {
  const tensor& l = t.value(logits);
  if (l.rank() != 3 || l.dim(0) != 2) throw std::invalid_argument("cross_entropy_2class: expected [2,H,W] logits");
  if (l.dim(1) != target.height() || l.dim(2) != target.width()) {
    throw std::invalid_argument("cross_entropy_2class: size mismatch logits" + shape_string(l.shape()) + " mask " +
                                std::to_string(target.height()) + "x" + std::to_string(target.width()));
  }
  const std::size_t n = target.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = l[i], b = l[n + i];
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    sum += lse - (target[i] ? b : a);
  }
  return t.record(tensor({1}, {sum / static_cast<double>(n)}), {logits}, [logits, target](tape& tp, const tensor& g) {
    const tensor& lv = tp.value(logits);
    auto& gl = tp.grad(logits);
    const std::size_t n = target.size();
    const double scale = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = lv[i], b = lv[n + i];
      const double m = std::max(a, b);
      const double ea = std::exp(a - m), eb = std::exp(b - m);
      const double p1 = eb / (ea + eb);
      const double p0 = 1.0 - p1;
      gl[i] += scale * (p0 - (target[i] ? 0.0 : 1.0));
      gl[n + i] += scale * (p1 - (target[i] ? 1.0 : 0.0));
    }
  });
}

inline var add(tape& t, var a, var b) {
  const tensor& av = t.value(a);
  const tensor& bv = t.value(b);
  if (av.shape() != bv.shape()) throw std::invalid_argument("add: shape mismatch");
  tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return t.record(std::move(y), {a, b}, [a, b](tape& tp, const tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline var sub(tape& t, var a, var b) {
  const tensor& av = t.value(a);
  const tensor& bv = t.value(b);
  if (av.shape() != bv.shape()) throw std::invalid_argument("sub: shape mismatch");
  tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  return t.record(std::move(y), {a, b}, [a, b](tape& tp, const tensor& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline var scale(tape& t, var a, double s) {
  tensor y = t.value(a);
  for (auto& v : y.data()) v *= s;
  return t.record(std::move(y), {a}, [a, s](tape& tp, const tensor& g) {
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline var add_scalar(tape& t, var a, double s) {
  tensor y = t.value(a);
  for (auto& v : y.data()) v += s;
  return t.record(std::move(y), {a}, [a](tape& tp, const tensor& g) { tp.accumulate(a, g); });
}

/// Sum of scalar vars (left to right).
inline var sum(tape& t, std::span<const var> terms) {
  if (terms.empty()) throw std::invalid_argument("sum: no terms");
  var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(t, acc, terms[i]);
  return acc;
}

/// Value copy that blocks gradient flow.
inline var detach(tape& t, var a) { return t.constant(t.value(a)); }

inline var concat_vectors(tape& t, var a, var b) {
  const tensor& av = t.value(a);
  const tensor& bv = t.value(b);
  if (av.rank() != 1 || bv.rank() != 1) throw std::invalid_argument("concat_vectors: expected vectors");
  tensor y({av.size() + bv.size()});
  std::copy(av.data().begin(), av.data().end(), y.data().begin());
  std::copy(bv.data().begin(), bv.data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t na = av.size();
  return t.record(std::move(y), {a, b}, [a, b, na](tape& tp, const tensor& g) {
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

/// Channel concatenation of [c_k,h,w] inputs, in order.
inline var concat_channels(tape& t, std::span<const var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  tensor y = t.value(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) y = mianet::concat_channels(y, t.value(parts[i]));
  std::vector<var> ins(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [ins](tape& tp, const tensor& g) {
    std::size_t off = 0;
    for (auto in : ins) {
      const std::size_t n = tp.value(in).size();
      if (tp.requires_grad(in)) {
        auto& gi = tp.grad(in);
        for (std::size_t i = 0; i < n; ++i) gi[i] += g[off + i];
      }
      off += n;
    }
  });
}

/// Tiles v[c] to [c,h,w]; the gradient sums over space.
inline var expand_vector(tape& t, var v, std::size_t h, std::size_t w) {
  return t.record(mianet::expand_vector(t.value(v), h, w), {v}, [v, h, w](tape& tp, const tensor& g) {
    auto& gv = tp.grad(v);
    const std::size_t hw = h * w;
    for (std::size_t c = 0; c < gv.size(); ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += g[c * hw + i];
      gv[c] += s;
    }
  });
}

inline var resize_bilinear(tape& t, var x, std::size_t h, std::size_t w) {
  const tensor& xv = t.value(x);
  const auto p = detail::as_planes(xv, "resize_bilinear");
  if (p.h == h && p.w == w) return x;
  const std::size_t in_h = p.h, in_w = p.w;
  return t.record(mianet::resize_bilinear(xv, h, w), {x}, [x, in_h, in_w](tape& tp, const tensor& g) {
    tp.accumulate(x, mianet::resize_bilinear_backward(g, in_h, in_w));
  });
}

/// [c,h,w] -> [h*w, c].
inline var pixel_rows(tape& t, var f) {
  const tensor& fv = t.value(f);
  const std::size_t c = fv.dim(0), hw = fv.dim(1) * fv.dim(2);
  return t.record(mianet::pixel_rows(fv), {f}, [f, c, hw](tape& tp, const tensor& g) {
    auto& gf = tp.grad(f);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) gf[ch * hw + i] += g[i * c + ch];
  });
}

/// Row-wise concatenation of [n_k, c] matrices.
inline var concat_rows(tape& t, std::span<const var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t c = t.value(parts[0]).dim(1);
  std::size_t n = 0;
  for (auto p : parts) {
    const tensor& v = t.value(p);
    if (v.rank() != 2 || v.dim(1) != c) throw std::invalid_argument("concat_rows: shape mismatch");
    n += v.dim(0);
  }
  if (parts.size() == 1) return parts[0];
  tensor y({n, c});
  std::size_t off = 0;
  for (auto p : parts) {
    const tensor& v = t.value(p);
    std::copy(v.data().begin(), v.data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  std::vector<var> ins(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [ins](tape& tp, const tensor& g) {
    std::size_t off = 0;
    for (auto in : ins) {
      const std::size_t sz = tp.value(in).size();
      if (tp.requires_grad(in)) {
        auto& gi = tp.grad(in);
        for (std::size_t i = 0; i < sz; ++i) gi[i] += g[off + i];
      }
      off += sz;
    }
  });
}

/// Single row of a [n,c] matrix as a [c] vector.
inline var row(tape& t, var rows, std::size_t index) {
  const tensor& rv = t.value(rows);
  const std::size_t c = rv.dim(1);
  if (index >= rv.dim(0)) throw std::out_of_range("row: index out of range");
  tensor y({c});
  std::copy_n(rv.data().begin() + static_cast<std::ptrdiff_t>(index * c), c, y.data().begin());
  return t.record(std::move(y), {rows}, [rows, index, c](tape& tp, const tensor& g) {
    auto& gr = tp.grad(rows);
    for (std::size_t k = 0; k < c; ++k) gr[index * c + k] += g[k];
  });
}

/// Mean of the selected rows of a [n,c] matrix -> [c].
inline var mean_rows(tape& t, var rows, std::vector<std::size_t> indices) {
  const tensor& rv = t.value(rows);
  const std::size_t c = rv.dim(1);
  if (indices.empty()) throw std::invalid_argument("mean_rows: empty selection");
  tensor y({c});
  for (auto i : indices)
    for (std::size_t k = 0; k < c; ++k) y[k] += rv[i * c + k];
  const double inv = 1.0 / static_cast<double>(indices.size());
  for (auto& v : y.data()) v *= inv;
  return t.record(std::move(y), {rows}, [rows, idx = std::move(indices), c, inv](tape& tp, const tensor& g) {
    auto& gr = tp.grad(rows);
    for (auto i : idx)
      for (std::size_t k = 0; k < c; ++k) gr[i * c + k] += inv * g[k];
  });
}

/// Euclidean distance between two vectors -> [1]. The gradient at a == b is taken as 0.
inline var l2_distance(tape& t, var a, var b) {
  const double d = mianet::l2_distance(t.value(a), t.value(b));
  return t.record(tensor({1}, {d}), {a, b}, [a, b, d](tape& tp, const tensor& g) {
    if (d == 0.0) return;
    const tensor& av = tp.value(a);
    const tensor& bv = tp.value(b);
    const double s = g[0] / d;
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += s * (av[i] - bv[i]);
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= s * (av[i] - bv[i]);
    }
  });
}

/// 1 - cos(a, b) -> [1].
inline var cosine_distance(tape& t, var a, var b) {
  const tensor& av = t.value(a);
  const tensor& bv = t.value(b);
  const double d = mianet::cosine_distance(av.data(), bv.data());
  return t.record(tensor({1}, {d}), {a, b}, [a, b](tape& tp, const tensor& g) {
    const tensor& av = tp.value(a);
    const tensor& bv = tp.value(b);
    double dot = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
      dot += av[i] * bv[i];
      saa += av[i] * av[i];
      sbb += bv[i] * bv[i];
    }
    const double na = std::sqrt(saa), nb = std::sqrt(sbb);
    const double den = na * nb + cosine_epsilon;
    // d/da [dot / (|a||b| + eps)] = b/den - dot * |b| a / (|a| den^2)
    auto grad_of = [&](const tensor& x, const tensor& y, double nx, double ny, tensor& gx) {
      if (nx == 0.0) return;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double dcos = y[i] / den - dot * ny * x[i] / (nx * den * den);
        gx[i] -= g[0] * dcos;
      }
    };
    if (tp.requires_grad(a)) grad_of(av, bv, na, nb, tp.grad(a));
    if (tp.requires_grad(b)) grad_of(bv, av, nb, na, tp.grad(b));
  });
}

// ---------------------------------------------------------------------------
// Optimizer.

struct sgd_config {
  double learning_rate = 5e-3;
  std::size_t batch_size = 4;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// Momentum SGD: v <- momentum*v + g (+ wd*w); w <- w - lr*v; then gradients are zeroed.
class sgd {
 public:
  explicit sgd(sgd_config cfg) : cfg_(cfg) {
    if (!(cfg_.learning_rate >= 0.0)) throw std::invalid_argument("sgd: learning rate must be non-negative");
  }

  const sgd_config& config() const noexcept { return cfg_; }

  void step(std::span<parameter* const> params) {
    for (parameter* p : params) {
      auto [it, fresh] = velocity_.try_emplace(p, p->value.shape());
      tensor& v = it->second;
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double g = p->gradient[i] + cfg_.weight_decay * p->value[i];
        v[i] = cfg_.momentum * v[i] + g;
        p->value[i] -= cfg_.learning_rate * v[i];
      }
      p->zero_grad();
    }
  }

 private:
  sgd_config cfg_;
  std::unordered_map<const parameter*, tensor> velocity_;
};

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct grad_check_report {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // elements that only agree at the refined step
  std::vector<std::string> failures;  // offending parameter names
  bool passed() const noexcept { return failures.empty(); }
};

/// Compares the tape's gradients with central differences for every parameter
/// element (a seeded subsample of `max_elements` for larger parameters).
/// Relative error is |a - n| / max(|a|, |n|, abs_floor). An element whose
/// step-h difference straddles a ReLU kink is retried once with h / 100.
inline grad_check_report grad_check(std::span<parameter* const> params, const std::function<var(tape&)>& fn,
                                    double h = 1e-5, double rtol = 1e-4, std::size_t max_elements = 10000,
                                    std::uint64_t seed = 0, double abs_floor = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    tape t;
    t.backward(fn(t));
  }
  auto eval = [&fn]() {
    tape t;
    return t.value(fn(t))[0];
  };
  grad_check_report report;
  rng gen(seed);
  for (auto* p : params) {
    const tensor analytic = p->gradient;
    std::vector<std::size_t> idx(p->value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > max_elements) {
      for (std::size_t i = 0; i < max_elements; ++i) std::swap(idx[i], idx[i + gen.index(idx.size() - i)]);
      idx.resize(max_elements);
    }
    bool bad = false;
    for (auto i : idx) {
      const double a = analytic[i];
      auto error_at = [&](double step) {
        const double saved = p->value[i];
        p->value[i] = saved + step;
        const double up = eval();
        p->value[i] = saved - step;
        const double down = eval();
        p->value[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        return std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), abs_floor});
      };
      double rel = error_at(h);
      if (rel > rtol) {
        const double fine = error_at(h / 100.0);
        if (fine <= rtol) {
          ++report.kinks;
          rel = fine;
        }
      }
      report.max_relative_error = std::max(report.max_relative_error, rel);
      ++report.checked;
      if (rel > rtol) bad = true;
    }
    if (bad) report.failures.push_back(p->name);
    p->zero_grad();
  }
  return report;
}

}  // namespace mianet::ad
