#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mianet {

/// Dense row-major array of doubles with rank 1 to 4.
class tensor {
 public:
  using shape_type = std::vector<std::size_t>;

  tensor() = default;

  explicit tensor(shape_type shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

  tensor(shape_type shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
      throw std::invalid_argument("tensor: data length does not match shape");
    }
  }

  const shape_type& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& operator()(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double operator()(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  tensor reshaped(shape_type shape) const& { return tensor(std::move(shape), data_); }
  tensor reshaped(shape_type shape) && { return tensor(std::move(shape), std::move(data_)); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const tensor&, const tensor&) = default;

 private:
  static std::size_t checked_size(const shape_type& shape) {
    if (shape.empty() || shape.size() > 4) {
      throw std::invalid_argument("tensor: rank must be between 1 and 4");
    }
    std::size_t n = 1;
    for (auto d : shape) {
      if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension");
      n *= d;
    }
    return n;
  }

  shape_type shape_;
  std::vector<double> data_;
};

inline std::string shape_string(const tensor::shape_type& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Binary segmentation mask; every element is 0 or 1.
class binary_mask {
 public:
  binary_mask() = default;

  binary_mask(std::size_t height, std::size_t width, std::uint8_t fill = 0)
      : height_(height), width_(width), data_(height * width, fill) {
    if (height == 0 || width == 0) throw std::invalid_argument("binary_mask: zero-sized mask");
    if (fill > 1) throw std::invalid_argument("binary_mask: values must be 0 or 1");
  }

  binary_mask(std::size_t height, std::size_t width, std::vector<std::uint8_t> data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (height == 0 || width == 0) throw std::invalid_argument("binary_mask: zero-sized mask");
    if (data_.size() != height * width) throw std::invalid_argument("binary_mask: data length mismatch");
    for (auto v : data_) {
      if (v > 1) throw std::invalid_argument("binary_mask: values must be 0 or 1");
    }
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::span<const std::uint8_t> data() const noexcept { return data_; }

  std::uint8_t operator()(std::size_t y, std::size_t x) const { return data_[y * width_ + x]; }
  std::uint8_t operator[](std::size_t i) const { return data_[i]; }
  void set(std::size_t y, std::size_t x, bool v) { data_[y * width_ + x] = v ? 1 : 0; }

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
  }

  /// Mask as a [h,w] tensor of 0.0 / 1.0.
  tensor to_tensor() const {
    tensor t({height_, width_});
    for (std::size_t i = 0; i < data_.size(); ++i) t[i] = data_[i];
    return t;
  }

  /// Threshold a [h,w] tensor: values >= threshold become 1.
  static binary_mask threshold(const tensor& t, double threshold = 0.5) {
    if (t.rank() != 2) throw std::invalid_argument("binary_mask::threshold: expected a [h,w] tensor");
    std::vector<std::uint8_t> d(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) d[i] = t[i] >= threshold ? 1 : 0;
    return binary_mask(t.dim(0), t.dim(1), std::move(d));
  }

  friend bool operator==(const binary_mask&, const binary_mask&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> data_;
};

inline constexpr double minmax_epsilon = 1e-7;
inline constexpr double cosine_epsilon = 1e-8;

namespace detail {

// Views a rank-2 [h,w] or rank-3 [c,h,w] tensor as planes.
struct planes {
  std::size_t c, h, w;
};

inline planes as_planes(const tensor& t, const char* op) {
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
  throw std::invalid_argument(std::string(op) + ": expected a [c,h,w] or [h,w] tensor");
}

inline tensor::shape_type like(const tensor& t, std::size_t h, std::size_t w) {
  if (t.rank() == 2) return {h, w};
  return {t.dim(0), h, w};
}

// One axis of an align-corners-false bilinear resize: out index -> (i0, i1, frac).
struct lerp_axis {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;

  lerp_axis(std::size_t in, std::size_t out) : lo(out), hi(out), frac(out) {
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = scale * (static_cast<double>(o) + 0.5) - 0.5;
      if (src < 0.0) src = 0.0;
      auto i0 = static_cast<std::size_t>(src);
      if (i0 > in - 1) i0 = in - 1;
      lo[o] = i0;
      hi[o] = i0 + 1 < in ? i0 + 1 : i0;
      frac[o] = src - static_cast<double>(i0);
    }
  }
};

inline void check_target(std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("invalid target size");
}

}  // namespace detail

/// Bilinear resize with the align-corners-false (pixel-center) convention.
/// Accepts [c,h,w] or [h,w]; channel count is preserved.
inline tensor resize_bilinear(const tensor& t, std::size_t out_h, std::size_t out_w) {
  detail::check_target(out_h, out_w);
  const auto [c, h, w] = detail::as_planes(t, "resize_bilinear");
  if (h == out_h && w == out_w) return t;
  const detail::lerp_axis ay(h, out_h), ax(w, out_w);
  tensor out(detail::like(t, out_h, out_w));
  const double* src = t.data().data();
  double* dst = out.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = src + ch * h * w;
    double* oplane = dst + ch * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const double* r0 = plane + ay.lo[oy] * w;
      const double* r1 = plane + ay.hi[oy] * w;
      const double fy = ay.frac[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t x0 = ax.lo[ox], x1 = ax.hi[ox];
        const double fx = ax.frac[ox];
        // lerp form keeps constant inputs exact
        const double top = r0[x0] + fx * (r0[x1] - r0[x0]);
        const double bottom = r1[x0] + fx * (r1[x1] - r1[x0]);
        oplane[oy * out_w + ox] = top + fy * (bottom - top);
      }
    }
  }
  return out;
}

/// Adjoint of resize_bilinear: maps a gradient at the output size back to (in_h, in_w).
inline tensor resize_bilinear_backward(const tensor& grad_out, std::size_t in_h, std::size_t in_w) {
  const auto [c, out_h, out_w] = detail::as_planes(grad_out, "resize_bilinear_backward");
  if (in_h == out_h && in_w == out_w) return grad_out;
  const detail::lerp_axis ay(in_h, out_h), ax(in_w, out_w);
  tensor grad_in(detail::like(grad_out, in_h, in_w));
  const double* g = grad_out.data().data();
  double* gi = grad_in.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* gplane = g + ch * out_h * out_w;
    double* iplane = gi + ch * in_h * in_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      double* r0 = iplane + ay.lo[oy] * in_w;
      double* r1 = iplane + ay.hi[oy] * in_w;
      const double fy = ay.frac[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double v = gplane[oy * out_w + ox];
        const std::size_t x0 = ax.lo[ox], x1 = ax.hi[ox];
        const double fx = ax.frac[ox];
        r0[x0] += v * (1 - fy) * (1 - fx);
        r0[x1] += v * (1 - fy) * fx;
        r1[x0] += v * fy * (1 - fx);
        r1[x1] += v * fy * fx;
      }
    }
  }
  return grad_in;
}

/// Bilinear resize of a mask followed by a 0.5 threshold (ties go to 1).
inline binary_mask resize_mask(const binary_mask& m, std::size_t out_h, std::size_t out_w) {
  detail::check_target(out_h, out_w);
  if (m.height() == out_h && m.width() == out_w) return m;
  return binary_mask::threshold(resize_bilinear(m.to_tensor(), out_h, out_w), 0.5);
}

/// Adaptive average pooling; cell (i,j) averages rows [floor(i*h/oh), ceil((i+1)*h/oh)).
inline tensor average_pool_to(const tensor& t, std::size_t out_h, std::size_t out_w) {
  detail::check_target(out_h, out_w);
  const auto [c, h, w] = detail::as_planes(t, "average_pool_to");
  if (out_h > h || out_w > w) throw std::invalid_argument("pooling cannot upsample");
  tensor out(detail::like(t, out_h, out_w));
  const double* src = t.data().data();
  double* dst = out.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = src + ch * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const std::size_t y0 = oy * h / out_h;
      const std::size_t y1 = ((oy + 1) * h + out_h - 1) / out_h;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t x0 = ox * w / out_w;
        const std::size_t x1 = ((ox + 1) * w + out_w - 1) / out_w;
        double sum = 0.0;
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t x = x0; x < x1; ++x) sum += plane[y * w + x];
        }
        dst[(ch * out_h + oy) * out_w + ox] = sum / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  }
  return out;
}

struct pooled_vector {
  tensor value;                   // [c]
  bool empty_foreground = false;  // mask had no foreground at feature resolution
};

/// Per-channel mean of f[c,h,w] over foreground pixels. The mask is resized to
/// (h,w) first. An empty foreground yields the zero vector and sets the flag.
inline pooled_vector masked_average_pool(const tensor& f, const binary_mask& mask) {
  if (f.rank() != 3) throw std::invalid_argument("masked_average_pool: expected [c,h,w] features");
  const std::size_t c = f.dim(0), h = f.dim(1), w = f.dim(2);
  const binary_mask m = resize_mask(mask, h, w);
  const std::size_t n = m.count();
  pooled_vector result{tensor({c}), n == 0};
  if (n == 0) return result;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = f.data().data() + ch * h * w;
    double sum = 0.0;
    for (std::size_t i = 0; i < h * w; ++i) {
      if (m[i]) sum += plane[i];
    }
    result.value[ch] = sum / static_cast<double>(n);
  }
  return result;
}

/// (t - min) / (max - min + 1e-7).
inline tensor minmax_normalize(const tensor& t) {
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  const double mn = *lo, range = *hi - *lo + minmax_epsilon;
  tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = (t[i] - mn) / range;
  return out;
}

/// Column-wise cosine similarity of a[c,n] and b[c,m] -> [n,m].
inline tensor cosine_similarity_matrix(const tensor& a, const tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("cosine_similarity_matrix: expected [c,n] and [c,m]");
  if (a.dim(0) != b.dim(0)) throw std::invalid_argument("cosine_similarity_matrix: channel count mismatch");
  const std::size_t c = a.dim(0), n = a.dim(1), m = b.dim(1);
  std::vector<double> na(n, 0.0), nb(m, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) na[i] += a(k, i) * a(k, i);
    for (std::size_t j = 0; j < m; ++j) nb[j] += b(k, j) * b(k, j);
  }
  for (auto& v : na) v = std::sqrt(v);
  for (auto& v : nb) v = std::sqrt(v);
  tensor out({n, m});
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      const double ai = a(k, i);
      double* row = out.data().data() + i * m;
      const double* brow = b.data().data() + k * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += ai * brow[j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out(i, j) /= na[i] * nb[j] + cosine_epsilon;
  }
  return out;
}

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("l2_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double l2_distance(const tensor& a, const tensor& b) { return l2_distance(a.data(), b.data()); }

/// 1 - cosine similarity, with the same epsilon guard as cosine_similarity_matrix.
inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_distance: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb) + cosine_epsilon);
}

/// Elementwise product. A [h,w] map broadcasts across the channels of a [c,h,w] tensor.
inline tensor hadamard(const tensor& a, const tensor& b) {
  if (a.shape() == b.shape()) {
    tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
  }
  if (a.rank() == 3 && b.rank() == 2 && a.dim(1) == b.dim(0) && a.dim(2) == b.dim(1)) {
    tensor out(a.shape());
    const std::size_t hw = b.size();
    for (std::size_t ch = 0; ch < a.dim(0); ++ch) {
      for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = a[ch * hw + i] * b[i];
    }
    return out;
  }
  throw std::invalid_argument("hadamard: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

/// Channel concatenation of [c1,h,w] and [c2,h,w]; a's channels come first.
inline tensor concat_channels(const tensor& a, const tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw std::invalid_argument("concat_channels: shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
  tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

/// Tiles v[c] into [c,h,w].
inline tensor expand_vector(const tensor& v, std::size_t h, std::size_t w) {
  if (v.rank() != 1) throw std::invalid_argument("expand_vector: expected a vector");
  detail::check_target(h, w);
  tensor out({v.size(), h, w});
  for (std::size_t ch = 0; ch < v.size(); ++ch) {
    std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(ch * h * w), h * w, v[ch]);
  }
  return out;
}

/// [c,h,w] -> [h*w, c]: one row per pixel, row-major spatial order.
inline tensor pixel_rows(const tensor& f) {
  if (f.rank() != 3) throw std::invalid_argument("pixel_rows: expected [c,h,w]");
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  tensor out({hw, c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) out[i * c + ch] = f[ch * hw + i];
  }
  return out;
}

}  // namespace mianet
