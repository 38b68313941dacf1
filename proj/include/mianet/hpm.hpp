#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mianet/tensor.hpp"

// Hierarchical prior: a training-free multi-scale activation map of the query,
// computed from high-level support/query features and the support mask.

namespace mianet::hpm {

struct scale {
  std::size_t h = 0, w = 0;
  friend bool operator==(const scale&, const scale&) = default;
};

inline std::vector<scale> paper_scales() { return {{60, 60}, {30, 30}, {15, 15}, {8, 8}}; }

enum class support_reduction { mean, max };

struct config {
  std::vector<scale> scales = paper_scales();
  bool info_channels = true;          // weight query pooling with the current map
  bool refilter_each_stage = false;   // re-apply the resized mask at every stage
  support_reduction reduction = support_reduction::mean;

  /// Scales must be non-empty and strictly decreasing in both dimensions.
  void validate() const {
    if (scales.empty()) throw std::invalid_argument("hpm: at least one scale is required");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (scales[i].h == 0 || scales[i].w == 0) throw std::invalid_argument("hpm: zero-sized scale");
      if (i > 0 && !(scales[i - 1].h > scales[i].h && scales[i - 1].w > scales[i].w)) {
        throw std::invalid_argument("hpm: scales must be strictly decreasing");
      }
    }
  }
};

struct prior_pyramid {
  std::vector<tensor> maps;        // one [h_i,w_i] map per scale, values in [0,1]
  bool empty_foreground = false;   // support mask vanished at feature resolution

  friend bool operator==(const prior_pyramid&, const prior_pyramid&) = default;
};

struct filtered_support {
  tensor features;
  bool empty_foreground = false;
};

/// Zeroes support features outside the (resized) mask.
inline filtered_support filter_support(const tensor& support, const binary_mask& mask) {
  if (support.rank() != 3) throw std::invalid_argument("filter_support: expected [c,h,w] features");
  const binary_mask m = resize_mask(mask, support.dim(1), support.dim(2));
  return {hadamard(support, m.to_tensor()), m.count() == 0};
}

/// Mean (or max) over support pixels of the query-support cosine similarity,
/// min-max normalized to [0,1]. Both inputs are [c,h,w].
inline tensor query_activation(const tensor& support, const tensor& query,
                               support_reduction reduction = support_reduction::mean) {
  if (support.rank() != 3 || support.shape() != query.shape()) {
    throw std::invalid_argument("query_activation: shape mismatch " + shape_string(support.shape()) + " vs " +
                                shape_string(query.shape()));
  }
  const std::size_t h = query.dim(1), w = query.dim(2);
  const tensor q = pixel_rows(query);
  const tensor s = pixel_rows(support);
  const std::size_t n = h * w, c = query.dim(0);
  std::vector<double> nq(n), ns(n);
  for (std::size_t i = 0; i < n; ++i) {
    double a = 0.0, b = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      a += q[i * c + k] * q[i * c + k];
      b += s[i * c + k] * s[i * c + k];
    }
    nq[i] = std::sqrt(a);
    ns[i] = std::sqrt(b);
  }
  tensor activation({h, w});
  for (std::size_t i = 0; i < n; ++i) {
    const double* qi = q.data().data() + i * c;
    double acc = reduction == support_reduction::mean ? 0.0 : -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      const double* sj = s.data().data() + j * c;
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += qi[k] * sj[k];
      const double cos = dot / (nq[i] * ns[j] + cosine_epsilon);
      if (reduction == support_reduction::mean) {
        acc += cos;
      } else if (cos > acc) {
        acc = cos;
      }
    }
    activation[i] = reduction == support_reduction::mean ? acc / static_cast<double>(n) : acc;
  }
  return minmax_normalize(activation);
}

/// Average-pools query ⊗ map down to `next`.
inline tensor weighted_downsample(const tensor& query, const tensor& map, scale next) {
  return average_pool_to(hadamard(query, map), next.h, next.w);
}

inline tensor resize_support(const tensor& support, scale next) { return resize_bilinear(support, next.h, next.w); }

/// Support and query features must already be at scales[0].
inline prior_pyramid build_prior_pyramid(const tensor& support, const tensor& query, const binary_mask& mask,
                                         const config& cfg) {
  cfg.validate();
  const scale first = cfg.scales.front();
  if (support.rank() != 3 || support.dim(1) != first.h || support.dim(2) != first.w ||
      support.shape() != query.shape()) {
    throw std::invalid_argument("build_prior_pyramid: features must be [c," + std::to_string(first.h) + "," +
                                std::to_string(first.w) + "], got " + shape_string(support.shape()) + " and " +
                                shape_string(query.shape()));
  }
  prior_pyramid out;
  auto filtered = filter_support(support, mask);
  out.empty_foreground = filtered.empty_foreground;
  tensor s = std::move(filtered.features);
  tensor q = query;
  for (std::size_t i = 0; i < cfg.scales.size(); ++i) {
    tensor m = query_activation(s, q, cfg.reduction);
    if (i + 1 < cfg.scales.size()) {
      const scale next = cfg.scales[i + 1];
      q = cfg.info_channels ? weighted_downsample(q, m, next) : average_pool_to(q, next.h, next.w);
      s = resize_support(s, next);
      if (cfg.refilter_each_stage) s = filter_support(s, mask).features;
    }
    out.maps.push_back(std::move(m));
  }
  return out;
}

/// All-zero pyramid, used when the prior is switched off.
inline prior_pyramid zero_pyramid(const std::vector<scale>& scales) {
  prior_pyramid p;
  for (auto s : scales) p.maps.emplace_back(tensor::shape_type{s.h, s.w});
  return p;
}

}  // namespace mianet::hpm
