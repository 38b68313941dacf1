#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mianet/autodiff.hpp"
#include "mianet/hpm.hpp"
#include "mianet/tensor.hpp"

// Information fusion head. Per scale, the query
// features, the tiled general prototype and the prior map are concatenated and
// merged by two conv blocks; coarser fused maps are added top-down into finer
// ones before each scale's 2-class head.

namespace mianet::ifm {

/// Inputs for one pyramid scale.
struct scale_inputs {
  ad::var query;      // [c,h_i,w_i]
  ad::var prototype;  // [c,h_i,w_i]
  ad::var prior;      // [1,h_i,w_i]
};

/// Resizes the query to each prior scale, tiles p_gen, and lifts each map to one channel.
inline std::vector<scale_inputs> expand_inputs(ad::tape& t, const tensor& query, ad::var prototype,
                                               const hpm::prior_pyramid& pyramid) {
  if (query.rank() != 3) throw std::invalid_argument("expand_inputs: expected [c,h,w] query features");
  std::vector<scale_inputs> out;
  out.reserve(pyramid.maps.size());
  for (const auto& m : pyramid.maps) {
    const std::size_t h = m.dim(0), w = m.dim(1);
    out.push_back({t.constant(resize_bilinear(query, h, w)), ad::expand_vector(t, prototype, h, w),
                   t.constant(m.reshaped({1, h, w}))});
  }
  return out;
}

struct fusion_stage {
  ad::parameter merge1_weight, merge1_bias, merge2_weight, merge2_bias, head_weight, head_bias;
};

class fusion_block {
 public:
  fusion_block() = default;

  /// `channels` is c; merge inputs are 2c + 1 wide.
  fusion_block(std::size_t channels, std::size_t scales, rng& gen) {
    if (scales == 0) throw std::invalid_argument("fusion_block: at least one scale is required");
    stages_.resize(scales);
    const std::size_t in = 2 * channels + 1;
    for (std::size_t i = 0; i < scales; ++i) {
      auto& s = stages_[i];
      const std::string base = "ifm.scale" + std::to_string(i);
      s.merge1_weight = ad::parameter(base + ".merge1.weight", tensor({channels, in, 3, 3}));
      s.merge1_bias = ad::parameter(base + ".merge1.bias", tensor({channels}));
      s.merge2_weight = ad::parameter(base + ".merge2.weight", tensor({channels, channels, 3, 3}));
      s.merge2_bias = ad::parameter(base + ".merge2.bias", tensor({channels}));
      s.head_weight = ad::parameter(base + ".head.weight", tensor({2, channels, 3, 3}));
      s.head_bias = ad::parameter(base + ".head.bias", tensor({2}));
      ad::init_uniform(s.merge1_weight, in * 9, gen);
      ad::init_uniform(s.merge2_weight, channels * 9, gen);
      ad::init_uniform(s.head_weight, channels * 9, gen);
    }
  }

  fusion_block(const fusion_block&) = delete;
  fusion_block& operator=(const fusion_block&) = delete;
  fusion_block(fusion_block&&) = default;
  fusion_block& operator=(fusion_block&&) = default;

  std::size_t scales() const noexcept { return stages_.size(); }
  std::vector<fusion_stage>& stages() noexcept { return stages_; }

  std::vector<ad::parameter*> parameters() {
    std::vector<ad::parameter*> out;
    for (auto& s : stages_) {
      for (auto* p : {&s.merge1_weight, &s.merge1_bias, &s.merge2_weight, &s.merge2_bias, &s.head_weight, &s.head_bias}) {
        out.push_back(p);
      }
    }
    return out;
  }

 private:
  std::vector<fusion_stage> stages_;
};

struct prediction_set {
  std::vector<ad::var> intermediate;  // [2,h_i,w_i] logits, finest first
  ad::var final;                      // [2,H,W] logits
};

/// Coarse-to-fine fusion; the final logits are the finest head resized to (out_h, out_w).
inline prediction_set fuse_and_predict(ad::tape& t, const std::vector<scale_inputs>& inputs, fusion_block& block,
                                       std::size_t out_h, std::size_t out_w) {
  if (inputs.size() != block.scales()) {
    throw std::invalid_argument("fuse_and_predict: " + std::to_string(inputs.size()) + " scales for a " +
                                std::to_string(block.scales()) + "-scale fusion block");
  }
  const std::size_t n = inputs.size();
  prediction_set out;
  out.intermediate.resize(n);
  ad::var coarser;
  for (std::size_t i = n; i-- > 0;) {
    auto& st = block.stages()[i];
    const std::vector<ad::var> parts{inputs[i].query, inputs[i].prototype, inputs[i].prior};
    ad::var x = ad::concat_channels(t, parts);
    x = ad::relu(t, ad::conv3x3(t, x, t.leaf(st.merge1_weight), t.leaf(st.merge1_bias), 1));
    x = ad::relu(t, ad::conv3x3(t, x, t.leaf(st.merge2_weight), t.leaf(st.merge2_bias), 1));
    if (coarser.valid()) {
      const tensor& xv = t.value(x);
      x = ad::add(t, x, ad::resize_bilinear(t, coarser, xv.dim(1), xv.dim(2)));
    }
    coarser = x;
    out.intermediate[i] = ad::conv3x3(t, x, t.leaf(st.head_weight), t.leaf(st.head_bias), 1);
  }
  out.final = ad::resize_bilinear(t, out.intermediate[0], out_h, out_w);
  return out;
}

struct segmentation_loss_terms {
  ad::var intermediate;  // L_seg1
  ad::var final;         // L_seg2
};

/// L_seg2 on the final logits; L_seg1 a weighted sum (default: mean) over the
/// intermediate heads, each resized to the mask size first.
inline segmentation_loss_terms segmentation_losses(ad::tape& t, const prediction_set& preds, const binary_mask& target,
                                                   const std::vector<double>& weights = {}) {
  const std::size_t n = preds.intermediate.size();
  if (!weights.empty() && weights.size() != n) throw std::invalid_argument("segmentation_losses: weight count mismatch");
  const tensor& fv = t.value(preds.final);
  if (fv.dim(1) != target.height() || fv.dim(2) != target.width()) {
    throw std::invalid_argument("segmentation_losses: size mismatch logits" + shape_string(fv.shape()) + " mask " +
                                std::to_string(target.height()) + "x" + std::to_string(target.width()));
  }
  std::vector<ad::var> terms;
  for (std::size_t i = 0; i < n; ++i) {
    auto up = ad::resize_bilinear(t, preds.intermediate[i], target.height(), target.width());
    const double w = weights.empty() ? 1.0 / static_cast<double>(n) : weights[i];
    terms.push_back(ad::scale(t, ad::cross_entropy_2class(t, up, target), w));
  }
  return {ad::sum(t, terms), ad::cross_entropy_2class(t, preds.final, target)};
}

/// L = L_seg1 + L_seg2 (+ L_triplet when present).
inline ad::var total_loss(ad::tape& t, ad::var seg1, ad::var seg2, std::optional<ad::var> triplet) {
  ad::var l = ad::add(t, seg1, seg2);
  return triplet ? ad::add(t, l, *triplet) : l;
}

/// Argmax of [2,H,W] logits; ties go to background.
inline binary_mask predict_mask(const tensor& logits) {
  const std::size_t h = logits.dim(1), w = logits.dim(2), n = h * w;
  binary_mask m(h, w);
  for (std::size_t i = 0; i < n; ++i) m.set(i / w, i % w, logits[n + i] > logits[i]);
  return m;
}

}  // namespace mianet::ifm
