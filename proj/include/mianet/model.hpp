#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mianet/autodiff.hpp"
#include "mianet/episodes.hpp"
#include "mianet/gim.hpp"
#include "mianet/hpm.hpp"
#include "mianet/ifm.hpp"
#include "mianet/random.hpp"
#include "mianet/tensor.hpp"

namespace mianet {

inline std::vector<hpm::scale> desk_scales() { return {{24, 24}, {12, 12}, {6, 6}, {3, 3}}; }

struct model_config {
  std::vector<hpm::scale> scales = desk_scales();
  std::size_t channels = 32;        // c, mid-level feature width
  std::size_t high_channels = 32;   // c', high-level feature width
  std::size_t embedding_dim = 16;   // d
  double margin = 0.5;
  bool use_hpm = true;
  bool use_gim = true;
  bool info_channels = true;
  bool use_triplet = true;
  bool use_word_embeddings = true;
  bool stop_gradient_mined = false;
  bool refilter_each_stage = false;
  gim::distance_metric metric = gim::distance_metric::euclidean;
  hpm::support_reduction reduction = hpm::support_reduction::mean;
  std::vector<double> seg1_weights;  // empty: equal weights
  std::uint64_t init_seed = 1;

  hpm::config prior_config() const { return {scales, info_channels, refilter_each_stage, reduction}; }
  bool triplet_active() const { return use_gim && use_triplet; }
};

struct forward_result {
  ad::var logits;                           // [2,H,W]
  std::optional<ad::var> seg1, seg2, triplet, total;
  hpm::prior_pyramid pyramid;
  bool triplet_skipped = false;
};

/// Trainable part of the network. The encoder is frozen and lives outside.
/// Not copyable or movable: optimizers key state by parameter address.
class model {
 public:
  explicit model(model_config cfg) : cfg_(std::move(cfg)) {
    cfg_.prior_config().validate();
    if (cfg_.channels == 0 || cfg_.high_channels == 0) throw std::invalid_argument("model: channel widths must be positive");
    if (!(cfg_.margin > 0.0)) throw std::invalid_argument("model: margin must be positive");
    rng gen(cfg_.init_seed);
    fusion_ = ifm::fusion_block(cfg_.channels, cfg_.scales.size(), gen);
    if (cfg_.use_gim) {
      const std::size_t in = cfg_.use_word_embeddings ? cfg_.embedding_dim + cfg_.channels : cfg_.channels;
      gig_ = gim::gig_network(in, cfg_.channels, gen);
    }
    if (cfg_.triplet_active()) lfg_ = gim::lfg_network(cfg_.channels, gen);
  }

  model(const model&) = delete;
  model& operator=(const model&) = delete;

  const model_config& config() const noexcept { return cfg_; }

  std::vector<ad::parameter*> parameters() {
    std::vector<ad::parameter*> out = fusion_.parameters();
    if (cfg_.use_gim) {
      for (auto* p : gig_.parameters()) out.push_back(p);
    }
    if (cfg_.triplet_active()) {
      for (auto* p : lfg_.parameters()) out.push_back(p);
    }
    return out;
  }

  gim::gig_network& gig() { return gig_; }
  gim::lfg_network& lfg() { return lfg_; }
  ifm::fusion_block& fusion() { return fusion_; }

  /// Priors for every support shot against the query.
  std::vector<hpm::prior_pyramid> shot_pyramids(const episodes::episode& ep) const {
    std::vector<hpm::prior_pyramid> out;
    const auto first = cfg_.scales.front();
    const tensor q = resize_bilinear(ep.query.high, first.h, first.w);
    for (const auto& shot : ep.support) {
      if (!cfg_.use_hpm) {
        out.push_back(hpm::zero_pyramid(cfg_.scales));
        continue;
      }
      const tensor s = resize_bilinear(shot.features.high, first.h, first.w);
      out.push_back(hpm::build_prior_pyramid(s, q, shot.mask, cfg_.prior_config()));
    }
    return out;
  }

  /// Full forward pass. Losses are recorded only if the query mask is available.
  forward_result forward(ad::tape& t, const episodes::episode& ep) {
    if (ep.support.empty()) throw std::invalid_argument("forward: episode has no support shots");
    check_features(ep);

    const auto pyramids = shot_pyramids(ep);
    std::vector<tensor> prototypes;
    for (const auto& shot : ep.support) prototypes.push_back(gim::support_prototype(shot.features.mid, shot.mask).value);

    // region rows per shot (only when the triplet term is live, i.e. training)
    const bool with_triplet = cfg_.triplet_active() && ep.query_mask_available;
    std::vector<ad::var> shot_rows;
    std::vector<tensor> row_values;
    gim::region_partition partition;
    if (with_triplet) {
      std::size_t offset = 0;
      for (const auto& shot : ep.support) {
        auto reg = gim::region_features(t, t.constant(shot.features.mid), lfg_);
        const std::size_t n = reg.grid.h * reg.grid.w;
        const auto part = gim::partition_regions(n, shot.mask, reg.grid);
        for (auto i : part.foreground) partition.foreground.push_back(i + offset);
        for (auto i : part.background) partition.background.push_back(i + offset);
        offset += n;
        row_values.push_back(t.value(reg.rows));
        shot_rows.push_back(reg.rows);
      }
    } else {
      row_values.assign(ep.support.size(), tensor({1, 1}));
    }
    auto agg = episodes::kshot_aggregate(pyramids, prototypes, row_values);

    forward_result res;
    res.pyramid = agg.pyramid;
    const ad::var p = t.constant(agg.prototype);
    ad::var p_gen = p;
    if (cfg_.use_gim) {
      std::optional<ad::var> word;
      if (cfg_.use_word_embeddings) {
        if (ep.word.size() != cfg_.embedding_dim || ep.word.rank() != 1) {
          throw std::invalid_argument("forward: class word vector must have length " + std::to_string(cfg_.embedding_dim));
        }
        word = t.constant(ep.word);
      }
      p_gen = gim::general_prototype(t, word, p, gig_);
    }

    const auto inputs = ifm::expand_inputs(t, ep.query.mid, p_gen, agg.pyramid);
    const auto preds = ifm::fuse_and_predict(t, inputs, fusion_, ep.query_mask.height(), ep.query_mask.width());
    res.logits = preds.final;

    if (with_triplet) {
      const ad::var rows = shot_rows.size() == 1 ? shot_rows[0] : ad::concat_rows(t, shot_rows);
      const tensor& rv = t.value(rows);
      const auto pos = gim::hardest_positive(t.value(p_gen), rv, partition.foreground, cfg_.metric);
      if (pos && !partition.background.empty()) {
        ad::var positive = ad::row(t, rows, *pos);
        ad::var negative = ad::mean_rows(t, rows, partition.background);
        if (cfg_.stop_gradient_mined) {
          positive = ad::detach(t, positive);
          negative = ad::detach(t, negative);
        }
        res.triplet = gim::triplet_loss(t, p_gen, positive, negative, cfg_.margin, cfg_.metric);
      } else {
        res.triplet_skipped = true;
      }
    }

    if (ep.query_mask_available) {
      const auto seg = ifm::segmentation_losses(t, preds, ep.query_mask, cfg_.seg1_weights);
      res.seg1 = seg.intermediate;
      res.seg2 = seg.final;
      res.total = ifm::total_loss(t, seg.intermediate, seg.final, res.triplet);
    }
    return res;
  }

  /// Inference: argmax mask at query resolution. Does not read the query mask
  /// beyond its size, and does not touch parameter gradients.
  binary_mask predict(const episodes::episode& ep) {
    episodes::episode test = ep;
    test.query_mask_available = false;
    ad::tape t;
    const auto res = forward(t, test);
    return ifm::predict_mask(t.value(res.logits));
  }

 private:
  void check_features(const episodes::episode& ep) const {
    const auto& q = ep.query;
    if (q.mid.rank() != 3 || q.mid.dim(0) != cfg_.channels) {
      throw std::invalid_argument("forward: mid features must have " + std::to_string(cfg_.channels) + " channels, got " +
                                  shape_string(q.mid.shape()));
    }
    if (q.high.rank() != 3 || q.high.dim(0) != cfg_.high_channels) {
      throw std::invalid_argument("forward: high features must have " + std::to_string(cfg_.high_channels) +
                                  " channels, got " + shape_string(q.high.shape()));
    }
    for (const auto& s : ep.support) {
      if (s.features.mid.shape() != q.mid.shape() || s.features.high.shape() != q.high.shape()) {
        throw std::invalid_argument("forward: support and query feature shapes differ");
      }
    }
  }

  model_config cfg_;
  ifm::fusion_block fusion_;
  gim::gig_network gig_;
  gim::lfg_network lfg_;
};

}  // namespace mianet
