#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mianet/autodiff.hpp"
#include "mianet/model.hpp"
#include "mianet/protocol.hpp"

namespace mianet {

struct loss_row {
  std::size_t step = 0;
  double seg1 = 0.0, seg2 = 0.0, triplet = 0.0, total = 0.0;
  std::size_t triplets_skipped = 0;
};

/// Raised when a loss turns non-finite; `dump` describes the offending episode.
class divergence_error : public std::runtime_error {
 public:
  divergence_error(const std::string& what, std::string dump) : std::runtime_error(what), dump_(std::move(dump)) {}
  const std::string& dump() const noexcept { return dump_; }

 private:
  std::string dump_;
};

/// Supplies the episode for (step, slot); slot < batch size.
using episode_stream = std::function<episodes::episode(std::size_t step, std::size_t slot)>;

/// Accumulates gradients of total/B over B episodes, then takes one SGD step.
/// Returns one row per step with batch-mean loss terms.
inline std::vector<loss_row> train(model& net, ad::sgd& opt, const episode_stream& next_episode, std::size_t steps,
                                   const std::function<void(const loss_row&)>& on_step = {}) {
  const std::size_t batch = opt.config().batch_size;
  if (batch == 0) throw std::invalid_argument("train: batch size must be positive");
  auto params = net.parameters();
  for (auto* p : params) p->zero_grad();
  std::vector<loss_row> log;
  for (std::size_t step = 0; step < steps; ++step) {
    loss_row row;
    row.step = step + 1;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto ep = next_episode(step, b);
      ad::tape t;
      const auto res = net.forward(t, ep);
      if (!res.total) throw std::logic_error("train: episode without a query mask");
      const double seg1 = t.value(*res.seg1)[0], seg2 = t.value(*res.seg2)[0];
      const double trip = res.triplet ? t.value(*res.triplet)[0] : 0.0;
      const double total = t.value(*res.total)[0];
      if (!std::isfinite(total)) {
        std::ostringstream d;
        d.precision(17);
        d << "step " << row.step << " slot " << b << " class '" << ep.class_name << "' query " << ep.query_id
          << " support";
        for (const auto& s : ep.support) d << " " << s.image_id;
        d << "\nL_seg1 " << seg1 << "\nL_seg2 " << seg2 << "\nL_triplet " << trip << "\ntotal " << total << "\n";
        for (const auto* p : params) d << p->name << " finite=" << (p->value.all_finite() ? 1 : 0) << "\n";
        throw divergence_error("non-finite loss at step " + std::to_string(row.step), d.str());
      }
      row.seg1 += seg1 / static_cast<double>(batch);
      row.seg2 += seg2 / static_cast<double>(batch);
      row.triplet += trip / static_cast<double>(batch);
      row.total += total / static_cast<double>(batch);
      row.triplets_skipped += res.triplet_skipped ? 1 : 0;
      t.backward(ad::scale(t, *res.total, 1.0 / static_cast<double>(batch)));
    }
    opt.step(params);
    if (on_step) on_step(row);
    log.push_back(row);
  }
  return log;
}

/// Random episodes from the training classes of a split.
inline episode_stream random_episodes(const episode_source& src, const episodes::fold_split& split, std::size_t shots,
                                      std::uint64_t seed) {
  auto gen = std::make_shared<rng>(seed);
  return [&src, &split, shots, gen](std::size_t, std::size_t) {
    return src.resolve(episodes::sample_episode_ref(*src.data, split.train_classes, shots, *gen));
  };
}

/// Cycles through a fixed list of episodes.
inline episode_stream cycled_episodes(const std::vector<episodes::episode>& pool, std::size_t batch) {
  if (pool.empty()) throw std::invalid_argument("cycled_episodes: empty pool");
  return [&pool, batch](std::size_t step, std::size_t slot) { return pool[(step * batch + slot) % pool.size()]; };
}

inline std::string loss_log_csv(const std::vector<loss_row>& log) {
  std::string out = "step,L_seg1,L_seg2,L_triplet,total\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", r.step, r.seg1, r.seg2, r.triplet, r.total);
    out += buf;
  }
  return out;
}

}  // namespace mianet
