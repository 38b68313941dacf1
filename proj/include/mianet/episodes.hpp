#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mianet/autodiff.hpp"
#include "mianet/hpm.hpp"
#include "mianet/random.hpp"
#include "mianet/tensor.hpp"

namespace mianet::episodes {

// ---------------------------------------------------------------------------
// Synthetic dataset.

enum class shape_kind { disk, square, triangle, ring, cross, diamond, half_disk, ell };

inline const char* shape_name(shape_kind k) {
  static constexpr std::array names{"disk", "square", "triangle", "ring", "cross", "diamond", "half_disk", "ell"};
  return names[static_cast<std::size_t>(k)];
}

/// Membership test in the canonical frame [-1,1]^2 (y up).
inline bool inside(shape_kind k, double x, double y) {
  const double r = std::hypot(x, y);
  switch (k) {
    case shape_kind::disk: return r <= 1.0;
    case shape_kind::square: return std::max(std::abs(x), std::abs(y)) <= 0.85;
    case shape_kind::triangle: return y >= -0.7 && y <= 1.0 - 1.7 * std::abs(x);
    case shape_kind::ring: return r >= 0.55 && r <= 1.0;
    case shape_kind::cross:
      return (std::abs(x) <= 0.35 && std::abs(y) <= 1.0) || (std::abs(y) <= 0.35 && std::abs(x) <= 1.0);
    case shape_kind::diamond: return std::abs(x) + std::abs(y) <= 1.0;
    case shape_kind::half_disk: return r <= 1.0 && y >= -0.1;
    case shape_kind::ell:
      return std::abs(x) <= 0.9 && std::abs(y) <= 0.9 && !(x > -0.2 && y > -0.2);
  }
  return false;
}

struct class_spec {
  std::string name;
  std::vector<shape_kind> variants;  // fine-grained sub-types, at least two
};

inline std::vector<class_spec> default_classes() {
  using enum shape_kind;
  return {
      {"mug", {disk, ring}},           {"fork", {cross, ell}},
      {"bird", {triangle, diamond}},   {"boat", {half_disk, triangle}},
      {"bottle", {square, cross}},     {"chair", {ell, square}},
      {"cat", {diamond, disk}},        {"potted plant", {ring, triangle}},
      {"dining table", {square, half_disk}}, {"sofa", {ell, half_disk}},
      {"car", {square, ring}},         {"dog", {cross, disk}},
  };
}

struct synth_config {
  std::vector<class_spec> classes = default_classes();
  std::size_t height = 96, width = 96;
  std::size_t samples_per_class = 12;
  std::size_t folds = 4;
  double max_variant_iou = 0.8;
};

struct sample {
  std::size_t id = 0;
  std::size_t class_index = 0;
  std::size_t variant = 0;
  tensor image;  // [3,H,W], float-representable values
  binary_mask mask;
};

struct dataset {
  std::size_t height = 0, width = 0;
  std::vector<std::string> class_names;
  std::vector<std::size_t> class_fold;  // fold that holds each class out for testing
  std::size_t folds = 4;
  std::vector<sample> samples;

  std::vector<std::size_t> samples_of(std::size_t class_index) const {
    std::vector<std::size_t> ids;
    for (const auto& s : samples) {
      if (s.class_index == class_index) ids.push_back(s.id);
    }
    return ids;
  }
};

/// Rasterizes a shape in its canonical frame at n x n.
inline binary_mask canonical_mask(shape_kind k, std::size_t n = 64) {
  binary_mask m(n, n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double u = (x + 0.5) / n * 2.0 - 1.0;
      const double v = 1.0 - (y + 0.5) / n * 2.0;
      m.set(y, x, inside(k, u * 1.05, v * 1.05));
    }
  }
  return m;
}

inline double mask_iou(const binary_mask& a, const binary_mask& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw std::invalid_argument("mask_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] & b[i];
    uni += a[i] | b[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {

inline std::array<double, 3> hue_color(double hue, double sat, double val) {
  const double h6 = std::fmod(hue, 1.0) * 6.0;
  const double c = val * sat, x = c * (1.0 - std::abs(std::fmod(h6, 2.0) - 1.0)), m = val - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h6)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (auto& v : rgb) v += m;
  return rgb;
}

}  // namespace detail

/// One image of a class variant under a random affine ("perspective") jitter.
inline sample render_sample(const synth_config& cfg, std::size_t class_index, std::size_t variant, rng& gen) {
  const std::size_t H = cfg.height, W = cfg.width;
  const shape_kind kind = cfg.classes[class_index].variants[variant];
  const double n_classes = static_cast<double>(cfg.classes.size());
  const double extent = static_cast<double>(std::min(H, W));

  // forward map: canonical -> pixels is center + R * A * u; invert A per pixel
  const double radius = extent * gen.uniform(0.24, 0.34);
  const double theta = gen.uniform(-0.6, 0.6);
  const double stretch = gen.uniform(0.75, 1.3);
  const double shear = gen.uniform(-0.3, 0.3);
  const double cx = gen.uniform(0.38, 0.62) * static_cast<double>(W);
  const double cy = gen.uniform(0.38, 0.62) * static_cast<double>(H);
  const double ct = std::cos(theta), st = std::sin(theta);
  // A = Rot(theta) * [[stretch, shear], [0, 1/stretch]]
  const double a00 = ct * stretch, a01 = ct * shear - st / stretch;
  const double a10 = st * stretch, a11 = st * shear + ct / stretch;
  const double det = a00 * a11 - a01 * a10;

  const auto fg = detail::hue_color(static_cast<double>(class_index) / n_classes, 0.75, 0.9);
  const double stripe_freq = 0.25 + 0.05 * static_cast<double>(class_index % 4);
  const double stripe_angle = std::numbers::pi * static_cast<double>(class_index) / n_classes;
  const auto bg0 = detail::hue_color(gen.uniform(), gen.uniform(0.1, 0.4), gen.uniform(0.2, 0.5));
  const auto bg1 = detail::hue_color(gen.uniform(), gen.uniform(0.1, 0.4), gen.uniform(0.2, 0.5));
  const double grad_angle = gen.uniform(0.0, 2.0 * std::numbers::pi);

  sample s;
  s.class_index = class_index;
  s.variant = variant;
  s.image = tensor({3, H, W});
  s.mask = binary_mask(H, W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double px = (static_cast<double>(x) + 0.5 - cx) / radius;
      const double py = -(static_cast<double>(y) + 0.5 - cy) / radius;
      const double u = (a11 * px - a01 * py) / det;
      const double v = (-a10 * px + a00 * py) / det;
      const bool in = inside(kind, u, v);
      s.mask.set(y, x, in);
      std::array<double, 3> rgb;
      if (in) {
        const double phase = stripe_freq * (x * std::cos(stripe_angle) + y * std::sin(stripe_angle));
        const double tex = 0.12 * std::sin(phase);
        for (int c = 0; c < 3; ++c) rgb[c] = fg[c] + tex;
      } else {
        const double t = 0.5 + 0.5 * std::sin((x * std::cos(grad_angle) + y * std::sin(grad_angle)) / extent * 3.0);
        for (int c = 0; c < 3; ++c) rgb[c] = bg0[c] + t * (bg1[c] - bg0[c]);
      }
      for (int c = 0; c < 3; ++c) {
        const double noisy = std::clamp(rgb[c] + 0.03 * gen.normal(), 0.0, 1.0);
        s.image(c, y, x) = static_cast<double>(static_cast<float>(noisy));
      }
    }
  }
  return s;
}

/// Deterministic dataset; classes are dealt round-robin into folds. Throws if
/// two variants of a class overlap too much (IoU of canonical masks).
inline dataset synth_dataset(const synth_config& cfg, std::uint64_t seed) {
  if (cfg.classes.size() < cfg.folds || cfg.folds == 0) throw std::invalid_argument("synth: need at least one class per fold");
  for (const auto& c : cfg.classes) {
    if (c.variants.size() < 2) throw std::invalid_argument("synth: class '" + c.name + "' needs at least two variants");
    for (std::size_t i = 0; i < c.variants.size(); ++i) {
      for (std::size_t j = i + 1; j < c.variants.size(); ++j) {
        const double iou = mask_iou(canonical_mask(c.variants[i]), canonical_mask(c.variants[j]));
        if (iou >= cfg.max_variant_iou) {
          throw std::invalid_argument("synth: variants of '" + c.name + "' too similar (IoU " + std::to_string(iou) + ")");
        }
      }
    }
  }
  dataset ds;
  ds.height = cfg.height;
  ds.width = cfg.width;
  ds.folds = cfg.folds;
  const std::size_t per_fold = cfg.classes.size() / cfg.folds;
  for (std::size_t c = 0; c < cfg.classes.size(); ++c) {
    ds.class_names.push_back(cfg.classes[c].name);
    ds.class_fold.push_back(std::min(c / std::max<std::size_t>(per_fold, 1), cfg.folds - 1));
  }
  rng gen(seed);
  for (std::size_t c = 0; c < cfg.classes.size(); ++c) {
    for (std::size_t k = 0; k < cfg.samples_per_class; ++k) {
      sample s = render_sample(cfg, c, k % cfg.classes[c].variants.size(), gen);
      s.id = ds.samples.size();
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

struct fold_split {
  std::size_t fold = 0;
  std::vector<std::size_t> train_classes;
  std::vector<std::size_t> test_classes;
};

inline fold_split make_fold_split(const dataset& ds, std::size_t fold) {
  if (fold >= ds.folds) throw std::invalid_argument("fold " + std::to_string(fold) + " out of range");
  fold_split split{fold, {}, {}};
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    (ds.class_fold[c] == fold ? split.test_classes : split.train_classes).push_back(c);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Frozen backbone stand-in.

struct encoded_image {
  tensor mid;   // [c, H/4, W/4]
  tensor high;  // [c_high, H/4, W/4]
};

struct encoder_config {
  std::size_t mid_channels = 256;
  std::size_t high_channels = 256;
  std::size_t stem_channels = 16;
  std::uint64_t seed = 7;
};

/// Fixed random conv stack. stem (s2) -> stage A (s2) -> stage B (s1) -> high (s1);
/// mid-level features concatenate stages A and B.
class toy_encoder {
 public:
  explicit toy_encoder(encoder_config cfg = {}) : cfg_(cfg) {
    if (cfg.mid_channels < 2 || cfg.mid_channels % 2 != 0) {
      throw std::invalid_argument("toy_encoder: mid channels must be even and >= 2");
    }
    rng gen(cfg.seed);
    const std::size_t half = cfg.mid_channels / 2;
    auto make = [&](std::size_t out, std::size_t in) {
      ad::parameter w("w", tensor({out, in, 3, 3}));
      ad::init_uniform(w, in * 9, gen);
      return std::pair{w.value, tensor({out}, std::vector<double>(out, 0.0))};
    };
    layers_ = {make(cfg.stem_channels, 3), make(half, cfg.stem_channels), make(half, half),
               make(cfg.high_channels, half)};
  }

  const encoder_config& config() const noexcept { return cfg_; }

  encoded_image encode(const tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("toy_encoder: expected a [3,H,W] image");
    auto conv = [&](const tensor& x, std::size_t i, int stride) {
      return ad::kernel::relu(ad::kernel::conv3x3(x, layers_[i].first, layers_[i].second, stride));
    };
    const tensor stem = conv(image, 0, 2);
    const tensor a = conv(stem, 1, 2);
    const tensor b = conv(a, 2, 1);
    return {concat_channels(a, b), conv(b, 3, 1)};
  }

 private:
  encoder_config cfg_;
  std::vector<std::pair<tensor, tensor>> layers_;
};

// ---------------------------------------------------------------------------
// Episodes.

struct support_shot {
  std::size_t image_id = 0;
  encoded_image features;
  binary_mask mask;
};

struct episode {
  std::string class_name;
  std::size_t class_index = 0;
  std::vector<support_shot> support;
  std::size_t query_id = 0;
  encoded_image query;
  binary_mask query_mask;
  bool query_mask_available = true;  // false at test time: the model must not read it
  tensor word;                       // class word vector (may be empty when unused)
};

/// Which images make up an episode; resolved to features separately.
struct episode_ref {
  std::size_t class_index = 0;
  std::vector<std::size_t> support_ids;
  std::size_t query_id = 0;
};

/// Draws a class from `classes`, then K support images and one distinct query.
inline episode_ref sample_episode_ref(const dataset& ds, const std::vector<std::size_t>& classes, std::size_t shots,
                                      rng& gen) {
  if (classes.empty()) throw std::invalid_argument("sample_episode: no classes to draw from");
  if (shots == 0) throw std::invalid_argument("sample_episode: K must be at least 1");
  const std::size_t cls = classes[gen.index(classes.size())];
  auto ids = ds.samples_of(cls);
  if (ids.size() < shots + 1) {
    throw std::invalid_argument("sample_episode: class '" + ds.class_names[cls] + "' has " +
                                std::to_string(ids.size()) + " samples, need " + std::to_string(shots + 1));
  }
  for (std::size_t i = 0; i <= shots; ++i) std::swap(ids[i], ids[i + gen.index(ids.size() - i)]);
  episode_ref ref;
  ref.class_index = cls;
  ref.query_id = ids[0];
  ref.support_ids.assign(ids.begin() + 1, ids.begin() + static_cast<std::ptrdiff_t>(shots + 1));
  return ref;
}

inline episode resolve_episode(const dataset& ds, const std::vector<encoded_image>& features, const episode_ref& ref,
                               const tensor& word = {}) {
  episode ep;
  ep.class_index = ref.class_index;
  ep.class_name = ds.class_names[ref.class_index];
  for (auto id : ref.support_ids) ep.support.push_back({id, features.at(id), ds.samples.at(id).mask});
  ep.query_id = ref.query_id;
  ep.query = features.at(ref.query_id);
  ep.query_mask = ds.samples.at(ref.query_id).mask;
  ep.word = word;
  return ep;
}

inline std::vector<encoded_image> encode_all(const dataset& ds, const toy_encoder& enc) {
  std::vector<encoded_image> out;
  out.reserve(ds.samples.size());
  for (const auto& s : ds.samples) out.push_back(enc.encode(s.image));
  return out;
}

// ---------------------------------------------------------------------------
// K-shot aggregation.

struct kshot_result {
  hpm::prior_pyramid pyramid;
  tensor prototype;
  tensor region_rows;
};

/// Per-scale mean of priors, mean prototype, row-wise union of region features.
inline kshot_result kshot_aggregate(const std::vector<hpm::prior_pyramid>& pyramids, const std::vector<tensor>& prototypes,
                                    const std::vector<tensor>& region_rows) {
  const std::size_t k = pyramids.size();
  if (k == 0 || prototypes.size() != k || region_rows.size() != k) {
    throw std::invalid_argument("kshot_aggregate: need K >= 1 matching pyramids, prototypes and region sets");
  }
  auto mean_of = [k](auto get, std::size_t count) {
    std::vector<tensor> out;
    for (std::size_t j = 0; j < count; ++j) {
      tensor acc = get(0, j);
      for (std::size_t i = 1; i < k; ++i) {
        const tensor& v = get(i, j);
        if (v.shape() != acc.shape()) throw std::invalid_argument("kshot_aggregate: shape mismatch across shots");
        for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += v[e];
      }
      if (k > 1) {
        for (auto& e : acc.data()) e /= static_cast<double>(k);
      }
      out.push_back(std::move(acc));
    }
    return out;
  };
  const std::size_t scales = pyramids[0].maps.size();
  for (const auto& p : pyramids) {
    if (p.maps.size() != scales) throw std::invalid_argument("kshot_aggregate: pyramid depth mismatch");
  }
  kshot_result r;
  r.pyramid.maps = mean_of([&](std::size_t i, std::size_t j) -> const tensor& { return pyramids[i].maps[j]; }, scales);
  r.pyramid.empty_foreground = std::all_of(pyramids.begin(), pyramids.end(), [](const auto& p) { return p.empty_foreground; });
  r.prototype = mean_of([&](std::size_t i, std::size_t) -> const tensor& { return prototypes[i]; }, 1)[0];

  const std::size_t c = region_rows[0].dim(1);
  std::size_t n = 0;
  for (const auto& rr : region_rows) {
    if (rr.rank() != 2 || rr.dim(1) != c) throw std::invalid_argument("kshot_aggregate: region feature width mismatch");
    n += rr.dim(0);
  }
  r.region_rows = tensor({n, c});
  std::size_t off = 0;
  for (const auto& rr : region_rows) {
    std::copy(rr.data().begin(), rr.data().end(), r.region_rows.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += rr.size();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Metrics.

struct pixel_counts {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;
};

inline pixel_counts foreground_counts(const binary_mask& pred, const binary_mask& truth) {
  if (pred.height() != truth.height() || pred.width() != truth.width()) {
    throw std::invalid_argument("metrics: prediction and truth sizes differ");
  }
  pixel_counts pc;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pc.intersection += pred[i] & truth[i];
    pc.union_ += pred[i] | truth[i];
  }
  return pc;
}

inline pixel_counts background_counts(const binary_mask& pred, const binary_mask& truth) {
  pixel_counts pc;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = !pred[i], t = !truth[i];
    pc.intersection += p && t;
    pc.union_ += p || t;
  }
  return pc;
}

enum class miou_convention { accumulate, per_episode_mean };

/// Accumulates per-class and foreground/background pixel counts over episodes.
class iou_accumulator {
 public:
  void add(std::size_t class_index, const binary_mask& pred, const binary_mask& truth) {
    const auto fg = foreground_counts(pred, truth);
    const auto bg = background_counts(pred, truth);
    auto& cls = classes_[class_index];
    cls.counts.intersection += fg.intersection;
    cls.counts.union_ += fg.union_;
    if (fg.union_ > 0) {
      cls.episode_iou_sum += static_cast<double>(fg.intersection) / static_cast<double>(fg.union_);
      ++cls.scored_episodes;
    }
    ++cls.episodes;
    fg_.intersection += fg.intersection;
    fg_.union_ += fg.union_;
    bg_.intersection += bg.intersection;
    bg_.union_ += bg.union_;
  }

  /// IoU of one class; nullopt if it never appeared (or never had foreground).
  std::optional<double> class_iou(std::size_t class_index, miou_convention conv = miou_convention::accumulate) const {
    auto it = classes_.find(class_index);
    if (it == classes_.end()) return std::nullopt;
    const auto& c = it->second;
    if (conv == miou_convention::per_episode_mean) {
      if (c.scored_episodes == 0) return std::nullopt;
      return c.episode_iou_sum / static_cast<double>(c.scored_episodes);
    }
    if (c.counts.union_ == 0) return std::nullopt;
    return static_cast<double>(c.counts.intersection) / static_cast<double>(c.counts.union_);
  }

  /// Mean IoU over `classes`; classes without episodes are skipped and reported in `excluded`.
  double miou(const std::vector<std::size_t>& classes, std::vector<std::size_t>* excluded = nullptr,
              miou_convention conv = miou_convention::accumulate) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (auto c : classes) {
      if (auto v = class_iou(c, conv)) {
        sum += *v;
        ++n;
      } else if (excluded) {
        excluded->push_back(c);
      }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  }

  /// Mean of foreground and background IoU over all episodes; a side with an
  /// empty accumulated union is left out of the mean.
  double fbiou() const {
    double sum = 0.0;
    int n = 0;
    for (const auto& pc : {fg_, bg_}) {
      if (pc.union_ > 0) {
        sum += static_cast<double>(pc.intersection) / static_cast<double>(pc.union_);
        ++n;
      }
    }
    return n == 0 ? 1.0 : sum / n;
  }

 private:
  struct class_stats {
    pixel_counts counts;
    double episode_iou_sum = 0.0;
    std::size_t scored_episodes = 0;
    std::size_t episodes = 0;
  };
  std::map<std::size_t, class_stats> classes_;
  pixel_counts fg_, bg_;
};

/// Per-class IoU (accumulate-then-divide) and their mean over `class_list`.
struct miou_result {
  std::map<std::size_t, double> per_class;
  double mean = 0.0;
  std::vector<std::size_t> excluded;
};

inline miou_result miou(const std::vector<binary_mask>& predictions, const std::vector<binary_mask>& truths,
                        const std::vector<std::size_t>& class_of_episode, const std::vector<std::size_t>& class_list) {
  if (predictions.size() != truths.size() || predictions.size() != class_of_episode.size()) {
    throw std::invalid_argument("miou: input lengths differ");
  }
  iou_accumulator acc;
  for (std::size_t i = 0; i < predictions.size(); ++i) acc.add(class_of_episode[i], predictions[i], truths[i]);
  miou_result r;
  for (auto c : class_list) {
    if (auto v = acc.class_iou(c)) r.per_class[c] = *v;
  }
  r.mean = acc.miou(class_list, &r.excluded);
  return r;
}

inline double fbiou(const std::vector<binary_mask>& predictions, const std::vector<binary_mask>& truths) {
  if (predictions.size() != truths.size()) throw std::invalid_argument("fbiou: input lengths differ");
  iou_accumulator acc;
  for (std::size_t i = 0; i < predictions.size(); ++i) acc.add(0, predictions[i], truths[i]);
  return acc.fbiou();
}

}  // namespace mianet::episodes
