#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mianet/autodiff.hpp"
#include "mianet/random.hpp"
#include "mianet/tensor.hpp"

namespace mianet::gim {

// ---------------------------------------------------------------------------
// Word embeddings.

/// Lowercased tokens of a class name, split on whitespace and hyphens.
inline std::vector<std::string> tokenize_class_name(const std::string& name) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : name) {
    if (std::isspace(static_cast<unsigned char>(ch)) || ch == '-') {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

class embedding_table {
 public:
  explicit embedding_table(std::size_t dimension = 300) : dimension_(dimension) {
    if (dimension == 0) throw std::invalid_argument("embedding_table: dimension must be positive");
  }

  std::size_t dimension() const noexcept { return dimension_; }
  std::size_t size() const noexcept { return vectors_.size(); }
  bool contains(const std::string& token) const { return vectors_.count(normalize(token)) != 0; }

  void insert(const std::string& token, tensor v) {
    if (v.rank() != 1 || v.size() != dimension_) {
      throw std::invalid_argument("embedding_table: vector for '" + token + "' has wrong length");
    }
    vectors_.insert_or_assign(normalize(token), std::move(v));
  }

  const tensor& at(const std::string& token) const {
    auto it = vectors_.find(normalize(token));
    if (it == vectors_.end()) throw std::out_of_range("unknown embedding token: " + token);
    return it->second;
  }

  /// Tokens in sorted order.
  const std::map<std::string, tensor>& entries() const noexcept { return vectors_; }

 private:
  static std::string normalize(const std::string& s) {
    std::string out(s);
    for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return out;
  }

  std::size_t dimension_;
  std::map<std::string, tensor> vectors_;
};

/// word2vec text format: "<count> <d>" then one "token v1 ... vd" line per entry.
inline embedding_table read_word2vec(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("word2vec: empty file");
  std::istringstream hs(header);
  long long count = -1, dim = -1;
  if (!(hs >> count >> dim) || count < 0 || dim <= 0) throw std::runtime_error("word2vec: malformed header '" + header + "'");
  embedding_table table(static_cast<std::size_t>(dim));
  std::string line;
  long long lines = 0;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    std::istringstream ls(line);
    std::string token;
    ls >> token;
    tensor v({static_cast<std::size_t>(dim)});
    for (long long k = 0; k < dim; ++k) {
      if (!(ls >> v[static_cast<std::size_t>(k)])) {
        throw std::runtime_error("word2vec: entry '" + token + "' has fewer than " + std::to_string(dim) + " values");
      }
    }
    double extra;
    if (ls >> extra) throw std::runtime_error("word2vec: entry '" + token + "' has more than " + std::to_string(dim) + " values");
    table.insert(token, std::move(v));
    ++lines;
  }
  if (lines != count) {
    throw std::runtime_error("word2vec: header declares " + std::to_string(count) + " entries, found " +
                             std::to_string(lines));
  }
  return table;
}

inline embedding_table load_word2vec(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  return read_word2vec(f);
}

inline void write_word2vec(std::ostream& os, const embedding_table& table) {
  os << table.size() << " " << table.dimension() << "\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& [token, v] : table.entries()) {
    os << token;
    for (double x : v.data()) os << " " << x;
    os << "\n";
  }
}

inline void save_word2vec(const std::filesystem::path& p, const embedding_table& table) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  write_word2vec(f, table);
}

/// Mean of the token vectors of a (possibly multi-word) class name.
inline tensor lookup_embedding(const std::string& class_name, const embedding_table& table) {
  const auto tokens = tokenize_class_name(class_name);
  if (tokens.empty()) throw std::invalid_argument("lookup_embedding: empty class name");
  for (const auto& tok : tokens) {
    if (!table.contains(tok)) throw std::out_of_range("unknown embedding token: " + tok);
  }
  tensor out = table.at(tokens[0]);
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    const tensor& v = table.at(tokens[i]);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += v[k];
  }
  if (tokens.size() > 1) {
    for (auto& x : out.data()) x /= static_cast<double>(tokens.size());
  }
  return out;
}

/// Deterministic pseudo-embeddings for a vocabulary (per-token seeded normals).
inline embedding_table make_toy_embeddings(const std::vector<std::string>& class_names, std::size_t dimension,
                                           std::uint64_t seed) {
  embedding_table table(dimension);
  for (const auto& name : class_names) {
    for (const auto& tok : tokenize_class_name(name)) {
      if (table.contains(tok)) continue;
      rng gen(stable_hash(tok, seed));
      tensor v({dimension});
      for (auto& x : v.data()) x = static_cast<double>(static_cast<float>(gen.normal() / std::sqrt(dimension)));
      table.insert(tok, std::move(v));
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Prototypes and networks.

inline pooled_vector support_prototype(const tensor& support_mid, const binary_mask& mask) {
  return masked_average_pool(support_mid, mask);
}

/// Two fully connected layers, [in -> c] then [c -> c], ReLU in between.
struct gig_network {
  ad::parameter fc1_weight, fc1_bias, fc2_weight, fc2_bias;

  gig_network() = default;
  gig_network(std::size_t input_width, std::size_t channels, rng& gen)
      : fc1_weight("gig.fc1.weight", tensor({channels, input_width})),
        fc1_bias("gig.fc1.bias", tensor({channels})),
        fc2_weight("gig.fc2.weight", tensor({channels, channels})),
        fc2_bias("gig.fc2.bias", tensor({channels})) {
    ad::init_uniform(fc1_weight, input_width, gen);
    ad::init_uniform(fc2_weight, channels, gen);
  }

  std::size_t input_width() const { return fc1_weight.value.dim(1); }
  std::size_t channels() const { return fc2_weight.value.dim(0); }

  std::vector<ad::parameter*> parameters() { return {&fc1_weight, &fc1_bias, &fc2_weight, &fc2_bias}; }

  ad::var forward(ad::tape& t, ad::var x) {
    if (t.value(x).size() != input_width()) {
      throw std::invalid_argument("gig: input width " + std::to_string(t.value(x).size()) + ", expected " +
                                  std::to_string(input_width()));
    }
    auto h = ad::relu(t, ad::linear(t, x, t.leaf(fc1_weight), t.leaf(fc1_bias)));
    return ad::linear(t, h, t.leaf(fc2_weight), t.leaf(fc2_bias));
  }
};

/// p_gen = GIG(w ⊕ p), or GIG(p) when no word vector is supplied.
inline ad::var general_prototype(ad::tape& t, std::optional<ad::var> word, ad::var prototype, gig_network& gig) {
  const ad::var x = word ? ad::concat_vectors(t, *word, prototype) : prototype;
  return gig.forward(t, x);
}

/// Three conv3x3 + ReLU blocks with strides (2, 2, 1): a 4x spatial reduction.
struct lfg_network {
  static constexpr int strides[3] = {2, 2, 1};
  ad::parameter weight[3], bias[3];

  lfg_network() = default;
  lfg_network(std::size_t channels, rng& gen) {
    for (int i = 0; i < 3; ++i) {
      const std::string base = "lfg.block" + std::to_string(i);
      weight[i] = ad::parameter(base + ".weight", tensor({channels, channels, 3, 3}));
      bias[i] = ad::parameter(base + ".bias", tensor({channels}));
      ad::init_uniform(weight[i], channels * 9, gen);
    }
  }

  std::size_t channels() const { return weight[0].value.dim(0); }

  std::vector<ad::parameter*> parameters() {
    return {&weight[0], &bias[0], &weight[1], &bias[1], &weight[2], &bias[2]};
  }

  ad::var forward(ad::tape& t, ad::var x) {
    for (int i = 0; i < 3; ++i) x = ad::relu(t, ad::conv3x3(t, x, t.leaf(weight[i]), t.leaf(bias[i]), strides[i]));
    return x;
  }
};

struct region_grid {
  std::size_t h = 0, w = 0;
};

struct region_output {
  ad::var rows;      // [h*w, c]
  region_grid grid;
};

/// LFG forward, reshaped to one row per region in row-major spatial order.
inline region_output region_features(ad::tape& t, ad::var support_mid, lfg_network& lfg) {
  const tensor& f = t.value(support_mid);
  if (f.rank() != 3 || f.dim(1) < 4 || f.dim(2) < 4) {
    throw std::invalid_argument("region_features: input must be [c,h,w] with h,w >= 4, got " + shape_string(f.shape()));
  }
  auto out = lfg.forward(t, support_mid);
  const tensor& ov = t.value(out);
  return {ad::pixel_rows(t, out), {ov.dim(1), ov.dim(2)}};
}

/// Row indices of foreground and background regions.
struct region_partition {
  std::vector<std::size_t> foreground;
  std::vector<std::size_t> background;
};

/// Routes region rows by the support mask resized to the region grid.
inline region_partition partition_regions(std::size_t rows, const binary_mask& mask, region_grid grid) {
  if (rows != grid.h * grid.w) {
    throw std::invalid_argument("partition_regions: " + std::to_string(rows) + " rows for a " + std::to_string(grid.h) +
                                "x" + std::to_string(grid.w) + " grid");
  }
  const binary_mask m = resize_mask(mask, grid.h, grid.w);
  region_partition p;
  for (std::size_t k = 0; k < rows; ++k) (m[k] ? p.foreground : p.background).push_back(k);
  return p;
}

/// Mean of the background rows; nullopt when there are none (triplet skipped).
inline std::optional<tensor> negative_sample(const tensor& rows, const std::vector<std::size_t>& background) {
  if (background.empty()) return std::nullopt;
  const std::size_t c = rows.dim(1);
  tensor out({c});
  for (auto i : background)
    for (std::size_t k = 0; k < c; ++k) out[k] += rows[i * c + k];
  const double inv = 1.0 / static_cast<double>(background.size());
  for (auto& v : out.data()) v *= inv;
  return out;
}

enum class distance_metric { euclidean, cosine };

inline double distance(std::span<const double> a, std::span<const double> b, distance_metric metric) {
  return metric == distance_metric::euclidean ? l2_distance(a, b) : cosine_distance(a, b);
}

/// Foreground row farthest from the anchor (lowest index on ties); nullopt when empty.
inline std::optional<std::size_t> hardest_positive(const tensor& anchor, const tensor& rows,
                                                   const std::vector<std::size_t>& foreground,
                                                   distance_metric metric = distance_metric::euclidean) {
  if (foreground.empty()) return std::nullopt;
  const std::size_t c = rows.dim(1);
  if (anchor.size() != c) throw std::invalid_argument("hardest_positive: anchor length mismatch");
  std::size_t best = foreground.front();
  double best_d = -1.0;
  for (auto i : foreground) {
    const double d = distance(anchor.data(), rows.data().subspan(i * c, c), metric);
    if (d > best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

struct triplet_sample {
  tensor anchor, positive, negative;
  double margin = 0.5;
};

/// max(d(a,p) + margin - d(a,n), 0).
inline double triplet_loss(const triplet_sample& s, distance_metric metric = distance_metric::euclidean) {
  if (!(s.margin > 0.0)) throw std::invalid_argument("triplet_loss: margin must be positive");
  const double dp = distance(s.anchor.data(), s.positive.data(), metric);
  const double dn = distance(s.anchor.data(), s.negative.data(), metric);
  return std::max(dp + s.margin - dn, 0.0);
}

inline ad::var triplet_loss(ad::tape& t, ad::var anchor, ad::var positive, ad::var negative, double margin,
                            distance_metric metric = distance_metric::euclidean) {
  if (!(margin > 0.0)) throw std::invalid_argument("triplet_loss: margin must be positive");
  auto dist = [&](ad::var a, ad::var b) {
    return metric == distance_metric::euclidean ? ad::l2_distance(t, a, b) : ad::cosine_distance(t, a, b);
  };
  const ad::var dp = dist(anchor, positive);
  const ad::var dn = dist(anchor, negative);
  return ad::relu(t, ad::add_scalar(t, ad::sub(t, dp, dn), margin));
}

}  // namespace mianet::gim
