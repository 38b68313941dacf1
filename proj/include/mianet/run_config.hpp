#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mianet/model.hpp"

namespace mianet {

enum class profile { desk, paper };

/// Fully resolved settings of one command invocation.
struct run_config {
  profile prof = profile::desk;
  // architecture
  std::vector<hpm::scale> scales = desk_scales();
  std::size_t channels = 32;
  std::size_t high_channels = 32;
  std::size_t embedding_dim = 16;
  double margin = 0.5;
  // optimization
  double learning_rate = 5e-3;
  std::size_t batch_size = 4;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t epochs = 1;
  std::size_t steps_per_epoch = 100;
  // episodes
  std::size_t shots = 1;
  std::size_t fold = 0;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t pairs = 100;
  std::size_t episode = 0;  // index of the episode shown by `prior`
  std::size_t threads = 0;
  // ablations
  bool use_hpm = true;
  bool use_gim = true;
  bool one_scale = false;
  bool info_channels = true;
  bool triplet_loss = true;
  bool word_embeddings = true;
  bool stop_gradient_mined = false;
  gim::distance_metric metric = gim::distance_metric::euclidean;
  // seeds for the frozen encoder, initialization, training stream and synthesis
  std::uint64_t encoder_seed = 7;
  std::uint64_t init_seed = 1;
  std::uint64_t train_seed = 1;
  std::uint64_t data_seed = 1;
  std::uint64_t embedding_seed = 1;
  // synthetic data
  std::size_t image_size = 96;
  std::size_t samples_per_class = 12;
  // paths
  std::string data;
  std::string embeddings;
  std::string checkpoint;
  std::string out = ".";

  std::size_t total_steps() const { return epochs * steps_per_epoch; }

  std::vector<hpm::scale> effective_scales() const {
    return one_scale ? std::vector<hpm::scale>{scales.front()} : scales;
  }

  model_config model_settings() const {
    model_config m;
    m.scales = effective_scales();
    m.channels = channels;
    m.high_channels = high_channels;
    m.embedding_dim = embedding_dim;
    m.margin = margin;
    m.use_hpm = use_hpm;
    m.use_gim = use_gim;
    m.info_channels = info_channels;
    m.use_triplet = triplet_loss;
    m.use_word_embeddings = word_embeddings;
    m.stop_gradient_mined = stop_gradient_mined;
    m.metric = metric;
    m.init_seed = init_seed;
    return m;
  }

  void validate() const {
    hpm::config{scales}.validate();
    if (channels < 2 || channels % 2 != 0) throw std::invalid_argument("config: c must be even and >= 2");
    if (high_channels == 0 || embedding_dim == 0) throw std::invalid_argument("config: widths must be positive");
    if (!(margin > 0.0)) throw std::invalid_argument("config: margin must be positive");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("config: learning rate must be non-negative");
    if (batch_size == 0) throw std::invalid_argument("config: batch size must be positive");
    if (shots == 0) throw std::invalid_argument("config: K must be at least 1");
    if (seeds.empty()) throw std::invalid_argument("config: seed list is empty");
    if (image_size < 16) throw std::invalid_argument("config: image size must be at least 16");
  }
};

inline run_config profile_defaults(profile p) {
  run_config c;
  c.prof = p;
  if (p == profile::paper) {
    c.scales = hpm::paper_scales();
    c.channels = 256;
    c.high_channels = 256;
    c.embedding_dim = 300;
    c.epochs = 200;
    c.steps_per_epoch = 250;
    c.pairs = 1000;
    c.image_size = 473;
  }
  return c;
}

inline const char* profile_name(profile p) { return p == profile::paper ? "paper" : "desk"; }

inline profile parse_profile(const std::string& s) {
  if (s == "desk") return profile::desk;
  if (s == "paper") return profile::paper;
  throw std::invalid_argument("unknown profile '" + s + "' (expected desk or paper)");
}

inline gim::distance_metric parse_metric(const std::string& s) {
  if (s == "euclidean") return gim::distance_metric::euclidean;
  if (s == "cosine") return gim::distance_metric::cosine;
  throw std::invalid_argument("unknown metric '" + s + "' (expected euclidean or cosine)");
}

inline const char* metric_name(gim::distance_metric m) {
  return m == gim::distance_metric::cosine ? "cosine" : "euclidean";
}

inline nlohmann::ordered_json to_json(const run_config& c) {
  nlohmann::ordered_json j;
  j["profile"] = profile_name(c.prof);
  auto scales = nlohmann::ordered_json::array();
  for (auto s : c.scales) scales.push_back({s.h, s.w});
  j["scales"] = scales;
  j["c"] = c.channels;
  j["c_high"] = c.high_channels;
  j["d"] = c.embedding_dim;
  j["margin"] = c.margin;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["epochs"] = c.epochs;
  j["steps_per_epoch"] = c.steps_per_epoch;
  j["shots"] = c.shots;
  j["fold"] = c.fold;
  j["seeds"] = c.seeds;
  j["pairs"] = c.pairs;
  j["episode"] = c.episode;
  j["threads"] = c.threads;
  j["hpm"] = c.use_hpm;
  j["gim"] = c.use_gim;
  j["one_scale"] = c.one_scale;
  j["info_channels"] = c.info_channels;
  j["triplet_loss"] = c.triplet_loss;
  j["word_embeddings"] = c.word_embeddings;
  j["stop_gradient_mined"] = c.stop_gradient_mined;
  j["metric"] = metric_name(c.metric);
  j["encoder_seed"] = c.encoder_seed;
  j["init_seed"] = c.init_seed;
  j["train_seed"] = c.train_seed;
  j["data_seed"] = c.data_seed;
  j["embedding_seed"] = c.embedding_seed;
  j["image_size"] = c.image_size;
  j["samples_per_class"] = c.samples_per_class;
  j["data"] = c.data;
  j["embeddings"] = c.embeddings;
  j["checkpoint"] = c.checkpoint;
  j["out"] = c.out;
  return j;
}

/// Overlays keys present in `j` onto `c`. Unknown keys are rejected.
inline void apply_json(run_config& c, const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "profile") {
      // handled by the caller before defaults are chosen
    } else if (key == "scales") {
      c.scales.clear();
      for (const auto& s : v) c.scales.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    } else if (key == "c") {
      c.channels = v.get<std::size_t>();
    } else if (key == "c_high") {
      c.high_channels = v.get<std::size_t>();
    } else if (key == "d") {
      c.embedding_dim = v.get<std::size_t>();
    } else if (key == "margin") {
      c.margin = v.get<double>();
    } else if (key == "learning_rate") {
      c.learning_rate = v.get<double>();
    } else if (key == "batch_size") {
      c.batch_size = v.get<std::size_t>();
    } else if (key == "momentum") {
      c.momentum = v.get<double>();
    } else if (key == "weight_decay") {
      c.weight_decay = v.get<double>();
    } else if (key == "epochs") {
      c.epochs = v.get<std::size_t>();
    } else if (key == "steps_per_epoch") {
      c.steps_per_epoch = v.get<std::size_t>();
    } else if (key == "shots") {
      c.shots = v.get<std::size_t>();
    } else if (key == "fold") {
      c.fold = v.get<std::size_t>();
    } else if (key == "seeds") {
      c.seeds = v.get<std::vector<std::uint64_t>>();
    } else if (key == "pairs") {
      c.pairs = v.get<std::size_t>();
    } else if (key == "episode") {
      c.episode = v.get<std::size_t>();
    } else if (key == "threads") {
      c.threads = v.get<std::size_t>();
    } else if (key == "hpm") {
      c.use_hpm = v.get<bool>();
    } else if (key == "gim") {
      c.use_gim = v.get<bool>();
    } else if (key == "one_scale") {
      c.one_scale = v.get<bool>();
    } else if (key == "info_channels") {
      c.info_channels = v.get<bool>();
    } else if (key == "triplet_loss") {
      c.triplet_loss = v.get<bool>();
    } else if (key == "word_embeddings") {
      c.word_embeddings = v.get<bool>();
    } else if (key == "stop_gradient_mined") {
      c.stop_gradient_mined = v.get<bool>();
    } else if (key == "metric") {
      c.metric = parse_metric(v.get<std::string>());
    } else if (key == "encoder_seed") {
      c.encoder_seed = v.get<std::uint64_t>();
    } else if (key == "init_seed") {
      c.init_seed = v.get<std::uint64_t>();
    } else if (key == "train_seed") {
      c.train_seed = v.get<std::uint64_t>();
    } else if (key == "data_seed") {
      c.data_seed = v.get<std::uint64_t>();
    } else if (key == "embedding_seed") {
      c.embedding_seed = v.get<std::uint64_t>();
    } else if (key == "image_size") {
      c.image_size = v.get<std::size_t>();
    } else if (key == "samples_per_class") {
      c.samples_per_class = v.get<std::size_t>();
    } else if (key == "data") {
      c.data = v.get<std::string>();
    } else if (key == "embeddings") {
      c.embeddings = v.get<std::string>();
    } else if (key == "checkpoint") {
      c.checkpoint = v.get<std::string>();
    } else if (key == "out") {
      c.out = v.get<std::string>();
    } else {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
}

/// Profile defaults (profile taken from the document, unless overridden), then the document.
inline run_config config_from_json(const nlohmann::json& j, std::optional<profile> profile_override = std::nullopt) {
  profile p = profile_override.value_or(profile::desk);
  if (!profile_override && j.contains("profile")) p = parse_profile(j.at("profile").get<std::string>());
  run_config c = profile_defaults(p);
  apply_json(c, j);
  return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot open config " + p.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed config " + p.string() + ": " + e.what());
  }
}

}  // namespace mianet
