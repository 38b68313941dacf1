#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "mianet/episodes.hpp"
#include "mianet/tensor_io.hpp"

// Dataset manifest: a JSON document next to images/*.miat and masks/*.pgm.
//   {"format": "mianet-dataset", "version": 1, "height": H, "width": W, "folds": 4,
//    "classes": [{"name": "mug", "fold": 0}, ...],
//    "samples": [{"id": 0, "class": 0, "variant": 0, "image": "images/000000.miat",
//                 "mask": "masks/000000.pgm"}, ...]}

namespace mianet {

namespace detail {
inline std::string sample_stem(std::size_t id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", id);
  return buf;
}
}  // namespace detail

inline nlohmann::ordered_json manifest_json(const episodes::dataset& ds) {
  nlohmann::ordered_json j;
  j["format"] = "mianet-dataset";
  j["version"] = 1;
  j["height"] = ds.height;
  j["width"] = ds.width;
  j["folds"] = ds.folds;
  j["classes"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    j["classes"].push_back({{"name", ds.class_names[c]}, {"fold", ds.class_fold[c]}});
  }
  j["samples"] = nlohmann::ordered_json::array();
  for (const auto& s : ds.samples) {
    const auto stem = detail::sample_stem(s.id);
    j["samples"].push_back({{"id", s.id},
                            {"class", s.class_index},
                            {"variant", s.variant},
                            {"image", "images/" + stem + ".miat"},
                            {"mask", "masks/" + stem + ".pgm"}});
  }
  return j;
}

/// Writes manifest.json, images/ and masks/ under `dir`.
inline void save_dataset(const std::filesystem::path& dir, const episodes::dataset& ds) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  for (const auto& s : ds.samples) {
    const auto stem = detail::sample_stem(s.id);
    save_miat(dir / "images" / (stem + ".miat"), s.image);
    save_pgm(dir / "masks" / (stem + ".pgm"), s.mask);
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  f << manifest_json(ds).dump(2) << "\n";
}

/// Loads a dataset from its manifest; paths are relative to the manifest's directory.
inline episodes::dataset load_dataset(const std::filesystem::path& manifest) {
  std::ifstream f(manifest);
  if (!f) throw std::runtime_error("cannot open dataset manifest " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw format_error("malformed manifest " + manifest.string() + ": " + e.what());
  }
  const auto base = manifest.parent_path();
  episodes::dataset ds;
  try {
    ds.height = j.at("height").get<std::size_t>();
    ds.width = j.at("width").get<std::size_t>();
    ds.folds = j.value("folds", std::size_t{4});
    for (const auto& c : j.at("classes")) {
      ds.class_names.push_back(c.at("name").get<std::string>());
      const auto fold = c.at("fold").get<std::size_t>();
      if (fold >= ds.folds) throw format_error("class '" + ds.class_names.back() + "' has fold out of range");
      ds.class_fold.push_back(fold);
    }
    for (const auto& s : j.at("samples")) {
      episodes::sample smp;
      smp.id = ds.samples.size();
      smp.class_index = s.at("class").get<std::size_t>();
      if (smp.class_index >= ds.class_names.size()) throw format_error("sample class index out of range");
      smp.variant = s.value("variant", std::size_t{0});
      smp.image = load_miat(base / s.at("image").get<std::string>());
      smp.mask = load_pgm_mask(base / s.at("mask").get<std::string>());
      if (smp.image.rank() != 3 || smp.image.dim(0) != 3 || smp.image.dim(1) != ds.height ||
          smp.image.dim(2) != ds.width || smp.mask.height() != ds.height || smp.mask.width() != ds.width) {
        throw format_error("sample " + std::to_string(smp.id) + " does not match the manifest size");
      }
      ds.samples.push_back(std::move(smp));
    }
  } catch (const nlohmann::json::exception& e) {
    throw format_error("malformed manifest " + manifest.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace mianet
