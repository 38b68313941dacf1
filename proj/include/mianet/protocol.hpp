#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "mianet/episodes.hpp"
#include "mianet/model.hpp"

namespace mianet {

/// Everything an episode needs besides the model: images, frozen features and
/// one word vector per class (may be empty tensors when word embeddings are off).
struct episode_source {
  const episodes::dataset* data = nullptr;
  std::vector<episodes::encoded_image> features;
  std::vector<tensor> class_words;

  episodes::episode resolve(const episodes::episode_ref& ref) const {
    const tensor word = class_words.empty() ? tensor{} : class_words.at(ref.class_index);
    return episodes::resolve_episode(*data, features, ref, word);
  }
};

struct eval_protocol {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t pairs = 1000;  // support-query pairs per seed
  std::size_t shots = 1;
  std::size_t threads = 0;   // 0: MIANET_THREADS or hardware concurrency
};

/// Worker count: explicit request, else MIANET_THREADS, else hardware concurrency.
inline std::size_t worker_count(std::size_t requested) {
  std::size_t n = requested;
  if (n == 0) {
    if (const char* env = std::getenv("MIANET_THREADS")) n = static_cast<std::size_t>(std::strtoull(env, nullptr, 10));
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

struct class_result {
  std::size_t class_index = 0;
  double iou = 0.0;
  double fb_iou = 0.0;
};

struct seed_result {
  std::uint64_t seed = 0;
  std::vector<class_result> classes;  // test classes that received episodes
  double miou = 0.0;
  double fb_iou = 0.0;
};

struct eval_report {
  std::size_t fold = 0;
  std::vector<std::string> class_names;
  std::vector<seed_result> seeds;
  double mean_miou = 0.0, std_miou = 0.0;
  double mean_fb_iou = 0.0, std_fb_iou = 0.0;
  std::vector<std::size_t> excluded_classes;  // test classes never drawn under some seed
};

inline double population_std(const std::vector<double>& v, double mean) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size()));
}

/// Episodes are drawn sequentially per seed, predicted in parallel, and
/// accumulated in draw order, so the report does not depend on scheduling.
inline eval_report evaluate(model& net, const episode_source& src, const episodes::fold_split& split,
                            const eval_protocol& protocol) {
  if (protocol.seeds.empty()) throw std::invalid_argument("evaluate: empty seed list");
  const auto& ds = *src.data;
  std::vector<episodes::episode_ref> refs;
  for (auto seed : protocol.seeds) {
    rng gen(seed);
    for (std::size_t i = 0; i < protocol.pairs; ++i) {
      refs.push_back(episodes::sample_episode_ref(ds, split.test_classes, protocol.shots, gen));
    }
  }

  std::vector<binary_mask> predictions(refs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&]() {
    for (std::size_t i = next++; i < refs.size(); i = next++) {
      try {
        predictions[i] = net.predict(src.resolve(refs[i]));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = refs.size();
      }
    }
  };
  const std::size_t n_workers = std::min(worker_count(protocol.threads), std::max<std::size_t>(refs.size(), 1));
  if (n_workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  eval_report report;
  report.fold = split.fold;
  report.class_names = ds.class_names;
  std::vector<double> mious, fbs;
  for (std::size_t s = 0; s < protocol.seeds.size(); ++s) {
    episodes::iou_accumulator all;
    std::map<std::size_t, episodes::iou_accumulator> per_class;
    for (std::size_t i = s * protocol.pairs; i < (s + 1) * protocol.pairs; ++i) {
      const auto& truth = ds.samples[refs[i].query_id].mask;
      all.add(refs[i].class_index, predictions[i], truth);
      per_class[refs[i].class_index].add(refs[i].class_index, predictions[i], truth);
    }
    seed_result sr;
    sr.seed = protocol.seeds[s];
    for (auto c : split.test_classes) {
      auto it = per_class.find(c);
      if (it == per_class.end()) continue;
      if (auto iou = all.class_iou(c)) sr.classes.push_back({c, *iou, it->second.fbiou()});
    }
    std::vector<std::size_t> excluded;
    sr.miou = all.miou(split.test_classes, &excluded);
    sr.fb_iou = all.fbiou();
    for (auto c : excluded) {
      if (std::find(report.excluded_classes.begin(), report.excluded_classes.end(), c) == report.excluded_classes.end()) {
        report.excluded_classes.push_back(c);
      }
    }
    mious.push_back(sr.miou);
    fbs.push_back(sr.fb_iou);
    report.seeds.push_back(std::move(sr));
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  report.mean_miou = mean(mious);
  report.mean_fb_iou = mean(fbs);
  report.std_miou = population_std(mious, report.mean_miou);
  report.std_fb_iou = population_std(fbs, report.mean_fb_iou);
  return report;
}

namespace detail {
inline std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}
}  // namespace detail

/// Header `seed,fold,class,iou,fb_iou`; per seed one row per class and a
/// `mean` row, then cross-seed `mean` and `std` rows.
inline std::string report_csv(const eval_report& r) {
  std::string out = "seed,fold,class,iou,fb_iou\n";
  const std::string fold = std::to_string(r.fold);
  for (const auto& s : r.seeds) {
    const std::string seed = std::to_string(s.seed);
    for (const auto& c : s.classes) {
      out += seed + "," + fold + "," + detail::csv_field(r.class_names[c.class_index]) + "," + detail::fmt6(c.iou) + "," +
             detail::fmt6(c.fb_iou) + "\n";
    }
    out += seed + "," + fold + ",mean," + detail::fmt6(s.miou) + "," + detail::fmt6(s.fb_iou) + "\n";
  }
  out += "mean," + fold + ",mean," + detail::fmt6(r.mean_miou) + "," + detail::fmt6(r.mean_fb_iou) + "\n";
  out += "std," + fold + ",mean," + detail::fmt6(r.std_miou) + "," + detail::fmt6(r.std_fb_iou) + "\n";
  return out;
}

}  // namespace mianet
