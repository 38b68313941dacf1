#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mianet/checkpoint.hpp"
#include "mianet/dataset_io.hpp"
#include "mianet/episodes.hpp"
#include "mianet/gim.hpp"
#include "mianet/model.hpp"
#include "mianet/protocol.hpp"
#include "mianet/run_config.hpp"
#include "mianet/tensor_io.hpp"
#include "mianet/train.hpp"

// Implementations of the command-line subcommands. Each writes its resolved
// configuration as config.json into the output directory.

namespace mianet::cli {

namespace fs = std::filesystem;

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

inline fs::path prepare_out(const run_config& c) {
  const fs::path out = c.out.empty() ? fs::path(".") : fs::path(c.out);
  fs::create_directories(out);
  write_text(out / "config.json", to_json(c).dump(2) + "\n");
  return out;
}

/// Dataset, frozen features and class word vectors for one run.
struct workspace {
  episodes::dataset data;
  episode_source source;
};

inline gim::embedding_table embeddings_for(const run_config& c, const std::vector<std::string>& class_names) {
  if (c.embeddings.empty()) return gim::make_toy_embeddings(class_names, c.embedding_dim, c.embedding_seed);
  auto table = gim::load_word2vec(c.embeddings);
  if (table.dimension() != c.embedding_dim) {
    throw std::invalid_argument("embedding file has d=" + std::to_string(table.dimension()) + ", config expects d=" +
                                std::to_string(c.embedding_dim));
  }
  return table;
}

inline std::unique_ptr<workspace> load_workspace(const run_config& c) {
  if (c.data.empty()) throw std::invalid_argument("no dataset given (use --data <manifest>)");
  auto ws = std::make_unique<workspace>();
  ws->data = load_dataset(c.data);
  if (c.fold >= ws->data.folds) throw std::invalid_argument("fold " + std::to_string(c.fold) + " out of range");
  const episodes::toy_encoder enc({c.channels, c.high_channels, 16, c.encoder_seed});
  ws->source.data = &ws->data;
  ws->source.features = episodes::encode_all(ws->data, enc);
  if (c.use_gim && c.word_embeddings) {
    const auto table = embeddings_for(c, ws->data.class_names);
    for (const auto& name : ws->data.class_names) ws->source.class_words.push_back(gim::lookup_embedding(name, table));
  }
  return ws;
}

// ---------------------------------------------------------------------------

inline void cmd_synth(const run_config& c, std::ostream& log) {
  c.validate();
  const fs::path out = prepare_out(c);
  episodes::synth_config sc;
  sc.height = sc.width = c.image_size;
  sc.samples_per_class = c.samples_per_class;
  const auto ds = episodes::synth_dataset(sc, c.data_seed);
  save_dataset(out, ds);
  gim::save_word2vec(out / "embeddings.txt", gim::make_toy_embeddings(ds.class_names, c.embedding_dim, c.embedding_seed));
  log << "synth: " << ds.samples.size() << " samples, " << ds.class_names.size() << " classes, " << ds.folds
      << " folds, " << ds.height << "x" << ds.width << " -> " << (out / "manifest.json").string() << "\n";
}

/// Writes the prior maps of one test-fold episode as PGM and MIAT.
inline std::vector<tensor> cmd_prior(const run_config& c, std::ostream& log) {
  c.validate();
  const auto ws = load_workspace(c);
  const fs::path out = prepare_out(c);
  const auto split = episodes::make_fold_split(ws->data, c.fold);
  rng gen(c.seeds.front());
  episodes::episode_ref ref;
  for (std::size_t i = 0; i <= c.episode; ++i) ref = episodes::sample_episode_ref(ws->data, split.test_classes, c.shots, gen);
  const auto ep = ws->source.resolve(ref);

  auto mc = c.model_settings();
  mc.use_hpm = true;
  const model net(mc);
  std::vector<tensor> protos;
  std::vector<tensor> rows;
  const auto pyramids = net.shot_pyramids(ep);
  for (std::size_t k = 0; k < pyramids.size(); ++k) {
    protos.push_back(tensor({1}));
    rows.push_back(tensor({1, 1}));
  }
  const auto agg = episodes::kshot_aggregate(pyramids, protos, rows);

  log << "prior: class '" << ep.class_name << "' query " << ep.query_id << " support";
  for (const auto& s : ep.support) log << " " << s.image_id;
  log << "\n";
  for (std::size_t i = 0; i < agg.pyramid.maps.size(); ++i) {
    const tensor& m = agg.pyramid.maps[i];
    const std::string stem = "prior_" + std::to_string(i + 1);
    save_pgm(out / (stem + ".pgm"), m);
    save_miat(out / (stem + ".miat"), m);
    const auto [lo, hi] = std::minmax_element(m.data().begin(), m.data().end());
    char buf[128];
    std::snprintf(buf, sizeof buf, "m_ins^%zu: %zux%zu min %.6f max %.6f\n", i + 1, m.dim(0), m.dim(1), *lo, *hi);
    log << buf;
  }
  if (agg.pyramid.empty_foreground) log << "warning: support mask empty at feature resolution\n";
  return agg.pyramid.maps;
}

inline fs::path checkpoint_path(const run_config& c, const fs::path& out) {
  return c.checkpoint.empty() ? out / "checkpoint.miac" : fs::path(c.checkpoint);
}

inline std::vector<loss_row> cmd_train(const run_config& c, std::ostream& log) {
  c.validate();
  const auto ws = load_workspace(c);
  const fs::path out = prepare_out(c);
  const auto split = episodes::make_fold_split(ws->data, c.fold);
  model net(c.model_settings());
  ad::sgd opt({c.learning_rate, c.batch_size, c.momentum, c.weight_decay});
  const auto stream = random_episodes(ws->source, split, c.shots, c.train_seed);
  const std::size_t steps = c.total_steps();
  std::vector<loss_row> rows;
  try {
    rows = train(net, opt, stream, steps, [&](const loss_row& r) {
      if (r.step == 1 || r.step % 10 == 0 || r.step == steps) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "step %zu/%zu L_seg1 %.5f L_seg2 %.5f L_triplet %.5f total %.5f\n", r.step, steps,
                      r.seg1, r.seg2, r.triplet, r.total);
        log << buf;
      }
    });
  } catch (const divergence_error& e) {
    write_text(out / "nan_dump.txt", e.dump());
    throw std::runtime_error(std::string(e.what()) + "; diagnostics in " + (out / "nan_dump.txt").string());
  }
  write_text(out / "loss_log.csv", loss_log_csv(rows));
  const auto params = net.parameters();
  const auto path = checkpoint_path(c, out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(path, std::vector<const ad::parameter*>(params.begin(), params.end()));
  std::size_t skipped = 0;
  for (const auto& r : rows) skipped += r.triplets_skipped;
  log << "train: " << steps << " steps, " << skipped << " triplet terms skipped, checkpoint " << path.string() << "\n";
  return rows;
}

inline eval_report cmd_eval(const run_config& c, std::ostream& log) {
  c.validate();
  if (c.checkpoint.empty()) throw std::invalid_argument("no checkpoint given (use --checkpoint <file>)");
  const auto ws = load_workspace(c);
  model net(c.model_settings());
  const auto params = net.parameters();
  load_checkpoint(c.checkpoint, params);
  const fs::path out = prepare_out(c);
  const auto split = episodes::make_fold_split(ws->data, c.fold);
  const auto report = evaluate(net, ws->source, split, {c.seeds, c.pairs, c.shots, c.threads});
  write_text(out / "eval.csv", report_csv(report));
  char buf[200];
  std::snprintf(buf, sizeof buf, "fold %zu: mIoU %.4f +- %.4f  FB-IoU %.4f +- %.4f  (%zu seeds x %zu pairs, K=%zu)\n",
                report.fold, report.mean_miou, report.std_miou, report.mean_fb_iou, report.std_fb_iou, c.seeds.size(),
                c.pairs, c.shots);
  log << buf;
  for (auto cls : report.excluded_classes) {
    log << "warning: class '" << ws->data.class_names[cls] << "' drew no episodes under some seed and was excluded\n";
  }
  return report;
}

// ---------------------------------------------------------------------------
// Format conversion.

inline std::string lower_extension(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return e;
}

/// Rows of the last dimension, one CSV line each, full precision.
inline std::string tensor_csv(const tensor& t) {
  const std::size_t cols = t.dim(t.rank() - 1);
  std::string out;
  char buf[40];
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g", t[i]);
    out += buf;
    out += (i + 1) % cols == 0 ? "\n" : ",";
  }
  return out;
}

inline tensor read_tensor_csv(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line == "\r") continue;
    std::stringstream ls(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ls, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::logic_error&) {
        throw format_error("non-numeric CSV cell '" + cell + "' in " + p.string());
      }
      ++n;
    }
    if (rows > 0 && n != cols) throw format_error("ragged CSV rows in " + p.string());
    cols = n;
    ++rows;
  }
  if (rows == 0 || cols == 0) throw format_error("empty CSV " + p.string());
  return tensor({rows, cols}, std::move(values));
}

inline tensor as_map(const tensor& t) {
  if (t.rank() == 2) return t;
  if (t.rank() == 3 && t.dim(0) == 1) return t.reshaped({t.dim(1), t.dim(2)});
  throw std::invalid_argument("PGM export needs a [h,w] or [1,h,w] tensor, got " + shape_string(t.shape()));
}

/// MIAT <-> MIAT/PGM/CSV, chosen by file extension.
inline void cmd_convert(const fs::path& in, const fs::path& out, std::ostream& log) {
  const auto src = lower_extension(in), dst = lower_extension(out);
  tensor t;
  if (src == ".miat") {
    t = load_miat(in);
  } else if (src == ".pgm") {
    t = load_pgm_map(in);
  } else if (src == ".csv") {
    t = read_tensor_csv(in);
  } else {
    throw std::invalid_argument("unsupported input format '" + src + "' (expected .miat, .pgm or .csv)");
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  if (dst == ".miat") {
    save_miat(out, t);
  } else if (dst == ".pgm") {
    save_pgm(out, as_map(t));
  } else if (dst == ".csv") {
    write_text(out, tensor_csv(t));
  } else {
    throw std::invalid_argument("unsupported output format '" + dst + "' (expected .miat, .pgm or .csv)");
  }
  log << "convert: " << in.string() << " " << shape_string(t.shape()) << " -> " << out.string() << "\n";
}

}  // namespace mianet::cli
