// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mianet/commands.hpp"
#include "mianet/mianet.hpp"
#include "oracles.hpp"

using namespace mianet;
namespace fs = std::filesystem;

namespace {

struct outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;
int ran = 0;
std::string only;  // optional substring filter on criterion names

void report(const std::string& name, const std::function<outcome()>& fn) {
  if (!only.empty() && name.find(only) == std::string::npos) return;
  ++ran;
  const auto t0 = std::chrono::steady_clock::now();
  outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

bool rel_ok(double got, double want, double tol) {
  return std::abs(got - want) <= tol * std::max({std::abs(got), std::abs(want), 1e-12});
}

// ---------------------------------------------------------------------------

outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  rng gen(2024);
  const double tol = 1e-6;
  std::size_t bad = 0, instances = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t c = 1 + gen.index(8), n1 = 1 + gen.index(30), n2 = 1 + gen.index(30);
    const tensor a = oracle::random_tensor({c, n1}, gen), b = oracle::random_tensor({c, n2}, gen);
    const tensor got = cosine_similarity_matrix(a, b), want = oracle::cosine_matrix(a, b);
    for (std::size_t k = 0; k < got.size(); ++k) bad += !rel_ok(got[k], want[k], tol);
    ++instances;
  }
  for (int i = 0; i < 100; ++i) {
    const std::size_t c = 1 + gen.index(6), h = 1 + gen.index(16), w = 1 + gen.index(16);
    const tensor f = oracle::random_tensor({c, h, w}, gen);
    binary_mask m = oracle::random_mask(h, w, gen);
    m.set(gen.index(h), gen.index(w), true);
    const tensor got = masked_average_pool(f, m).value, want = oracle::masked_mean(f, m);
    for (std::size_t k = 0; k < c; ++k) bad += !rel_ok(got[k], want[k], tol);
    ++instances;
  }
  for (int i = 0; i < 100; ++i) {
    const std::size_t h = 1 + gen.index(40), w = 1 + gen.index(40);
    const std::size_t oh = 1 + gen.index(h), ow = 1 + gen.index(w);
    const tensor x = oracle::random_tensor({2, h, w}, gen);
    const tensor got = average_pool_to(x, oh, ow), want = oracle::adaptive_pool(x, oh, ow);
    for (std::size_t k = 0; k < got.size(); ++k) bad += !rel_ok(got[k], want[k], tol);
    ++instances;
  }
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 1 + gen.index(300);
    const tensor a = oracle::random_tensor({n}, gen, -5, 5), b = oracle::random_tensor({n}, gen, -5, 5);
    bad += !rel_ok(l2_distance(a, b), oracle::l2(a.storage(), b.storage()), tol);
    ++instances;
  }
  for (int i = 0; i < 100; ++i) {
    const std::size_t rows = 1 + gen.index(1000), c = 1 + gen.index(16);
    const tensor r = oracle::random_tensor({rows, c}, gen), anchor = oracle::random_tensor({c}, gen);
    std::vector<std::size_t> cand;
    for (std::size_t k = 0; k < rows; ++k)
      if (gen.uniform() < 0.6) cand.push_back(k);
    if (cand.empty()) cand.push_back(0);
    bad += *gim::hardest_positive(anchor, r, cand) != oracle::farthest(anchor.storage(), r, cand);
    ++instances;
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 10.0,
          std::to_string(instances) + " instances over 5 functions, " + std::to_string(bad) + " mismatches at 1e-6, " +
              fmt("%.2f s (limit 10 s)", secs)};
}

// Toy episode for gradient checks: c = 8, d = 8, scales (12,12),(6,6).
episodes::episode toy_episode(rng& gen, std::size_t c, std::size_t d) {
  episodes::episode ep;
  ep.class_name = "mug";
  auto blob = [&](std::size_t n) {
    binary_mask m(n, n);
    const double cy = gen.uniform(0.3, 0.7) * n, cx = gen.uniform(0.3, 0.7) * n, r = gen.uniform(0.2, 0.3) * n;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) m.set(y, x, std::hypot(y + 0.5 - cy, x + 0.5 - cx) <= r);
    return m;
  };
  auto feats = [&] {
    return episodes::encoded_image{oracle::random_tensor({c, 12, 12}, gen, 0.0, 1.0),
                                   oracle::random_tensor({c, 12, 12}, gen, 0.0, 1.0)};
  };
  ep.support.push_back({0, feats(), blob(24)});
  ep.query = feats();
  ep.query_mask = blob(24);
  ep.word = oracle::random_tensor({d}, gen);
  return ep;
}

outcome gradient_verification() {
  const auto t0 = std::chrono::steady_clock::now();
  rng gen(77);
  model_config cfg;
  cfg.scales = {{12, 12}, {6, 6}};
  cfg.channels = cfg.high_channels = cfg.embedding_dim = 8;
  model net(cfg);
  const auto ep = toy_episode(gen, 8, 8);
  {
    ad::tape t;
    const auto res = net.forward(t, ep);
    if (!res.triplet) return {false, "triplet term not active on the toy episode"};
    if (t.value(*res.triplet)[0] <= 0.0) return {false, "triplet term is in its zero branch; no gradient to check"};
  }
  const auto r = ad::grad_check(net.parameters(), [&](ad::tape& t) { return *net.forward(t, ep).total; });

  // cross-entropy and triplet loss on their own inputs
  ad::parameter logits("logits", oracle::random_tensor({2, 6, 6}, gen, -2, 2));
  const binary_mask m = oracle::random_mask(6, 6, gen);
  const auto ce = ad::grad_check(std::vector<ad::parameter*>{&logits},
                                 [&](ad::tape& t) { return ad::cross_entropy_2class(t, t.leaf(logits), m); });
  ad::parameter a("a", oracle::random_tensor({8}, gen)), p("p", oracle::random_tensor({8}, gen)),
      n("n", oracle::random_tensor({8}, gen));
  const auto tl = ad::grad_check(std::vector<ad::parameter*>{&a, &p, &n}, [&](ad::tape& t) {
    return gim::triplet_loss(t, t.leaf(a), t.leaf(p), t.leaf(n), 10.0);
  });

  std::string failed;
  for (const auto* rep : {&r, &ce, &tl})
    for (const auto& f : rep->failures) failed += " " + f;
  const double secs = seconds_since(t0);
  const bool pass = r.passed() && ce.passed() && tl.passed() && secs < 60.0;
  const double worst = std::max({r.max_relative_error, ce.max_relative_error, tl.max_relative_error});
  return {pass, std::to_string(r.checked + ce.checked + tl.checked) +
                    " elements (GIG, LFG, fusion, CE, triplet through the total loss), " +
                    fmt("max rel err %.2e at rtol 1e-4, h 1e-5, ", worst) + std::to_string(r.kinks + ce.kinks + tl.kinks) +
                    " refined at kinks, " + fmt("%.1f s (limit 60 s)", secs) + (failed.empty() ? "" : "; failing:" + failed)};
}

outcome triplet_exactness() {
  const double l0 = gim::triplet_loss({tensor({2}, {0, 0}), tensor({2}, {1, 0}), tensor({2}, {3, 0}), 0.5});
  const double l1 = gim::triplet_loss({tensor({2}, {0, 0}), tensor({2}, {1, 0}), tensor({2}, {1.2, 0}), 0.5});
  const double margin = gim::triplet_sample{}.margin;
  model_config mc;
  const bool pass = l0 == 0.0 && l1 == std::max(1.0 + 0.5 - 1.2, 0.0) && margin == 0.5 && mc.margin == 0.5 &&
                    profile_defaults(profile::paper).margin == 0.5;
  return {pass, fmt("satisfied case %.17g, (1.2,0) case %.17g (direct arithmetic %.17g), default margin %.17g", l0, l1,
                    std::max(1.0 + 0.5 - 1.2, 0.0), margin)};
}

outcome hpm_paper_profile() {
  run_config rc = profile_defaults(profile::paper);
  const auto mc = rc.model_settings();
  episodes::synth_config sc;
  sc.samples_per_class = 2;
  const auto ds = episodes::synth_dataset(sc, 1);
  const episodes::toy_encoder enc({rc.channels, rc.high_channels, 16, rc.encoder_seed});
  std::vector<episodes::encoded_image> feats(ds.samples.size());
  feats[0] = enc.encode(ds.samples[0].image);
  feats[1] = enc.encode(ds.samples[1].image);
  const auto ep = episodes::resolve_episode(ds, feats, {ds.samples[0].class_index, {0}, 1});
  const model net(mc);
  const auto a = net.shot_pyramids(ep).at(0), b = net.shot_pyramids(ep).at(0);
  const std::size_t want[] = {60, 30, 15, 8};
  bool shapes = a.maps.size() == 4, range = true;
  std::string dims;
  for (std::size_t i = 0; i < a.maps.size(); ++i) {
    shapes = shapes && i < 4 && a.maps[i].shape() == tensor::shape_type{want[i], want[i]};
    dims += (i ? "," : "") + std::to_string(a.maps[i].dim(0)) + "x" + std::to_string(a.maps[i].dim(1));
    for (double v : a.maps[i].data()) range = range && v >= 0.0 && v <= 1.0;
  }
  const bool same = a == b;
  return {shapes && range && same, "scales " + dims + ", values in [0,1]: " + (range ? "yes" : "no") +
                                       ", repeat bit-identical: " + (same ? "yes" : "no") + ", c'=" +
                                       std::to_string(rc.high_channels)};
}

outcome ic_degeneracy() {
  rng gen(5);
  std::size_t bad = 0, cases = 0;
  for (auto [h, w, oh, ow] : std::vector<std::array<std::size_t, 4>>{{60, 60, 30, 30}, {30, 30, 15, 15}, {15, 15, 8, 8},
                                                                      {24, 24, 12, 12}, {7, 9, 3, 4}}) {
    const tensor q = oracle::random_tensor({5, h, w}, gen);
    bad += !(hpm::weighted_downsample(q, tensor({h, w}, 1.0), {oh, ow}) == average_pool_to(q, oh, ow));
    ++cases;
  }
  return {bad == 0, std::to_string(cases) + " size pairs, " + std::to_string(bad) + " differ (exact comparison)"};
}

outcome kshot_reduction() {
  episodes::synth_config sc;
  sc.samples_per_class = 6;
  const auto ds = episodes::synth_dataset(sc, 3);
  const episodes::toy_encoder enc({8, 8, 8, 7});
  const auto feats = episodes::encode_all(ds, enc);
  model_config mc;
  mc.channels = mc.high_channels = mc.embedding_dim = 8;
  model net(mc);
  rng gen(9);
  const tensor word = oracle::random_tensor({8}, gen);

  // K = 1: aggregation is the identity on the single-shot quantities
  const auto ep1 = episodes::resolve_episode(ds, feats, episodes::sample_episode_ref(ds, {0, 1, 2}, 1, gen), word);
  const auto& shot = ep1.support[0];
  const tensor q = resize_bilinear(ep1.query.high, 24, 24);
  const auto direct = hpm::build_prior_pyramid(resize_bilinear(shot.features.high, 24, 24), q, shot.mask, mc.prior_config());
  const tensor proto = gim::support_prototype(shot.features.mid, shot.mask).value;
  ad::tape t;
  const tensor rows = t.value(gim::region_features(t, t.constant(shot.features.mid), net.lfg()).rows);
  const auto agg1 = episodes::kshot_aggregate(net.shot_pyramids(ep1), {proto}, {rows});
  ad::tape t1;
  const auto fwd = net.forward(t1, ep1);
  const bool k1 = agg1.pyramid == direct && agg1.prototype == proto && agg1.region_rows == rows && fwd.pyramid == direct;

  // K = 5 against a scalar loop
  const auto ep5 = episodes::resolve_episode(ds, feats, episodes::sample_episode_ref(ds, {0, 1, 2}, 5, gen), word);
  const auto pyrs = net.shot_pyramids(ep5);
  std::vector<tensor> protos, regs;
  for (const auto& s : ep5.support) {
    protos.push_back(gim::support_prototype(s.features.mid, s.mask).value);
    ad::tape tr;
    regs.push_back(tr.value(gim::region_features(tr, tr.constant(s.features.mid), net.lfg()).rows));
  }
  const auto agg5 = episodes::kshot_aggregate(pyrs, protos, regs);
  double worst = 0;
  for (std::size_t s = 0; s < pyrs[0].maps.size(); ++s)
    for (std::size_t i = 0; i < pyrs[0].maps[s].size(); ++i) {
      long double acc = 0;
      for (const auto& p : pyrs) acc += p.maps[s][i];
      worst = std::max(worst, std::abs(agg5.pyramid.maps[s][i] - static_cast<double>(acc / 5)));
    }
  for (std::size_t k = 0; k < protos[0].size(); ++k) {
    long double acc = 0;
    for (const auto& p : protos) acc += p[k];
    worst = std::max(worst, std::abs(agg5.prototype[k] - static_cast<double>(acc / 5)));
  }
  bool rows_ok = agg5.region_rows.dim(0) == 5 * regs[0].dim(0);
  for (std::size_t i = 0; rows_ok && i < agg5.region_rows.dim(0); ++i)
    for (std::size_t k = 0; k < agg5.region_rows.dim(1); ++k)
      rows_ok = rows_ok && agg5.region_rows(i, k) == regs[i / regs[0].dim(0)](i % regs[0].dim(0), k);
  ad::tape t5;
  const bool fwd5 = net.forward(t5, ep5).pyramid == agg5.pyramid;
  return {k1 && worst <= 1e-12 && rows_ok && fwd5,
          std::string("K=1 bit-identical: ") + (k1 ? "yes" : "no") + fmt(", K=5 max abs dev %.2e (tol 1e-12)", worst) +
              ", region union exact: " + (rows_ok ? "yes" : "no")};
}

outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const run_config rc = profile_defaults(profile::desk);
  const auto ds = episodes::synth_dataset(episodes::synth_config{}, 11);
  episode_source src;
  src.data = &ds;
  src.features = episodes::encode_all(ds, episodes::toy_encoder({rc.channels, rc.high_channels, 16, rc.encoder_seed}));
  const auto table = gim::make_toy_embeddings(ds.class_names, rc.embedding_dim, rc.embedding_seed);
  for (const auto& n : ds.class_names) src.class_words.push_back(gim::lookup_embedding(n, table));
  const auto split = episodes::make_fold_split(ds, 0);
  rng gen(5);
  std::vector<episodes::episode> pool;
  for (int i = 0; i < 8; ++i) pool.push_back(src.resolve(episodes::sample_episode_ref(ds, split.train_classes, 1, gen)));

  model net(rc.model_settings());
  auto pool_loss = [&] {
    double s = 0, seg = 0;
    for (const auto& ep : pool) {
      ad::tape t;
      const auto r = net.forward(t, ep);
      s += t.value(*r.total)[0];
      seg += t.value(*r.seg1)[0] + t.value(*r.seg2)[0];
    }
    return std::pair{s / pool.size(), seg / pool.size()};
  };
  const auto [before, seg_before] = pool_loss();
  ad::sgd opt({5e-3, rc.batch_size, rc.momentum, rc.weight_decay});
  train(net, opt, cycled_episodes(pool, rc.batch_size), 500);
  const auto [after, seg_after] = pool_loss();
  double iou = 0;
  for (const auto& ep : pool) {
    const auto pc = episodes::foreground_counts(net.predict(ep), ep.query_mask);
    iou += static_cast<double>(pc.intersection) / static_cast<double>(pc.union_);
  }
  iou /= pool.size();
  const double ratio = before / after, secs = seconds_since(t0);
  return {ratio >= 10.0 && iou >= 0.90 && secs < 300.0,
          fmt("total loss %.4f -> %.4f (%.1fx, need 10x), ", before, after, ratio) +
              fmt("segmentation-only %.4f -> %.4f, ", seg_before, seg_after) +
              fmt("mean fg IoU %.3f (need 0.90), %.0f s (limit 300 s)", iou, secs)};
}

run_config desk_run(const fs::path& root) {
  run_config c = profile_defaults(profile::desk);
  c.data = (root / "data" / "manifest.json").string();
  c.samples_per_class = 6;
  return c;
}

void make_data(const fs::path& root) {
  if (fs::exists(root / "data" / "manifest.json")) return;
  run_config c = desk_run(root);
  c.out = (root / "data").string();
  std::ostringstream sink;
  cli::cmd_synth(c, sink);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

outcome protocol_determinism(const fs::path& root) {
  make_data(root);
  run_config c = desk_run(root);
  c.epochs = 1;
  c.steps_per_epoch = 5;
  c.out = (root / "det_train").string();
  std::ostringstream sink;
  cli::cmd_train(c, sink);
  c.checkpoint = (root / "det_train" / "checkpoint.miac").string();
  c.pairs = 20;
  std::vector<std::string> csvs;
  for (std::size_t threads : {1, 4, 1, 3}) {
    c.threads = threads;
    c.out = (root / ("det_eval_" + std::to_string(csvs.size()))).string();
    cli::cmd_eval(c, sink);
    csvs.push_back(slurp(fs::path(c.out) / "eval.csv"));
  }
  bool same = !csvs[0].empty();
  for (const auto& s : csvs) same = same && s == csvs[0];
  return {same, "5 seeds x 20 pairs, threads {1,4,1,3}: " + std::string(same ? "identical" : "DIFFERENT") + " eval.csv (" +
                    std::to_string(csvs[0].size()) + " bytes)"};
}

outcome ablation_wiring(const fs::path& root) {
  make_data(root);
  std::size_t runs = 0;
  std::vector<std::string> broken;
  auto attempt = [&](const std::string& label, const std::function<void(run_config&)>& set) {
    run_config c = desk_run(root);
    set(c);
    c.epochs = 1;
    c.steps_per_epoch = 2;
    c.batch_size = 2;
    c.pairs = 3;
    c.seeds = {1};
    c.out = (root / ("abl_" + std::to_string(runs))).string();
    c.checkpoint.clear();
    std::ostringstream sink;
    try {
      const auto rows = cli::cmd_train(c, sink);
      for (const auto& r : rows)
        if (!std::isfinite(r.total)) throw std::runtime_error("non-finite loss");
      c.checkpoint = (fs::path(c.out) / "checkpoint.miac").string();
      const auto rep = cli::cmd_eval(c, sink);
      if (!std::isfinite(rep.mean_miou)) throw std::runtime_error("non-finite mIoU");
    } catch (const std::exception& e) {
      broken.push_back(label + " (" + e.what() + ")");
    }
    ++runs;
  };
  // every combination of the boolean switches
  for (int bits = 0; bits < 64; ++bits) {
    attempt("flags " + std::to_string(bits), [bits](run_config& c) {
      c.use_hpm = bits & 1;
      c.use_gim = bits & 2;
      c.one_scale = bits & 4;
      c.info_channels = bits & 8;
      c.triplet_loss = bits & 16;
      c.word_embeddings = bits & 32;
    });
  }
  for (double m : {0.1, 0.2, 0.5, 1.0})
    for (auto metric : {gim::distance_metric::euclidean, gim::distance_metric::cosine}) {
      attempt(fmt("margin %.1f ", m) + metric_name(metric), [m, metric](run_config& c) {
        c.margin = m;
        c.metric = metric;
      });
    }
  std::string detail = std::to_string(runs) + " train+eval runs (64 switch combinations, 4 margins x 2 metrics), " +
                       std::to_string(broken.size()) + " failed";
  for (const auto& b : broken) detail += "; " + b;
  return {broken.empty(), detail};
}

outcome metric_units() {
  auto mask = [](const char* s) {
    binary_mask m(4, 4);
    for (std::size_t i = 0; i < 16; ++i) m.set(i / 4, i % 4, s[i] == '1');
    return m;
  };
  const binary_mask pred = mask("1100110000000000"), truth = mask("1000100010000000");
  const auto r = episodes::miou({pred}, {truth}, {0}, {0});
  // background: intersection 11, union 14
  const double fb = episodes::fbiou({pred}, {truth});
  const bool pass = r.per_class.at(0) == 0.4 && r.mean == 0.4 && fb == (0.4 + 11.0 / 14.0) / 2;
  return {pass, fmt("IoU %.17g (want 0.4), mIoU %.17g, FB-IoU %.17g (want %.17g)", r.per_class.at(0), r.mean, fb,
                    (0.4 + 11.0 / 14.0) / 2)};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) only = argv[1];
  const fs::path root = oracle::scratch_dir(MIANET_TEST_TMP, "run");
  report("oracle equivalence", oracle_equivalence);
  report("gradient verification", gradient_verification);
  report("triplet exactness", triplet_exactness);
  report("prior pyramid shape and range", hpm_paper_profile);
  report("information-channel degeneracy", ic_degeneracy);
  report("k-shot reduction", kshot_reduction);
  report("overfit", overfit);
  report("protocol determinism", [&] { return protocol_determinism(root); });
  report("ablation wiring", [&] { return ablation_wiring(root); });
  report("metric units", metric_units);
  std::printf("%d of %d criteria failed\n", failures, ran);
  return failures == 0 ? 0 : 1;
}
