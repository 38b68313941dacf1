#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "mianet/checkpoint.hpp"
#include "mianet/model.hpp"
#include "mianet/protocol.hpp"
#include "mianet/train.hpp"
#include "oracles.hpp"

using namespace mianet;

namespace {

constexpr std::size_t kC = 8, kD = 8;

struct fixture {
  episodes::dataset data;
  episode_source src;
  episodes::fold_split split;

  fixture() {
    episodes::synth_config cfg;
    cfg.samples_per_class = 6;
    data = episodes::synth_dataset(cfg, 1);
    src.data = &data;
    src.features = episodes::encode_all(data, episodes::toy_encoder({kC, kC, 8, 7}));
    const auto table = gim::make_toy_embeddings(data.class_names, kD, 1);
    for (const auto& n : data.class_names) src.class_words.push_back(gim::lookup_embedding(n, table));
    split = episodes::make_fold_split(data, 0);
  }

  episodes::episode draw(rng& gen, std::size_t shots = 1) const {
    return src.resolve(episodes::sample_episode_ref(data, split.train_classes, shots, gen));
  }
};

const fixture& fx() {
  static const fixture f;
  return f;
}

model_config small_config() {
  model_config cfg;
  cfg.channels = kC;
  cfg.high_channels = kC;
  cfg.embedding_dim = kD;
  return cfg;
}

std::string checkpoint_bytes(model& m) {
  std::ostringstream os;
  const auto params = m.parameters();
  const std::vector<const ad::parameter*> cp(params.begin(), params.end());
  write_checkpoint(os, cp);
  return os.str();
}

}  // namespace

TEST(Model, ForwardProducesFiniteLossTerms) {
  model m(small_config());
  rng gen(1);
  const auto ep = fx().draw(gen);
  ad::tape t;
  const auto res = m.forward(t, ep);
  EXPECT_EQ(t.value(res.logits).shape(), (tensor::shape_type{2, 96, 96}));
  ASSERT_TRUE(res.total && res.seg1 && res.seg2);
  EXPECT_TRUE(std::isfinite(t.value(*res.total)[0]));
  ASSERT_TRUE(res.triplet.has_value());
  EXPECT_NEAR(t.value(*res.total)[0], t.value(*res.seg1)[0] + t.value(*res.seg2)[0] + t.value(*res.triplet)[0], 1e-12);
  EXPECT_EQ(res.pyramid.maps.size(), 4u);
}

TEST(Model, EveryParameterReceivesGradient) {
  model m(small_config());
  rng gen(2);
  for (int i = 0; i < 8; ++i) {
    ad::tape t;
    t.backward(*m.forward(t, fx().draw(gen)).total);
  }
  for (auto* p : m.parameters()) {
    double norm = 0;
    for (double g : p->gradient.data()) norm += g * g;
    EXPECT_GT(norm, 0.0) << p->name;
  }
}

TEST(Model, PredictWithholdsTheQueryMask) {
  model m(small_config());
  rng gen(3);
  auto ep = fx().draw(gen);
  const binary_mask a = m.predict(ep);
  ep.query_mask = binary_mask(96, 96, 1);
  EXPECT_EQ(m.predict(ep), a);
  for (auto* p : m.parameters())
    for (double g : p->gradient.data()) ASSERT_EQ(g, 0.0);

  ad::tape t;
  ep.query_mask_available = false;
  const auto res = m.forward(t, ep);
  EXPECT_FALSE(res.total.has_value());
  EXPECT_FALSE(res.triplet.has_value());
}

TEST(Model, AblationPaths) {
  rng gen(4);
  const auto ep = fx().draw(gen);
  auto run = [&](model_config cfg, std::size_t expected_params) {
    model m(std::move(cfg));
    EXPECT_EQ(m.parameters().size(), expected_params);
    ad::tape t;
    const auto res = m.forward(t, ep);
    EXPECT_TRUE(std::isfinite(t.value(*res.total)[0]));
    return res.triplet.has_value();
  };
  const std::size_t fusion4 = 4 * 6, gig = 4, lfg = 6;
  EXPECT_TRUE(run(small_config(), fusion4 + gig + lfg));
  auto no_gim = small_config();
  no_gim.use_gim = false;
  EXPECT_FALSE(run(no_gim, fusion4));
  auto no_trip = small_config();
  no_trip.use_triplet = false;
  EXPECT_FALSE(run(no_trip, fusion4 + gig));
  auto no_hpm = small_config();
  no_hpm.use_hpm = false;
  EXPECT_TRUE(run(no_hpm, fusion4 + gig + lfg));
  auto one = small_config();
  one.scales = {{24, 24}};
  EXPECT_TRUE(run(one, 6 + gig + lfg));
  auto no_we = small_config();
  no_we.use_word_embeddings = false;
  EXPECT_TRUE(run(no_we, fusion4 + gig + lfg));
  auto cos = small_config();
  cos.metric = gim::distance_metric::cosine;
  cos.stop_gradient_mined = true;
  EXPECT_TRUE(run(cos, fusion4 + gig + lfg));
}

TEST(Model, NoHpmUsesZeroPriors) {
  auto cfg = small_config();
  cfg.use_hpm = false;
  model m(cfg);
  rng gen(5);
  for (const auto& p : m.shot_pyramids(fx().draw(gen)))
    for (const auto& map : p.maps)
      for (double v : map.data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, FiveShot) {
  model m(small_config());
  rng gen(6);
  const auto ep = fx().draw(gen, 5);
  ASSERT_EQ(ep.support.size(), 5u);
  ad::tape t;
  const auto res = m.forward(t, ep);
  EXPECT_TRUE(std::isfinite(t.value(*res.total)[0]));

  // the aggregated prior is the per-scale mean of the shot priors
  const auto shots = m.shot_pyramids(ep);
  for (std::size_t s = 0; s < res.pyramid.maps.size(); ++s)
    for (std::size_t i = 0; i < res.pyramid.maps[s].size(); ++i) {
      long double acc = 0;
      for (const auto& p : shots) acc += p.maps[s][i];
      EXPECT_NEAR(res.pyramid.maps[s][i], static_cast<double>(acc / 5), 1e-12);
    }
}

TEST(Model, RejectsBadInputs) {
  model m(small_config());
  rng gen(7);
  auto ep = fx().draw(gen);
  ep.word = tensor({3});
  ad::tape t;
  EXPECT_THROW(m.forward(t, ep), std::invalid_argument);
  ep = fx().draw(gen);
  ep.support.clear();
  EXPECT_THROW(m.forward(t, ep), std::invalid_argument);
  ep = fx().draw(gen);
  ep.query.mid = tensor({4, 24, 24});
  EXPECT_THROW(m.forward(t, ep), std::invalid_argument);
  auto bad = small_config();
  bad.margin = 0.0;
  EXPECT_THROW(model{bad}, std::invalid_argument);
}

TEST(Train, ZeroStepsLeavesInitialWeights) {
  model a(small_config()), b(small_config());
  ad::sgd opt({});
  rng gen(8);
  const auto log = train(a, opt, [&](std::size_t, std::size_t) { return fx().draw(gen); }, 0);
  EXPECT_TRUE(log.empty());
  EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
}

TEST(Train, LossDecreasesOnAFixedEpisode) {
  model m(small_config());
  ad::sgd_config sc;
  sc.batch_size = 1;
  ad::sgd opt(sc);
  rng gen(9);
  const std::vector<episodes::episode> pool{fx().draw(gen)};
  const auto log = train(m, opt, cycled_episodes(pool, 1), 30);
  ASSERT_EQ(log.size(), 30u);
  EXPECT_LT(log.back().total, log.front().total);
  EXPECT_EQ(log[3].step, 4u);
  const std::string csv = loss_log_csv(log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,L_seg1,L_seg2,L_triplet,total");
}

TEST(Train, NonFiniteLossRaises) {
  model m(small_config());
  m.fusion().stages()[0].head_bias.value[1] = std::numeric_limits<double>::quiet_NaN();
  ad::sgd opt({});
  rng gen(10);
  try {
    train(m, opt, [&](std::size_t, std::size_t) { return fx().draw(gen); }, 1);
    FAIL() << "expected divergence_error";
  } catch (const divergence_error& e) {
    EXPECT_NE(e.dump().find("ifm.scale0.head.bias finite=0"), std::string::npos) << e.dump();
  }
}

TEST(Evaluate, DeterministicAcrossThreadCounts) {
  model m(small_config());
  eval_protocol proto;
  proto.seeds = {1, 2, 3};
  proto.pairs = 6;
  proto.threads = 1;
  const auto r1 = evaluate(m, fx().src, fx().split, proto);
  proto.threads = 3;
  const auto r3 = evaluate(m, fx().src, fx().split, proto);
  EXPECT_EQ(report_csv(r1), report_csv(r3));
  EXPECT_EQ(report_csv(evaluate(m, fx().src, fx().split, proto)), report_csv(r3));

  ASSERT_EQ(r1.seeds.size(), 3u);
  double mean = 0, fb = 0;
  for (const auto& s : r1.seeds) {
    mean += s.miou;
    fb += s.fb_iou;
    EXPECT_GE(s.miou, 0.0);
    EXPECT_LE(s.miou, 1.0);
  }
  EXPECT_NEAR(r1.mean_miou, mean / 3, 1e-15);
  EXPECT_NEAR(r1.mean_fb_iou, fb / 3, 1e-15);
  double var = 0;
  for (const auto& s : r1.seeds) var += (s.miou - mean / 3) * (s.miou - mean / 3);
  EXPECT_NEAR(r1.std_miou, std::sqrt(var / 3), 1e-15);
}

TEST(Evaluate, SingleSeedReport) {
  model m(small_config());
  eval_protocol proto;
  proto.seeds = {4};
  proto.pairs = 10;
  const auto r = evaluate(m, fx().src, fx().split, proto);
  ASSERT_EQ(r.seeds.size(), 1u);
  EXPECT_EQ(r.std_miou, 0.0);
  EXPECT_EQ(r.mean_miou, r.seeds[0].miou);
  const std::string csv = report_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "seed,fold,class,iou,fb_iou");
  EXPECT_NE(csv.find("\nmean,0,mean,"), std::string::npos);
}
