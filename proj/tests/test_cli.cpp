#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "mianet/tensor_io.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;

namespace {

struct result {
  int code = 0;
  std::string output;
};

result run(const std::string& args) {
  const std::string cmd = std::string(MIANET_CLI_PATH) + " " + args + " 2>&1";
  result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {-1, "popen failed"};
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path tmp(const std::string& name) { return oracle::scratch_dir(MIANET_TEST_TMP, name); }

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Small synthetic set shared by the tests that need a dataset.
const fs::path& small_data() {
  static const fs::path dir = [] {
    const fs::path d = tmp("data");
    const auto r = run("synth --samples-per-class 4 --out " + d.string());
    EXPECT_EQ(r.code, 0) << r.output;
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, SynthIsByteIdentical) {
  const fs::path a = tmp("synth_a"), b = tmp("synth_b");
  ASSERT_EQ(run("synth --samples-per-class 2 --out " + a.string()).code, 0);
  ASSERT_EQ(run("synth --samples-per-class 2 --out " + b.string()).code, 0);
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
  EXPECT_EQ(slurp(a / "embeddings.txt"), slurp(b / "embeddings.txt"));
  for (const char* f : {"images/000000.miat", "images/000023.miat", "masks/000005.pgm"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_TRUE(fs::exists(a / "config.json"));
}

TEST(Cli, PriorWritesOneMapPerScale) {
  const fs::path out = tmp("prior");
  const auto r = run("prior --data " + (small_data() / "manifest.json").string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  for (int i = 1; i <= 4; ++i) {
    EXPECT_TRUE(fs::exists(out / ("prior_" + std::to_string(i) + ".pgm"))) << i;
    EXPECT_TRUE(fs::exists(out / ("prior_" + std::to_string(i) + ".miat"))) << i;
  }
  EXPECT_NE(r.output.find("m_ins^1: 24x24"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("m_ins^4: 3x3"), std::string::npos) << r.output;
  const auto m = mianet::load_miat(out / "prior_2.miat");
  EXPECT_EQ(m.shape(), (mianet::tensor::shape_type{12, 12}));
}

TEST(Cli, PaperProfileScales) {
  const fs::path out = tmp("prior_paper");
  const auto r = run("prior --profile paper --image-size 96 --data " + (small_data() / "manifest.json").string() +
                     " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("m_ins^1: 60x60"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("m_ins^2: 30x30"), std::string::npos);
  EXPECT_NE(r.output.find("m_ins^3: 15x15"), std::string::npos);
  EXPECT_NE(r.output.find("m_ins^4: 8x8"), std::string::npos);
}

TEST(Cli, ErrorsAreOneLineWithNonzeroExit) {
  auto r = run("prior --out " + tmp("err").string());
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(r.output.rfind("error: ", 0), 0u) << r.output;
  EXPECT_EQ(std::count(r.output.begin(), r.output.end(), '\n'), 1);

  r = run("eval --data " + (small_data() / "manifest.json").string() + " --out " + tmp("err2").string());
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(r.output.rfind("error: ", 0), 0u) << r.output;

  r = run("convert /nonexistent/a.miat " + (tmp("err3") / "b.csv").string());
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(run("").code == 0, false);
  EXPECT_NE(run("train --metric manhattan").code, 0);
}

TEST(Cli, ConvertRoundTrips) {
  const fs::path dir = tmp("convert");
  mianet::rng gen(1);
  const auto t = mianet::quantize_to_float(oracle::random_tensor({3, 5}, gen));
  mianet::save_miat(dir / "a.miat", t);
  ASSERT_EQ(run("convert " + (dir / "a.miat").string() + " " + (dir / "a.csv").string()).code, 0);
  ASSERT_EQ(run("convert " + (dir / "a.csv").string() + " " + (dir / "b.miat").string()).code, 0);
  EXPECT_EQ(slurp(dir / "a.miat"), slurp(dir / "b.miat"));

  const fs::path mask = small_data() / "masks" / "000000.pgm";
  ASSERT_EQ(run("convert " + mask.string() + " " + (dir / "m.miat").string()).code, 0);
  ASSERT_EQ(run("convert " + (dir / "m.miat").string() + " " + (dir / "m.pgm").string()).code, 0);
  EXPECT_EQ(slurp(mask), slurp(dir / "m.pgm"));
}

TEST(Cli, ConfigEchoAndFlagOverrides) {
  const fs::path a = tmp("cfg_a");
  ASSERT_EQ(run("synth --samples-per-class 2 --margin 0.2 --out " + a.string()).code, 0);
  const std::string cfg = slurp(a / "config.json");
  EXPECT_NE(cfg.find("\"margin\": 0.2"), std::string::npos) << cfg;
  EXPECT_NE(cfg.find("\"profile\": \"desk\""), std::string::npos);

  const fs::path b = tmp("cfg_b");
  ASSERT_EQ(run("synth --config " + (a / "config.json").string() + " --margin 1.0 --out " + b.string()).code, 0);
  const std::string again = slurp(b / "config.json");
  EXPECT_NE(again.find("\"margin\": 1.0"), std::string::npos) << again;
  EXPECT_NE(again.find("\"samples_per_class\": 2"), std::string::npos);

  std::ofstream(a / "bad.json") << "{\"margn\": 0.3}";
  const auto r = run("synth --config " + (a / "bad.json").string() + " --out " + tmp("cfg_c").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("margn"), std::string::npos) << r.output;
}

TEST(Cli, TrainThenEval) {
  const fs::path out = tmp("train");
  const std::string data = " --data " + (small_data() / "manifest.json").string();
  auto r = run("train --steps 2 --batch-size 1" + data + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string log = slurp(out / "loss_log.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "step,L_seg1,L_seg2,L_triplet,total");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
  ASSERT_TRUE(fs::exists(out / "checkpoint.miac"));

  const std::string ck = " --checkpoint " + (out / "checkpoint.miac").string();
  r = run("eval --pairs 4 --seed-list 1,2" + data + ck + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("fold 0: mIoU"), std::string::npos);
  const std::string csv = slurp(out / "eval.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "seed,fold,class,iou,fb_iou");

  r = run("eval --no-gim --pairs 4" + data + ck + " --out " + tmp("train_bad").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("checkpoint"), std::string::npos) << r.output;
}
