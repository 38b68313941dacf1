// mianet: prior | train | eval | synth | convert

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mianet/commands.hpp"

namespace {

struct overrides {
  std::string config_file, profile;
  std::optional<std::size_t> fold, shots, steps, pairs, batch_size, episode, threads, c, c_high, d, image_size,
      samples_per_class;
  std::optional<std::string> seed_list, metric, embeddings, data, out, checkpoint;
  std::optional<double> margin, lr;
  std::optional<std::uint64_t> seed;
  bool no_hpm = false, no_gim = false, one_scale = false, no_info_channels = false, no_triplet = false,
       no_word_embeddings = false, stop_gradient_mined = false;
};

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used != item.size()) throw std::invalid_argument("bad seed '" + item + "' in --seed-list");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw std::invalid_argument("--seed-list is empty");
  return seeds;
}

void add_common(CLI::App* cmd, overrides& o) {
  cmd->add_option("--config", o.config_file, "JSON config file; flags override it");
  cmd->add_option("--profile", o.profile, "desk (default) or paper")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--fold", o.fold, "held-out fold");
  cmd->add_option("--shots", o.shots, "support images per episode (K)");
  cmd->add_option("--seed-list", o.seed_list, "comma-separated seeds");
  cmd->add_option("--margin", o.margin, "triplet margin");
  cmd->add_flag("--no-hpm", o.no_hpm, "replace prior maps by zero planes");
  cmd->add_flag("--no-gim", o.no_gim, "use the support prototype in place of the general prototype");
  cmd->add_flag("--one-scale", o.one_scale, "keep only the finest scale");
  cmd->add_flag("--no-info-channels", o.no_info_channels, "plain average pooling between prior scales");
  cmd->add_flag("--no-triplet", o.no_triplet, "drop the triplet loss");
  cmd->add_flag("--no-word-embeddings", o.no_word_embeddings, "feed the prototype alone to the generator");
  cmd->add_flag("--stop-gradient-mined", o.stop_gradient_mined, "no gradient through mined positive/negative");
  cmd->add_option("--metric", o.metric, "triplet distance")->check(CLI::IsMember({"euclidean", "cosine"}));
  cmd->add_option("--embeddings", o.embeddings, "word2vec text file");
  cmd->add_option("--data", o.data, "dataset manifest");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  cmd->add_option("--steps", o.steps, "total optimizer steps");
  cmd->add_option("--pairs", o.pairs, "support-query pairs per seed");
  cmd->add_option("--batch-size", o.batch_size, "episodes per optimizer step");
  cmd->add_option("--lr", o.lr, "learning rate");
  cmd->add_option("--seed", o.seed, "initialization, training and synthesis seed");
  cmd->add_option("--episode", o.episode, "episode index for prior");
  cmd->add_option("--threads", o.threads, "evaluation workers");
  cmd->add_option("--c", o.c, "mid-level feature width");
  cmd->add_option("--c-high", o.c_high, "high-level feature width");
  cmd->add_option("--d", o.d, "word vector width");
  cmd->add_option("--image-size", o.image_size, "synthetic image side");
  cmd->add_option("--samples-per-class", o.samples_per_class, "synthetic samples per class");
}

mianet::run_config resolve(const overrides& o) {
  using namespace mianet;
  std::optional<profile> prof;
  if (!o.profile.empty()) prof = parse_profile(o.profile);
  run_config c = o.config_file.empty() ? profile_defaults(prof.value_or(profile::desk))
                                       : config_from_json(read_json_file(o.config_file), prof);
  if (o.fold) c.fold = *o.fold;
  if (o.shots) c.shots = *o.shots;
  if (o.seed_list) c.seeds = parse_seed_list(*o.seed_list);
  if (o.margin) c.margin = *o.margin;
  if (o.no_hpm) c.use_hpm = false;
  if (o.no_gim) c.use_gim = false;
  if (o.one_scale) c.one_scale = true;
  if (o.no_info_channels) c.info_channels = false;
  if (o.no_triplet) c.triplet_loss = false;
  if (o.no_word_embeddings) c.word_embeddings = false;
  if (o.stop_gradient_mined) c.stop_gradient_mined = true;
  if (o.metric) c.metric = parse_metric(*o.metric);
  if (o.embeddings) c.embeddings = *o.embeddings;
  if (o.data) c.data = *o.data;
  if (o.out) c.out = *o.out;
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  if (o.steps) {
    c.epochs = 1;
    c.steps_per_epoch = *o.steps;
  }
  if (o.pairs) c.pairs = *o.pairs;
  if (o.batch_size) c.batch_size = *o.batch_size;
  if (o.lr) c.learning_rate = *o.lr;
  if (o.seed) c.init_seed = c.train_seed = c.data_seed = *o.seed;
  if (o.episode) c.episode = *o.episode;
  if (o.threads) c.threads = *o.threads;
  if (o.c) c.channels = *o.c;
  if (o.c_high) c.high_channels = *o.c_high;
  if (o.d) c.embedding_dim = *o.d;
  if (o.image_size) c.image_size = *o.image_size;
  if (o.samples_per_class) c.samples_per_class = *o.samples_per_class;
  return c;
}

std::string one_line(std::string s) {
  for (auto& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot segmentation with prior maps and general class information"};
  app.require_subcommand(1);
  overrides o;
  std::string convert_in, convert_out;

  auto* prior = app.add_subcommand("prior", "write prior maps for one test episode");
  auto* train = app.add_subcommand("train", "episodic training; writes checkpoint and loss log");
  auto* eval = app.add_subcommand("eval", "seeded evaluation; writes eval.csv");
  auto* synth = app.add_subcommand("synth", "generate the synthetic dataset");
  auto* convert = app.add_subcommand("convert", "convert between MIAT, PGM and CSV");
  for (auto* cmd : {prior, train, eval, synth}) add_common(cmd, o);
  convert->add_option("input", convert_in, "input file")->required();
  convert->add_option("output", convert_out, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  try {
    if (convert->parsed()) {
      mianet::cli::cmd_convert(convert_in, convert_out, std::cout);
      return 0;
    }
    const auto cfg = resolve(o);
    if (prior->parsed()) mianet::cli::cmd_prior(cfg, std::cout);
    if (train->parsed()) mianet::cli::cmd_train(cfg, std::cout);
    if (eval->parsed()) mianet::cli::cmd_eval(cfg, std::cout);
    if (synth->parsed()) mianet::cli::cmd_synth(cfg, std::cout);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return 0;
}
