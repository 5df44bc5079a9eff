// SPDX-License-Identifier: Apache-2.0
// protoseg: dataset synthesis, two-stage training, evaluation and reports.
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "protoseg/experiment.hpp"

namespace fs = std::filesystem;
using namespace protoseg;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitMissingDataset = 3;

struct Failure {
  int code;
  ordered_json record;
};

Failure failure(int code, const std::string& kind, const std::string& message) {
  return {code, {{"error", kind}, {"message", message}}};
}

// Options shared by every subcommand.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string dataset;
};

void add_common(CLI::App* cmd, Common& c, bool with_dataset = true) {
  cmd->add_option("--config", c.config, "Experiment JSON file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override a dotted config key, e.g. --set finetune.lr_init=5e-4")
      ->allow_extra_args(false);
  cmd->add_option("--out", c.out, "Output root (default: $PROTOSEG_OUT, else ./runs)");
  if (with_dataset) cmd->add_option("--dataset", c.dataset, "Dataset directory (overrides config 'dataset')");
}

// Flags translate into dotted overrides applied after --set.
struct Overrides {
  std::vector<std::string> items;
  template <class T>
  void add(const std::string& key, const std::optional<T>& v) {
    if (v) items.push_back(key + "=" + ordered_json(*v).dump());
  }
};

ExperimentConfig resolve(const Common& c, Overrides flags) {
  std::vector<std::string> all = c.sets;
  if (!c.dataset.empty()) flags.items.push_back("dataset=" + ordered_json(c.dataset).dump());
  all.insert(all.end(), flags.items.begin(), flags.items.end());
  return load_experiment_config(c.config, all);
}

void write_json(const fs::path& p, const ordered_json& j) {
  std::ofstream out(p);
  out << j.dump(2) << "\n";
  if (!out) throw DataError(DataError::Kind::kIo, "cannot write " + p.string());
}

Dataset open_dataset(const std::string& root) {
  if (!fs::exists(fs::path(root) / "meta.json"))
    throw failure(kExitMissingDataset, "missing_dataset", "no dataset at '" + root + "' (meta.json not found)");
  try {
    return load_dataset(root);
  } catch (const DataError& e) {
    if (e.kind() == DataError::Kind::kNoSamples)
      throw failure(kExitMissingDataset, "missing_dataset", e.what());
    throw;
  }
}

Checkpoint open_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw failure(kExitFailure, "missing_checkpoint", "no checkpoint at '" + path + "'");
  return load_checkpoint(path);
}

fs::path start_run(const ExperimentConfig& cfg, const Common& c, const std::string& command, std::uint64_t seed,
                   const std::string& digest) {
  fs::path dir = make_run_directory(output_root(c.out), digest);
  ordered_json j;
  j["command"] = command;
  j["config_digest"] = digest;
  j["seed"] = seed;
  j["config"] = to_json(cfg);
  write_json(dir / "config.json", j);
  return dir;
}

void print_done(const fs::path& dir) { std::cout << ordered_json{{"run", dir.string()}}.dump() << "\n"; }

int run_synth(const Common& c, Overrides o) {
  ExperimentConfig cfg = resolve(c, o);
  const std::string digest = config_digest(to_json(cfg));
  DatasetMeta meta = generate_synthetic_dataset(cfg.dataset, cfg.synth.count, cfg.image_size(), cfg.synth.seed);
  fs::path dir = start_run(cfg, c, "synth", cfg.synth.seed, digest);
  write_json(dir / "synth.json", {{"config_digest", digest},
                                  {"seed", cfg.synth.seed},
                                  {"dataset", cfg.dataset},
                                  {"count", meta.count},
                                  {"image_size", meta.image_size}});
  print_done(dir);
  return 0;
}

void train_and_save(const ExperimentConfig& cfg, const Common& c, Stage stage, const std::optional<std::string>& from) {
  const TrainConfig& tc = stage == Stage::kPretrain ? cfg.pretrain : cfg.finetune;
  std::optional<Checkpoint> pretrained;
  if (from) pretrained = open_checkpoint(*from);
  Dataset ds = open_dataset(cfg.dataset);
  const std::string digest = config_digest(to_json(cfg));
  fs::path dir = start_run(cfg, c, to_string(stage), tc.seed, digest);
  std::ofstream log(dir / "train_log.jsonl");
  LogSink sink = [&](const EpisodeLog& e) {
    ordered_json j = to_json(e);
    j["config_digest"] = digest;
    j["seed"] = tc.seed;
    log << j.dump() << "\n";
    log.flush();
  };
  TrainResult result = stage == Stage::kPretrain ? pretrain_stage(ds, cfg.model_spec(), tc, sink)
                                                 : finetune_stage(*pretrained, ds, tc, sink);
  result.checkpoint.config_digest = digest;
  save_checkpoint(dir / "checkpoint.psck", result.checkpoint);
  double first = 0, last = 0;
  const std::size_t n = std::min<std::size_t>(10, result.log.size());
  for (std::size_t i = 0; i < n; ++i) {
    first += result.log[i].loss.total / n;
    last += result.log[result.log.size() - n + i].loss.total / n;
  }
  write_json(dir / "summary.json", {{"config_digest", digest},
                                    {"seed", tc.seed},
                                    {"stage", to_string(stage)},
                                    {"episodes", tc.episodes},
                                    {"attention_variant", to_string(tc.attention_variant)},
                                    {"mean_loss_first", first},
                                    {"mean_loss_last", last},
                                    {"checkpoint", (dir / "checkpoint.psck").string()}});
  print_done(dir);
}

int run_eval(const Common& c, Overrides o, const std::string& checkpoint) {
  ExperimentConfig cfg = resolve(c, o);
  Checkpoint ck = open_checkpoint(checkpoint);
  Dataset ds = open_dataset(cfg.dataset);
  const std::string digest = config_digest(to_json(cfg));
  fs::path dir = start_run(cfg, c, "eval", cfg.eval.seed, digest);
  EvalResult result = evaluate(ck.model, ds, cfg.eval);

  EvalRecord rec;
  rec.config_digest = digest;
  rec.seed = cfg.eval.seed;
  rec.n_train = ck.train_config.contains("episode_spec") ? ck.train_config["episode_spec"].value("n_ways", 0) : 0;
  rec.n_test = cfg.eval.spec.n_ways;
  rec.k = cfg.eval.spec.k_shots;
  rec.attention_variant = to_string(ck.spec.variant);
  rec.bidirectional = ck.train_config.contains("loss") ? ck.train_config["loss"].value("bidirectional", true) : true;
  rec.aggregation = cfg.eval.pooled ? "pooled" : "episode-mean";
  rec.episodes = cfg.eval.episodes;
  rec.metrics = to_json(result.report);
  rec.metrics.erase("excluded_classes");
  rec.stddev = to_json(result.summary.stddev);
  rec.stddev.erase("excluded_classes");
  ordered_json j = to_json(rec);
  j["checkpoint"] = checkpoint;
  j["checkpoint_digest"] = ck.config_digest;
  j["excluded_classes"] = result.summary.mean.excluded_classes;
  write_json(dir / "eval.json", j);

  std::ofstream csv(dir / "metrics.csv");
  csv << "config_digest,seed," << csv_header() << "\n" << digest << "," << rec.seed << "," << csv_row(result.report) << "\n";
  std::ofstream episodes(dir / "episodes.jsonl");
  for (std::size_t i = 0; i < result.per_episode.size(); ++i) {
    ordered_json e = to_json(result.per_episode[i]);
    e["episode"] = i;
    e["config_digest"] = digest;
    e["seed"] = rec.seed;
    episodes << e.dump() << "\n";
  }
  print_done(dir);
  return 0;
}

int run_report(const Common& c, const std::vector<std::string>& runs, const std::string& format_name,
               const std::string& output) {
  const ReportFormat format = parse_report_format(format_name);
  std::vector<fs::path> dirs(runs.begin(), runs.end());
  const std::string text = emit_report(dirs, format);
  ordered_json inputs;
  for (const auto& r : runs) inputs.push_back(r);
  const std::string digest = config_digest(inputs);
  fs::path dir = make_run_directory(output_root(c.out), digest);
  const std::string ext = format == ReportFormat::kMarkdown ? "md" : format == ReportFormat::kCsv ? "csv" : "json";
  const fs::path file = output.empty() ? dir / ("report." + ext) : fs::path(output);
  std::ofstream(file) << text;
  write_json(dir / "config.json", {{"command", "report"}, {"config_digest", digest}, {"runs", inputs},
                                   {"format", format_name}, {"report", file.string()}});
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-enhanced prototypical few-shot segmentation"};
  app.require_subcommand(1);

  Common synth_c, pre_c, ft_c, eval_c, report_c;
  std::optional<int> count, size, ways, shots, episodes;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> attention, split;
  bool unidirectional = false, pooled = false;
  std::string checkpoint, format = "markdown", output;
  std::vector<std::string> runs;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic defect dataset");
  add_common(synth, synth_c);
  synth->add_option("--count", count, "Number of images");
  synth->add_option("--size", size, "Image side in pixels");
  synth->add_option("--seed", seed, "Generator seed");

  auto* pre = app.add_subcommand("pretrain", "Stage 1: encoder pretraining through a frozen head");
  add_common(pre, pre_c);
  pre->add_option("--episodes", episodes, "Training episodes");
  pre->add_option("--ways", ways, "Classes per episode");
  pre->add_option("--shots", shots, "Support images per class");
  pre->add_option("--seed", seed, "Training seed");

  auto* ft = app.add_subcommand("finetune", "Stage 2: joint encoder and head fine-tuning");
  add_common(ft, ft_c);
  ft->add_option("--checkpoint", checkpoint, "Pretrained checkpoint")->required();
  ft->add_option("--episodes", episodes, "Training episodes");
  ft->add_option("--ways", ways, "Classes per episode");
  ft->add_option("--shots", shots, "Support images per class");
  ft->add_option("--seed", seed, "Training seed");
  ft->add_option("--attention", attention, "Attention variant: none, sa, lsa, ca")
      ->check(CLI::IsMember({"none", "sa", "lsa", "ca"}));
  ft->add_flag("--unidirectional", unidirectional, "Drop the reversed support loss");

  auto* ev = app.add_subcommand("eval", "Episodic evaluation of a checkpoint");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  ev->add_option("--ways", ways, "Classes per episode");
  ev->add_option("--shots", shots, "Support images per class");
  ev->add_option("--episodes", episodes, "Evaluation episodes");
  ev->add_option("--seed", seed, "Episode sampling seed");
  ev->add_option("--split", split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  ev->add_flag("--pooled", pooled, "Score the summed confusion matrix instead of the episode mean");

  auto* rep = app.add_subcommand("report", "Tabulate evaluation runs");
  rep->add_option("--out", report_c.out, "Output root (default: $PROTOSEG_OUT, else ./runs)");
  rep->add_option("runs", runs, "Run directories holding eval.json")->required();
  rep->add_option("--format", format, "markdown, csv or json")->check(CLI::IsMember({"markdown", "csv", "json"}));
  rep->add_option("--output", output, "Report file (default: <out>/<run-id>/report.<ext>)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << ordered_json{{"error", "invalid_arguments"}, {"message", e.what()}}.dump() << "\n";
    return kExitInvalid;
  }

  try {
    Overrides o;
    if (*synth) {
      o.add("synth.count", count);
      o.add("synth.image_size", size);
      o.add("synth.seed", seed);
      return run_synth(synth_c, o);
    }
    if (*pre) {
      o.add("pretrain.episodes", episodes);
      o.add("pretrain.episode_spec.n_ways", ways);
      o.add("pretrain.episode_spec.k_shots", shots);
      o.add("pretrain.seed", seed);
      train_and_save(resolve(pre_c, o), pre_c, Stage::kPretrain, std::nullopt);
      return 0;
    }
    if (*ft) {
      o.add("finetune.episodes", episodes);
      o.add("finetune.episode_spec.n_ways", ways);
      o.add("finetune.episode_spec.k_shots", shots);
      o.add("finetune.seed", seed);
      o.add("finetune.attention_variant", attention);
      if (unidirectional) o.items.push_back("finetune.loss.bidirectional=false");
      train_and_save(resolve(ft_c, o), ft_c, Stage::kFinetune, checkpoint);
      return 0;
    }
    if (*ev) {
      o.add("eval.episode_spec.n_ways", ways);
      o.add("eval.episode_spec.k_shots", shots);
      o.add("eval.episodes", episodes);
      o.add("eval.seed", seed);
      o.add("eval.split", split);
      if (pooled) o.items.push_back("eval.pooled=true");
      return run_eval(eval_c, o, checkpoint);
    }
    return run_report(report_c, runs, format, output);
  } catch (const Failure& f) {
    std::cerr << f.record.dump() << "\n";
    return f.code;
  } catch (const ConfigError& e) {
    std::cerr << ordered_json{{"error", "invalid_config"}, {"key", e.key()}, {"message", e.what()}}.dump() << "\n";
    return kExitInvalid;
  } catch (const ContractError& e) {
    std::cerr << ordered_json{{"error", "invalid_config"}, {"message", e.what()}}.dump() << "\n";
    return kExitInvalid;
  } catch (const ReportError& e) {
    std::cerr << ordered_json{{"error", "report"}, {"message", e.what()}}.dump() << "\n";
    return kExitFailure;
  } catch (const NumericError& e) {
    std::cerr << ordered_json{{"error", "numeric"}, {"message", e.what()}}.dump() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << ordered_json{{"error", "failure"}, {"message", e.what()}}.dump() << "\n";
    return kExitFailure;
  }
}
