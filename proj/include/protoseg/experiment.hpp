// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "protoseg/config.hpp"
#include "protoseg/trainer.hpp"

namespace protoseg {

struct SynthConfig {
  int count = 1000;
  /// 0 picks the preset's resolution.
  int image_size = 0;
  std::uint64_t seed = 42;
};

/// Full experiment description; one JSON file with dotted-key overrides.
struct ExperimentConfig {
  std::string dataset = "data/synthetic";
  /// "desk" (32x32, narrow encoder) or "full" (128x128).
  std::string preset = "desk";
  SynthConfig synth;
  AttentionConfig attention;
  ProtoHeadConfig head;
  TrainConfig pretrain = TrainConfig::pretrain_defaults();
  TrainConfig finetune = TrainConfig::finetune_defaults();
  EvalConfig eval;

  EncoderConfig encoder() const;
  int image_size() const;
  ModelSpec model_spec() const;
  void validate() const;
};

ordered_json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const json& j);
/// Defaults, then `file` (if non-empty), then `overrides` ("key=value").
ExperimentConfig load_experiment_config(const std::string& file, const std::vector<std::string>& overrides);

/// `<root>/<UTC timestamp>-<digest prefix>`, suffixed when taken; created.
std::filesystem::path make_run_directory(const std::filesystem::path& root, const std::string& digest);

/// Output root: `flag` if set, else $PROTOSEG_OUT, else "runs".
std::filesystem::path output_root(const std::string& flag);

/// One evaluation record as stored in `<run>/eval.json`.
struct EvalRecord {
  std::string run;
  std::string config_digest;
  std::uint64_t seed = 0;
  int n_train = 0;
  int n_test = 0;
  int k = 0;
  std::string attention_variant;
  bool bidirectional = true;
  std::string aggregation;
  int episodes = 0;
  /// Metric name to value, in file order.
  ordered_json metrics;
  ordered_json stddev;
};

ordered_json to_json(const EvalRecord& r);
EvalRecord eval_record_from_json(const ordered_json& j, const std::string& run);

enum class ReportFormat { kMarkdown, kCsv, kJson };
ReportFormat parse_report_format(const std::string& name);

/// Raised by emit_report for missing outputs or mismatched metric schemas.
class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads `eval.json` from every run directory and renders one row per run in
/// table column order, marking the best value of each metric column.
std::string emit_report(const std::vector<std::filesystem::path>& runs, ReportFormat format);

}  // namespace protoseg
