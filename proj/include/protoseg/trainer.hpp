// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoseg/attention.hpp"
#include "protoseg/data.hpp"
#include "protoseg/encoder.hpp"
#include "protoseg/losses.hpp"
#include "protoseg/metrics.hpp"
#include "protoseg/protohead.hpp"

namespace protoseg {

enum class Stage { kPretrain, kFinetune };
Stage parse_stage(const std::string& name);
std::string to_string(Stage stage);

struct TrainConfig {
  Stage stage = Stage::kPretrain;
  int episodes = 1000;
  int batch_episodes = 1;
  double lr_init = 1e-3;
  double lr_min = 1e-6;
  int schedule_T = 50;
  int schedule_stride = 20;
  double weight_decay = 1e-5;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 42;
  EpisodeSpec episode_spec;
  LossConfig loss_config;
  AttentionVariant attention_variant = AttentionVariant::kNone;
  /// Normalisation statistics used in training passes.
  ops::BatchNormMode train_norm = ops::BatchNormMode::kBatchStatistics;

  /// 8-way 5-shot encoder pretraining.
  static TrainConfig pretrain_defaults();
  /// 2-way 5-shot bidirectional fine-tuning.
  static TrainConfig finetune_defaults();
  void validate() const;
};

/// lr_min + (lr_init - lr_min) * (1 + cos(pi * min(t, T) / T)) / 2.
double lr_schedule(int step, const TrainConfig& config);
/// Scheduler step reached after `episode` episodes.
int schedule_step(int episode, const TrainConfig& config);

/// Euclidean norm over every accumulated gradient in `params`.
double global_grad_norm(const ParameterList& params);
/// Rescales gradients by max_norm / (norm + 1e-6) when norm > max_norm.
/// Returns the norm before clipping.
double clip_gradients(const ParameterList& params, double max_norm);

/// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
 public:
  AdamW() = default;
  AdamW(ParameterList params, double beta1, double beta2, double epsilon, double weight_decay);

  /// theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps).
  void step(double lr);
  void zero_grad();

  const ParameterList& parameters() const { return params_; }
  long long steps() const { return t_; }
  /// First and second moments keyed by parameter name.
  std::map<std::string, std::pair<Tensor, Tensor>> state() const;
  void restore(long long steps, const std::map<std::string, std::pair<Tensor, Tensor>>& moments);

 private:
  ParameterList params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double epsilon_ = 1e-8;
  double weight_decay_ = 0.0;
  long long t_ = 0;
};

/// Everything needed to rebuild a Model.
struct ModelSpec {
  EncoderConfig encoder;
  AttentionVariant variant = AttentionVariant::kNone;
  AttentionConfig attention;
  ProtoHeadConfig head;

  Model build(std::uint64_t seed) const;
};

struct Checkpoint {
  ModelSpec spec;
  Model model;
  Stage stage = Stage::kPretrain;
  /// Episodes consumed by the stage that wrote the checkpoint.
  int episode = 0;
  long long optimizer_steps = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> optimizer_moments;
  std::string rng_state;
  std::string config_digest;
  std::uint64_t seed = 42;
  /// Configuration of the stage that produced the checkpoint.
  nlohmann::ordered_json train_config;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws DataError(kIo) for unreadable files and kFormat for corrupt ones.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Values of every parameter and running statistic keyed by name.
std::map<std::string, Tensor> model_state(Model& model);
/// Copies values from `state` into matching entries of `model`. Entries must
/// exist in both unless `partial` is set, in which case only shared names
/// are copied.
void load_model_state(Model& model, const std::map<std::string, Tensor>& state, bool partial = false);

struct EpisodeLog {
  int episode = 0;
  std::vector<int> classes;
  LossBreakdown loss;
  double lr = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
};

nlohmann::ordered_json to_json(const EpisodeLog& log);

/// Loss for one episode under the stage's objective, without any update.
LossResult episode_loss(const Episode& episode, Model& model, const TrainConfig& config, const ForwardContext& ctx);

/// One optimizer update on `episode`: forward, loss, backward, clipping,
/// AdamW step with the learning rate given.
EpisodeLog train_step(const Episode& episode, Model& model, AdamW& optimizer, const TrainConfig& config,
                      double lr);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpisodeLog> log;
};

/// Optional JSON-lines sink receiving one record per update.
using LogSink = std::function<void(const EpisodeLog&)>;

/// Stage 1: encoder-only updates through a frozen head.
TrainResult pretrain_stage(const Dataset& dataset, const ModelSpec& spec, const TrainConfig& config,
                           const LogSink& sink = {});

/// Stage 2: encoder and head updated jointly. The encoder starts from
/// `pretrained`; the head is built fresh for config.attention_variant.
TrainResult finetune_stage(const Checkpoint& pretrained, const Dataset& dataset, const TrainConfig& config,
                           const LogSink& sink = {});

struct EvalConfig {
  EpisodeSpec spec;
  int episodes = 1000;
  std::uint64_t seed = 42;
  Split split = Split::kTest;
  /// Report metrics of the summed confusion matrix instead of the episode
  /// mean.
  bool pooled = false;
};

struct EvalResult {
  /// Episode-mean (default) or pooled report.
  MetricReport report;
  MetricSummary summary;
  MetricReport pooled_report;
  std::vector<MetricReport> per_episode;
  bool pooled = false;
};

/// Scores query predictions on `episodes` sampled episodes; never updates
/// the model.
EvalResult evaluate(Model& model, const Dataset& dataset, const EvalConfig& config);

/// 16 hex digits of FNV-1a over the compact JSON dump.
std::string config_digest(const nlohmann::ordered_json& config);

}  // namespace protoseg
