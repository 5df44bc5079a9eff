// SPDX-License-Identifier: Apache-2.0
#include "protoseg/config.hpp"

#include <set>

namespace protoseg {

namespace {

// Reads known keys of one JSON object and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "expected a JSON object at '" + prefix_ + "'");
  }

  template <class T>
  void operator()(const std::string& key, T& field) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      field = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path(key), "wrong type for configuration key '" + path(key) + "'");
    }
  }

  /// Custom conversion for enums and nested objects.
  template <class F>
  void with(const std::string& key, F&& f) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      f(j_.at(key), path(key));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(path(key), "invalid value for configuration key '" + path(key) + "': " + e.what());
    }
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key()))
        throw ConfigError(path(item.key()), "unknown configuration key '" + path(item.key()) + "'");
  }

  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

 private:
  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

std::string to_string(ops::BatchNormMode m) {
  return m == ops::BatchNormMode::kBatchStatistics ? "batch" : "running";
}

ops::BatchNormMode parse_norm_mode(const std::string& s) {
  if (s == "batch") return ops::BatchNormMode::kBatchStatistics;
  if (s == "running") return ops::BatchNormMode::kRunningStatistics;
  throw ContractError("normalisation mode must be 'batch' or 'running', got '" + s + "'");
}

}  // namespace

ordered_json to_json(const EncoderConfig& c) {
  return {{"in_channels", c.in_channels},
          {"stage_channels", c.stage_channels},
          {"pyramid_channels", c.pyramid_channels},
          {"norm_epsilon", c.norm_epsilon},
          {"norm_momentum", c.norm_momentum}};
}

ordered_json to_json(const AttentionConfig& c) {
  return {{"d_k", c.d_k},
          {"window", c.window},
          {"residual", c.residual},
          {"learned_cross_projections", c.learned_cross_projections}};
}

ordered_json to_json(const ProtoHeadConfig& c) {
  return {{"epsilon", c.epsilon},
          {"temperature", c.temperature},
          {"temperature_learnable", c.temperature_learnable},
          {"feature_level", c.feature_level}};
}

ordered_json to_json(const EpisodeSpec& c) {
  return {{"n_ways", c.n_ways}, {"k_shots", c.k_shots}, {"n_query", c.n_query}, {"min_class_pixels", c.min_class_pixels}};
}

ordered_json to_json(const LossConfig& c) {
  return {{"ce_weight", c.ce_weight},     {"dice_weight", c.dice_weight}, {"focal_weight", c.focal_weight},
          {"focal_gamma", c.focal_gamma}, {"dice_smooth", c.dice_smooth}, {"reg_weight", c.reg_weight},
          {"bidirectional", c.bidirectional}};
}

ordered_json to_json(const TrainConfig& c) {
  return {{"stage", to_string(c.stage)},
          {"episodes", c.episodes},
          {"batch_episodes", c.batch_episodes},
          {"lr_init", c.lr_init},
          {"lr_min", c.lr_min},
          {"schedule_T", c.schedule_T},
          {"schedule_stride", c.schedule_stride},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"seed", c.seed},
          {"episode_spec", to_json(c.episode_spec)},
          {"loss", to_json(c.loss_config)},
          {"attention_variant", to_string(c.attention_variant)},
          {"train_norm", to_string(c.train_norm)}};
}

ordered_json to_json(const EvalConfig& c) {
  return {{"episode_spec", to_json(c.spec)},
          {"episodes", c.episodes},
          {"seed", c.seed},
          {"split", to_string(c.split)},
          {"pooled", c.pooled}};
}

ordered_json to_json(const ModelSpec& c) {
  return {{"encoder", to_json(c.encoder)},
          {"attention_variant", to_string(c.variant)},
          {"attention", to_json(c.attention)},
          {"head", to_json(c.head)}};
}

EncoderConfig encoder_config_from_json(const json& j, EncoderConfig c, const std::string& prefix) {
  Reader r(j, prefix);
  r("in_channels", c.in_channels);
  r("stage_channels", c.stage_channels);
  r("pyramid_channels", c.pyramid_channels);
  r("norm_epsilon", c.norm_epsilon);
  r("norm_momentum", c.norm_momentum);
  r.finish();
  return c;
}

AttentionConfig attention_config_from_json(const json& j, AttentionConfig c, const std::string& prefix) {
  Reader r(j, prefix);
  r("d_k", c.d_k);
  r("window", c.window);
  r("residual", c.residual);
  r("learned_cross_projections", c.learned_cross_projections);
  r.finish();
  return c;
}

ProtoHeadConfig head_config_from_json(const json& j, ProtoHeadConfig c, const std::string& prefix) {
  Reader r(j, prefix);
  r("epsilon", c.epsilon);
  r("temperature", c.temperature);
  r("temperature_learnable", c.temperature_learnable);
  r("feature_level", c.feature_level);
  r.finish();
  return c;
}

EpisodeSpec episode_spec_from_json(const json& j, EpisodeSpec c, const std::string& prefix) {
  Reader r(j, prefix);
  r("n_ways", c.n_ways);
  r("k_shots", c.k_shots);
  r("n_query", c.n_query);
  r("min_class_pixels", c.min_class_pixels);
  r.finish();
  return c;
}

LossConfig loss_config_from_json(const json& j, LossConfig c, const std::string& prefix) {
  Reader r(j, prefix);
  r("ce_weight", c.ce_weight);
  r("dice_weight", c.dice_weight);
  r("focal_weight", c.focal_weight);
  r("focal_gamma", c.focal_gamma);
  r("dice_smooth", c.dice_smooth);
  r("reg_weight", c.reg_weight);
  r("bidirectional", c.bidirectional);
  r.finish();
  return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c, const std::string& prefix) {
  Reader r(j, prefix);
  r.with("stage", [&](const json& v, const std::string&) { c.stage = parse_stage(v.get<std::string>()); });
  r("episodes", c.episodes);
  r("batch_episodes", c.batch_episodes);
  r("lr_init", c.lr_init);
  r("lr_min", c.lr_min);
  r("schedule_T", c.schedule_T);
  r("schedule_stride", c.schedule_stride);
  r("weight_decay", c.weight_decay);
  r("clip_norm", c.clip_norm);
  r("beta1", c.beta1);
  r("beta2", c.beta2);
  r("adam_epsilon", c.adam_epsilon);
  r("seed", c.seed);
  r.with("episode_spec",
         [&](const json& v, const std::string& p) { c.episode_spec = episode_spec_from_json(v, c.episode_spec, p); });
  r.with("loss", [&](const json& v, const std::string& p) { c.loss_config = loss_config_from_json(v, c.loss_config, p); });
  r.with("attention_variant",
         [&](const json& v, const std::string&) { c.attention_variant = parse_attention_variant(v.get<std::string>()); });
  r.with("train_norm", [&](const json& v, const std::string&) { c.train_norm = parse_norm_mode(v.get<std::string>()); });
  r.finish();
  return c;
}

EvalConfig eval_config_from_json(const json& j, EvalConfig c, const std::string& prefix) {
  Reader r(j, prefix);
  r.with("episode_spec", [&](const json& v, const std::string& p) { c.spec = episode_spec_from_json(v, c.spec, p); });
  r("episodes", c.episodes);
  r("seed", c.seed);
  r.with("split", [&](const json& v, const std::string&) { c.split = parse_split(v.get<std::string>()); });
  r("pooled", c.pooled);
  r.finish();
  return c;
}

ModelSpec model_spec_from_json(const json& j, ModelSpec c, const std::string& prefix) {
  Reader r(j, prefix);
  r.with("encoder", [&](const json& v, const std::string& p) { c.encoder = encoder_config_from_json(v, c.encoder, p); });
  r.with("attention_variant",
         [&](const json& v, const std::string&) { c.variant = parse_attention_variant(v.get<std::string>()); });
  r.with("attention",
         [&](const json& v, const std::string& p) { c.attention = attention_config_from_json(v, c.attention, p); });
  r.with("head", [&](const json& v, const std::string& p) { c.head = head_config_from_json(v, c.head, p); });
  r.finish();
  return c;
}

void apply_override(ordered_json& target, const std::string& dotted_key, const std::string& value) {
  if (dotted_key.empty()) throw ConfigError(dotted_key, "empty configuration key");
  ordered_json* node = &target;
  std::size_t begin = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', begin);
    const std::string part = dotted_key.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
    if (!node->is_object() || !node->contains(part))
      throw ConfigError(dotted_key, "unknown configuration key '" + dotted_key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    begin = dot + 1;
  }
  if (node->is_object()) throw ConfigError(dotted_key, "configuration key '" + dotted_key + "' names a section");
  ordered_json parsed = ordered_json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  if (node->is_string() && !parsed.is_string()) parsed = value;
  *node = parsed;
}

}  // namespace protoseg
