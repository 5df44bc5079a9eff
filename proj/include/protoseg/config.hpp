// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "json.hpp"
#include "protoseg/error.hpp"
#include "protoseg/trainer.hpp"

namespace protoseg {

/// Unknown or ill-typed configuration key.
class ConfigError : public ContractError {
 public:
  ConfigError(std::string key, const std::string& what) : ContractError(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

ordered_json to_json(const EncoderConfig& c);
ordered_json to_json(const AttentionConfig& c);
ordered_json to_json(const ProtoHeadConfig& c);
ordered_json to_json(const EpisodeSpec& c);
ordered_json to_json(const LossConfig& c);
ordered_json to_json(const TrainConfig& c);
ordered_json to_json(const EvalConfig& c);
ordered_json to_json(const ModelSpec& c);

/// Strict readers: missing keys keep `base` values, unknown keys and wrong
/// types raise ConfigError naming the dotted key. `prefix` is prepended to
/// reported keys.
EncoderConfig encoder_config_from_json(const json& j, EncoderConfig base = {}, const std::string& prefix = "");
AttentionConfig attention_config_from_json(const json& j, AttentionConfig base = {}, const std::string& prefix = "");
ProtoHeadConfig head_config_from_json(const json& j, ProtoHeadConfig base = {}, const std::string& prefix = "");
EpisodeSpec episode_spec_from_json(const json& j, EpisodeSpec base = {}, const std::string& prefix = "");
LossConfig loss_config_from_json(const json& j, LossConfig base = {}, const std::string& prefix = "");
TrainConfig train_config_from_json(const json& j, TrainConfig base, const std::string& prefix = "");
EvalConfig eval_config_from_json(const json& j, EvalConfig base = {}, const std::string& prefix = "");
ModelSpec model_spec_from_json(const json& j, ModelSpec base = {}, const std::string& prefix = "");

/// Sets `dotted.key` in `target` to `value`, parsed as JSON when possible and
/// as a string otherwise. The key must already exist in `target`.
void apply_override(ordered_json& target, const std::string& dotted_key, const std::string& value);

}  // namespace protoseg
