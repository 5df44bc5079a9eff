// SPDX-License-Identifier: Apache-2.0
#include "protoseg/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "protoseg/config.hpp"
#include "protoseg/error.hpp"

namespace protoseg {

Stage parse_stage(const std::string& name) {
  if (name == "pretrain") return Stage::kPretrain;
  if (name == "finetune") return Stage::kFinetune;
  throw ContractError("stage must be 'pretrain' or 'finetune', got '" + name + "'");
}

std::string to_string(Stage stage) { return stage == Stage::kPretrain ? "pretrain" : "finetune"; }

TrainConfig TrainConfig::pretrain_defaults() {
  TrainConfig c;
  c.stage = Stage::kPretrain;
  c.episode_spec.n_ways = 8;
  c.episode_spec.k_shots = 5;
  return c;
}

TrainConfig TrainConfig::finetune_defaults() {
  TrainConfig c;
  c.stage = Stage::kFinetune;
  c.episode_spec.n_ways = 2;
  c.episode_spec.k_shots = 5;
  return c;
}

void TrainConfig::validate() const {
  PROTOSEG_REQUIRE(episodes >= 1, "episodes must be >= 1");
  PROTOSEG_REQUIRE(batch_episodes >= 1, "batch_episodes must be >= 1");
  PROTOSEG_REQUIRE(lr_min >= 0.0 && lr_min < lr_init, "learning rates need 0 <= lr_min < lr_init");
  PROTOSEG_REQUIRE(schedule_T >= 1 && schedule_stride >= 1, "schedule_T and schedule_stride must be >= 1");
  PROTOSEG_REQUIRE(weight_decay >= 0.0, "weight_decay must be >= 0");
  PROTOSEG_REQUIRE(clip_norm > 0.0, "clip_norm must be > 0");
  PROTOSEG_REQUIRE(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "moment decays must lie in [0, 1)");
  PROTOSEG_REQUIRE(adam_epsilon > 0.0, "adam_epsilon must be > 0");
  loss_config.validate();
}

double lr_schedule(int step, const TrainConfig& config) {
  PROTOSEG_REQUIRE(step >= 0, "schedule step must be >= 0");
  if (step == 0) return config.lr_init;
  if (step >= config.schedule_T) return config.lr_min;
  const double t = static_cast<double>(step) / config.schedule_T;
  return config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

int schedule_step(int episode, const TrainConfig& config) { return episode / config.schedule_stride; }

double global_grad_norm(const ParameterList& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.var.has_grad()) continue;
    for (double g : p.var.node()->grad.storage()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_gradients(const ParameterList& params, double max_norm) {
  PROTOSEG_REQUIRE(max_norm > 0.0, "clip norm must be > 0");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double s = max_norm / (norm + 1e-6);
    for (const auto& p : params) {
      if (!p.var.has_grad()) continue;
      for (double& g : p.var.node()->grad.storage()) g *= s;
    }
  }
  return norm;
}

AdamW::AdamW(ParameterList params, double beta1, double beta2, double epsilon, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), epsilon_(epsilon), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    PROTOSEG_REQUIRE(p.var.requires_grad(), "optimizer parameter '" + p.name + "' does not require grad");
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double decay = 1.0 - lr * weight_decay_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& var = params_[i].var;
    Tensor& theta = var.mutable_value();
    const bool has = var.has_grad();
    auto& m = m_[i].storage();
    auto& v = v_[i].storage();
    for (std::size_t j = 0; j < theta.numel(); ++j) {
      const double g = has ? var.node()->grad[j] : 0.0;
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      theta[j] = theta[j] * decay - lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + epsilon_);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

std::map<std::string, std::pair<Tensor, Tensor>> AdamW::state() const {
  std::map<std::string, std::pair<Tensor, Tensor>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) out[params_[i].name] = {m_[i], v_[i]};
  return out;
}

void AdamW::restore(long long steps, const std::map<std::string, std::pair<Tensor, Tensor>>& moments) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto it = moments.find(params_[i].name);
    PROTOSEG_REQUIRE(it != moments.end(), "optimizer state lacks '" + params_[i].name + "'");
    PROTOSEG_REQUIRE(it->second.first.shape() == m_[i].shape() && it->second.second.shape() == v_[i].shape(),
                     "optimizer state shape mismatch for '" + params_[i].name + "'");
    m_[i] = it->second.first;
    v_[i] = it->second.second;
  }
  t_ = steps;
}

Model ModelSpec::build(std::uint64_t seed) const { return Model::make(encoder, variant, attention, head, seed); }

namespace {

// Every value-carrying slot of the model, trainable or not.
std::vector<std::pair<std::string, Tensor*>> model_slots(Model& model) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& p : model.encoder.parameters()) out.emplace_back(p.name, &p.var.mutable_value());
  if (model.attention.variant != AttentionVariant::kNone) {
    out.emplace_back("head.attention.w_q", &model.attention.w_q.mutable_value());
    out.emplace_back("head.attention.w_k", &model.attention.w_k.mutable_value());
    out.emplace_back("head.attention.w_v", &model.attention.w_v.mutable_value());
    out.emplace_back("head.attention.w_o", &model.attention.w_o.mutable_value());
  }
  out.emplace_back("head.temperature", &model.temperature.mutable_value());
  for (auto& [name, state] : model.encoder.norm_states()) {
    out.emplace_back(name + ".running_mean", &state->running_mean);
    out.emplace_back(name + ".running_var", &state->running_var);
  }
  return out;
}

constexpr char kMagic[4] = {'P', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

std::map<std::string, Tensor> model_state(Model& model) {
  std::map<std::string, Tensor> out;
  for (auto& [name, t] : model_slots(model)) out[name] = *t;
  return out;
}

void load_model_state(Model& model, const std::map<std::string, Tensor>& state, bool partial) {
  auto slots = model_slots(model);
  std::size_t used = 0;
  for (auto& [name, t] : slots) {
    auto it = state.find(name);
    if (it == state.end()) {
      if (partial) continue;
      throw ContractError("model state lacks '" + name + "'");
    }
    PROTOSEG_REQUIRE(it->second.shape() == t->shape(), "shape mismatch for '" + name + "': " +
                                                            it->second.shape().str() + " vs " + t->shape().str());
    *t = it->second;
    ++used;
  }
  PROTOSEG_REQUIRE(partial || used == state.size(), "model state has entries the model does not know");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  Model model = ck.model;
  std::vector<std::pair<std::string, const Tensor*>> blobs;
  auto state = model_state(model);
  for (const auto& [name, t] : state) blobs.emplace_back("model/" + name, &t);
  for (const auto& [name, mv] : ck.optimizer_moments) {
    blobs.emplace_back("adam.m/" + name, &mv.first);
    blobs.emplace_back("adam.v/" + name, &mv.second);
  }
  ordered_json header;
  header["version"] = kVersion;
  header["model"] = to_json(ck.spec);
  header["stage"] = to_string(ck.stage);
  header["episode"] = ck.episode;
  header["optimizer_steps"] = ck.optimizer_steps;
  header["rng_state"] = ck.rng_state;
  header["config_digest"] = ck.config_digest;
  header["seed"] = ck.seed;
  header["train_config"] = ck.train_config;
  std::size_t offset = 0;
  for (const auto& [name, t] : blobs) {
    const Shape& s = t->shape();
    header["blobs"].push_back({{"name", name}, {"shape", {s.n, s.h, s.w, s.c}}, {"offset", offset}});
    offset += t->numel();
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(DataError::Kind::kIo, "cannot write checkpoint " + path.string());
  const std::uint64_t len = text.size();
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : blobs)
    out.write(reinterpret_cast<const char*>(t->storage().data()), static_cast<std::streamsize>(t->numel() * sizeof(double)));
  if (!out) throw DataError(DataError::Kind::kIo, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::kIo, "cannot read checkpoint " + path.string());
  const auto corrupt = [&](const std::string& why) {
    return DataError(DataError::Kind::kFormat, "corrupt checkpoint " + path.string() + ": " + why);
  };
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw corrupt("bad magic");
  if (version != kVersion) throw corrupt("unsupported version " + std::to_string(version));
  if (len > (1u << 30)) throw corrupt("implausible header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw corrupt("truncated header");
  json header = json::parse(text, nullptr, false);
  if (header.is_discarded()) throw corrupt("header is not JSON");

  std::vector<double> data;
  {
    std::ostringstream rest;
    rest << in.rdbuf();
    const std::string bytes = rest.str();
    if (bytes.size() % sizeof(double) != 0) throw corrupt("payload size");
    data.resize(bytes.size() / sizeof(double));
    std::memcpy(data.data(), bytes.data(), bytes.size());
  }

  Checkpoint ck;
  try {
    ck.spec = model_spec_from_json(header.at("model"));
    ck.stage = parse_stage(header.at("stage").get<std::string>());
    ck.episode = header.at("episode").get<int>();
    ck.optimizer_steps = header.at("optimizer_steps").get<long long>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.config_digest = header.at("config_digest").get<std::string>();
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.train_config = header.value("train_config", json::object());
  } catch (const std::exception& e) {
    throw corrupt(e.what());
  }
  std::map<std::string, Tensor> state;
  std::map<std::string, std::pair<Tensor, Tensor>> moments;
  for (const auto& b : header.value("blobs", json::array())) {
    const auto dims = b.at("shape").get<std::vector<int>>();
    if (dims.size() != 4) throw corrupt("blob rank");
    Shape s{dims[0], dims[1], dims[2], dims[3]};
    const std::size_t offset = b.at("offset").get<std::size_t>();
    if (offset + s.numel() > data.size()) throw corrupt("blob out of range");
    Tensor t(s, std::vector<double>(data.begin() + offset, data.begin() + offset + s.numel()));
    const std::string name = b.at("name").get<std::string>();
    if (name.rfind("model/", 0) == 0) state[name.substr(6)] = std::move(t);
    else if (name.rfind("adam.m/", 0) == 0) moments[name.substr(7)].first = std::move(t);
    else if (name.rfind("adam.v/", 0) == 0) moments[name.substr(7)].second = std::move(t);
    else throw corrupt("unknown blob " + name);
  }
  ck.model = ck.spec.build(ck.seed);
  load_model_state(ck.model, state);
  ck.optimizer_moments = std::move(moments);
  return ck;
}

nlohmann::ordered_json to_json(const EpisodeLog& log) {
  return {{"episode", log.episode},  {"classes", log.classes},
          {"loss", log.loss.total},  {"query", log.loss.query},
          {"support", log.loss.support}, {"proto", log.loss.proto},
          {"ce", log.loss.ce},       {"dice", log.loss.dice},
          {"focal", log.loss.focal}, {"reg", log.loss.reg},
          {"lr", log.lr},            {"grad_norm", log.grad_norm},
          {"clipped", log.clipped}};
}

LossResult episode_loss(const Episode& episode, Model& model, const TrainConfig& config, const ForwardContext& ctx) {
  EpisodePrediction pred = predict_episode(episode, model, ctx);
  if (config.stage == Stage::kPretrain)
    return pretrain_loss(pred.query_probabilities, episode.query_masks(), config.loss_config);
  Var q = query_loss(pred.query_probabilities, episode.query_masks());
  Var s;
  if (config.loss_config.bidirectional)
    s = support_loss(predict_support_reversed(pred, episode, model), episode.support_masks(), episode.n_ways,
                     episode.k_shots);
  return finetune_loss(q, s, model.head_parameters(), config.loss_config);
}

namespace {

std::string episode_dump(const std::vector<const Episode*>& episodes, int index, const LossBreakdown& loss) {
  ordered_json j;
  j["episode"] = index;
  for (const Episode* e : episodes) {
    ordered_json d;
    d["classes"] = e->classes;
    for (const auto& s : e->support) d["support"].push_back(s.image_id);
    for (const auto& q : e->query) d["query"].push_back(q.image_id);
    j["episodes"].push_back(d);
  }
  j["loss"] = {{"total", loss.total}, {"query", loss.query}, {"support", loss.support}, {"ce", loss.ce},
               {"dice", loss.dice},   {"focal", loss.focal}, {"reg", loss.reg}};
  return j.dump();
}

EpisodeLog update(const std::vector<const Episode*>& episodes, int index, Model& model, AdamW& optimizer,
                  const TrainConfig& config, double lr) {
  optimizer.zero_grad();
  ForwardContext ctx{.training = true, .train_norm = config.train_norm};
  EpisodeLog log;
  log.episode = index;
  log.lr = lr;
  log.classes = episodes.front()->classes;
  const double w = 1.0 / static_cast<double>(episodes.size());
  for (const Episode* e : episodes) {
    LossResult r = episode_loss(*e, model, config, ctx);
    if (!std::isfinite(r.breakdown.total))
      throw NumericError("non-finite loss; episode dump: " + episode_dump(episodes, index, r.breakdown));
    backward(r.total, Tensor(Shape{1, 1, 1, 1}, w));
    auto& b = log.loss;
    b.query += w * r.breakdown.query;
    b.support += w * r.breakdown.support;
    b.proto += w * r.breakdown.proto;
    b.ce += w * r.breakdown.ce;
    b.dice += w * r.breakdown.dice;
    b.focal += w * r.breakdown.focal;
    b.reg += w * r.breakdown.reg;
    b.total += w * r.breakdown.total;
  }
  log.grad_norm = clip_gradients(optimizer.parameters(), config.clip_norm);
  if (!std::isfinite(log.grad_norm))
    throw NumericError("non-finite gradient; episode dump: " + episode_dump(episodes, index, log.loss));
  log.clipped = log.grad_norm > config.clip_norm;
  optimizer.step(lr);
  return log;
}

AdamW make_optimizer(const ParameterList& params, const TrainConfig& c) {
  return AdamW(params, c.beta1, c.beta2, c.adam_epsilon, c.weight_decay);
}

TrainResult run_stage(const Dataset& dataset, Model model, const ModelSpec& spec, const ParameterList& trainable,
                      const TrainConfig& config, const LogSink& sink) {
  config.validate();
  config.episode_spec.validate(dataset.meta().num_classes);
  AdamW optimizer = make_optimizer(trainable, config);
  Rng sampler = Rng::stream(config.seed, to_string(config.stage) + "-episodes");
  TrainResult result;
  for (int e = 0; e < config.episodes; e += config.batch_episodes) {
    const int count = std::min(config.batch_episodes, config.episodes - e);
    std::vector<Episode> batch;
    for (int b = 0; b < count; ++b) batch.push_back(sample_episode(dataset, Split::kTrain, config.episode_spec, sampler));
    std::vector<const Episode*> ptrs;
    for (const auto& ep : batch) ptrs.push_back(&ep);
    EpisodeLog log = update(ptrs, e, model, optimizer, config, lr_schedule(schedule_step(e, config), config));
    if (sink) sink(log);
    result.log.push_back(std::move(log));
  }
  optimizer.zero_grad();
  Checkpoint& ck = result.checkpoint;
  ck.spec = spec;
  ck.model = model;
  ck.stage = config.stage;
  ck.episode = config.episodes;
  ck.optimizer_steps = optimizer.steps();
  ck.optimizer_moments = optimizer.state();
  ck.rng_state = sampler.state();
  ck.train_config = to_json(config);
  ck.config_digest = config_digest(ck.train_config);
  ck.seed = config.seed;
  return result;
}

}  // namespace

EpisodeLog train_step(const Episode& episode, Model& model, AdamW& optimizer, const TrainConfig& config, double lr) {
  return update({&episode}, 0, model, optimizer, config, lr);
}

TrainResult pretrain_stage(const Dataset& dataset, const ModelSpec& spec_in, const TrainConfig& config,
                           const LogSink& sink) {
  PROTOSEG_REQUIRE(config.stage == Stage::kPretrain, "pretrain_stage needs a pretrain configuration");
  ModelSpec spec = spec_in;
  spec.variant = config.attention_variant;
  Model model = spec.build(config.seed);
  return run_stage(dataset, model, spec, model.encoder.parameters(), config, sink);
}

TrainResult finetune_stage(const Checkpoint& pretrained, const Dataset& dataset, const TrainConfig& config,
                           const LogSink& sink) {
  PROTOSEG_REQUIRE(config.stage == Stage::kFinetune, "finetune_stage needs a finetune configuration");
  ModelSpec spec = pretrained.spec;
  spec.variant = config.attention_variant;
  Model model = spec.build(config.seed);
  Model source = pretrained.model;
  std::map<std::string, Tensor> encoder_state;
  for (auto& [name, t] : model_state(source))
    if (name.rfind("encoder.", 0) == 0) encoder_state[name] = t;
  load_model_state(model, encoder_state, true);
  return run_stage(dataset, model, spec, model.parameters(), config, sink);
}

EvalResult evaluate(Model& model, const Dataset& dataset, const EvalConfig& config) {
  PROTOSEG_REQUIRE(config.episodes >= 1, "evaluation needs at least one episode");
  config.spec.validate(dataset.meta().num_classes);
  NoGradGuard no_grad;
  Rng sampler = Rng::stream(config.seed, "eval-episodes");
  const int k = config.spec.n_ways + 1;
  ConfusionMatrix pooled(k);
  EvalResult out;
  out.pooled = config.pooled;
  for (int e = 0; e < config.episodes; ++e) {
    Episode episode = sample_episode(dataset, config.split, config.spec, sampler);
    EpisodePrediction pred = predict_episode(episode, model, ForwardContext{});
    auto predicted = argmax_masks(pred.query_probabilities.value());
    auto truth = episode.query_masks();
    ConfusionMatrix cm(k);
    for (std::size_t q = 0; q < predicted.size(); ++q) cm.add(predicted[q], truth[q]);
    pooled += cm;
    out.per_episode.push_back(compute_metrics(cm, 0));
  }
  out.summary = summarize(out.per_episode);
  out.pooled_report = compute_metrics(pooled, 0);
  out.report = config.pooled ? out.pooled_report : out.summary.mean;
  return out;
}

std::string config_digest(const nlohmann::ordered_json& config) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace protoseg
