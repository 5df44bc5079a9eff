// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include "protoseg/config.hpp"
#include "protoseg/error.hpp"
#include "protoseg/ops.hpp"
#include "protoseg/trainer.hpp"
#include "test_util.hpp"

namespace protoseg {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("protoseg_trainer_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  return p;
}

class Corpus : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch("corpus"));
    generate_synthetic_dataset(*root_, 400, 32, 42);
    dataset_ = new Dataset(load_dataset(*root_));
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete dataset_;
    delete root_;
  }
  static ModelSpec desk() {
    ModelSpec s;
    s.encoder = EncoderConfig::desk();
    return s;
  }
  static TrainConfig pretrain(int episodes, int ways = 2) {
    TrainConfig c = TrainConfig::pretrain_defaults();
    c.episodes = episodes;
    c.episode_spec.n_ways = ways;
    return c;
  }
  static TrainConfig finetune(int episodes) {
    TrainConfig c = TrainConfig::finetune_defaults();
    c.episodes = episodes;
    return c;
  }
  static fs::path* root_;
  static Dataset* dataset_;
};
fs::path* Corpus::root_ = nullptr;
Dataset* Corpus::dataset_ = nullptr;

bool same_state(const std::map<std::string, Tensor>& a, const std::map<std::string, Tensor>& b,
                const std::string& prefix = "") {
  for (const auto& [name, t] : a) {
    if (name.rfind(prefix, 0) != 0) continue;
    auto it = b.find(name);
    if (it == b.end() || it->second.storage() != t.storage()) return false;
  }
  return true;
}

TEST(Schedule, EndpointsAndMidpoint) {
  TrainConfig c;
  EXPECT_EQ(lr_schedule(0, c), 1e-3);
  EXPECT_EQ(lr_schedule(50, c), 1e-6);
  EXPECT_NEAR(lr_schedule(25, c), (1e-3 + 1e-6) / 2, 1e-18);
  EXPECT_EQ(lr_schedule(80, c), 1e-6);
  EXPECT_THROW(lr_schedule(-1, c), ContractError);
}

TEST(Schedule, MatchesCosineFormulaAndDecreases) {
  TrainConfig c;
  double prev = lr_schedule(0, c);
  for (int t = 1; t <= 50; ++t) {
    const double expect = 1e-6 + 0.5 * (1e-3 - 1e-6) * (1 + std::cos(std::numbers::pi * t / 50.0));
    EXPECT_NEAR(lr_schedule(t, c), expect, 1e-18);
    EXPECT_LT(lr_schedule(t, c), prev);
    prev = lr_schedule(t, c);
  }
}

TEST(Schedule, AdvancesOncePerStride) {
  TrainConfig c;
  EXPECT_EQ(schedule_step(0, c), 0);
  EXPECT_EQ(schedule_step(19, c), 0);
  EXPECT_EQ(schedule_step(20, c), 1);
  EXPECT_EQ(schedule_step(999, c), 49);
  EXPECT_EQ(c.schedule_T * c.schedule_stride, c.episodes);
}

ParameterList random_grads(std::uint64_t seed, double scale) {
  ParameterList params;
  for (int i = 0; i < 3; ++i) {
    Var v(testing::random_tensor({1, 2, 3, 4}, seed + i), true);
    v.node()->grad = testing::random_tensor({1, 2, 3, 4}, seed + 10 + i, -scale, scale);
    params.push_back({"p" + std::to_string(i), v});
  }
  return params;
}

TEST(Clipping, PostClipNormWithinBound) {
  for (int trial = 0; trial < 50; ++trial) {
    auto params = random_grads(100 + trial, 0.5 + trial);
    const double before = global_grad_norm(params);
    const double reported = clip_gradients(params, 1.0);
    EXPECT_EQ(reported, before);
    if (before > 1.0) {
      EXPECT_LE(global_grad_norm(params), 1.0 + 1e-6);
    }
  }
}

TEST(Clipping, SmallGradientsUntouched) {
  auto params = random_grads(7, 0.01);
  ASSERT_LT(global_grad_norm(params), 1.0);
  std::vector<Tensor> before;
  for (auto& p : params) before.push_back(p.var.grad());
  clip_gradients(params, 1.0);
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i].var.grad().storage(), before[i].storage());
}

TEST(Clipping, ScaleIsClipOverNormPlusEpsilon) {
  Var v(Tensor({1, 1, 1, 2}), true);
  v.node()->grad = Tensor({1, 1, 1, 2}, std::vector<double>{3.0, 4.0});
  ParameterList params{{"v", v}};
  clip_gradients(params, 1.0);
  EXPECT_NEAR(v.grad()[0], 3.0 / (5.0 + 1e-6), 1e-15);
  EXPECT_NEAR(v.grad()[1], 4.0 / (5.0 + 1e-6), 1e-15);
}

TEST(AdamW, FirstStepMatchesClosedForm) {
  auto params = random_grads(11, 2.0);
  std::vector<Tensor> theta0, g0;
  for (auto& p : params) {
    theta0.push_back(p.var.value());
    g0.push_back(p.var.grad());
  }
  const double lr = 1e-2, wd = 0.1, eps = 1e-8;
  AdamW opt(params, 0.9, 0.999, eps, wd);
  opt.step(lr);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < theta0[i].numel(); ++j) {
      const double g = g0[i][j];
      EXPECT_NEAR(params[i].var.value()[j], theta0[i][j] * (1 - lr * wd) - lr * g / (std::abs(g) + eps), 1e-14);
    }
}

TEST(AdamW, ZeroGradientOnlyDecays) {
  Var v(Tensor({1, 1, 1, 3}, 2.0), true);
  AdamW opt({{"v", v}}, 0.9, 0.999, 1e-8, 0.5);
  opt.step(0.1);
  for (double x : v.value().storage()) EXPECT_EQ(x, 2.0 * (1 - 0.1 * 0.5));
}

TEST(AdamW, QuadraticBowlLossDecreases) {
  for (double lr : {1e-4, 1e-3, 1e-2}) {
    Var x(testing::random_tensor({1, 1, 4, 4}, 3, -2.0, 2.0), true);
    AdamW opt({{"x", x}}, 0.9, 0.999, 1e-8, 1e-5);
    double prev = ops::sum_squares({x}).value()[0];
    for (int step = 0; step < 20; ++step) {
      opt.zero_grad();
      backward(ops::sum_squares({x}));
      opt.step(lr);
      const double now = ops::sum_squares({x}).value()[0];
      EXPECT_LT(now, prev) << "lr " << lr << " step " << step;
      prev = now;
    }
  }
}

TEST(AdamW, StateRestoresMoments) {
  auto params = random_grads(13, 1.0);
  AdamW a(params, 0.9, 0.999, 1e-8, 0.0);
  a.step(1e-3);
  AdamW b(params, 0.9, 0.999, 1e-8, 0.0);
  b.restore(a.steps(), a.state());
  EXPECT_EQ(b.steps(), 1);
  for (const auto& [name, mv] : a.state()) EXPECT_EQ(b.state().at(name).second.storage(), mv.second.storage());
}

TEST(TrainConfig, ValidationRejectsBadFields) {
  TrainConfig c;
  c.lr_min = c.lr_init;
  EXPECT_THROW(c.validate(), ContractError);
  c = TrainConfig{};
  c.clip_norm = 0.0;
  EXPECT_THROW(c.validate(), ContractError);
  EXPECT_NO_THROW(TrainConfig::pretrain_defaults().validate());
  EXPECT_EQ(TrainConfig::pretrain_defaults().episode_spec.n_ways, 8);
  EXPECT_EQ(TrainConfig::finetune_defaults().episode_spec.n_ways, 2);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  TrainConfig c = TrainConfig::finetune_defaults();
  c.lr_init = 2e-3;
  c.attention_variant = AttentionVariant::kLocal;
  c.loss_config.bidirectional = false;
  ordered_json j = to_json(c);
  TrainConfig back = train_config_from_json(j, TrainConfig{});
  EXPECT_EQ(to_json(back), j);
  j["loss"]["bogus"] = 1;
  try {
    train_config_from_json(j, TrainConfig{}, "finetune");
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "finetune.loss.bogus");
  }
  ordered_json bad = to_json(c);
  bad["episodes"] = "many";
  EXPECT_THROW(train_config_from_json(bad, TrainConfig{}), ConfigError);
  bad = to_json(c);
  bad["attention_variant"] = "xa";
  EXPECT_THROW(train_config_from_json(bad, TrainConfig{}), ConfigError);
}

TEST(Config, DottedOverrides) {
  ordered_json j = to_json(TrainConfig{});
  apply_override(j, "episode_spec.k_shots", "1");
  apply_override(j, "attention_variant", "sa");
  apply_override(j, "lr_init", "0.01");
  TrainConfig c = train_config_from_json(j, TrainConfig{});
  EXPECT_EQ(c.episode_spec.k_shots, 1);
  EXPECT_EQ(c.attention_variant, AttentionVariant::kSelf);
  EXPECT_EQ(c.lr_init, 0.01);
  EXPECT_THROW(apply_override(j, "episode_spec.bogus", "1"), ConfigError);
  EXPECT_THROW(apply_override(j, "loss", "1"), ConfigError);
}

TEST(Config, DigestIsStableAndSensitive) {
  const auto a = to_json(TrainConfig{});
  EXPECT_EQ(config_digest(a), config_digest(to_json(TrainConfig{})));
  EXPECT_EQ(config_digest(a).size(), 16u);
  TrainConfig c;
  c.seed = 43;
  EXPECT_NE(config_digest(a), config_digest(to_json(c)));
}

TEST_F(Corpus, PretrainFreezesHeadAndMovesEncoder) {
  TrainConfig c = pretrain(3);
  c.attention_variant = AttentionVariant::kSelf;
  ModelSpec spec = desk();
  spec.variant = AttentionVariant::kSelf;
  Model fresh = spec.build(c.seed);
  auto before = model_state(fresh);
  auto result = pretrain_stage(*dataset_, desk(), c);
  auto after = model_state(result.checkpoint.model);
  EXPECT_TRUE(same_state(before, after, "head."));
  EXPECT_FALSE(same_state(before, after, "encoder."));
  EXPECT_EQ(result.log.size(), 3u);
}

TEST_F(Corpus, PretrainSmokeRunReducesLoss) {
  auto result = pretrain_stage(*dataset_, desk(), pretrain(50, 8));
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += result.log[i].loss.total / 10;
    last += result.log[40 + i].loss.total / 10;
  }
  EXPECT_LT(last, first);
}

TEST_F(Corpus, PretrainIsDeterministic) {
  auto a = pretrain_stage(*dataset_, desk(), pretrain(4));
  auto b = pretrain_stage(*dataset_, desk(), pretrain(4));
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].classes, b.log[i].classes);
    EXPECT_EQ(a.log[i].loss.total, b.log[i].loss.total);
    EXPECT_EQ(a.log[i].grad_norm, b.log[i].grad_norm);
  }
  EXPECT_TRUE(same_state(model_state(a.checkpoint.model), model_state(b.checkpoint.model)));
}

TEST_F(Corpus, NeutralAttentionMatchesBaselineOnFirstEpisode) {
  auto pre = pretrain_stage(*dataset_, desk(), pretrain(2));
  TrainConfig base = finetune(1);
  TrainConfig sa = base;
  sa.attention_variant = AttentionVariant::kSelf;
  auto a = finetune_stage(pre.checkpoint, *dataset_, base);
  auto b = finetune_stage(pre.checkpoint, *dataset_, sa);
  EXPECT_EQ(a.log[0].loss.query, b.log[0].loss.query);
  EXPECT_EQ(a.log[0].loss.support, b.log[0].loss.support);
  EXPECT_EQ(a.log[0].loss.proto, b.log[0].loss.proto);
  EXPECT_EQ(a.log[0].loss.reg, 0.0);
  EXPECT_GT(b.log[0].loss.reg, 0.0);
}

TEST_F(Corpus, UnidirectionalRecordsNoSupportLoss) {
  auto pre = pretrain_stage(*dataset_, desk(), pretrain(1));
  TrainConfig c = finetune(4);
  c.loss_config.bidirectional = false;
  for (const auto& log : finetune_stage(pre.checkpoint, *dataset_, c).log) {
    EXPECT_EQ(log.loss.support, 0.0);
    EXPECT_EQ(log.loss.proto, log.loss.query);
  }
  c.loss_config.bidirectional = true;
  for (const auto& log : finetune_stage(pre.checkpoint, *dataset_, c).log) EXPECT_GT(log.loss.support, 0.0);
}

TEST_F(Corpus, FinetuneLeavesPretrainedCheckpointIntact) {
  auto pre = pretrain_stage(*dataset_, desk(), pretrain(1));
  auto before = model_state(pre.checkpoint.model);
  finetune_stage(pre.checkpoint, *dataset_, finetune(2));
  EXPECT_TRUE(same_state(before, model_state(pre.checkpoint.model)));
}

TEST_F(Corpus, NonFiniteLossAborts) {
  Model model = desk().build(1);
  model.encoder.lateral_bias(2).mutable_value()[0] = std::nan("");
  TrainConfig c = finetune(1);
  AdamW opt(model.parameters(), 0.9, 0.999, 1e-8, 0.0);
  Rng rng(3);
  Episode e = sample_episode(*dataset_, Split::kTrain, c.episode_spec, rng);
  try {
    train_step(e, model, opt, c, 1e-3);
    FAIL() << "no error";
  } catch (const NumericError& err) {
    EXPECT_NE(std::string(err.what()).find("\"classes\""), std::string::npos);
  }
}

TEST_F(Corpus, CheckpointRoundTripIsBitwise) {
  TrainConfig c = finetune(2);
  c.attention_variant = AttentionVariant::kCross;
  auto pre = pretrain_stage(*dataset_, desk(), pretrain(1));
  auto ft = finetune_stage(pre.checkpoint, *dataset_, c);
  const fs::path path = scratch("ck.psck");
  save_checkpoint(path, ft.checkpoint);
  Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.spec.variant, AttentionVariant::kCross);
  EXPECT_EQ(back.config_digest, ft.checkpoint.config_digest);
  EXPECT_EQ(back.optimizer_steps, 2);
  EXPECT_EQ(back.rng_state, ft.checkpoint.rng_state);
  EXPECT_TRUE(same_state(model_state(ft.checkpoint.model), model_state(back.model)));
  for (const auto& [name, mv] : ft.checkpoint.optimizer_moments)
    EXPECT_EQ(back.optimizer_moments.at(name).first.storage(), mv.first.storage());

  EvalConfig ec;
  ec.episodes = 5;
  ec.spec.k_shots = 1;
  auto r1 = evaluate(ft.checkpoint.model, *dataset_, ec);
  auto r2 = evaluate(back.model, *dataset_, ec);
  EXPECT_EQ(r1.report.values(), r2.report.values());
  fs::remove(path);
}

TEST_F(Corpus, CorruptCheckpointsAreRejected) {
  EXPECT_THROW(load_checkpoint(scratch("missing.psck")), DataError);
  const fs::path path = scratch("bad.psck");
  std::ofstream(path) << "NOPE and some more bytes";
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kFormat);
  }
  fs::remove(path);
}

TEST_F(Corpus, EvaluateIsDeterministicReadOnlyAndBounded) {
  Model model = desk().build(5);
  auto before = model_state(model);
  EvalConfig ec;
  ec.episodes = 8;
  auto a = evaluate(model, *dataset_, ec);
  auto b = evaluate(model, *dataset_, ec);
  EXPECT_EQ(a.report.values(), b.report.values());
  EXPECT_TRUE(same_state(before, model_state(model)));
  EXPECT_EQ(a.per_episode.size(), 8u);
  for (double v : a.report.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_GE(a.report.miou_with_bg, 0.0);
  ec.pooled = true;
  auto p = evaluate(model, *dataset_, ec);
  EXPECT_EQ(p.report.values(), p.pooled_report.values());
  EXPECT_EQ(p.pooled_report.values(), a.pooled_report.values());
}

}  // namespace
}  // namespace protoseg
