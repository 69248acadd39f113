// Training loop, evaluation and the curriculum protocol.

#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "predinet/checkpoint.hpp"
#include "predinet/protocol.hpp"

using namespace predinet;

namespace {

ModelConfig tiny(Arch arch = Arch::predinet) {
  ModelConfig c;
  c.arch = arch;
  c.heads = 4;
  c.relations = 4;
  c.key_size = 8;
  c.cnn_channels = 8;
  c.mlp2_hidden = 32;
  c.rn_hidden = 16;
  return c;
}

TrainConfig quick(const std::vector<std::string>& names, std::size_t batches) {
  TrainConfig t;
  for (const auto& n : names) t.tasks.push_back(rg::parse_task(n));
  t.batches = batches;
  t.eval_every = 0;
  return t;
}

TrainState<float> fresh(ModelConfig c, const TrainConfig& t, OptimizerState<float> opt, std::uint64_t seed = 1) {
  c.task_id_width = task_id_width(t.tasks);
  c.label_arity = task_list_arity(t.tasks);
  Rng rng = derive_rng(seed, 0x1717);
  return {Model<float>(c, rng), opt, seed, 0, 0, {}};
}

std::vector<float> flat_params(const Model<float>& m) {
  std::vector<float> out;
  for (const auto& p : m.params().entries()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

TEST(Training, ZeroLearningRateLeavesEveryParameterUnchanged) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    auto cfg = quick({"same"}, 5);
    auto st = fresh(tiny(), cfg, kind == OptimizerKind::sgd ? OptimizerState<float>::sgd(0) : OptimizerState<float>::adam(0));
    const auto before = flat_params(st.model);
    train(st, cfg);
    EXPECT_EQ(flat_params(st.model), before) << to_string(kind);
    EXPECT_EQ(st.batch, 5u);
  }
}

TEST(Training, SgdStepMatchesTheGradient) {
  auto cfg = quick({"between"}, 1);
  auto st = fresh(tiny(), cfg, OptimizerState<float>::sgd(0.5f));
  Rng rng = derive_rng(st.seed, st.stream);
  uniform_index(rng, 1);
  auto batch = make_batch<float>(cfg.tasks, 0, cfg.train_set, cfg.batch_size, rng);
  Model<float> copy = st.model;
  Graph<float> g;
  g.backward(softmax_cross_entropy(copy.forward(g, batch.images).logits, batch.labels));
  train(st, cfg);
  const auto& w = st.model.params().at("out.w1");
  const auto& w0 = copy.params().at("out.w1");
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_FLOAT_EQ(w[i], w0[i] - 0.5f * w0.grad()[i]);
}

TEST(Training, FrozenGroupsKeepTheirChecksums) {
  auto cfg = quick({"same"}, 4);
  auto st = fresh(tiny(), cfg, OptimizerState<float>::adam(1e-3f));
  st.model.params().set_trainable(ParamGroup::cnn, false);
  st.model.params().set_trainable(ParamGroup::central, false);
  const auto cnn = group_checksum(st.model, ParamGroup::cnn);
  const auto central = group_checksum(st.model, ParamGroup::central);
  const auto out = group_checksum(st.model, ParamGroup::output);
  train(st, cfg);
  EXPECT_EQ(group_checksum(st.model, ParamGroup::cnn), cnn);
  EXPECT_EQ(group_checksum(st.model, ParamGroup::central), central);
  EXPECT_NE(group_checksum(st.model, ParamGroup::output), out);
}

TEST(Training, TasksAreDrawnUniformly) {
  TrainConfig cfg = quick({"column_pattern:AAB", "column_pattern:ABA", "column_pattern:ABB"}, 0);
  std::map<std::size_t, int> counts;
  for (std::uint64_t b = 0; b < 30000; ++b) {
    Rng rng = derive_rng(5, b);
    ++counts[uniform_index(rng, cfg.tasks.size())];
  }
  for (auto [t, n] : counts) EXPECT_NEAR(n / 30000.0, 1.0 / 3, 0.015) << t;
  // and the multi-task batch carries the right one-hot id
  Rng rng = derive_rng(1);
  auto b = make_batch<float>(cfg.tasks, 2, ObjectSetId::train_pentominoes, 4, rng);
  ASSERT_EQ(b.task_ids.shape(), (Shape{4, 3}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(b.task_ids.at(i, 0), 0.0f);
    EXPECT_EQ(b.task_ids.at(i, 2), 1.0f);
  }
}

TEST(Training, UntrainedModelsScoreAtChance) {
  for (auto arch : {Arch::predinet, Arch::mha, Arch::mlp1}) {
    auto cfg = quick({"same"}, 0);
    auto st = fresh(tiny(arch), cfg, OptimizerState<float>::sgd(0.01f), 3);
    for (auto set : {ObjectSetId::train_pentominoes, ObjectSetId::holdout_stripes}) {
      auto r = evaluate(st.model, cfg.tasks, 0, set, 2000, 9);
      EXPECT_NEAR(r.accuracy, 0.5, 0.06) << to_string(arch);
      EXPECT_NEAR(r.loss, std::log(2.0), 0.1);
    }
  }
}

TEST(Training, EvaluationIsDeterministicAndReadOnly) {
  auto cfg = quick({"occurs"}, 0);
  auto st = fresh(tiny(), cfg, OptimizerState<float>::sgd(0.01f));
  const auto before = flat_params(st.model);
  auto a = evaluate(st.model, cfg.tasks, 0, ObjectSetId::holdout_hexominoes, 300, 4);
  auto b = evaluate(st.model, cfg.tasks, 0, ObjectSetId::holdout_hexominoes, 300, 4, static_cast<const std::vector<float>*>(nullptr), 7);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_NEAR(a.loss, b.loss, 1e-6);
  EXPECT_EQ(flat_params(st.model), before);
  EXPECT_THROW(evaluate(st.model, cfg.tasks, 0, ObjectSetId::holdout_hexominoes, 0, 4), ConfigError);
}

TEST(Training, RunsAreReproducible) {
  auto cfg = quick({"same", "between"}, 12);
  cfg.eval_every = 6;
  cfg.eval_examples = 40;
  auto a = fresh(tiny(), cfg, OptimizerState<float>::adam(1e-3f), 8);
  auto b = fresh(tiny(), cfg, OptimizerState<float>::adam(1e-3f), 8);
  const auto ra = train(a, cfg);
  const auto rb = train(b, cfg);
  EXPECT_EQ(flat_params(a.model), flat_params(b.model));
  ASSERT_EQ(ra.size(), rb.size());
  ASSERT_EQ(ra.size(), 2u * 2u * 3u);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].accuracy, rb[i].accuracy);
    EXPECT_EQ(ra[i].batch, rb[i].batch);
  }
}

TEST(Training, ResumingFromACheckpointMatchesAnUnbrokenRun) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    auto cfg = quick({"same"}, 100);
    auto opt = kind == OptimizerKind::sgd ? OptimizerState<float>::sgd(0.01f) : OptimizerState<float>::adam(1e-3f);
    auto whole = fresh(tiny(), cfg, opt, 21);
    train(whole, cfg);

    auto part = fresh(tiny(), cfg, opt, 21);
    auto first = cfg;
    first.batches = 37;
    train(part, first);
    auto resumed = decode_checkpoint(encode_checkpoint(part));
    EXPECT_EQ(resumed.batch, 37u);
    train(resumed, cfg);
    EXPECT_EQ(flat_params(resumed.model), flat_params(whole.model)) << to_string(kind);
    EXPECT_EQ(resumed.optimizer.step, whole.optimizer.step);
  }
}

TEST(Training, MismatchedTaskListsAreRejected) {
  auto cfg = quick({"same"}, 1);
  auto st = fresh(tiny(), cfg, OptimizerState<float>::sgd(0.01f));
  auto other = quick({"same", "between"}, 1);
  EXPECT_THROW(train(st, other), ConfigError);
  EXPECT_THROW(task_list_arity({rg::parse_task("same"), rg::parse_task("colour_shape")}), ConfigError);
}

TEST(Training, LossFallsOnAnEasyProblem) {
  // colour_shape on a fixed batch: the network must be able to fit it
  auto cfg = quick({"colour_shape"}, 0);
  auto st = fresh(tiny(), cfg, OptimizerState<float>::adam(3e-3f));
  Rng rng = derive_rng(2);
  auto batch = make_batch<float>(cfg.tasks, 0, ObjectSetId::train_pentominoes, 10, rng);
  const float first = train_step(st, batch);
  float last = first;
  for (int i = 0; i < 150; ++i) last = train_step(st, batch);
  EXPECT_LT(last, 0.5f * first);
}

TEST(Metrics, CsvLayoutAndSeedAveraging) {
  std::vector<MetricsRow> rows{{500, "same", "train", 0.5, 0.7, 1}, {500, "same", "train", 0.7, 0.5, 2},
                               {500, "same", "stripes", 0.6, 0.6, 1}, {1000, "same", "train", 0.9, 0.2, 1}};
  std::ostringstream os;
  write_metrics_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "batch,task,split,accuracy,loss,seed");
  EXPECT_NE(os.str().find("500,same,train,0.500000,0.700000,1\n"), std::string::npos);
  const auto mean = average_over_seeds(rows);
  bool found = false;
  for (const auto& r : mean)
    if (r.batch == 500 && r.split == "train") {
      EXPECT_NEAR(r.accuracy, 0.6, 1e-12);
      EXPECT_NEAR(r.loss, 0.6, 1e-12);
      found = true;
    }
  EXPECT_TRUE(found);
  EXPECT_EQ(mean.size(), 3u);
}

// ---- curriculum ---------------------------------------------------------------

TEST(Curriculum, FourStagesFreezeWhatTheyShould) {
  CurriculumConfig cc;
  cc.model = tiny();
  cc.curriculum = {rg::parse_task("between")};
  cc.target = {rg::parse_task("column_pattern:AAB"), rg::parse_task("column_pattern:ABA"),
               rg::parse_task("column_pattern:ABB")};
  cc.pretrain_batches = 6;
  cc.target_batches = 6;
  cc.eval_every = 3;
  cc.eval_examples = 20;
  std::map<Stage, int> seen;
  auto res = run_curriculum(cc, 4, [&](Stage s, const MetricsRow&) { ++seen[s]; });
  ASSERT_EQ(res.stages.size(), 4u);
  EXPECT_EQ(seen[Stage::pretrain], 2);        // 1 task, 2 eval points, stripes only
  EXPECT_EQ(seen[Stage::freeze_reinit], 3);   // 3 target tasks at batch 0
  EXPECT_EQ(seen[Stage::retrain_target], 6);
  EXPECT_EQ(seen[Stage::control], 6);

  const auto& s1 = res.stages[0];
  for (auto g : {ParamGroup::cnn, ParamGroup::central, ParamGroup::output})
    EXPECT_NE(s1.checksum_at_entry.at(g), s1.checksum_at_exit.at(g));
  const auto& s3 = res.stages[2];
  EXPECT_EQ(s3.checksum_at_entry.at(ParamGroup::cnn), s3.checksum_at_exit.at(ParamGroup::cnn));
  EXPECT_EQ(s3.checksum_at_entry.at(ParamGroup::central), s3.checksum_at_exit.at(ParamGroup::central));
  EXPECT_NE(s3.checksum_at_entry.at(ParamGroup::output), s3.checksum_at_exit.at(ParamGroup::output));
  // stage 3 starts from the stage-1 CNN and central module
  EXPECT_EQ(s3.checksum_at_entry.at(ParamGroup::cnn), s1.checksum_at_exit.at(ParamGroup::cnn));
  EXPECT_EQ(s3.checksum_at_entry.at(ParamGroup::central), s1.checksum_at_exit.at(ParamGroup::central));

  const auto& s4 = res.stages[3];
  EXPECT_EQ(s4.checksum_at_entry.at(ParamGroup::cnn), s1.checksum_at_exit.at(ParamGroup::cnn));
  EXPECT_NE(s4.checksum_at_entry.at(ParamGroup::central), s1.checksum_at_exit.at(ParamGroup::central));
  EXPECT_EQ(s4.checksum_at_entry.at(ParamGroup::central), s4.checksum_at_exit.at(ParamGroup::central));
  EXPECT_EQ(s4.checksum_at_entry.at(ParamGroup::cnn), s4.checksum_at_exit.at(ParamGroup::cnn));

  EXPECT_EQ(res.retrained.config().task_id_width, 3u);
  EXPECT_EQ(res.pretrained.config().task_id_width, 0u);
  EXPECT_EQ(res.retrained.params().at("out.w1").dim(0), 4u * 8u + 3u);
}

TEST(Curriculum, ControlCanBeSkipped) {
  CurriculumConfig cc;
  cc.model = tiny();
  cc.curriculum = {rg::parse_task("between")};
  cc.target = {rg::parse_task("row_pattern:ABA")};
  cc.pretrain_batches = 3;
  cc.target_batches = 3;
  cc.eval_every = 3;
  cc.eval_examples = 10;
  cc.control = false;
  std::map<Stage, int> seen;
  auto res = run_curriculum(cc, 5, [&](Stage s, const MetricsRow&) { ++seen[s]; });
  EXPECT_EQ(res.stages.size(), 3u);
  EXPECT_EQ(seen.count(Stage::control), 0u);
  EXPECT_EQ(seen[Stage::retrain_target], 1);
}

}  // namespace
