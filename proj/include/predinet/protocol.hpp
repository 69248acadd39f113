#pragma once

// Online training, evaluation and the four-stage curriculum protocol.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include "predinet/errors.hpp"
#include "predinet/graph.hpp"
#include "predinet/nets.hpp"
#include "predinet/ops.hpp"
#include "predinet/optim.hpp"
#include "predinet/random.hpp"
#include "predinet/relations_game.hpp"

namespace predinet {

using rg::ObjectSetId;
using rg::TaskSpec;

/// Images, one-hot task ids and labels for one batch.
template <class T = float>
struct Batch {
  Tensor<T> images;    // [B,36,36,3]
  Tensor<T> task_ids;  // [B,width]; empty when width == 0
  std::vector<std::size_t> labels;
  std::vector<rg::LabeledExample> examples;
};

/// Samples `size` examples of `tasks[task_index]` from `set`. The task-id
/// width is tasks.size() for multi-task lists and 0 for a single task.
template <class T = float>
Batch<T> make_batch(const std::vector<TaskSpec>& tasks, std::size_t task_index, ObjectSetId set, std::size_t size,
                    Rng& rng, bool keep_examples = false) {
  if (tasks.empty()) throw ConfigError("make_batch: empty task list");
  const auto& objects = rg::object_set(set);
  const std::size_t width = tasks.size() > 1 ? tasks.size() : 0;
  Batch<T> b;
  b.images = Tensor<T>({size, rg::kImageSize, rg::kImageSize, rg::kChannels});
  if (width) b.task_ids = Tensor<T>({size, width});
  for (std::size_t i = 0; i < size; ++i) {
    auto ex = rg::sample_example(tasks[task_index], objects, rng);
    std::copy(ex.image.data().begin(), ex.image.data().end(), b.images.data().begin() + i * rg::kImageFloats);
    if (width) b.task_ids.at(i, task_index) = T{1};
    b.labels.push_back(ex.label);
    if (keep_examples) b.examples.push_back(std::move(ex));
  }
  return b;
}

inline std::size_t task_list_arity(const std::vector<TaskSpec>& tasks) {
  if (tasks.empty()) throw ConfigError("empty task list");
  const auto arity = tasks.front().label_arity();
  for (const auto& t : tasks)
    if (t.label_arity() != arity) throw ConfigError("tasks in one list must share a label arity");
  return arity;
}

inline std::size_t task_id_width(const std::vector<TaskSpec>& tasks) { return tasks.size() > 1 ? tasks.size() : 0; }

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
};

/// Accuracy (argmax) and mean loss on `n_examples` fresh examples from
/// `set`. Deterministic in `seed`; never updates parameters.
template <class T>
EvalResult evaluate(Model<T>& model, const std::vector<TaskSpec>& tasks, std::size_t task_index, ObjectSetId set,
                    std::size_t n_examples, std::uint64_t seed, const std::vector<T>* slot_mask = nullptr,
                    std::size_t chunk = 50) {
  if (n_examples == 0) throw ConfigError("evaluate: n_examples must be positive");
  Rng rng = derive_rng(seed, 0xe7a1ull << 32 | static_cast<std::uint64_t>(set) << 16 | tasks.at(task_index).id());
  std::size_t correct = 0;
  double loss = 0;
  for (std::size_t done = 0; done < n_examples;) {
    const std::size_t size = std::min(chunk, n_examples - done);
    auto batch = make_batch<T>(tasks, task_index, set, size, rng);
    Graph<T> g(false);
    auto out = model.forward(g, batch.images, batch.task_ids.size() ? &batch.task_ids : nullptr, slot_mask);
    loss += static_cast<double>(softmax_cross_entropy(out.logits, batch.labels).value()[0]) * static_cast<double>(size);
    const auto& z = out.logits.value();
    const std::size_t C = z.dim(1);
    for (std::size_t i = 0; i < size; ++i) {
      const auto* row = z.data().data() + i * C;
      const auto pred = static_cast<std::size_t>(std::max_element(row, row + C) - row);
      if (pred == batch.labels[i]) ++correct;
    }
    done += size;
  }
  return {static_cast<double>(correct) / static_cast<double>(n_examples), loss / static_cast<double>(n_examples)};
}

/// One evaluation point: `batch,task,split,accuracy,loss,seed`.
struct MetricsRow {
  std::uint64_t batch = 0;
  std::string task;
  std::string split;
  double accuracy = 0;
  double loss = 0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kMetricsHeader = "batch,task,split,accuracy,loss,seed";

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, bool header = true) {
  if (header) os << kMetricsHeader << '\n';
  char buf[64];
  for (const auto& r : rows) {
    os << r.batch << ',' << r.task << ',' << r.split << ',';
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,", r.accuracy, r.loss);
    os << buf << r.seed << '\n';
  }
}

/// Mean of rows sharing (batch, task, split) across seeds; seed is set to 0.
inline std::vector<MetricsRow> average_over_seeds(const std::vector<MetricsRow>& rows) {
  std::map<std::tuple<std::uint64_t, std::string, std::string>, std::pair<MetricsRow, std::size_t>> acc;
  for (const auto& r : rows) {
    auto& [sum, n] = acc[{r.batch, r.task, r.split}];
    sum.batch = r.batch;
    sum.task = r.task;
    sum.split = r.split;
    sum.accuracy += r.accuracy;
    sum.loss += r.loss;
    ++n;
  }
  std::vector<MetricsRow> out;
  for (auto& [key, v] : acc) {
    auto r = v.first;
    r.accuracy /= static_cast<double>(v.second);
    r.loss /= static_cast<double>(v.second);
    out.push_back(r);
  }
  return out;
}

struct TrainConfig {
  std::vector<TaskSpec> tasks;
  std::size_t batches = 0;
  std::size_t batch_size = 10;
  ObjectSetId train_set = ObjectSetId::train_pentominoes;
  std::size_t eval_every = 500;
  std::size_t eval_examples = 2000;
  std::vector<ObjectSetId> eval_sets{ObjectSetId::train_pentominoes, ObjectSetId::holdout_hexominoes,
                                     ObjectSetId::holdout_stripes};
  bool eval_at_start = false;
};

/// Everything needed to continue a run: parameters, optimizer state and the
/// number of batches already consumed. Batch b of a stream draws its data
/// from derive_rng(seed, stream + b), so no generator state is carried.
template <class T = float>
struct TrainState {
  Model<T> model;
  OptimizerState<T> optimizer;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::uint64_t batch = 0;
  std::vector<TaskSpec> tasks;  // what the output MLP was last trained on
};

template <class T>
std::vector<Tensor<T>*> trainable(Model<T>& model) {
  std::vector<Tensor<T>*> out;
  for (auto& p : model.params().entries())
    if (p.tensor.requires_grad()) out.push_back(&p.tensor);
  return out;
}

/// Forward, loss, backward and one optimizer step on the unfrozen tensors.
template <class T>
T train_step(TrainState<T>& state, const Batch<T>& batch) {
  Graph<T> g;
  auto out = state.model.forward(g, batch.images, batch.task_ids.size() ? &batch.task_ids : nullptr);
  auto loss = softmax_cross_entropy(out.logits, batch.labels);
  g.backward(loss);
  auto params = trainable(state.model);
  for (auto* p : params)
    if (!p->has_grad()) p->zero_grad();
  optimizer_step(state.optimizer, params);
  return loss.value()[0];
}

using MetricsSink = std::function<void(const MetricsRow&)>;

template <class T>
std::vector<MetricsRow> evaluate_all(Model<T>& model, const TrainConfig& cfg, std::uint64_t batch, std::uint64_t seed) {
  std::vector<MetricsRow> rows;
  for (std::size_t t = 0; t < cfg.tasks.size(); ++t)
    for (auto set : cfg.eval_sets) {
      auto r = evaluate(model, cfg.tasks, t, set, cfg.eval_examples, seed ^ (batch * 0x9e3779b97f4a7c15ull));
      rows.push_back({batch, rg::to_string(cfg.tasks[t]), rg::to_string(set), r.accuracy, r.loss, seed});
    }
  return rows;
}

/// Runs batches until state.batch reaches cfg.batches. Each batch picks one
/// task uniformly from cfg.tasks. Evaluates every cfg.eval_every batches and
/// after the last one. `after_batch` sees the state once each batch is done
/// (and evaluated); the CLI uses it for periodic checkpoints.
template <class T>
std::vector<MetricsRow> train(TrainState<T>& state, const TrainConfig& cfg, const MetricsSink& sink = {},
                              const std::function<void(const TrainState<T>&)>& after_batch = {}) {
  if (cfg.tasks.empty()) throw ConfigError("train: empty task list");
  if (cfg.batch_size == 0) throw ConfigError("train: batch size must be positive");
  const auto width = task_id_width(cfg.tasks);
  if (state.model.config().task_id_width != width || state.model.config().label_arity != task_list_arity(cfg.tasks)) {
    throw ConfigError("train: model task-id width / arity do not match the task list");
  }
  state.tasks = cfg.tasks;
  std::vector<MetricsRow> rows;
  auto emit = [&](std::uint64_t b) {
    for (auto& r : evaluate_all(state.model, cfg, b, state.seed)) {
      if (sink) sink(r);
      rows.push_back(std::move(r));
    }
  };
  if (cfg.eval_at_start && state.batch == 0) emit(0);
  while (state.batch < cfg.batches) {
    Rng rng = derive_rng(state.seed, state.stream + state.batch);
    const std::size_t task = uniform_index(rng, cfg.tasks.size());
    auto batch = make_batch<T>(cfg.tasks, task, cfg.train_set, cfg.batch_size, rng);
    train_step(state, batch);
    ++state.batch;
    if (cfg.eval_every && (state.batch % cfg.eval_every == 0 || state.batch == cfg.batches)) emit(state.batch);
    if (after_batch) after_batch(state);
  }
  return rows;
}

/// CRC-32 over the raw bytes of every tensor in a group.
template <class T>
std::uint32_t group_checksum(const Model<T>& model, ParamGroup group) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& p : model.params().entries()) {
    if (p.group != group) continue;
    crc = crc32(crc, reinterpret_cast<const Bytef*>(p.name.data()), static_cast<uInt>(p.name.size()));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(p.tensor.data().data()),
                static_cast<uInt>(p.tensor.size() * sizeof(T)));
  }
  return static_cast<std::uint32_t>(crc);
}

// ---------------------------------------------------------------------------
// Curriculum protocol

struct CurriculumConfig {
  ModelConfig model;  // task width / arity are derived per stage
  std::vector<TaskSpec> curriculum;
  std::vector<TaskSpec> target;
  std::size_t pretrain_batches = 0;
  std::size_t target_batches = 0;
  std::size_t batch_size = 10;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double learning_rate = 0.01;
  std::size_t eval_every = 500;
  std::size_t eval_examples = 2000;
  std::vector<ObjectSetId> eval_sets{ObjectSetId::holdout_stripes};
  bool control = true;  // run stage 4
};

enum class Stage { pretrain = 1, freeze_reinit = 2, retrain_target = 3, control = 4 };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::pretrain: return "stage1_pretrain";
    case Stage::freeze_reinit: return "stage2_freeze_reinit";
    case Stage::retrain_target: return "stage3_retrain_target";
    case Stage::control: return "stage4_control";
  }
  return "?";
}

struct StageRecord {
  Stage stage;
  std::vector<MetricsRow> metrics;
  std::map<ParamGroup, std::uint32_t> checksum_at_entry;
  std::map<ParamGroup, std::uint32_t> checksum_at_exit;
};

template <class T = float>
struct CurriculumResult {
  std::vector<StageRecord> stages;
  Model<T> pretrained;  // stage-1 exit
  Model<T> reinit;      // stage-2 exit
  Model<T> retrained;   // stage-3 exit
  Model<T> control;     // stage-4 exit
};

namespace protocol_detail {

template <class T>
std::map<ParamGroup, std::uint32_t> checksums(const Model<T>& m) {
  return {{ParamGroup::cnn, group_checksum(m, ParamGroup::cnn)},
          {ParamGroup::central, group_checksum(m, ParamGroup::central)},
          {ParamGroup::output, group_checksum(m, ParamGroup::output)}};
}

inline OptimizerState<float> make_optimizer(OptimizerKind kind, double lr) {
  return kind == OptimizerKind::sgd ? OptimizerState<float>::sgd(static_cast<float>(lr))
                                    : OptimizerState<float>::adam(static_cast<float>(lr));
}

}  // namespace protocol_detail

/// Four stages:
///  1. train everything on the curriculum tasks;
///  2. freeze CNN + central module, re-initialise the output MLP for the
///     target task list (one evaluation point, no training);
///  3. train only the output MLP on the target tasks;
///  4. control: the stage-1 CNN with a freshly initialised central module,
///     both frozen, and a fresh output MLP trained on the target tasks with
///     the same data stream as stage 3.
inline CurriculumResult<float> run_curriculum(const CurriculumConfig& cfg, std::uint64_t seed,
                                              const std::function<void(Stage, const MetricsRow&)>& sink = {}) {
  using protocol_detail::checksums;
  if (cfg.curriculum.empty() || cfg.target.empty()) throw ConfigError("curriculum: empty task list");
  CurriculumResult<float> result;
  Rng init_rng = derive_rng(seed, 0x1717);

  auto stage_sink = [&](Stage s) -> MetricsSink {
    if (!sink) return {};
    return [&sink, s](const MetricsRow& r) { sink(s, r); };
  };

  // Stage 1
  ModelConfig mc = cfg.model;
  mc.task_id_width = task_id_width(cfg.curriculum);
  mc.label_arity = task_list_arity(cfg.curriculum);
  TrainState<float> s1{Model<float>(mc, init_rng), protocol_detail::make_optimizer(cfg.optimizer, cfg.learning_rate), seed,
                       1ull << 40, 0, cfg.curriculum};
  TrainConfig t1{cfg.curriculum, cfg.pretrain_batches, cfg.batch_size, ObjectSetId::train_pentominoes,
                 cfg.eval_every, cfg.eval_examples, cfg.eval_sets, false};
  StageRecord r1{Stage::pretrain, {}, checksums(s1.model), {}};
  r1.metrics = train(s1, t1, stage_sink(Stage::pretrain));
  r1.checksum_at_exit = checksums(s1.model);
  result.pretrained = s1.model;

  // Stage 2
  Model<float> m2 = s1.model;
  StageRecord r2{Stage::freeze_reinit, {}, checksums(m2), {}};
  m2.params().set_trainable(ParamGroup::cnn, false);
  m2.params().set_trainable(ParamGroup::central, false);
  m2.reset_output(task_id_width(cfg.target), task_list_arity(cfg.target), init_rng);
  TrainConfig t3{cfg.target, cfg.target_batches, cfg.batch_size, ObjectSetId::train_pentominoes,
                 cfg.eval_every, cfg.eval_examples, cfg.eval_sets, false};
  r2.metrics = evaluate_all(m2, t3, 0, seed);
  if (sink)
    for (const auto& r : r2.metrics) sink(Stage::freeze_reinit, r);
  r2.checksum_at_exit = checksums(m2);
  result.reinit = m2;

  // Stage 3
  TrainState<float> s3{m2, protocol_detail::make_optimizer(cfg.optimizer, cfg.learning_rate), seed, 2ull << 40, 0, cfg.target};
  StageRecord r3{Stage::retrain_target, {}, checksums(s3.model), {}};
  r3.metrics = train(s3, t3, stage_sink(Stage::retrain_target));
  r3.checksum_at_exit = checksums(s3.model);
  result.retrained = s3.model;

  if (!cfg.control) {
    result.stages = {std::move(r1), std::move(r2), std::move(r3)};
    return result;
  }

  // Stage 4
  Model<float> m4 = m2;
  m4.reinitialize(ParamGroup::central, init_rng);
  m4.reinitialize(ParamGroup::output, init_rng);
  m4.params().set_trainable(ParamGroup::central, false);
  TrainState<float> s4{m4, protocol_detail::make_optimizer(cfg.optimizer, cfg.learning_rate), seed, 2ull << 40, 0, cfg.target};
  StageRecord r4{Stage::control, {}, checksums(s4.model), {}};
  r4.metrics = train(s4, t3, stage_sink(Stage::control));
  r4.checksum_at_exit = checksums(s4.model);
  result.control = s4.model;

  result.stages = {std::move(r1), std::move(r2), std::move(r3), std::move(r4)};
  return result;
}

}  // namespace predinet
