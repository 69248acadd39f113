#pragma once

// Experiment files: Config -> model / training / curriculum settings.
//
//   run_id = same_predinet        # optional, defaults to the file stem
//   seeds  = 1,2,3
//   [model]      arch, heads, relations, key_size, ...
//   [optimizer]  kind = sgd | adam, learning_rate
//   [train]      tasks, batches, batch_size, train_set, eval_sets,
//                eval_every, eval_examples, checkpoint_every
//   [curriculum] tasks, batches, control  (curriculum command only)
//   [target]     tasks, batches      (curriculum command only)

#include <cstdint>
#include <string>
#include <vector>

#include "predinet/checkpoint.hpp"
#include "predinet/config.hpp"
#include "predinet/nets.hpp"
#include "predinet/optim.hpp"
#include "predinet/protocol.hpp"

namespace predinet {

inline std::vector<TaskSpec> parse_task_list(const std::vector<std::string>& names, const std::string& key) {
  if (names.empty()) throw ConfigError(key + ": empty task list");
  std::vector<TaskSpec> out;
  for (const auto& n : names) out.push_back(rg::parse_task(n));
  return out;
}

inline std::vector<ObjectSetId> parse_set_list(const std::vector<std::string>& names) {
  std::vector<ObjectSetId> out;
  for (const auto& n : names) out.push_back(rg::parse_object_set(n));
  return out;
}

struct Experiment {
  std::string run_id;
  std::vector<std::uint64_t> seeds{1};
  ModelConfig model;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double learning_rate = 0.01;
  TrainConfig train;
  std::size_t checkpoint_every = 0;
  CurriculumConfig curriculum;
  bool has_curriculum = false;

  OptimizerState<float> make_optimizer() const {
    return optimizer == OptimizerKind::sgd ? OptimizerState<float>::sgd(static_cast<float>(learning_rate))
                                           : OptimizerState<float>::adam(static_cast<float>(learning_rate));
  }
};

inline Experiment parse_experiment(const Config& cfg, const std::string& default_run_id = "run") {
  Experiment e;
  e.run_id = cfg.get("run_id", default_run_id);
  if (cfg.has("seeds")) {
    e.seeds.clear();
    for (const auto& s : cfg.list("seeds")) {
      Config one;
      one.set("seed", s);
      e.seeds.push_back(one.number<std::uint64_t>("seed"));
    }
    if (e.seeds.empty()) throw ConfigError("seeds: list is empty");
  }
  e.model = model_config_from(cfg);
  e.optimizer = parse_optimizer(cfg.get("optimizer.kind", "sgd"));
  e.learning_rate = cfg.number<double>("optimizer.learning_rate", e.optimizer == OptimizerKind::sgd ? 0.01 : 1e-4);
  if (!(e.learning_rate >= 0)) throw ConfigError("optimizer.learning_rate must be non-negative");

  auto& t = e.train;
  if (cfg.has("train.tasks")) t.tasks = parse_task_list(cfg.list("train.tasks"), "train.tasks");
  t.batches = cfg.number<std::size_t>("train.batches", 100000);
  t.batch_size = cfg.number<std::size_t>("train.batch_size", 10);
  if (t.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  t.train_set = rg::parse_object_set(cfg.get("train.train_set", "train"));
  if (cfg.has("train.eval_sets")) t.eval_sets = parse_set_list(cfg.list("train.eval_sets"));
  t.eval_every = cfg.number<std::size_t>("train.eval_every", 500);
  t.eval_examples = cfg.number<std::size_t>("train.eval_examples", 2000);
  if (t.eval_examples == 0) throw ConfigError("train.eval_examples must be positive");
  e.checkpoint_every = cfg.number<std::size_t>("train.checkpoint_every", 0);
  if (!t.tasks.empty()) {
    e.model.task_id_width = task_id_width(t.tasks);
    e.model.label_arity = task_list_arity(t.tasks);
  }

  if (cfg.has("curriculum.tasks") || cfg.has("target.tasks")) {
    e.has_curriculum = true;
    auto& c = e.curriculum;
    c.model = e.model;
    c.curriculum = parse_task_list(cfg.list("curriculum.tasks"), "curriculum.tasks");
    c.target = parse_task_list(cfg.list("target.tasks"), "target.tasks");
    c.pretrain_batches = cfg.number<std::size_t>("curriculum.batches", t.batches);
    c.target_batches = cfg.number<std::size_t>("target.batches", t.batches);
    c.batch_size = t.batch_size;
    c.optimizer = e.optimizer;
    c.learning_rate = e.learning_rate;
    c.eval_every = t.eval_every;
    c.eval_examples = t.eval_examples;
    c.eval_sets = cfg.has("train.eval_sets") ? t.eval_sets : std::vector<ObjectSetId>{ObjectSetId::holdout_stripes};
    const auto control = cfg.get("curriculum.control", "true");
    if (control != "true" && control != "false") throw ConfigError("curriculum.control must be true or false");
    c.control = control == "true";
  }
  e.model.validate();
  return e;
}

}  // namespace predinet
