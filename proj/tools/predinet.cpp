// predinet: dataset generation, training, curriculum runs, evaluation,
// analysis and Prolog export from the command line.
//
// Exit codes: 0 ok, 1 runtime error, 2 usage error.
// Outputs go under $PREDINET_OUTPUT_ROOT (default ./runs)/<run id>/.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "predinet/analysis.hpp"
#include "predinet/checkpoint.hpp"
#include "predinet/config.hpp"
#include "predinet/experiment.hpp"
#include "predinet/png.hpp"
#include "predinet/protocol.hpp"
#include "predinet/shard.hpp"
#include "predinet/symbolic.hpp"

namespace fs = std::filesystem;
using namespace predinet;

namespace {

constexpr const char* kOutputRootEnv = "PREDINET_OUTPUT_ROOT";

fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

/// Creates a fresh directory; refuses to reuse one (outputs are write-once).
fs::path fresh_dir(const fs::path& dir) {
  if (fs::exists(dir)) throw DataError("output directory " + dir.string() + " already exists; pick another run id");
  fs::create_directories(dir);
  return dir;
}

std::ofstream open_new(const fs::path& path) {
  if (fs::exists(path)) throw DataError("refusing to overwrite " + path.string());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
  std::string run_id;

  void add_to(CLI::App* app, bool required = true) {
    auto* opt = app->add_option("--config", path, "experiment config file")->check(CLI::ExistingFile);
    if (required) opt->required();
    app->add_option("--set", overrides, "override a config key, e.g. --set model.heads=64");
    app->add_option("--run-id", run_id, "run id (default: config run_id or file stem)");
  }

  Config load() const {
    Config c = path.empty() ? Config{} : Config::load(path);
    for (const auto& kv : overrides) {
      auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return c;
  }

  Experiment experiment(const Config& c) const {
    auto e = parse_experiment(c, fs::path(path).stem().string());
    if (!run_id.empty()) e.run_id = run_id;
    return e;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_new(path);
  out << text;
}

// ---------------------------------------------------------------------------

int cmd_generate(const std::string& task, const std::string& set, std::size_t count, std::uint64_t seed,
                 const std::string& out, const std::string& png_dir) {
  auto shard = generate_shard(rg::parse_task(task), rg::parse_object_set(set), count, seed);
  if (fs::exists(out)) throw DataError("refusing to overwrite " + out);
  save_shard(shard, out);
  if (!png_dir.empty()) {
    fresh_dir(png_dir);
    for (std::size_t i = 0; i < shard.examples.size(); ++i) {
      const auto& ex = shard.examples[i];
      png::write((fs::path(png_dir) / ("img" + std::to_string(i) + "_label" + std::to_string(ex.label) + ".png")).string(),
                 ex.image);
    }
  }
  std::cerr << "wrote " << count << " examples to " << out << "\n";
  return 0;
}

int cmd_train(const ConfigArgs& args, std::optional<std::uint64_t> seed_override, const std::string& resume) {
  const auto cfg = args.load();
  auto e = args.experiment(cfg);
  if (e.train.tasks.empty()) throw ConfigError("train.tasks is required for train");
  std::vector<std::uint64_t> seeds = seed_override ? std::vector<std::uint64_t>{*seed_override} : e.seeds;
  if (!resume.empty() && seeds.size() != 1) throw ConfigError("--resume needs exactly one seed (use --seed)");
  const auto run_dir = output_root() / e.run_id;
  fs::create_directories(run_dir);

  std::vector<MetricsRow> all;
  for (auto seed : seeds) {
    const auto dir = fresh_dir(run_dir / ("seed_" + std::to_string(seed)));
    write_text(dir / "config.cfg", cfg.dump());
    TrainState<float> st;
    if (!resume.empty()) {
      st = load_checkpoint(resume);
      if (st.seed != seed) throw ConfigError("checkpoint seed " + std::to_string(st.seed) + " differs from --seed");
      if (st.model.config().arch != e.model.arch) throw ConfigError("checkpoint architecture differs from config");
    } else {
      Rng init = derive_rng(seed, 0x1717);
      st = TrainState<float>{Model<float>(e.model, init), e.make_optimizer(), seed, 0, 0, e.train.tasks};
    }
    auto metrics = open_new(dir / "metrics.csv");
    metrics << kMetricsHeader << '\n';
    auto sink = [&](const MetricsRow& r) {
      write_metrics_csv(metrics, {r}, false);
      metrics.flush();
      std::cerr << "seed " << seed << " batch " << r.batch << " " << r.task << " " << r.split << " acc " << r.accuracy
                << " loss " << r.loss << "\n";
    };
    std::function<void(const TrainState<float>&)> periodic = [&](const TrainState<float>& s) {
      if (e.checkpoint_every > 0 && s.batch % e.checkpoint_every == 0 && s.batch < e.train.batches)
        save_checkpoint(s, (dir / ("ckpt_" + std::to_string(s.batch) + ".pnet")).string());
    };
    auto rows = train(st, e.train, sink, periodic);
    save_checkpoint(st, (dir / "final.pnet").string());
    all.insert(all.end(), rows.begin(), rows.end());
  }
  if (seeds.size() > 1) {
    auto out = open_new(run_dir / "metrics_mean.csv");
    write_metrics_csv(out, average_over_seeds(all));
  }
  std::cerr << "outputs in " << run_dir.string() << "\n";
  return 0;
}

int cmd_curriculum(const ConfigArgs& args, std::optional<std::uint64_t> seed_override) {
  const auto cfg = args.load();
  auto e = args.experiment(cfg);
  if (!e.has_curriculum) throw ConfigError("curriculum needs [curriculum] tasks and [target] tasks");
  std::vector<std::uint64_t> seeds = seed_override ? std::vector<std::uint64_t>{*seed_override} : e.seeds;
  const auto run_dir = output_root() / e.run_id;
  fs::create_directories(run_dir);
  std::map<Stage, std::vector<MetricsRow>> all;
  for (auto seed : seeds) {
    const auto dir = fresh_dir(run_dir / ("seed_" + std::to_string(seed)));
    write_text(dir / "config.cfg", cfg.dump());
    std::map<Stage, std::ofstream> files;
    std::vector<Stage> stages{Stage::pretrain, Stage::freeze_reinit, Stage::retrain_target};
    if (e.curriculum.control) stages.push_back(Stage::control);
    for (auto s : stages) {
      files[s] = open_new(dir / (to_string(s) + ".csv"));
      files[s] << kMetricsHeader << '\n';
    }
    auto result = run_curriculum(e.curriculum, seed, [&](Stage s, const MetricsRow& r) {
      write_metrics_csv(files[s], {r}, false);
      files[s].flush();
      std::cerr << "seed " << seed << " " << to_string(s) << " batch " << r.batch << " " << r.task << " " << r.split
                << " acc " << r.accuracy << "\n";
    });
    auto sums = open_new(dir / "group_checksums.csv");
    sums << "stage,group,entry_crc32,exit_crc32\n";
    for (const auto& rec : result.stages) {
      for (auto g : {ParamGroup::cnn, ParamGroup::central, ParamGroup::output})
        sums << to_string(rec.stage) << ',' << to_string(g) << ',' << rec.checksum_at_entry.at(g) << ','
             << rec.checksum_at_exit.at(g) << '\n';
      auto& bucket = all[rec.stage];
      bucket.insert(bucket.end(), rec.metrics.begin(), rec.metrics.end());
    }
    auto save = [&](const Model<float>& m, const std::vector<TaskSpec>& tasks, const char* name) {
      TrainState<float> st{m, e.make_optimizer(), seed, 0, 0, tasks};
      save_checkpoint(st, (dir / name).string());
    };
    save(result.pretrained, e.curriculum.curriculum, "stage1_pretrain.pnet");
    save(result.retrained, e.curriculum.target, "stage3_retrain_target.pnet");
    if (e.curriculum.control) save(result.control, e.curriculum.target, "stage4_control.pnet");
  }
  if (seeds.size() > 1)
    for (auto& [stage, rows] : all) {
      auto out = open_new(run_dir / (to_string(stage) + "_mean.csv"));
      write_metrics_csv(out, average_over_seeds(rows));
    }
  std::cerr << "outputs in " << run_dir.string() << "\n";
  return 0;
}

std::vector<ObjectSetId> sets_or_all(const std::vector<std::string>& names) {
  if (names.empty()) return {ObjectSetId::train_pentominoes, ObjectSetId::holdout_hexominoes, ObjectSetId::holdout_stripes};
  return parse_set_list(names);
}

int cmd_eval(const std::string& ckpt, const std::vector<std::string>& sets, std::size_t count, std::uint64_t seed) {
  auto st = load_checkpoint(ckpt);
  if (st.tasks.empty()) throw DataError("checkpoint records no tasks");
  std::vector<MetricsRow> rows;
  for (std::size_t t = 0; t < st.tasks.size(); ++t)
    for (auto set : sets_or_all(sets)) {
      auto r = evaluate(st.model, st.tasks, t, set, count, seed);
      rows.push_back({st.batch, rg::to_string(st.tasks[t]), rg::to_string(set), r.accuracy, r.loss, seed});
    }
  write_metrics_csv(std::cout, rows);
  return 0;
}

int cmd_analyze(const std::string& ckpt, const std::string& run_id_arg, std::size_t count, std::size_t heatmap_images,
                std::size_t trials, std::size_t ablation_examples, std::uint64_t seed) {
  auto st = load_checkpoint(ckpt);
  if (st.tasks.empty()) throw DataError("checkpoint records no tasks");
  auto& model = st.model;
  const auto& cfg = model.config();
  const std::string run_id = run_id_arg.empty() ? "analysis_" + fs::path(ckpt).stem().string() : run_id_arg;
  const auto dir = fresh_dir(output_root() / run_id);
  const auto tw = task_id_width(st.tasks);
  const auto file = [&](const std::string& name) { return dir / (run_id + "_" + name); };

  // Probe images from the training set and the hexomino set, task 0.
  Rng rng = derive_rng(seed, 0xa7a1);
  auto probe = make_batch<float>(st.tasks, 0, ObjectSetId::train_pentominoes, count, rng, true);
  auto heldout = make_batch<float>(st.tasks, 0, ObjectSetId::holdout_hexominoes, count, rng, true);
  const Tensor<float>* task_ids = tw ? &probe.task_ids : nullptr;

  Graph<float> g(false);
  auto feats = cnn_forward(g, g.constant(probe.images), model.params(), cfg);
  auto central = central_forward(g, feats, model.params(), cfg);
  Graph<float> gh(false);
  auto central_h = central_forward(gh, cnn_forward(gh, gh.constant(heldout.images), model.params(), cfg), model.params(), cfg);

  auto rows_of = [&](const Tensor<float>& r, std::size_t from, std::size_t width) {
    std::vector<std::vector<double>> X;
    for (std::size_t b = 0; b < r.dim(0); ++b) {
      std::vector<double> row(width);
      for (std::size_t i = 0; i < width; ++i) row[i] = r.at(b, from + i);
      X.push_back(std::move(row));
    }
    return X;
  };
  const auto& R = central.r_star.value();
  const auto& Rh = central_h.r_star.value();
  auto dump_pca = [&](const std::string& name, std::size_t from, std::size_t width) {
    auto p = analysis::pca(rows_of(R, from, width), probe.labels, 2, seed);
    auto out = open_new(file(name + ".csv"));
    analysis::write_pca_csv(out, p);
    analysis::PcaResult h = p;
    h.projections = analysis::project(p, rows_of(Rh, from, width));
    h.labels = heldout.labels;
    auto out_h = open_new(file(name + "_heldout.csv"));
    analysis::write_pca_csv(out_h, h);
    if (p.rank_deficient) std::cerr << "warning: " << name << " is rank deficient\n";
  };
  dump_pca("pca_full", 0, R.dim(1));
  if (cfg.arch == Arch::predinet || cfg.arch == Arch::mha)
    for (std::size_t h = 0; h < cfg.heads; ++h) dump_pca("pca_head" + std::to_string(h), h * cfg.head_width(), cfg.head_width());

  std::vector<std::size_t> eligible;
  if (cfg.arch == Arch::predinet) {
    auto recs = analysis::collect_attention(model, probe.images, probe.labels, task_ids);
    std::vector<analysis::Grid> content;
    for (const auto& ex : probe.examples) content.push_back(rg::make_content_mask(ex).grid);
    const auto scores = analysis::score_heads(recs, content);
    auto out = open_new(file("head_scores.csv"));
    analysis::write_head_scores_csv(out, scores, analysis::mlp_weight_magnitudes(model));
    eligible = analysis::object_attending_heads(scores);

    std::vector<analysis::AttentionRecord> shown(recs.begin(), recs.begin() + static_cast<std::ptrdiff_t>(std::min(heatmap_images, recs.size())));
    auto hm = open_new(file("heatmaps.csv"));
    analysis::write_heatmaps_csv(hm, shown);
    for (const auto& r : shown) {
      Tensor<float> img({cfg.image_size, cfg.image_size, cfg.image_channels});
      std::copy(probe.images.data().begin() + static_cast<std::ptrdiff_t>(r.image * img.size()),
                probe.images.data().begin() + static_cast<std::ptrdiff_t>((r.image + 1) * img.size()), img.data().begin());
      png::write(file("image" + std::to_string(r.image) + ".png").string(), png::upscale(img, 4));
      for (std::size_t h = 0; h < cfg.heads; ++h)
        for (int slot = 1; slot <= 2; ++slot) {
          const auto tag = "head" + std::to_string(h) + "_image" + std::to_string(r.image) + "_slot" + std::to_string(slot);
          png::write(file(tag + "_overlay.png").string(), analysis::heat_overlay(img, r.mask(h, slot)));
          png::write(file(tag + "_grid.png").string(), analysis::heat_grid(r.mask(h, slot)));
        }
    }
  }

  if (cfg.arch == Arch::predinet || cfg.arch == Arch::mha) {
    auto pr = analysis::make_probe(model, st.tasks, 0, ObjectSetId::train_pentominoes, ablation_examples, seed);
    std::vector<std::size_t> counts;
    for (std::size_t c = 0; c <= cfg.heads; ++c) counts.push_back(c);
    std::vector<analysis::AblationResult> results{
        analysis::head_ablation(model, pr, analysis::AblationPolicy::random, counts, trials, seed)};
    if (cfg.arch == Arch::predinet)
      results.push_back(analysis::head_ablation(model, pr, analysis::AblationPolicy::object_attending, counts, trials, seed, eligible));
    for (const auto& r : results)
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
    auto out = open_new(file("ablation.csv"));
    analysis::write_ablation_csv(out, results);
  }
  std::cerr << "analysis in " << dir.string() << "\n";
  return 0;
}

int cmd_export(const std::string& ckpt, const std::string& image_path, const std::string& task, const std::string& set,
               std::uint64_t seed, double bandwidth) {
  auto st = load_checkpoint(ckpt);
  Tensor<float> image;
  if (!image_path.empty()) {
    image = png::read_rgb(image_path);
  } else {
    Rng rng = derive_rng(seed, 0xe8);
    auto t = task.empty() ? (st.tasks.empty() ? rg::parse_task("between") : st.tasks.front()) : rg::parse_task(task);
    image = rg::sample_example(t, rg::object_set(rg::parse_object_set(set)), rng).image;
  }
  std::cout << symbolic::emit_prolog(symbolic::extract(st.model, image, bandwidth));
  return 0;
}

/// Takes `key` from the config file unless the flag was given explicitly.
template <class V>
void from_config(const Config& c, const std::string& key, const CLI::Option* opt, V& v) {
  if (opt->count() > 0 || !c.has(key)) return;
  if constexpr (std::is_same_v<V, std::string>) v = c.get(key);
  else if constexpr (std::is_same_v<V, std::vector<std::string>>) v = c.list(key);
  else v = c.number<V>(key);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PrediNet relational reasoning lab"};
  app.require_subcommand(1);

  // generate
  ConfigArgs gen_args;
  std::string task = "same", set = "train", out, png_dir;
  std::size_t count = 10000;
  std::uint64_t seed = 1;
  auto* gen = app.add_subcommand("generate", "write an RGV1 dataset shard");
  gen_args.add_to(gen, false);
  auto* g_task = gen->add_option("--task", task, "task name, e.g. same or column_pattern:ABA");
  auto* g_set = gen->add_option("--objects", set, "object set: train, hexominoes or stripes");
  auto* g_count = gen->add_option("--count", count, "number of examples");
  auto* g_seed = gen->add_option("--seed", seed, "random seed");
  auto* g_out = gen->add_option("--out", out, "output shard path");
  auto* g_png = gen->add_option("--png-dir", png_dir, "also dump every image as PNG into this new directory");

  // train / curriculum
  ConfigArgs train_args, curr_args;
  std::optional<std::uint64_t> seed_override;
  std::string resume;
  auto* tr = app.add_subcommand("train", "train on the [train] tasks for every seed");
  train_args.add_to(tr);
  tr->add_option("--seed", seed_override, "run only this seed");
  tr->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  auto* cu = app.add_subcommand("curriculum", "four-stage curriculum / transfer protocol");
  curr_args.add_to(cu);
  cu->add_option("--seed", seed_override, "run only this seed");

  // eval
  ConfigArgs eval_args;
  std::string ckpt;
  std::vector<std::string> eval_sets;
  std::size_t eval_count = 2000;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; metrics CSV on stdout");
  eval_args.add_to(ev, false);
  auto* e_ckpt = ev->add_option("--ckpt", ckpt, "checkpoint");
  auto* e_sets = ev->add_option("--objects", eval_sets, "object sets (default: all three)");
  auto* e_count = ev->add_option("--count", eval_count, "examples per set");
  auto* e_seed = ev->add_option("--seed", seed, "evaluation seed");

  // analyze
  ConfigArgs an_args;
  std::string run_id;
  std::size_t probe_count = 1000, heatmap_images = 4, trials = 30, ablation_examples = 1000;
  auto* an = app.add_subcommand("analyze", "heatmaps, PCA, head scores and ablation for a checkpoint");
  an->add_option("--config", an_args.path, "config file")->check(CLI::ExistingFile);
  an->add_option("--set", an_args.overrides, "override a config key");
  auto* a_ckpt = an->add_option("--ckpt", ckpt, "checkpoint");
  auto* a_run = an->add_option("--run-id", run_id, "output run id");
  auto* a_count = an->add_option("--count", probe_count, "probe images for PCA and head scores");
  auto* a_heat = an->add_option("--heatmap-images", heatmap_images, "images rendered as heatmaps");
  auto* a_trials = an->add_option("--trials", trials, "ablation trials per retained-head count");
  auto* a_abl = an->add_option("--ablation-examples", ablation_examples, "examples per ablation evaluation");
  auto* a_seed = an->add_option("--seed", seed, "probe seed");

  // export-prolog
  ConfigArgs ex_args;
  std::string image, export_task;
  double bandwidth = symbolic::kDefaultBandwidth;
  auto* ex = app.add_subcommand("export-prolog", "print one image's propositions as a Prolog program");
  ex->add_option("--config", ex_args.path, "config file")->check(CLI::ExistingFile);
  ex->add_option("--set", ex_args.overrides, "override a config key");
  auto* x_ckpt = ex->add_option("--ckpt", ckpt, "PrediNet checkpoint");
  auto* x_img = ex->add_option("--image", image, "36x36 RGB PNG (default: a generated scene)");
  auto* x_task = ex->add_option("--task", export_task, "task for the generated scene (default: the checkpoint's first task)");
  auto* x_objs = ex->add_option("--objects", set, "object set for the generated scene");
  auto* x_seed = ex->add_option("--seed", seed, "seed for the generated scene");
  auto* x_bw = ex->add_option("--bandwidth", bandwidth, "mean-shift bandwidth");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  auto usage = [&](const std::string& msg) {
    std::cerr << "usage error: " << msg << "\n" << "run with --help for usage\n";
    return 2;
  };
  try {
    if (*gen) {
      const auto c = gen_args.load();
      from_config(c, "generate.task", g_task, task);
      from_config(c, "generate.objects", g_set, set);
      from_config(c, "generate.count", g_count, count);
      from_config(c, "generate.seed", g_seed, seed);
      from_config(c, "generate.out", g_out, out);
      from_config(c, "generate.png_dir", g_png, png_dir);
      if (out.empty()) return usage("generate needs --out");
      return cmd_generate(task, set, count, seed, out, png_dir);
    }
    if (*tr) return cmd_train(train_args, seed_override, resume);
    if (*cu) return cmd_curriculum(curr_args, seed_override);
    if (*ev) {
      const auto c = eval_args.load();
      from_config(c, "eval.ckpt", e_ckpt, ckpt);
      from_config(c, "eval.sets", e_sets, eval_sets);
      from_config(c, "eval.count", e_count, eval_count);
      from_config(c, "eval.seed", e_seed, seed);
      if (ckpt.empty()) return usage("eval needs --ckpt");
      return cmd_eval(ckpt, eval_sets, eval_count, seed);
    }
    if (*an) {
      const auto c = an_args.load();
      from_config(c, "analyze.ckpt", a_ckpt, ckpt);
      from_config(c, "analyze.run_id", a_run, run_id);
      from_config(c, "analyze.count", a_count, probe_count);
      from_config(c, "analyze.heatmap_images", a_heat, heatmap_images);
      from_config(c, "analyze.trials", a_trials, trials);
      from_config(c, "analyze.ablation_examples", a_abl, ablation_examples);
      from_config(c, "analyze.seed", a_seed, seed);
      if (ckpt.empty()) return usage("analyze needs --ckpt");
      return cmd_analyze(ckpt, run_id, probe_count, heatmap_images, trials, ablation_examples, seed);
    }
    if (*ex) {
      const auto c = ex_args.load();
      from_config(c, "export.ckpt", x_ckpt, ckpt);
      from_config(c, "export.image", x_img, image);
      from_config(c, "export.task", x_task, export_task);
      from_config(c, "export.objects", x_objs, set);
      from_config(c, "export.seed", x_seed, seed);
      from_config(c, "export.bandwidth", x_bw, bandwidth);
      if (ckpt.empty()) return usage("export-prolog needs --ckpt");
      if (!(bandwidth > 0)) return usage("--bandwidth must be positive");
      return cmd_export(ckpt, image, export_task, set, seed, bandwidth);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
