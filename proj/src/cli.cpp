#include "xmodal/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "xmodal/error.hpp"
#include "xmodal/gradcheck.hpp"
#include "xmodal/image_io.hpp"
#include "xmodal/report.hpp"
#include "xmodal/trainer.hpp"

namespace xmodal {

namespace {

namespace fs = std::filesystem;

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_config_args(CLI::App& cmd, ConfigArgs& a) {
  cmd.add_option("--config", a.config_path, "Flat key = value config file")->check(CLI::ExistingFile);
  cmd.add_option("--set", a.sets, "Override a config key (key=value); repeatable");
  cmd.add_option("--seed", a.seed, "Run seed (overrides config and XMODAL_SEED)");
}

// config file < XMODAL_SEED < --set < --seed
TrainConfig resolve_config(const ConfigArgs& a) {
  TrainConfig c = a.config_path.empty() ? TrainConfig{} : load_config_file(a.config_path);
  if (const char* env = std::getenv("XMODAL_SEED"); env != nullptr && *env != '\0') {
    set_config_value(c, "seed", env);
  }
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      fail(ErrorKind::config, "cli", "run", "--set expects key=value, got '" + kv + "'");
    }
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) c.seed = *a.seed;
  c.validate();
  return c;
}

CorpusSplit load_corpus(const std::string& data, const TrainConfig& c) {
  if (data.empty()) return synthetic_corpus_for(c);
  fs::path path = data;
  if (fs::is_directory(path)) path /= "corpus.jsonl";
  if (!fs::is_regular_file(path)) fail(ErrorKind::config, "cli", "run", "no corpus at " + path.string());
  LoadOptions o;
  o.image_size = c.model.image_size;
  o.num_categories = c.model.num_categories;
  o.num_ingredients = c.model.num_ingredients;
  return load_recipe1m_layer(path, o);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) fail(ErrorKind::io, "cli", "run", "cannot write " + path.string());
}

const std::vector<Recipe>& pick_split(const CorpusSplit& corpus, const std::string& split) {
  if (split == "val") return corpus.val_paired;
  if (split == "test") return corpus.test_paired;
  if (split == "train") return corpus.train_paired;
  fail(ErrorKind::config, "cli", "run", "unknown split '" + split + "' (train, val or test)");
}

// Rebuilds the training state stored in a checkpoint and tokenizes `corpus`
// with its vocabulary.
std::unique_ptr<TrainState> restore(const fs::path& checkpoint, const ConfigArgs& overrides, CorpusSplit* corpus,
                                    const std::string& data) {
  const auto meta = read_checkpoint_meta(checkpoint);
  TrainConfig c = parse_config_text(meta.config_text);
  if (overrides.seed) c.seed = *overrides.seed;
  auto state = std::make_unique<TrainState>(c, Vocabulary::from_tokens(meta.vocabulary));
  state->load(checkpoint);
  if (corpus != nullptr) {
    *corpus = load_corpus(data, c);
    tokenize_corpus(*corpus, state->vocab(), c.model.max_len);
  }
  return state;
}

EvaluationOptions evaluation_options(const TrainConfig& c, bool with_fid) {
  EvaluationOptions o;
  o.group_size = c.eval_group_size;
  o.n_groups = c.eval_groups;
  o.seed = c.seed;
  o.with_fid = with_fid;
  o.extractor = c.fid_extractor;
  return o;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-modal recipe/image retrieval: data, training, evaluation and reports", "xmodal"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Help for every command");

  // gen-data
  auto* gen_data = app.add_subcommand("gen-data", "Write a synthetic paired/recipe-only corpus");
  std::string out_dir;
  SyntheticSpec spec;
  gen_data->add_option("--out", out_dir, "Output directory")->required();
  gen_data->add_option("--paired", spec.paired, "Paired training records")->check(CLI::NonNegativeNumber);
  gen_data->add_option("--recipe-only", spec.recipe_only, "Recipe-only training records")
      ->check(CLI::NonNegativeNumber);
  gen_data->add_option("--val", spec.val, "Held-out validation pairs")->check(CLI::NonNegativeNumber);
  gen_data->add_option("--test", spec.test, "Held-out test pairs")->check(CLI::NonNegativeNumber);
  gen_data->add_option("--seed", spec.seed, "Corpus seed");
  gen_data->add_option("--categories", spec.num_categories, "Number of dish categories")->check(CLI::PositiveNumber);
  gen_data->add_option("--ingredients", spec.num_ingredients, "Ingredient vocabulary size")
      ->check(CLI::PositiveNumber);
  gen_data->add_option("--image-size", spec.image_size, "Image side length")->check(CLI::PositiveNumber);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes run log, checkpoints and metrics");
  ConfigArgs train_cfg;
  std::string data, resume;
  add_config_args(*train_cmd, train_cfg);
  train_cmd->add_option("--data", data, "Corpus directory or corpus.jsonl (default: synthetic from config)");
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  train_cmd->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  ConfigArgs eval_cfg;
  std::string checkpoint, split = "test";
  std::optional<std::int64_t> group_size, groups;
  bool with_fid = false;
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data, "Corpus directory or corpus.jsonl (default: synthetic from config)");
  eval_cmd->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--group-size", group_size, "Gallery size per group (0 = whole split)")
      ->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--groups", groups, "Number of sampled groups")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", eval_cfg.seed, "Group-sampling seed");
  eval_cmd->add_flag("--fid", with_fid, "Also compute FID of generated images");
  eval_cmd->add_option("--out", out_dir, "Output directory")->required();

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Batch-size sweep at equal optimizer-step budgets");
  ConfigArgs sweep_cfg;
  std::vector<std::int64_t> sizes;
  add_config_args(*sweep_cmd, sweep_cfg);
  sweep_cmd->add_option("--sizes", sizes, "Comma-separated batch sizes")->required()->delimiter(',');
  sweep_cmd->add_option("--data", data, "Corpus directory or corpus.jsonl (default: synthetic from config)");
  sweep_cmd->add_option("--out", out_dir, "Output directory")->required();

  // gen-images
  auto* images_cmd = app.add_subcommand("gen-images", "Generate images from recipe embeddings");
  ConfigArgs images_cfg;
  std::int64_t count = 16;
  std::uint64_t noise_seed = 0;
  images_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  images_cmd->add_option("--data", data, "Corpus directory or corpus.jsonl (default: synthetic from config)");
  images_cmd->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  images_cmd->add_option("--count", count, "Number of recipes (0 = whole split)")->check(CLI::NonNegativeNumber);
  images_cmd->add_option("--noise-seed", noise_seed, "Generator noise seed");
  images_cmd->add_option("--out", out_dir, "Output directory")->required();

  // grad-check
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference checks of every loss and encoder");
  std::vector<std::string> probes;
  std::int64_t seeds = 10;
  std::uint64_t first_seed = 0;
  double tolerance = 1e-4;
  bool list_probes = false;
  grad_cmd->add_option("--probe", probes, "Probe name; repeatable (default: all)");
  grad_cmd->add_option("--seeds", seeds, "Seeds per probe")->check(CLI::PositiveNumber);
  grad_cmd->add_option("--first-seed", first_seed, "First seed");
  grad_cmd->add_option("--tolerance", tolerance, "Maximum relative error")->check(CLI::PositiveNumber);
  grad_cmd->add_flag("--list", list_probes, "List probe names and exit");
  grad_cmd->add_option("--out", out_dir, "Directory for gradcheck.json");

  // report
  auto* report_cmd = app.add_subcommand("report", "Plots and tables from run logs and sweep reports");
  std::vector<std::string> inputs;
  report_cmd->add_option("inputs", inputs, "Run logs (.jsonl) and/or sweep reports (.json)")->required();
  report_cmd->add_option("--out", out_dir, "Output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream help_out, help_err;
    const int code = app.exit(e, help_out, help_err);
    out << help_out.str();
    err << help_err.str();
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen_data) {
      auto corpus = generate_synthetic_corpus(spec);
      write_recipe1m_layer(corpus, out_dir);
      err << "[gen-data] wrote " << corpus.train_paired.size() << " paired, " << corpus.train_recipe_only.size()
          << " recipe-only, " << corpus.val_paired.size() << " val, " << corpus.test_paired.size() << " test to "
          << out_dir << '\n';
      return 0;
    }

    if (*train_cmd) {
      auto config = resolve_config(train_cfg);
      const fs::path root = out_dir;
      fs::create_directories(root);
      config.checkpoint_dir = (root / (config.checkpoint_dir.empty() ? "checkpoints" : config.checkpoint_dir)).string();
      write_file(root / "config.txt", serialize_config(config));
      auto corpus = load_corpus(data, config);
      TrainOptions options;
      options.log_path = root / "runlog.jsonl";
      options.resume_from = resume;
      auto result = train(config, corpus, options);
      nlohmann::json metrics = {{"config_fingerprint", config_fingerprint(config)}};
      if (result.best_validation) metrics["val"] = result.best_validation->to_json();
      if (!corpus.test_paired.empty()) {
        auto test = evaluate_split(corpus.test_paired, *result.state, evaluation_options(config, config.use_trans_r));
        metrics["test"] = test.to_json();
        err << "[train] test medR " << test.mean.image_to_recipe.medR << " R@1 " << test.mean.image_to_recipe.r1
            << '\n';
      }
      write_file(root / "metrics.json", metrics.dump(2) + "\n");
      err << "[train] wrote " << (root / "runlog.jsonl").string() << ", " << config.checkpoint_dir << ", "
          << (root / "metrics.json").string() << '\n';
      return 0;
    }

    if (*eval_cmd) {
      CorpusSplit corpus;
      auto state = restore(checkpoint, eval_cfg, &corpus, data);
      auto config = state->config();
      if (group_size) config.eval_group_size = *group_size;
      if (groups) config.eval_groups = *groups;
      auto metrics = evaluate_split(pick_split(corpus, split), *state, evaluation_options(config, with_fid));
      fs::create_directories(out_dir);
      auto j = metrics.to_json();
      j["split"] = split;
      j["checkpoint"] = checkpoint;
      write_file(fs::path(out_dir) / "metrics.json", j.dump(2) + "\n");
      err << "[eval] " << split << " image_to_recipe medR " << metrics.mean.image_to_recipe.medR << " R@1 "
          << metrics.mean.image_to_recipe.r1 << "; recipe_to_image medR " << metrics.mean.recipe_to_image.medR
          << " R@1 " << metrics.mean.recipe_to_image.r1 << '\n';
      return 0;
    }

    if (*sweep_cmd) {
      auto config = resolve_config(sweep_cfg);
      const fs::path root = out_dir;
      fs::create_directories(root);
      if (!config.checkpoint_dir.empty()) config.checkpoint_dir = (root / config.checkpoint_dir).string();
      auto corpus = load_corpus(data, config);
      auto sweep = batch_size_sweep(config, sizes, corpus, false);
      write_file(root / "sweep.json", sweep.to_json().dump(2) + "\n");
      write_file(root / "sweep.csv", sweep.to_csv());
      write_file(root / "batch_size.svg", batch_size_plot_svg(sweep));
      err << "[sweep] wrote " << sweep.rows.size() << " rows to " << (root / "sweep.csv").string() << '\n';
      return 0;
    }

    if (*images_cmd) {
      CorpusSplit corpus;
      auto state = restore(checkpoint, images_cfg, &corpus, data);
      const auto& all = pick_split(corpus, split);
      std::vector<Recipe> chosen(all.begin(),
                                 all.begin() + (count == 0 ? static_cast<std::int64_t>(all.size())
                                                           : std::min<std::int64_t>(count, all.size())));
      if (chosen.empty()) fail(ErrorKind::config, "cli", "gen-images", "split '" + split + "' is empty");
      auto [V, R] = embed_pairs(chosen, *state);
      auto images = generate_images(R, state->model()->generator, noise_seed);
      const fs::path root = out_dir;
      fs::create_directories(root);
      nlohmann::json index = nlohmann::json::object();
      for (std::size_t i = 0; i < chosen.size(); ++i) {
        const auto file = chosen[i].id + ".png";
        save_png(root / file, ImageTensor(images[static_cast<std::int64_t>(i)].to(torch::kFloat32)));
        index[chosen[i].id] = file;
      }
      write_file(root / "index.json", index.dump(2) + "\n");
      err << "[gen-images] wrote " << chosen.size() << " images to " << root.string() << '\n';
      return 0;
    }

    if (*grad_cmd) {
      if (list_probes) {
        for (const auto& name : probe_names()) out << name << '\n';
        return 0;
      }
      if (probes.empty()) probes = probe_names();
      nlohmann::json results = nlohmann::json::array();
      bool ok = true;
      for (const auto& probe : probes) {
        double worst = 0;
        std::string where;
        for (std::int64_t s = 0; s < seeds; ++s) {
          const auto seed = first_seed + static_cast<std::uint64_t>(s);
          auto r = run_probe(probe, seed);
          results.push_back({{"probe", probe},
                             {"seed", seed},
                             {"max_rel_error", r.max_rel_error},
                             {"worst", r.worst},
                             {"analytic", r.worst_analytic},
                             {"numeric", r.worst_numeric},
                             {"coordinates", r.coordinates},
                             {"kink_retries", r.kink_retries}});
          if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            where = r.worst + " seed " + std::to_string(seed);
          }
        }
        const bool pass = worst <= tolerance;
        ok = ok && pass;
        err << (pass ? "[grad-check] ok   " : "[grad-check] FAIL ") << probe << " max rel error " << worst << " at "
            << where << '\n';
      }
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_file(fs::path(out_dir) / "gradcheck.json",
                   nlohmann::json{{"tolerance", tolerance}, {"results", results}}.dump(2) + "\n");
      }
      if (!ok) {
        fail(ErrorKind::gradient_check, "trainer", "gradient_check",
             "relative error above " + std::to_string(tolerance) + " (see lines above)");
      }
      return 0;
    }

    if (*report_cmd) {
      std::vector<fs::path> paths(inputs.begin(), inputs.end());
      auto outputs = write_report(paths, out_dir);
      for (const auto& f : outputs.files) err << "[report] wrote " << f.string() << '\n';
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.is_usage_error() ? 1 : 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: [cli.run] io error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: [cli.run] runtime error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace xmodal
