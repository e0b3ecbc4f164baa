#include "xmodal/trainer.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

#include "xmodal/error.hpp"
#include "xmodal/random.hpp"

namespace xmodal {
namespace {

// Seed streams; each consumer derives its own generator from the run seed.
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kPairedOrder = 1;
constexpr std::uint64_t kRecipeOnlyOrder = 2;
constexpr std::uint64_t kPairedStepStream = 0x5000000000ULL;
constexpr std::uint64_t kRecipeOnlyStepStream = 0x6000000000ULL;
constexpr std::uint64_t kAdversarialStream = 0x7000000000ULL;
constexpr std::uint64_t kNoiseStream = 0x8000000000ULL;

torch::Tensor stack_images(std::span<const Recipe* const> recipes) {
  std::vector<torch::Tensor> pixels;
  pixels.reserve(recipes.size());
  for (const Recipe* r : recipes) {
    if (!r->image) fail(ErrorKind::validation, "trainer", "embed_pairs", "recipe '" + r->id + "' has no image");
    pixels.push_back(r->image->pixels());
  }
  return torch::stack(pixels);
}

// Restores train/eval mode on scope exit.
class ModeGuard {
 public:
  ModeGuard(torch::nn::Module& m, bool training) : module_(m), was_(m.is_training()) { m.train(training); }
  ~ModeGuard() { module_.train(was_); }

 private:
  torch::nn::Module& module_;
  bool was_;
};

double scalar(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

}  // namespace

// ---------------------------------------------------------------- RunLog

RunLog::RunLog(const std::filesystem::path& path, bool append) {
  if (path.empty()) return;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_ = std::make_unique<std::ofstream>(path, append ? std::ios::app : std::ios::trunc);
  if (!*out_) fail(ErrorKind::io, "trainer", "RunLog", "cannot open " + path.string());
}

void RunLog::append(nlohmann::json record) {
  if (out_) {
    *out_ << record.dump() << '\n';
    out_->flush();
    if (!*out_) fail(ErrorKind::io, "trainer", "RunLog", "write failed");
  }
  records_.push_back(std::move(record));
}

double RunLog::elapsed_seconds() const {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
}

void RunLog::header(const TrainConfig& config, const std::string& fingerprint) {
  append({{"type", "header"}, {"config", config_map(config)}, {"fingerprint", fingerprint}});
}

void RunLog::step(const std::string& kind, std::int64_t step, std::int64_t epoch, const LossReport& report) {
  append({{"type", "step"},
          {"kind", kind},
          {"step", step},
          {"epoch", epoch},
          {"wall_s", elapsed_seconds()},
          {"losses", report.to_json()}});
}

void RunLog::eval(const std::string& split, std::int64_t step, std::int64_t epoch, const MetricsReport& report) {
  append({{"type", "eval"},
          {"split", split},
          {"step", step},
          {"epoch", epoch},
          {"wall_s", elapsed_seconds()},
          {"metrics", report.to_json()}});
}

void RunLog::footer(const nlohmann::json& extra) {
  nlohmann::json record = {{"type", "footer"}, {"wall_s", elapsed_seconds()}};
  if (extra.is_object()) record.update(extra);
  append(std::move(record));
}

std::vector<nlohmann::json> RunLog::records_of(const std::string& type) const {
  std::vector<nlohmann::json> out;
  for (const auto& r : records_) {
    if (r.value("type", "") == type) out.push_back(r);
  }
  return out;
}

RunLog RunLog::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cli", "report", "cannot read run log " + path.string());
  RunLog log;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (!j.is_object() || !j.contains("type")) throw std::runtime_error("record without a type");
      log.records_.push_back(std::move(j));
    } catch (const std::exception& e) {
      fail(ErrorKind::parse, "cli", "report", path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (log.records_.empty()) fail(ErrorKind::parse, "cli", "report", path.string() + " is empty");
  return log;
}

// ---------------------------------------------------------------- TrainState

TrainState::TrainState(const TrainConfig& config, Vocabulary vocab) : config_(config), vocab_(std::move(vocab)) {
  config_.validate();
  torch::manual_seed(mix_seed(config_.seed, kInitStream));
  model_ = CrossModalModel(config_.model, vocab_.size());
  std::vector<torch::Tensor> params;
  for (torch::nn::Module* m : std::initializer_list<torch::nn::Module*>{
           model_->recipe_encoder.get(), model_->image_encoder.get(), model_->generator.get(),
           model_->ingredient_head.get(), model_->category_head.get()}) {
    for (auto& p : m->parameters()) params.push_back(p);
  }
  optimizer_ = std::make_unique<torch::optim::Adam>(
      params, torch::optim::AdamOptions(config_.learning_rate).betas({config_.beta1, config_.beta2}));
  adversarial_ = std::make_unique<AdversarialTrainer>(config_, model_->critic, model_->discriminator,
                                                      model_->classifier);
}

std::string TrainState::model_fingerprint() const { return xmodal::model_fingerprint(config_.model, vocab_.size()); }

void TrainState::save(const std::filesystem::path& path) {
  CheckpointMeta meta;
  meta.model_fingerprint = model_fingerprint();
  meta.config_fingerprint = config_fingerprint(config_);
  meta.config_text = serialize_config(config_);
  meta.vocabulary = vocab_.tokens();
  meta.paired_steps = paired_steps;
  meta.recipe_only_steps = recipe_only_steps;
  meta.epoch = epoch;
  meta.best_medR = best_medR;
  save_checkpoint(path, *model_, meta,
                  {optimizer_.get(), &adversarial_->critic_optimizer(), &adversarial_->discriminator_optimizer()});
}

void TrainState::load(const std::filesystem::path& path) {
  const auto peek = read_checkpoint_meta(path);
  if (peek.vocabulary != vocab_.tokens()) {
    fail(ErrorKind::validation, "trainer", "load_checkpoint", path.string() + ": vocabulary differs from this corpus");
  }
  auto meta = load_checkpoint(path, *model_, model_fingerprint(),
                              {optimizer_.get(), &adversarial_->critic_optimizer(),
                               &adversarial_->discriminator_optimizer()});
  paired_steps = meta.paired_steps;
  recipe_only_steps = meta.recipe_only_steps;
  epoch = meta.epoch;
  best_medR = meta.best_medR;
}

// ---------------------------------------------------------------- steps

LossReport training_step(const Batch& batch, TrainState& state) {
  const auto& cfg = state.config();
  if (batch.mode != BatchMode::paired || !batch.images) {
    fail(ErrorKind::scheduling, "trainer", "training_step", "training_step needs a paired batch with images");
  }
  auto& m = state.model();
  m->train();
  const auto step = static_cast<std::uint64_t>(state.paired_steps);
  torch::manual_seed(mix_seed(cfg.seed, kPairedStepStream + step));
  Rng rng(mix_seed(cfg.seed, kAdversarialStream + step));

  auto tokens = pack_recipes(batch.recipes);
  auto enc = m->recipe_encoder->forward(tokens);
  auto R = m->recipe_encoder->to_retrieval_space(enc.recipe);
  const auto& images = *batch.images;
  auto V = m->image_encoder->to_retrieval_space(m->image_encoder->forward(images));
  require_finite(R, "trainer", "training_step", "recipe retrieval embedding");
  require_finite(V, "trainer", "training_step", "image retrieval embedding");

  torch::Tensor generated;
  if (cfg.use_trans_r) {
    auto noise = draw_noise(batch.size(), cfg.model.d_noise, mix_seed(cfg.seed, kNoiseStream + step), R.options());
    generated = m->generator->forward(R, noise);
  }

  LossReport report;
  state.adversarial().step({V, R, generated, images, batch.categories}, rng, report, cfg.use_ma, cfg.use_trans_r);

  LossTerms terms;
  {
    FreezeGuard freeze_critic(*m->critic);
    FreezeGuard freeze_discriminator(*m->discriminator);
    FreezeGuard freeze_classifier(*m->classifier);
    const auto& lc = cfg.loss;
    terms.l_ret = retrieval_loss(V, R, lc.margin, lc.mining);
    if (cfg.use_rec) terms.l_rec = recipe_loss(enc.components, m->recipe_encoder->heads, lc.margin);
    if (cfg.use_ma) {
      Critic critic = [&](const torch::Tensor& x) { return m->critic->forward(x); };
      auto eps = draw_uniform(batch.size(), rng, V.options());
      terms.l_ma = modality_alignment_losses(V, R, critic, lc.adversarial_form, lc.lambda_gp, eps).encoder_loss;
    }
    if (cfg.use_trans_r) {
      Critic disc = [&](const torch::Tensor& x) { return m->discriminator->forward(x); };
      auto cls = [&](const torch::Tensor& x) { return m->classifier->forward(x); };
      auto eps = draw_uniform(batch.size(), rng, V.options());
      auto t = translation_consistency_recipe(generated, images, disc, cls, batch.categories, lc.image_gan_form,
                                              lc.lambda_gp, eps);
      terms.l_trans_r = t.l_trans_r;
      report.l_r2i = scalar(t.l_r2i);
      report.l_cls_r2i = scalar(t.l_cls_r2i);
    }
    if (cfg.use_trans_i) {
      auto t = translation_consistency_image(m->ingredient_head(V), m->category_head(V), batch.ingredient_multihot,
                                             batch.categories);
      terms.l_trans_i = t.l_trans_i;
      report.l_i2r = scalar(t.l_i2r);
      report.l_cls_i2r = scalar(t.l_cls_i2r);
    }
    auto total = total_loss(terms, cfg.loss);
    state.optimizer().zero_grad(true);
    total.backward();
  }
  state.optimizer().step();

  report.l_ret = scalar(terms.l_ret);
  report.l_rec = scalar(terms.l_rec);
  report.l_ma = scalar(terms.l_ma);
  report.l_trans_r = scalar(terms.l_trans_r);
  report.l_trans_i = scalar(terms.l_trans_i);
  report.l_total = compose_total(report, cfg.loss);
  ++state.paired_steps;
  return report;
}

LossReport recipe_only_step(const Batch& batch, TrainState& state) {
  const auto& cfg = state.config();
  if (!cfg.use_rec || !cfg.use_recipe_only) {
    fail(ErrorKind::scheduling, "trainer", "recipe_only_step", "recipe-only steps need use_rec and use_recipe_only");
  }
  if (batch.mode != BatchMode::recipe_only) {
    fail(ErrorKind::scheduling, "trainer", "recipe_only_step", "expected a recipe-only batch");
  }
  auto& m = state.model();
  m->train();
  torch::manual_seed(mix_seed(cfg.seed, kRecipeOnlyStepStream + static_cast<std::uint64_t>(state.recipe_only_steps)));
  auto components = m->recipe_encoder->encode_components(pack_recipes(batch.recipes));
  LossTerms terms;
  terms.l_rec = recipe_loss(components, m->recipe_encoder->heads, cfg.loss.margin);
  auto total = total_loss(terms, cfg.loss);
  state.optimizer().zero_grad(true);
  total.backward();
  state.optimizer().step();
  LossReport report;
  report.l_rec = scalar(terms.l_rec);
  report.l_total = compose_total(report, cfg.loss);
  ++state.recipe_only_steps;
  return report;
}

double evaluate_recipe_loss(const std::vector<Recipe>& split, TrainState& state, std::int64_t batch_size) {
  auto& m = state.model();
  ModeGuard mode(*m, false);
  torch::NoGradGuard no_grad;
  auto batches = make_batches(split, batch_size, BatchMode::recipe_only, 0, state.config().model.num_ingredients);
  double total = 0;
  for (const auto& b : batches) {
    auto components = m->recipe_encoder->encode_components(pack_recipes(b.recipes));
    total += recipe_loss(components, m->recipe_encoder->heads, state.config().loss.margin).item<double>();
  }
  return total / static_cast<double>(batches.size());
}

std::pair<torch::Tensor, torch::Tensor> embed_pairs(const std::vector<Recipe>& split, TrainState& state,
                                                    std::int64_t batch_size) {
  if (split.empty()) fail(ErrorKind::validation, "trainer", "embed_pairs", "empty split");
  auto& m = state.model();
  ModeGuard mode(*m, false);
  torch::NoGradGuard no_grad;
  std::vector<const Recipe*> ptrs;
  for (const auto& r : split) ptrs.push_back(&r);
  std::vector<torch::Tensor> vs, rs;
  for (std::size_t start = 0; start < ptrs.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto stop = std::min(ptrs.size(), start + static_cast<std::size_t>(batch_size));
    std::span<const Recipe* const> chunk(ptrs.data() + start, stop - start);
    rs.push_back(m->recipe_encoder->to_retrieval_space(m->recipe_encoder->forward(pack_recipes(chunk)).recipe));
    vs.push_back(m->image_encoder->to_retrieval_space(m->image_encoder->forward(stack_images(chunk))));
  }
  return {torch::cat(vs), torch::cat(rs)};
}

MetricsReport evaluate_split(const std::vector<Recipe>& split, TrainState& state, const EvaluationOptions& o) {
  auto [V, R] = embed_pairs(split, state);
  const auto N = V.size(0);
  const auto group = o.group_size > 0 ? o.group_size : N;
  auto report = sampled_protocol(V, R, group, o.group_size > 0 ? o.n_groups : 1, o.seed);
  if (o.with_fid) {
    std::vector<const Recipe*> ptrs;
    for (const auto& r : split) ptrs.push_back(&r);
    auto real = stack_images(ptrs);
    std::vector<torch::Tensor> generated;
    for (std::int64_t s = 0; s < N; s += 128) {
      generated.push_back(generate_images(R.slice(0, s, std::min(N, s + 128)), state.model()->generator,
                                          mix_seed(o.seed, static_cast<std::uint64_t>(s))));
    }
    report.fid = fid(extract_features(real, o.extractor, o.classifier),
                     extract_features(torch::cat(generated), o.extractor, o.classifier));
  }
  return report;
}

// ---------------------------------------------------------------- train

CorpusSplit synthetic_corpus_for(const TrainConfig& c) {
  SyntheticSpec spec;
  spec.paired = c.corpus_paired;
  spec.val = c.corpus_val;
  spec.test = c.corpus_test;
  spec.recipe_only = c.corpus_recipe_only;
  spec.seed = c.corpus_seed;
  spec.num_categories = c.model.num_categories;
  spec.num_ingredients = c.model.num_ingredients;
  spec.image_size = c.model.image_size;
  return generate_synthetic_corpus(spec);
}

TrainResult train(const TrainConfig& config, CorpusSplit& corpus, const TrainOptions& options) {
  config.validate();
  corpus.validate();
  auto vocab = build_vocabulary(corpus);
  tokenize_corpus(corpus, vocab, config.model.max_len);

  TrainResult result;
  result.state = std::make_unique<TrainState>(config, std::move(vocab));
  auto& state = *result.state;
  const bool resumed = !options.resume_from.empty();
  if (resumed) state.load(options.resume_from);
  result.log = RunLog(options.log_path, resumed);
  if (!resumed) result.log.header(config, config_fingerprint(config));
  auto& log = result.log;

  const auto& C = config.model;
  BatchStream paired(corpus.train_paired, config.batch_size, BatchMode::paired, mix_seed(config.seed, kPairedOrder),
                     C.num_ingredients);
  const bool use_recipe_only = config.use_rec && config.use_recipe_only && !corpus.train_recipe_only.empty();
  std::optional<BatchStream> recipe_only;
  if (use_recipe_only) {
    recipe_only.emplace(corpus.train_recipe_only, config.batch_size, BatchMode::recipe_only,
                        mix_seed(config.seed, kRecipeOnlyOrder), C.num_ingredients);
  }

  std::vector<std::pair<std::string, torch::Tensor>> best_state;
  const std::filesystem::path ckpt_dir = config.checkpoint_dir;
  EvaluationOptions eval_options;
  eval_options.group_size = config.eval_group_size;
  eval_options.n_groups = config.eval_groups;
  eval_options.seed = config.seed;

  auto evaluate = [&](std::int64_t epoch) {
    if (corpus.val_paired.empty()) return;
    auto report = evaluate_split(corpus.val_paired, state, eval_options);
    log.eval("val", state.paired_steps, epoch, report);
    const double medR = report.mean.image_to_recipe.medR;
    const bool better = !result.best_validation || medR < state.best_medR ||
                        (medR == state.best_medR && report.mean.image_to_recipe.r1 > result.best_validation->mean.image_to_recipe.r1);
    if (!options.quiet) {
      std::cerr << "[train] epoch " << epoch << " step " << state.paired_steps << " val medR " << medR << " R@1 "
                << report.mean.image_to_recipe.r1 << (better ? " *" : "") << '\n';
    }
    if (better) {
      state.best_medR = medR;
      result.best_validation = report;
      best_state = snapshot_state(*state.model());
      if (!ckpt_dir.empty()) {
        result.best_checkpoint = ckpt_dir / "best.pt";
        state.save(result.best_checkpoint);
      }
    }
  };

  bool stop = false;
  bool evaluated_last = false;
  for (std::int64_t epoch = state.epoch; epoch < config.epochs && !stop; ++epoch) {
    for (std::int64_t i = 0; i < paired.batches_per_epoch(); ++i) {
      if (config.max_steps > 0 && state.paired_steps >= config.max_steps) {
        stop = true;
        break;
      }
      const auto report = training_step(paired.batch(epoch, i), state);
      log.step("paired", state.paired_steps, epoch, report);
      if (recipe_only) {
        const auto k = state.recipe_only_steps;
        const auto per_epoch = recipe_only->batches_per_epoch();
        const auto ro = recipe_only_step(recipe_only->batch(k / per_epoch, k % per_epoch), state);
        log.step("recipe_only", state.recipe_only_steps, epoch, ro);
      }
    }
    if (stop && state.paired_steps == 0) break;
    state.epoch = epoch + 1;
    evaluated_last = false;
    if (state.epoch % config.eval_every == 0 || state.epoch == config.epochs || stop) {
      evaluate(epoch);
      evaluated_last = true;
    }
    if (!ckpt_dir.empty()) state.save(ckpt_dir / "last.pt");
    if (config.max_steps > 0 && state.paired_steps >= config.max_steps) stop = true;
  }
  if (!evaluated_last && state.paired_steps > 0) evaluate(state.epoch - 1);
  if (!best_state.empty()) restore_state(*state.model(), best_state);
  log.footer({{"paired_steps", state.paired_steps},
              {"recipe_only_steps", state.recipe_only_steps},
              {"epochs", state.epoch},
              {"best_medR", state.best_medR}});
  return result;
}

// ---------------------------------------------------------------- sweep

nlohmann::json SweepReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row = {{"batch_size", r.batch_size}, {"ok", r.ok}};
    if (!r.ok) row["error"] = r.error;
    auto metrics = [](const RetrievalMetrics& m) {
      return nlohmann::json{{"medR", m.medR}, {"r1", m.r1}, {"r5", m.r5}, {"r10", m.r10}};
    };
    row["image_to_recipe"] = metrics(r.image_to_recipe);
    row["recipe_to_image"] = metrics(r.recipe_to_image);
    row["fid"] = r.fid ? nlohmann::json(*r.fid) : nlohmann::json(nullptr);
    rows_json.push_back(row);
  }
  return {{"steps", steps}, {"seed", seed}, {"rows", rows_json}};
}

SweepReport SweepReport::from_json(const nlohmann::json& j) {
  SweepReport s;
  try {
    s.steps = j.at("steps").get<std::int64_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& row : j.at("rows")) {
      SweepRow r;
      r.batch_size = row.at("batch_size").get<std::int64_t>();
      r.ok = row.at("ok").get<bool>();
      r.error = row.value("error", "");
      auto metrics = [](const nlohmann::json& m) {
        return RetrievalMetrics{m.at("medR").get<double>(), m.at("r1").get<double>(), m.at("r5").get<double>(),
                                m.at("r10").get<double>()};
      };
      r.image_to_recipe = metrics(row.at("image_to_recipe"));
      r.recipe_to_image = metrics(row.at("recipe_to_image"));
      if (row.contains("fid") && !row["fid"].is_null()) r.fid = row["fid"].get<double>();
      s.rows.push_back(r);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, "trainer", "batch_size_sweep", std::string("bad sweep report: ") + e.what());
  }
  return s;
}

std::string SweepReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << kSweepColumns << '\n';
  for (const auto& r : rows) {
    if (!r.ok) {
      out << r.batch_size << ",,,,,,,,,\n";
      continue;
    }
    const auto& a = r.image_to_recipe;
    const auto& b = r.recipe_to_image;
    out << r.batch_size << ',' << a.medR << ',' << a.r1 << ',' << a.r5 << ',' << a.r10 << ',' << b.medR << ','
        << b.r1 << ',' << b.r5 << ',' << b.r10 << ',';
    if (r.fid) out << *r.fid;
    out << '\n';
  }
  return out.str();
}

SweepReport batch_size_sweep(const TrainConfig& config, const std::vector<std::int64_t>& sizes, CorpusSplit& corpus,
                             bool quiet) {
  if (sizes.empty()) fail(ErrorKind::config, "trainer", "batch_size_sweep", "no batch sizes given");
  const auto n_train = static_cast<std::int64_t>(corpus.train_paired.size());
  std::int64_t largest = 0;
  for (auto B : sizes) {
    if (B < 2 || B > n_train) {
      fail(ErrorKind::config, "trainer", "batch_size_sweep",
           "batch size " + std::to_string(B) + " outside [2, " + std::to_string(n_train) + "]");
    }
    largest = std::max(largest, B);
  }
  if (corpus.test_paired.empty()) fail(ErrorKind::config, "trainer", "batch_size_sweep", "test split is empty");
  SweepReport report;
  report.seed = config.seed;
  report.steps = config.max_steps > 0 ? config.max_steps : config.epochs * (n_train / largest);
  for (auto B : sizes) {
    SweepRow row;
    row.batch_size = B;
    try {
      TrainConfig c = config;
      c.batch_size = B;
      c.max_steps = report.steps;
      const auto per_epoch = n_train / B;
      c.epochs = (report.steps + per_epoch - 1) / per_epoch;
      if (!config.checkpoint_dir.empty()) {
        c.checkpoint_dir = (std::filesystem::path(config.checkpoint_dir) / ("B" + std::to_string(B))).string();
      }
      TrainOptions options;
      options.quiet = quiet;
      auto trained = train(c, corpus, options);
      EvaluationOptions eval;
      eval.group_size = c.eval_group_size;
      eval.n_groups = c.eval_groups;
      eval.seed = c.seed;
      eval.with_fid = c.use_trans_r;
      std::optional<ImageClassifier> classifier;
      if (eval.with_fid && c.fid_extractor == FeatureExtractor::trained_classifier_head) {
        classifier = train_feature_classifier(corpus.train_paired, c.model, c.fid_classifier_steps, 32, c.seed);
        eval.extractor = FeatureExtractor::trained_classifier_head;
        eval.classifier = &*classifier;
      }
      auto metrics = evaluate_split(corpus.test_paired, *trained.state, eval);
      row.image_to_recipe = metrics.mean.image_to_recipe;
      row.recipe_to_image = metrics.mean.recipe_to_image;
      row.fid = metrics.fid;
      row.ok = true;
    } catch (const Error& e) {
      row.ok = false;
      row.error = e.what();
      if (!quiet) std::cerr << "[sweep] B=" << B << " failed: " << e.what() << '\n';
    }
    if (!quiet && row.ok) {
      std::cerr << "[sweep] B=" << B << " medR " << row.image_to_recipe.medR << " R@1 " << row.image_to_recipe.r1
                << '\n';
    }
    report.rows.push_back(row);
  }
  return report;
}

}  // namespace xmodal
