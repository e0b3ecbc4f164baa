#include <fstream>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "xmodal/model.hpp"
#include "xmodal/trainer.hpp"

using namespace xmodal;

namespace {

struct Fixture {
  CorpusSplit corpus;
  std::unique_ptr<TrainState> state;

  explicit Fixture(TrainConfig config, std::int64_t paired = 32, std::int64_t recipe_only = 32)
      : corpus(test::tiny_corpus(paired, recipe_only)) {
    auto vocab = build_vocabulary(corpus);
    tokenize_corpus(corpus, vocab, config.model.max_len);
    state = std::make_unique<TrainState>(config, std::move(vocab));
  }

  Batch paired(std::int64_t offset = 0) {
    return take(corpus.train_paired, offset, BatchMode::paired);
  }
  Batch recipe_only(std::int64_t offset = 0) {
    return take(corpus.train_recipe_only, offset, BatchMode::recipe_only);
  }

 private:
  Batch take(const std::vector<Recipe>& split, std::int64_t offset, BatchMode mode) {
    std::vector<const Recipe*> rows;
    const auto B = state->config().batch_size;
    for (std::int64_t i = 0; i < B; ++i) rows.push_back(&split[static_cast<std::size_t>((offset + i) % static_cast<std::int64_t>(split.size()))]);
    return assemble_batch(rows, mode, state->config().model.num_ingredients);
  }
};

TrainConfig quiet_config() {
  auto c = test::tiny_config();
  c.model.dropout = 0;
  return c;
}

std::uint64_t hash_all(CrossModalModel& m) { return hash_parameters(*m); }

void check_composition(const RunLog& log, const LossConfig& loss) {
  for (const auto& r : log.records_of("step")) {
    auto parts = LossReport::from_json(r["losses"]);
    CHECK(std::abs(parts.l_total - compose_total(parts, loss)) <= 1e-9);
  }
}

}  // namespace

TEST_CASE("with only the retrieval term enabled the total is the retrieval loss") {
  auto c = quiet_config();
  c.use_rec = c.use_ma = c.use_trans_r = c.use_trans_i = c.use_recipe_only = false;
  Fixture f(c);
  for (int s = 0; s < 3; ++s) {
    auto r = training_step(f.paired(s * 8), *f.state);
    CHECK(r.l_total == r.l_ret);
    CHECK(r.l_rec == 0.0);
    CHECK(r.l_ma == 0.0);
    CHECK(r.l_trans_r == 0.0);
    CHECK(r.l_trans_i == 0.0);
    CHECK(r.l_ret > 0.0);
  }
}

TEST_CASE("zero learning rates leave every parameter unchanged") {
  auto c = quiet_config();
  c.learning_rate = 0;
  c.critic_lr = 0;
  c.disc_lr = 0;
  Fixture f(c);
  const auto before = hash_all(f.state->model());
  auto first = training_step(f.paired(), *f.state);
  auto second = training_step(f.paired(), *f.state);
  auto ro = recipe_only_step(f.recipe_only(), *f.state);
  CHECK(hash_all(f.state->model()) == before);
  CHECK(first.l_total == second.l_total);
  CHECK(first.l_ret == second.l_ret);
  CHECK(first.l_rec == second.l_rec);
  CHECK(first.l_ma == second.l_ma);
  CHECK(first.l_trans_r == second.l_trans_r);
  CHECK(first.l_trans_i == second.l_trans_i);
  CHECK(std::isfinite(ro.l_rec));
}

TEST_CASE("a single fixed batch is overfit") {
  auto c = quiet_config();
  c.use_ma = c.use_trans_r = false;
  Fixture f(c);
  auto batch = f.paired();
  double previous = training_step(batch, *f.state).l_ret;
  int decreases = 0;
  for (int s = 0; s < 100; ++s) {
    const double l = training_step(batch, *f.state).l_ret;
    decreases += l < previous;
    previous = l;
  }
  MESSAGE("strict decreases: " << decreases << " / 100");
  CHECK(decreases >= 90);
}

TEST_CASE("recipe-only steps touch only the recipe side") {
  auto c = quiet_config();
  c.learning_rate = 1e-3;
  Fixture f(c);
  auto& m = f.state->model();
  const auto image = hash_parameters(*m->image_encoder);
  const auto gen = hash_parameters(*m->generator);
  const auto critic = hash_parameters(*m->critic);
  const auto disc = hash_parameters(*m->discriminator);
  const auto cls = hash_parameters(*m->classifier);
  const auto ing = hash_parameters(*m->ingredient_head);
  const auto cat = hash_parameters(*m->category_head);
  const auto recipe = hash_parameters(*m->recipe_encoder);
  const auto heads = hash_parameters(*m->recipe_encoder->heads);
  for (int s = 0; s < 5; ++s) {
    auto r = recipe_only_step(f.recipe_only(s * 8), *f.state);
    CHECK(std::isfinite(r.l_rec));
    CHECK(r.l_rec >= 0);
    CHECK(r.l_ret == 0.0);
    CHECK(r.l_total == doctest::Approx(0.05 * r.l_rec).epsilon(1e-12));
  }
  CHECK(hash_parameters(*m->image_encoder) == image);
  CHECK(hash_parameters(*m->generator) == gen);
  CHECK(hash_parameters(*m->critic) == critic);
  CHECK(hash_parameters(*m->discriminator) == disc);
  CHECK(hash_parameters(*m->classifier) == cls);
  CHECK(hash_parameters(*m->ingredient_head) == ing);
  CHECK(hash_parameters(*m->category_head) == cat);
  CHECK(hash_parameters(*m->recipe_encoder) != recipe);
  CHECK(hash_parameters(*m->recipe_encoder->heads) != heads);
  CHECK(f.state->recipe_only_steps == 5);
  CHECK(f.state->paired_steps == 0);
}

TEST_CASE("recipe-only scheduling errors") {
  SUBCASE("flag disabled") {
    auto c = quiet_config();
    c.use_recipe_only = false;
    Fixture f(c);
    test::expect_error(ErrorKind::scheduling, [&] { recipe_only_step(f.recipe_only(), *f.state); });
  }
  SUBCASE("recipe loss disabled") {
    auto c = quiet_config();
    c.use_rec = false;
    Fixture f(c);
    test::expect_error(ErrorKind::scheduling, [&] { recipe_only_step(f.recipe_only(), *f.state); });
  }
  SUBCASE("wrong batch kinds") {
    Fixture f(quiet_config());
    test::expect_error(ErrorKind::scheduling, [&] { recipe_only_step(f.paired(), *f.state); });
    test::expect_error(ErrorKind::scheduling, [&] { training_step(f.recipe_only(), *f.state); });
  }
}

TEST_CASE("held-out recipe loss falls under recipe-only training") {
  auto c = quiet_config();
  c.learning_rate = 1e-3;
  Fixture f(c, 32, 256);
  const double initial = evaluate_recipe_loss(f.corpus.val_paired, *f.state, 8);
  for (int s = 0; s < 100; ++s) recipe_only_step(f.recipe_only(s * 8), *f.state);
  const double after = evaluate_recipe_loss(f.corpus.val_paired, *f.state, 8);
  MESSAGE("held-out L_rec " << initial << " -> " << after);
  CHECK(after < initial);
}

TEST_CASE("one epoch interleaves one recipe-only step per paired step") {
  auto c = quiet_config();
  c.batch_size = 4;
  auto corpus = test::tiny_corpus(40, 40);
  auto result = train(c, corpus, {.quiet = true});
  const auto steps = result.log.records_of("step");
  std::int64_t paired = 0, recipe_only = 0;
  for (const auto& r : steps) (r["kind"] == "paired" ? paired : recipe_only)++;
  CHECK(paired == 10);
  CHECK(recipe_only == 10);
  CHECK(result.state->paired_steps == 10);
  CHECK(result.state->recipe_only_steps == 10);
  // Alternating order: paired, recipe-only, paired, ...
  for (std::size_t i = 0; i < steps.size(); ++i) CHECK(steps[i]["kind"] == (i % 2 == 0 ? "paired" : "recipe_only"));
  CHECK(result.log.records_of("eval").size() == 1);
  CHECK(result.log.records().front()["type"] == "header");
  CHECK(result.log.records().back()["type"] == "footer");
  check_composition(result.log, c.loss);

  c.use_recipe_only = false;
  auto corpus2 = test::tiny_corpus(40, 40);
  auto without = train(c, corpus2, {.quiet = true});
  CHECK(without.log.records_of("step").size() == 10);
}

TEST_CASE("resuming continues step numbering") {
  auto dir = test::temp_dir("resume");
  auto c = quiet_config();
  c.batch_size = 8;
  c.checkpoint_dir = (dir / "ckpt").string();
  auto corpus = test::tiny_corpus();
  auto first = train(c, corpus, {.log_path = dir / "run.jsonl", .quiet = true});
  CHECK(first.state->paired_steps == 4);
  CHECK(std::filesystem::exists(dir / "ckpt" / "last.pt"));
  CHECK(std::filesystem::exists(dir / "ckpt" / "best.pt"));

  c.epochs = 2;
  auto corpus2 = test::tiny_corpus();
  auto second = train(c, corpus2, {.log_path = dir / "run.jsonl", .resume_from = dir / "ckpt" / "last.pt", .quiet = true});
  CHECK(second.state->paired_steps == 8);
  CHECK(second.state->epoch == 2);

  auto log = RunLog::read(dir / "run.jsonl");
  std::vector<std::int64_t> numbers;
  for (const auto& r : log.records_of("step"))
    if (r["kind"] == "paired") numbers.push_back(r["step"].get<std::int64_t>());
  CHECK(numbers == (std::vector<std::int64_t>{1, 2, 3, 4, 5, 6, 7, 8}));
  std::vector<std::int64_t> epochs;
  for (const auto& r : log.records_of("eval")) epochs.push_back(r["epoch"].get<std::int64_t>());
  CHECK(epochs == (std::vector<std::int64_t>{0, 1}));
  CHECK(log.records_of("header").size() == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("identical seeds give identical runs") {
  auto c = test::tiny_config();
  c.epochs = 2;
  auto run = [&] {
    auto corpus = test::tiny_corpus();
    return train(c, corpus, {.quiet = true});
  };
  auto a = run();
  auto b = run();
  const auto sa = a.log.records_of("step"), sb = b.log.records_of("step");
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    auto ra = LossReport::from_json(sa[i]["losses"]), rb = LossReport::from_json(sb[i]["losses"]);
    CHECK(std::abs(ra.l_total - rb.l_total) <= 1e-6);
    CHECK(std::abs(ra.critic_loss - rb.critic_loss) <= 1e-6);
  }
  const auto ea = a.log.records_of("eval"), eb = b.log.records_of("eval");
  REQUIRE(ea.size() == eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) CHECK(ea[i]["metrics"] == eb[i]["metrics"]);
  CHECK(hash_parameters(*a.state->model()) == hash_parameters(*b.state->model()));

  c.seed = 1;
  auto corpus = test::tiny_corpus();
  auto other = train(c, corpus, {.quiet = true});
  CHECK(hash_parameters(*other.state->model()) != hash_parameters(*a.state->model()));
}

TEST_CASE("disabled loss terms are zero and their parameters untouched") {
  struct Case {
    const char* name;
    bool TrainConfig::*flag;
  };
  for (auto [name, flag] : {Case{"use_ma", &TrainConfig::use_ma}, Case{"use_trans_r", &TrainConfig::use_trans_r},
                            Case{"use_trans_i", &TrainConfig::use_trans_i}, Case{"use_rec", &TrainConfig::use_rec}}) {
    CAPTURE(name);
    auto c = quiet_config();
    c.learning_rate = 1e-3;
    c.*flag = false;
    auto corpus = test::tiny_corpus();
    auto vocab = build_vocabulary(corpus);
    tokenize_corpus(corpus, vocab, c.model.max_len);
    TrainState reference(c, vocab);
    auto& m0 = reference.model();
    auto result = train(c, corpus, {.quiet = true});
    auto& m = result.state->model();
    for (const auto& r : result.log.records_of("step")) {
      auto parts = LossReport::from_json(r["losses"]);
      if (flag == &TrainConfig::use_ma) CHECK(parts.l_ma == 0.0);
      if (flag == &TrainConfig::use_trans_r) CHECK(parts.l_trans_r == 0.0);
      if (flag == &TrainConfig::use_trans_i) CHECK(parts.l_trans_i == 0.0);
      if (flag == &TrainConfig::use_rec) {
        CHECK(parts.l_rec == 0.0);
        CHECK(r["kind"] == "paired");
      }
    }
    check_composition(result.log, c.loss);
    // Fresh states with the same seed start from the same weights.
    if (flag == &TrainConfig::use_ma) CHECK(hash_parameters(*m->critic) == hash_parameters(*m0->critic));
    if (flag == &TrainConfig::use_trans_r) {
      CHECK(hash_parameters(*m->generator) == hash_parameters(*m0->generator));
      CHECK(hash_parameters(*m->discriminator) == hash_parameters(*m0->discriminator));
      CHECK(hash_parameters(*m->classifier) == hash_parameters(*m0->classifier));
    }
    if (flag == &TrainConfig::use_trans_i) {
      CHECK(hash_parameters(*m->ingredient_head) == hash_parameters(*m0->ingredient_head));
      CHECK(hash_parameters(*m->category_head) == hash_parameters(*m0->category_head));
    }
    if (flag == &TrainConfig::use_rec) {
      CHECK(hash_parameters(*m->recipe_encoder->heads) == hash_parameters(*m0->recipe_encoder->heads));
    }
    CHECK(hash_parameters(*m->image_encoder) != hash_parameters(*m0->image_encoder));
  }
}

TEST_CASE("checkpoints round-trip and reject other model shapes") {
  auto dir = test::temp_dir("checkpoint");
  auto c = quiet_config();
  c.learning_rate = 1e-3;
  Fixture f(c);
  training_step(f.paired(), *f.state);
  recipe_only_step(f.recipe_only(), *f.state);
  f.state->save(dir / "a.pt");

  TrainState copy(c, f.state->vocab());
  CHECK(hash_all(copy.model()) != hash_all(f.state->model()));
  copy.load(dir / "a.pt");
  CHECK(hash_all(copy.model()) == hash_all(f.state->model()));
  CHECK(copy.paired_steps == 1);
  CHECK(copy.recipe_only_steps == 1);
  // Optimizer state is restored too: the next step matches bit for bit.
  auto next_a = training_step(f.paired(8), *f.state);
  auto next_b = training_step(f.paired(8), copy);
  CHECK(next_a.l_total == next_b.l_total);
  CHECK(hash_all(copy.model()) == hash_all(f.state->model()));

  auto meta = read_checkpoint_meta(dir / "a.pt");
  CHECK(meta.model_fingerprint == f.state->model_fingerprint());
  CHECK(meta.paired_steps == 1);

  auto wide = c;
  wide.model.d_model = 32;
  wide.model.d_ret = 32;
  TrainState other(wide, f.state->vocab());
  test::expect_error(ErrorKind::validation, [&] { other.load(dir / "a.pt"); });
  test::expect_error(ErrorKind::io, [&] { copy.load(dir / "missing.pt"); });
  std::filesystem::remove_all(dir);
}

TEST_CASE("run logs round-trip through JSON lines") {
  auto dir = test::temp_dir("runlog");
  {
    RunLog log(dir / "log.jsonl");
    log.header(quiet_config(), "abc");
    LossReport r;
    r.l_ret = 1.5;
    log.step("paired", 1, 0, r);
    log.footer({{"paired_steps", 1}});
  }
  auto back = RunLog::read(dir / "log.jsonl");
  REQUIRE(back.records().size() == 3);
  CHECK(back.records()[0]["fingerprint"] == "abc");
  CHECK(LossReport::from_json(back.records_of("step")[0]["losses"]).l_ret == 1.5);
  {
    std::ofstream bad(dir / "bad.jsonl");
    bad << "{\"type\":\"header\"}\nnot json\n";
  }
  test::expect_error(ErrorKind::parse, [&] { RunLog::read(dir / "bad.jsonl"); });
  test::expect_error(ErrorKind::io, [&] { RunLog::read(dir / "missing.jsonl"); });
  std::filesystem::remove_all(dir);
}

TEST_CASE("batch-size sweep schema and determinism") {
  auto c = quiet_config();
  c.max_steps = 3;
  auto corpus = test::tiny_corpus();
  auto sweep = batch_size_sweep(c, {4, 8}, corpus);
  REQUIRE(sweep.rows.size() == 2);
  CHECK(sweep.steps == 3);
  CHECK(sweep.rows[0].batch_size == 4);
  CHECK(sweep.rows[1].batch_size == 8);
  for (const auto& row : sweep.rows) {
    CHECK(row.ok);
    CHECK(row.image_to_recipe.medR >= 1);
    CHECK(row.recipe_to_image.r10 <= 100);
  }
  auto csv = sweep.to_csv();
  CHECK(csv.rfind(kSweepColumns, 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  auto back = SweepReport::from_json(sweep.to_json());
  CHECK(back.to_json() == sweep.to_json());

  auto corpus2 = test::tiny_corpus();
  auto twice = batch_size_sweep(c, {8, 8}, corpus2);
  CHECK(twice.to_json()["rows"][0] == twice.to_json()["rows"][1]);
  CHECK(twice.to_json()["rows"][0] == sweep.to_json()["rows"][1]);

  auto corpus3 = test::tiny_corpus();
  test::expect_error(ErrorKind::config, [&] { batch_size_sweep(c, {1, 8}, corpus3); });
  test::expect_error(ErrorKind::config, [&] { batch_size_sweep(c, {64}, corpus3); });
  test::expect_error(ErrorKind::config, [&] { batch_size_sweep(c, {}, corpus3); });
}

