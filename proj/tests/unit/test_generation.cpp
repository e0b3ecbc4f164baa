#include "support.hpp"
#include "xmodal/generation.hpp"
#include "xmodal/model.hpp"
#include "xmodal/trainer.hpp"

using namespace xmodal;

namespace {

ModelConfig desk_generator() {
  ModelConfig m = test::tiny_model();
  m.g_res = 32;
  m.image_size = 32;
  return m;
}

}  // namespace

TEST_CASE("generator output shape, range and determinism") {
  torch::manual_seed(0);
  Generator g(desk_generator());
  auto r = torch::randn({g->d_ret()});
  auto a = generate_image(r, g, 3);
  CHECK(a.pixels().sizes() == torch::IntArrayRef({3, 32, 32}));
  auto b = generate_image(r, g, 3);
  CHECK(torch::equal(a.pixels(), b.pixels()));
  // Without a noise input the seed has no effect.
  CHECK(torch::equal(a.pixels(), generate_image(r, g, 12345).pixels()));
  CHECK(a.pixels().min().item<float>() >= 0.0f);
  CHECK(a.pixels().max().item<float>() <= 1.0f);

  test::expect_error(ErrorKind::validation, [&] { generate_image(torch::randn({g->d_ret() + 1}), g, 0); });
  test::expect_error(ErrorKind::validation, [&] { generate_image(torch::randn({2, g->d_ret()}), g, 0); });
}

TEST_CASE("noise input makes the seed matter but stays deterministic") {
  auto m = desk_generator();
  m.d_noise = 4;
  torch::manual_seed(1);
  Generator g(m);
  auto r = torch::randn({g->d_ret()});
  auto a = generate_image(r, g, 1);
  CHECK(torch::equal(a.pixels(), generate_image(r, g, 1).pixels()));
  CHECK_FALSE(torch::equal(a.pixels(), generate_image(r, g, 2).pixels()));
  // Each row of a batch uses its own noise stream, so row results do not
  // depend on the batch they were generated in.
  auto batch = generate_images(torch::stack({r, r}), g, 9);
  CHECK_FALSE(torch::equal(batch[0], batch[1]));
}

TEST_CASE("generator outputs stay bounded and finite under many random embeddings") {
  torch::manual_seed(2);
  auto m = test::tiny_model();
  Generator g(m);
  // Perturb the weights so the final activation is driven into saturation too.
  {
    torch::NoGradGuard ng;
    for (auto& p : g->parameters()) p.mul_(3.0);
  }
  for (int chunk = 0; chunk < 10; ++chunk) {
    auto r = torch::randn({1000, g->d_ret()}) * (chunk + 1);
    auto out = generate_images(r, g, static_cast<std::uint64_t>(chunk));
    CHECK(torch::isfinite(out).all().item<bool>());
    CHECK(out.min().item<float>() >= 0.0f);
    CHECK(out.max().item<float>() <= 1.0f);
  }
}

TEST_CASE("discriminator, classifier and critic shapes") {
  ImageDiscriminator d(16, 8);
  CHECK(d->forward(torch::rand({3, 3, 16, 16})).sizes() == torch::IntArrayRef{3});
  ImageClassifier c(16, 8, 5);
  CHECK(c->forward(torch::rand({3, 3, 16, 16})).sizes() == torch::IntArrayRef({3, 5}));
  CHECK(c->features(torch::rand({3, 3, 16, 16})).size(1) == c->feature_dim());
  ModalityCritic critic(16, 32);
  // Unbounded output: scaling the input far beyond the unit ball scales the score.
  auto x = torch::randn({4, 16});
  auto big = critic->forward(x * 1e4);
  CHECK(big.sizes() == torch::IntArrayRef{4});
  CHECK(big.abs().max().item<float>() > 1.0f);
}

TEST_CASE("gradient penalty vanishes for a unit-norm linear critic") {
  torch::manual_seed(3);
  ModalityCritic critic(8, 16);
  auto w = torch::randn({8}, torch::kFloat64);
  w /= w.norm();
  Critic linear = [&](const torch::Tensor& x) { return torch::matmul(x, w); };
  Rng rng(4);
  auto eps = draw_uniform(6, rng, torch::TensorOptions(torch::kFloat64));
  auto gp = gradient_penalty(linear, torch::randn({6, 8}, torch::kFloat64), torch::randn({6, 8}, torch::kFloat64), eps);
  CHECK(std::abs(gp.item<double>()) < 1e-12);
}

TEST_CASE("adversarial step bookkeeping") {
  auto corpus = test::tiny_corpus();
  auto config = test::tiny_config();
  torch::manual_seed(5);
  CrossModalModel model(config.model, 50);

  auto batch_inputs = [&](std::int64_t B) {
    AdversarialTrainer::Inputs in;
    in.V = torch::randn({B, config.model.d_ret});
    in.R = torch::randn({B, config.model.d_ret});
    in.real = torch::rand({B, 3, 16, 16});
    in.generated = torch::rand({B, 3, 16, 16});
    in.categories = torch::randint(0, config.model.num_categories, {B}, torch::kInt64);
    return in;
  };

  SUBCASE("n_critic = 5 gives five critic updates per step") {
    config.n_critic = 5;
    AdversarialTrainer adv(config, model->critic, model->discriminator, model->classifier);
    Rng rng(1);
    LossReport report;
    for (int s = 1; s <= 3; ++s) {
      adv.step(batch_inputs(4), rng, report, true, true);
      CHECK(adv.critic_updates() == 5 * s);
      CHECK(adv.discriminator_updates() == s);
    }
  }

  SUBCASE("default ratio depends on the adversarial form") {
    config.n_critic = 0;
    config.loss.adversarial_form = AdversarialForm::wgan_gp;
    CHECK(config.effective_n_critic() == 5);
    config.loss.adversarial_form = AdversarialForm::log_form;
    CHECK(config.effective_n_critic() == 1);
  }

  SUBCASE("zero learning rates leave every discriminator parameter unchanged") {
    config.critic_lr = 0;
    config.disc_lr = 0;
    AdversarialTrainer adv(config, model->critic, model->discriminator, model->classifier);
    const auto before_c = hash_parameters(*model->critic);
    const auto before_d = hash_parameters(*model->discriminator);
    const auto before_k = hash_parameters(*model->classifier);
    Rng rng(2);
    LossReport report;
    for (int s = 0; s < 3; ++s) adv.step(batch_inputs(4), rng, report, true, true);
    CHECK(hash_parameters(*model->critic) == before_c);
    CHECK(hash_parameters(*model->discriminator) == before_d);
    CHECK(hash_parameters(*model->classifier) == before_k);
    CHECK(std::isfinite(report.critic_loss));
    CHECK(std::isfinite(report.discriminator_loss));
  }
}

TEST_CASE("frozen discriminators receive no gradient from the generator side") {
  auto m = test::tiny_model();
  torch::manual_seed(6);
  Generator g(m);
  ImageDiscriminator d(m.image_size, m.d_channels);
  const auto before = hash_parameters(*d);
  auto r = torch::randn({4, m.d_ret});
  {
    FreezeGuard freeze(*d);
    auto loss = -d->forward(g->forward(r)).mean();
    loss.backward();
  }
  for (auto& p : d->parameters()) {
    CHECK(p.requires_grad());
    CHECK_FALSE(p.grad().defined());
  }
  bool any = false;
  for (auto& p : g->parameters()) any = any || (p.grad().defined() && p.grad().abs().sum().item<double>() > 0);
  CHECK(any);
  CHECK(hash_parameters(*d) == before);
}

TEST_CASE("a full training step leaves discriminators untouched when their rates are zero") {
  auto corpus = test::tiny_corpus();
  auto config = test::tiny_config();
  config.use_ma = true;
  config.use_trans_r = true;
  config.use_trans_i = true;
  config.critic_lr = 0;
  config.disc_lr = 0;
  config.learning_rate = 1e-3;
  Vocabulary vocab = build_vocabulary(corpus);
  tokenize_corpus(corpus, vocab, config.model.max_len);
  TrainState state(config, vocab);
  auto& m = state.model();
  const auto critic = hash_parameters(*m->critic);
  const auto disc = hash_parameters(*m->discriminator);
  const auto cls = hash_parameters(*m->classifier);
  const auto gen = hash_parameters(*m->generator);
  const auto enc = hash_parameters(*m->image_encoder);

  std::vector<const Recipe*> rows;
  for (std::int64_t i = 0; i < config.batch_size; ++i) rows.push_back(&corpus.train_paired[static_cast<std::size_t>(i)]);
  auto batch = assemble_batch(rows, BatchMode::paired, config.model.num_ingredients);
  auto report = training_step(batch, state);
  CHECK(std::isfinite(report.l_total));
  CHECK(hash_parameters(*m->critic) == critic);
  CHECK(hash_parameters(*m->discriminator) == disc);
  CHECK(hash_parameters(*m->classifier) == cls);
  CHECK(hash_parameters(*m->generator) != gen);
  CHECK(hash_parameters(*m->image_encoder) != enc);
}

TEST_CASE("the image classifier learns a two-category fixture") {
  SyntheticSpec s;
  s.paired = 128;
  s.recipe_only = 0;
  s.val = 64;
  s.test = 8;
  s.seed = 11;
  s.num_categories = 2;
  s.num_ingredients = 20;
  s.image_size = 16;
  auto corpus = generate_synthetic_corpus(s);

  auto config = test::tiny_config();
  config.model.num_categories = 2;
  config.n_critic = 1;
  config.disc_lr = 1e-3;
  torch::manual_seed(12);
  ImageClassifier classifier(16, config.model.d_channels, 2);
  AdversarialTrainer adv(config, ModalityCritic(config.model.d_ret, 16), ImageDiscriminator(16, config.model.d_channels),
                         classifier);

  auto stack = [](const std::vector<Recipe>& split, std::size_t begin, std::size_t count) {
    std::vector<torch::Tensor> images, labels;
    for (std::size_t i = begin; i < begin + count; ++i) {
      images.push_back(split[i % split.size()].image->pixels());
      labels.push_back(torch::tensor(split[i % split.size()].category, torch::kInt64));
    }
    return std::make_pair(torch::stack(images), torch::stack(labels));
  };

  Rng rng(13);
  LossReport report;
  torch::manual_seed(14);
  for (std::size_t step = 0; step < 200; ++step) {
    auto [real, labels] = stack(corpus.train_paired, step * 16, 16);
    AdversarialTrainer::Inputs in;
    in.real = real;
    in.generated = torch::rand_like(real);
    in.categories = labels;
    adv.step(in, rng, report, false, true);
  }
  CHECK(adv.discriminator_updates() == 200);
  auto [val, labels] = stack(corpus.val_paired, 0, corpus.val_paired.size());
  torch::NoGradGuard ng;
  classifier->eval();
  auto predicted = classifier->forward(val).argmax(1);
  const double accuracy = predicted.eq(labels).to(torch::kFloat64).mean().item<double>();
  MESSAGE("two-category accuracy " << accuracy);
  CHECK(accuracy >= 0.8);
}
