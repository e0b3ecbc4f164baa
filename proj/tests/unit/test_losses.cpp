#include <cmath>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "xmodal/gradcheck.hpp"
#include "xmodal/losses.hpp"

using namespace xmodal;

namespace {

constexpr double kMargin = 0.3;

double cos_sim(const torch::Tensor& a, const torch::Tensor& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::int64_t k = 0; k < a.size(0); ++k) {
    const double x = a[k].item<double>(), y = b[k].item<double>();
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  return ab / std::sqrt(aa * bb);
}

double euclid(const torch::Tensor& a, const torch::Tensor& b) {
  double s = 0;
  for (std::int64_t k = 0; k < a.size(0); ++k) {
    const double d = a[k].item<double>() - b[k].item<double>();
    s += d * d;
  }
  return std::sqrt(s);
}

double hinge(double x) { return x > 0 ? x : 0; }

double pair_oracle(const torch::Tensor& a, const torch::Tensor& b, std::int64_t i, std::int64_t j, double m) {
  return hinge(cos_sim(a[i], b[j]) - cos_sim(a[i], b[i]) + m) + hinge(cos_sim(b[i], a[j]) - cos_sim(b[i], a[i]) + m);
}

double batch_oracle(const torch::Tensor& a, const torch::Tensor& b, double m) {
  const auto B = a.size(0);
  double total = 0;
  for (std::int64_t i = 0; i < B; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < B; ++j) {
      if (j != i) s += pair_oracle(a, b, i, j, m);
    }
    total += s / static_cast<double>(B);
  }
  return total / static_cast<double>(B);
}

double retrieval_oracle(const torch::Tensor& V, const torch::Tensor& R, double m, Mining mining) {
  const auto B = V.size(0);
  auto direction = [&](const torch::Tensor& anchors, const torch::Tensor& others) {
    double total = 0;
    for (std::int64_t i = 0; i < B; ++i) {
      const double pos = euclid(anchors[i], others[i]);
      double hardest = INFINITY, sum = 0;
      for (std::int64_t j = 0; j < B; ++j) {
        if (j == i) continue;
        const double neg = euclid(anchors[i], others[j]);
        hardest = std::min(hardest, neg);
        sum += hinge(pos - neg + m);
      }
      total += mining == Mining::hardest_in_batch ? hinge(pos - hardest + m) : sum / static_cast<double>(B - 1);
    }
    return total / static_cast<double>(B);
  };
  return direction(V, R) + direction(R, V);
}

torch::Tensor unit_rows(std::int64_t B, std::int64_t d, std::int64_t seed) {
  torch::manual_seed(seed);
  auto x = torch::randn({B, d}, torch::kFloat64);
  return x / x.norm(2, 1, true);
}

double value(const torch::Tensor& t) { return t.item<double>(); }

}  // namespace

TEST_CASE("cosine similarity and euclidean distance") {
  auto u = torch::tensor({0.3, -1.2, 2.0}, torch::kFloat64);
  CHECK(value(xmodal::cosine_similarity(u, u)) == doctest::Approx(1.0).epsilon(1e-12));
  auto e = test::basis(2, 4);
  CHECK(value(xmodal::cosine_similarity(e[0], e[1])) == doctest::Approx(0.0));
  CHECK(value(xmodal::euclidean_distance(torch::tensor({0.0, 0.0}), torch::tensor({3.0, 4.0}))) == doctest::Approx(5.0));
  test::expect_error(ErrorKind::degenerate_input, [&] { xmodal::cosine_similarity(torch::zeros({3}), u); });
  test::expect_error(ErrorKind::degenerate_input,
                     [&] { cosine_matrix(torch::zeros({2, 3}, torch::kFloat64), torch::ones({2, 3}, torch::kFloat64)); });
}

TEST_CASE("bidirectional pair loss") {
  auto e = test::basis(2, 4);  // u, v
  CHECK(value(bidirectional_pair_loss(e, e, 0, 1, kMargin)) == 0.0);
  auto swapped = torch::stack({e[1], e[0]});
  CHECK(value(bidirectional_pair_loss(e, swapped, 0, 1, kMargin)) == doctest::Approx(2.6).epsilon(1e-12));
  for (int seed = 0; seed < 5; ++seed) {
    auto a = unit_rows(3, 8, seed), b = unit_rows(3, 8, seed + 100);
    CHECK(std::abs(value(bidirectional_pair_loss(a, b, 0, 2, kMargin)) - pair_oracle(a, b, 0, 2, kMargin)) < 1e-9);
  }
  test::expect_error(ErrorKind::degenerate_input,
                     [&] { bidirectional_pair_loss(torch::zeros({2, 4}, torch::kFloat64), e, 0, 1, kMargin); });
}

TEST_CASE("batch bidirectional loss") {
  auto e = test::basis(2, 4);
  CHECK(value(batch_bidirectional_loss(e, e, kMargin)) == 0.0);
  auto swapped = torch::stack({e[1], e[0]});
  CHECK(value(batch_bidirectional_loss(e, swapped, kMargin)) == doctest::Approx(1.3).epsilon(1e-12));
  test::expect_error(ErrorKind::batch_too_small, [&] { batch_bidirectional_loss(e.slice(0, 0, 1), e.slice(0, 0, 1), kMargin); });
  for (int seed = 0; seed < 5; ++seed) {
    auto a = torch::randn({5, 6}, torch::kFloat64), b = torch::randn({5, 6}, torch::kFloat64);
    CHECK(std::abs(value(batch_bidirectional_loss(a, b, kMargin)) - batch_oracle(a, b, kMargin)) < 1e-9);
  }
}

TEST_CASE("recipe loss fixed points and scale invariance") {
  ProjectionHeads heads(4);
  heads->to(torch::kFloat64);
  heads->set_identity();
  auto e = test::basis(2, 4);
  ComponentEmbeddings aligned{e, e.clone(), e.clone()};
  CHECK(value(recipe_loss(aligned, heads, kMargin)) == 0.0);

  // Every head swaps the first two axes, so each of the six terms sees the
  // mismatched-positive construction.
  {
    torch::NoGradGuard g;
    auto swap = torch::eye(4, torch::kFloat64);
    swap.index_put_({0, 0}, 0.0);
    swap.index_put_({1, 1}, 0.0);
    swap.index_put_({0, 1}, 1.0);
    swap.index_put_({1, 0}, 1.0);
    for (auto from : kSpaces)
      for (auto to : kSpaces)
        if (from != to) heads->head(from, to)->weight.copy_(swap);
  }
  CHECK(value(recipe_loss(aligned, heads, kMargin)) == doctest::Approx(1.3).epsilon(1e-12));

  torch::manual_seed(1);
  ProjectionHeads random_heads(6);
  random_heads->to(torch::kFloat64);
  ComponentEmbeddings r{torch::randn({4, 6}, torch::kFloat64), torch::randn({4, 6}, torch::kFloat64),
                        torch::randn({4, 6}, torch::kFloat64)};
  const double base = value(recipe_loss(r, random_heads, kMargin));
  // Oracle: (1/6) sum over ordered pairs of the batch loss against the
  // projected partner.
  double oracle = 0;
  for (auto a : kSpaces)
    for (auto b : kSpaces)
      if (a != b) oracle += batch_oracle(r[a], random_heads->project(r[b], b, a).detach(), kMargin) / 6.0;
  CHECK(std::abs(base - oracle) < 1e-9);
  CHECK(base >= 0);

  auto scaled = r;
  scaled.ingredients = scaled.ingredients.clone();
  scaled.ingredients[2] *= 7.5;
  CHECK(std::abs(value(recipe_loss(scaled, random_heads, kMargin)) - base) < 1e-6);
}

TEST_CASE("retrieval loss fixed points and brute-force agreement") {
  auto e = test::basis(2, 4);
  for (auto mining : {Mining::hardest_in_batch, Mining::all_negatives}) {
    CHECK(value(retrieval_loss(e, e, kMargin, mining)) == 0.0);
    auto swapped = torch::stack({e[1], e[0]});
    CHECK(value(retrieval_loss(e, swapped, kMargin, mining)) == doctest::Approx(3.428427).epsilon(1e-6));
    test::expect_error(ErrorKind::batch_too_small,
                       [&] { retrieval_loss(e.slice(0, 0, 1), e.slice(0, 0, 1), kMargin, mining); });
  }
  for (int seed = 0; seed < 10; ++seed) {
    torch::manual_seed(seed);
    auto V = torch::randn({6, 5}, torch::kFloat64) * 0.3, R = torch::randn({6, 5}, torch::kFloat64) * 0.3;
    const double hard = value(retrieval_loss(V, R, kMargin, Mining::hardest_in_batch));
    const double all = value(retrieval_loss(V, R, kMargin, Mining::all_negatives));
    CHECK(std::abs(hard - retrieval_oracle(V, R, kMargin, Mining::hardest_in_batch)) < 1e-9);
    CHECK(std::abs(all - retrieval_oracle(V, R, kMargin, Mining::all_negatives)) < 1e-9);
    CHECK(hard >= all - 1e-12);
    // Non-decreasing in the margin.
    double previous = -1;
    for (double m : {0.0, 0.1, 0.3, 0.6, 1.0}) {
      const double l = value(retrieval_loss(V, R, m, Mining::hardest_in_batch));
      CHECK(l >= previous - 1e-12);
      previous = l;
    }
    // B = 2: a single negative, so both mining modes agree.
    auto V2 = V.slice(0, 0, 2), R2 = R.slice(0, 0, 2);
    CHECK(std::abs(value(retrieval_loss(V2, R2, kMargin, Mining::hardest_in_batch)) -
                   value(retrieval_loss(V2, R2, kMargin, Mining::all_negatives))) < 1e-9);
  }
}

TEST_CASE("modality alignment special cases") {
  torch::manual_seed(2);
  auto V = torch::randn({4, 6}, torch::kFloat64);
  auto eps = torch::rand({4}, torch::kFloat64);
  auto w = torch::randn({6}, torch::kFloat64);
  Critic linear = [&](const torch::Tensor& x) { return torch::matmul(x, w); };

  auto same = modality_alignment_losses(V, V.clone(), linear, AdversarialForm::wgan_gp, 10.0, eps);
  CHECK(value(same.encoder_loss) == doctest::Approx(0.0).epsilon(1e-12));
  const double gp = std::pow(w.norm().item<double>() - 1, 2);
  CHECK(std::abs(value(same.critic_loss) - 10.0 * gp) < 1e-9);

  auto R = torch::randn({4, 6}, torch::kFloat64);
  Critic constant = [](const torch::Tensor& x) { return torch::full({x.size(0)}, 2.5, x.options()) + 0 * x.sum(1); };
  auto c = modality_alignment_losses(V, R, constant, AdversarialForm::wgan_gp, 10.0, eps);
  CHECK(value(c.encoder_loss) == 0.0);
  // A constant critic has zero input gradient, so GP = (0 - 1)^2 = 1.
  CHECK(value(c.critic_loss) == doctest::Approx(10.0).epsilon(1e-12));

  // WGAN form against direct means.
  auto l = modality_alignment_losses(V, R, linear, AdversarialForm::wgan_gp, 10.0, eps);
  const double dv = torch::matmul(V, w).mean().item<double>(), dr = torch::matmul(R, w).mean().item<double>();
  CHECK(std::abs(value(l.encoder_loss) - (dv - dr)) < 1e-12);
  CHECK(std::abs(value(l.critic_loss) - (dr - dv + 10.0 * gp)) < 1e-9);

  // Log form: critic log-loss and log(1 - D(V)) + log(1 - D(R)) for the encoders.
  auto lf = modality_alignment_losses(V, R, linear, AdversarialForm::log_form, 10.0, eps);
  double enc = 0, crit = 0;
  for (std::int64_t i = 0; i < 4; ++i) {
    const double sv = 1 / (1 + std::exp(-torch::dot(V[i], w).item<double>()));
    const double sr = 1 / (1 + std::exp(-torch::dot(R[i], w).item<double>()));
    enc += (std::log(1 - sv) + std::log(1 - sr)) / 4;
    crit += (-std::log(sv) - std::log(1 - sr)) / 4;
  }
  CHECK(std::abs(value(lf.encoder_loss) - enc) < 1e-9);
  CHECK(std::abs(value(lf.critic_loss) - crit) < 1e-9);

  test::expect_error(ErrorKind::validation, [&] {
    modality_alignment_losses(V, torch::randn({4, 5}, torch::kFloat64), linear, AdversarialForm::wgan_gp, 10.0, eps);
  });
}

TEST_CASE("gradient penalty of linear critics has the closed form") {
  for (int seed = 0; seed < 5; ++seed) {
    torch::manual_seed(seed);
    auto w = torch::randn({8}, torch::kFloat64);
    Critic linear = [&](const torch::Tensor& x) { return torch::matmul(x, w); };
    auto a = torch::randn({3, 8}, torch::kFloat64), b = torch::randn({3, 8}, torch::kFloat64);
    auto gp = gradient_penalty(linear, a, b, torch::rand({3}, torch::kFloat64));
    CHECK(std::abs(value(gp) - std::pow(w.norm().item<double>() - 1, 2)) < 1e-9);
    auto unit = w / w.norm();
    Critic lipschitz = [&](const torch::Tensor& x) { return torch::matmul(x, unit); };
    CHECK(std::abs(value(gradient_penalty(lipschitz, a, b, torch::rand({3}, torch::kFloat64)))) < 1e-12);
  }
}

TEST_CASE("recipe translation consistency") {
  const std::int64_t B = 3, C = 20;
  auto generated = torch::rand({B, 3, 8, 8}, torch::kFloat64);
  auto real = torch::rand({B, 3, 8, 8}, torch::kFloat64);
  auto eps = torch::rand({B}, torch::kFloat64);
  auto labels = torch::tensor({0, 7, 19}, torch::kInt64);
  auto uniform = [&](const torch::Tensor& x) { return torch::zeros({x.size(0), C}, x.options()) + 0 * x.sum(); };
  Critic ones = [](const torch::Tensor& x) { return torch::ones({x.size(0)}, x.options()) + 0 * x.sum({1, 2, 3}); };

  auto t = translation_consistency_recipe(generated, real, ones, uniform, labels, AdversarialForm::least_squares, 10.0, eps);
  CHECK(value(t.l_cls_r2i) == doctest::Approx(std::log(20.0)).epsilon(1e-12));
  CHECK(value(t.l_r2i) == 0.0);
  CHECK(std::abs(value(t.l_trans_r) - (value(t.l_r2i) + value(t.l_cls_r2i))) < 1e-12);
  // Discriminator: 0.5 (D(real) - 1)^2 + 0.5 D(fake)^2 = 0.5, plus CE on real.
  CHECK(value(t.discriminator_loss) == doctest::Approx(0.5 + std::log(20.0)).epsilon(1e-12));

  torch::manual_seed(4);
  auto W = torch::randn({3 * 8 * 8, C}, torch::kFloat64) * 0.1;
  auto w = torch::randn({3 * 8 * 8}, torch::kFloat64) * 0.1;
  auto cls = [&](const torch::Tensor& x) { return torch::matmul(x.flatten(1), W); };
  Critic disc = [&](const torch::Tensor& x) { return torch::matmul(x.flatten(1), w); };
  for (auto form : {AdversarialForm::least_squares, AdversarialForm::wgan_gp, AdversarialForm::log_form}) {
    auto f = translation_consistency_recipe(generated, real, disc, cls, labels, form, 10.0, eps);
    // Cross-entropy oracle.
    auto logits = cls(generated);
    double ce = 0;
    for (std::int64_t i = 0; i < B; ++i) {
      double z = 0;
      for (std::int64_t k = 0; k < C; ++k) z += std::exp(logits[i][k].item<double>());
      ce += (std::log(z) - logits[i][labels[i].item<std::int64_t>()].item<double>()) / B;
    }
    CHECK(std::abs(value(f.l_cls_r2i) - ce) < 1e-9);
    auto dg = disc(generated);
    double gen = 0;
    for (std::int64_t i = 0; i < B; ++i) {
      const double s = dg[i].item<double>();
      gen += (form == AdversarialForm::least_squares ? 0.5 * (s - 1) * (s - 1)
              : form == AdversarialForm::wgan_gp     ? -s
                                                     : -std::log1p(std::exp(s))) /
             B;
    }
    CHECK(std::abs(value(f.l_r2i) - gen) < 1e-9);
    CHECK(std::abs(value(f.l_trans_r) - (value(f.l_r2i) + value(f.l_cls_r2i))) < 1e-9);
  }
  auto bad = torch::tensor({0, 7, 20}, torch::kInt64);
  test::expect_error(ErrorKind::validation, [&] {
    translation_consistency_recipe(generated, real, disc, cls, bad, AdversarialForm::least_squares, 10.0, eps);
  });
}

TEST_CASE("image translation consistency") {
  auto multihot = torch::tensor({{1.0, 0.0, 0.0, 1.0}, {0.0, 1.0, 1.0, 0.0}}, torch::kFloat64);
  auto cats = torch::tensor({1, 0}, torch::kInt64);
  auto cat_logits = torch::tensor({{0.2, 1.5, -0.3}, {2.0, 0.1, 0.0}}, torch::kFloat64);

  auto saturated = translation_consistency_image(multihot * 40 - 20, cat_logits, multihot, cats);
  CHECK(value(saturated.l_i2r) <= 1e-6);
  auto zero = translation_consistency_image(torch::zeros({2, 4}, torch::kFloat64), cat_logits, multihot, cats);
  CHECK(value(zero.l_i2r) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  auto logits = torch::tensor({{0.5, -1.0, 2.0, 0.0}, {-0.3, 0.7, 1.1, -2.2}}, torch::kFloat64);
  auto t = translation_consistency_image(logits, cat_logits, multihot, cats);
  double bce = 0;
  for (int i = 0; i < 2; ++i) {
    for (int k = 0; k < 4; ++k) {
      const double p = 1 / (1 + std::exp(-logits[i][k].item<double>()));
      const double y = multihot[i][k].item<double>();
      bce -= (y * std::log(p) + (1 - y) * std::log(1 - p)) / 8;
    }
  }
  CHECK(std::abs(value(t.l_i2r) - bce) < 1e-9);
  double ce = 0;
  for (int i = 0; i < 2; ++i) {
    double z = 0;
    for (int k = 0; k < 3; ++k) z += std::exp(cat_logits[i][k].item<double>());
    ce += (std::log(z) - cat_logits[i][cats[i].item<std::int64_t>()].item<double>()) / 2;
  }
  CHECK(std::abs(value(t.l_cls_i2r) - ce) < 1e-9);
  CHECK(std::abs(value(t.l_trans_i) - (bce + ce)) < 1e-9);

  auto fuzzy = multihot.clone();
  fuzzy.index_put_({0, 0}, 0.5);
  test::expect_error(ErrorKind::validation, [&] { translation_consistency_image(logits, cat_logits, fuzzy, cats); });
  test::expect_error(ErrorKind::validation,
                     [&] { translation_consistency_image(logits, cat_logits, multihot, torch::tensor({1, 3})); });
}

TEST_CASE("total loss composition") {
  LossConfig cfg;
  auto one = [] { return torch::ones({}, torch::kFloat64); };
  CHECK(value(total_loss({one(), one(), one(), one(), one()}, cfg)) == doctest::Approx(1.059).epsilon(1e-15));
  auto zero = [] { return torch::zeros({}, torch::kFloat64); };
  CHECK(value(total_loss({zero(), zero(), zero(), zero(), zero()}, cfg)) == 0.0);

  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0, 3);
  for (int trial = 0; trial < 20; ++trial) {
    LossReport r;
    r.l_rec = u(gen);
    r.l_ret = u(gen);
    r.l_ma = u(gen) - 1.5;
    r.l_trans_r = u(gen);
    r.l_trans_i = u(gen);
    const double expect = 0.05 * r.l_rec + 0.005 * r.l_ma + 0.002 * (r.l_trans_r + r.l_trans_i) + r.l_ret;
    CHECK(std::abs(compose_total(r, cfg) - expect) < 1e-12);
    auto t = [](double v) { return torch::tensor(v, torch::kFloat64); };
    CHECK(std::abs(value(total_loss({t(r.l_rec), t(r.l_ret), t(r.l_ma), t(r.l_trans_r), t(r.l_trans_i)}, cfg)) -
                   expect) < 1e-12);
  }
  // Undefined terms count as zero.
  CHECK(value(total_loss({torch::Tensor(), one(), torch::Tensor(), torch::Tensor(), torch::Tensor()}, cfg)) == 1.0);

  try {
    total_loss({one(), one(), torch::tensor(std::nan(""), torch::kFloat64), one(), one()}, cfg);
    FAIL("expected a non-finite error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::non_finite);
    CHECK(std::string(e.what()).find("l_ma") != std::string::npos);
  }
}

TEST_CASE("loss reports round-trip through JSON") {
  LossReport r;
  r.l_rec = 0.25;
  r.l_ret = 1.5;
  r.l_ma = -0.125;
  r.l_cls_i2r = 2.0;
  r.critic_loss = 3.0;
  auto back = LossReport::from_json(r.to_json());
  CHECK(back.l_rec == r.l_rec);
  CHECK(back.l_ma == r.l_ma);
  CHECK(back.l_cls_i2r == r.l_cls_i2r);
  CHECK(back.critic_loss == r.critic_loss);
}

TEST_CASE("non-negative losses on random inputs") {
  ProjectionHeads heads(6);
  heads->to(torch::kFloat64);
  for (int seed = 0; seed < 20; ++seed) {
    torch::manual_seed(seed);
    ComponentEmbeddings e{torch::randn({4, 6}, torch::kFloat64), torch::randn({4, 6}, torch::kFloat64),
                          torch::randn({4, 6}, torch::kFloat64)};
    CHECK(value(recipe_loss(e, heads, kMargin)) >= 0);
    auto V = torch::randn({4, 6}, torch::kFloat64), R = torch::randn({4, 6}, torch::kFloat64);
    CHECK(value(retrieval_loss(V, R, kMargin, Mining::hardest_in_batch)) >= 0);
    auto mh = (torch::rand({4, 5}) < 0.4).to(torch::kFloat64);
    auto t = translation_consistency_image(torch::randn({4, 5}, torch::kFloat64), torch::randn({4, 3}, torch::kFloat64),
                                           mh, torch::randint(0, 3, {4}, torch::kInt64));
    CHECK(value(t.l_i2r) >= 0);
    CHECK(value(t.l_cls_i2r) >= 0);
  }
}

TEST_CASE("loss gradients match central differences") {
  for (const auto& probe : loss_probe_names()) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      auto r = run_probe(probe, seed);
      CHECK_MESSAGE(r.max_rel_error <= 1e-4, probe << " seed " << seed << ": " << r.max_rel_error << " at " << r.worst);
    }
  }
  auto c = run_probe("constant", 0);
  CHECK(c.max_rel_error == 0.0);
  CHECK(c.worst_analytic == 0.0);
  CHECK(c.worst_numeric == 0.0);
  test::expect_error(ErrorKind::config, [] { run_probe("no_such_probe", 0); });
}

TEST_CASE("gradient check reports the worst coordinate of a wrong gradient") {
  auto x = torch::tensor({0.5, -1.0, 2.0}, torch::kFloat64).requires_grad_(true);
  // The x[1] term is hidden from autograd, so its analytic gradient is 0.
  auto f = [&] { return x[0] * x[0] + x[2] * x[2] + x.detach()[1] * x.detach()[1]; };
  auto r = check_gradients("broken", f, {{"x", x}});
  CHECK(r.max_rel_error == doctest::Approx(1.0));
  CHECK(r.worst == "x[1]");
}
