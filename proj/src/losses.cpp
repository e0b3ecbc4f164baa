#include "xmodal/losses.hpp"

#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "xmodal/error.hpp"

namespace xmodal {
namespace {

void require_batch(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
  if (a.dim() != 2 || b.dim() != 2 || a.sizes() != b.sizes()) {
    fail(ErrorKind::validation, "losses", op,
         "expected aligned (B, d) batches, got " + std::string(c10::str(a.sizes())) + " and " +
             std::string(c10::str(b.sizes())));
  }
  if (a.size(0) < 2) {
    fail(ErrorKind::batch_too_small, "losses", op, "B = " + std::to_string(a.size(0)) + " has no negatives");
  }
}

torch::Tensor row_norms_checked(const torch::Tensor& x, const char* op) {
  auto n = x.norm(2, -1);
  if (n.eq(0).any().item<bool>()) {
    fail(ErrorKind::degenerate_input, "losses", op, "cosine similarity of a zero vector");
  }
  return n;
}

torch::Tensor off_diagonal(std::int64_t B, const torch::TensorOptions& options) {
  return torch::ones({B, B}, options) - torch::eye(B, options);
}

torch::Tensor flat(const torch::Tensor& t) { return t.reshape({-1}); }

torch::Tensor interpolate(const torch::Tensor& real, const torch::Tensor& fake, const torch::Tensor& eps) {
  if (eps.numel() != real.size(0)) {
    fail(ErrorKind::validation, "losses", "gradient_penalty", "one interpolation weight per row required");
  }
  std::vector<std::int64_t> shape(static_cast<std::size_t>(real.dim()), 1);
  shape[0] = real.size(0);
  auto w = eps.to(real.dtype()).reshape(shape);
  return w * real + (1 - w) * fake;
}

}  // namespace

torch::Tensor cosine_similarity(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) fail(ErrorKind::validation, "losses", "cosine_similarity", "shape mismatch");
  const auto na = row_norms_checked(a, "cosine_similarity");
  const auto nb = row_norms_checked(b, "cosine_similarity");
  return (a * b).sum(-1) / (na * nb);
}

torch::Tensor euclidean_distance(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) fail(ErrorKind::validation, "losses", "euclidean_distance", "shape mismatch");
  return (a - b).norm(2, -1);
}

torch::Tensor cosine_matrix(const torch::Tensor& a, const torch::Tensor& b) {
  const auto na = row_norms_checked(a, "cosine_similarity");
  const auto nb = row_norms_checked(b, "cosine_similarity");
  return torch::matmul(a / na.unsqueeze(1), (b / nb.unsqueeze(1)).t());
}

torch::Tensor distance_matrix(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.unsqueeze(1) - b.unsqueeze(0)).norm(2, -1);
}

torch::Tensor bidirectional_pair_loss(const torch::Tensor& e_a, const torch::Tensor& e_b,
                                      std::int64_t i, std::int64_t j, double margin) {
  require_batch(e_a, e_b, "bidirectional_pair_loss");
  if (i == j) fail(ErrorKind::validation, "losses", "bidirectional_pair_loss", "i and j must differ");
  auto c = [](const torch::Tensor& x, const torch::Tensor& y) { return xmodal::cosine_similarity(x, y); };
  auto first = torch::relu(c(e_a[i], e_b[j]) - c(e_a[i], e_b[i]) + margin);
  auto second = torch::relu(c(e_b[i], e_a[j]) - c(e_b[i], e_a[i]) + margin);
  return first + second;
}

torch::Tensor batch_bidirectional_loss(const torch::Tensor& e_a, const torch::Tensor& e_b,
                                       double margin) {
  require_batch(e_a, e_b, "batch_bidirectional_loss");
  const auto B = e_a.size(0);
  auto S = cosine_matrix(e_a, e_b);  // S[i][j] = c(a_i, b_j)
  auto pos = S.diagonal();
  // c(a_i, b_j) - c(a_i, b_i) and c(b_i, a_j) - c(b_i, a_i) = S[j][i] - S[i][i].
  auto first = torch::relu(S - pos.unsqueeze(1) + margin);
  auto second = torch::relu(S.t() - pos.unsqueeze(1) + margin);
  auto per_pair = (first + second) * off_diagonal(B, S.options());
  return (per_pair.sum(1) / static_cast<double>(B)).mean();
}

torch::Tensor recipe_loss(const ComponentEmbeddings& e, ProjectionHeads& heads, double margin) {
  torch::Tensor total;
  for (Space a : kSpaces) {
    for (Space b : kSpaces) {
      if (a == b) continue;
      auto term = batch_bidirectional_loss(e[a], heads->project(e[b], b, a), margin);
      total = total.defined() ? total + term : term;
    }
  }
  return total / 6.0;
}

torch::Tensor retrieval_loss(const torch::Tensor& V, const torch::Tensor& R, double margin,
                             Mining mining) {
  require_batch(V, R, "retrieval_loss");
  const auto B = V.size(0);
  auto D = distance_matrix(V, R);  // D[i][j] = d(V_i, R_j)
  auto mask = off_diagonal(B, D.options());
  auto direction = [&](const torch::Tensor& d) {
    auto pos = d.diagonal().unsqueeze(1);
    if (mining == Mining::hardest_in_batch) {
      auto self = torch::eye(B, d.options().dtype(torch::kBool));
      auto blocked = d.masked_fill(self, std::numeric_limits<double>::infinity());
      auto hardest = std::get<0>(blocked.min(1, true));
      return torch::relu(pos - hardest + margin).mean();
    }
    auto hinge = torch::relu(pos - d + margin) * mask;
    return (hinge.sum(1) / static_cast<double>(B - 1)).mean();
  };
  return direction(D) + direction(D.t());
}

torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& real,
                               const torch::Tensor& fake, const torch::Tensor& eps) {
  if (real.sizes() != fake.sizes()) {
    fail(ErrorKind::validation, "losses", "gradient_penalty", "real and fake shapes differ");
  }
  auto x = interpolate(real.detach(), fake.detach(), eps).requires_grad_(true);
  auto out = flat(critic(x));
  auto grads = torch::autograd::grad({out.sum()}, {x}, {}, /*retain_graph=*/true,
                                     /*create_graph=*/true, /*allow_unused=*/true);
  auto g = grads[0].defined() ? grads[0] : torch::zeros_like(x);
  auto norms = g.reshape({g.size(0), -1}).norm(2, 1);
  return (norms - 1).pow(2).mean();
}

namespace {

AdversarialLosses adversarial(const torch::Tensor& real, const torch::Tensor& fake,
                              const Critic& critic, AdversarialForm form, double lambda_gp,
                              const torch::Tensor& eps, bool fake_only_generator) {
  AdversarialLosses out;
  // The critic side sees detached inputs; the encoder side keeps the graph.
  auto d_real_c = flat(critic(real.detach()));
  auto d_fake_c = flat(critic(fake.detach()));
  auto d_fake = flat(critic(fake));
  auto d_real = fake_only_generator ? torch::Tensor() : flat(critic(real));
  switch (form) {
    case AdversarialForm::wgan_gp:
      out.penalty = gradient_penalty(critic, real, fake, eps);
      out.critic_loss = d_fake_c.mean() - d_real_c.mean() + lambda_gp * out.penalty;
      out.encoder_loss = fake_only_generator ? -d_fake.mean() : d_real.mean() - d_fake.mean();
      break;
    case AdversarialForm::log_form:
      // D = sigmoid(logit); log D = -softplus(-l), log(1 - D) = -softplus(l).
      out.critic_loss = torch::softplus(-d_real_c).mean() + torch::softplus(d_fake_c).mean();
      out.encoder_loss = fake_only_generator
                             ? -torch::softplus(d_fake).mean()
                             : -torch::softplus(d_real).mean() - torch::softplus(d_fake).mean();
      break;
    case AdversarialForm::least_squares:
      out.critic_loss = 0.5 * (d_real_c - 1).pow(2).mean() + 0.5 * d_fake_c.pow(2).mean();
      out.encoder_loss = fake_only_generator
                             ? 0.5 * (d_fake - 1).pow(2).mean()
                             : 0.5 * (d_fake - 1).pow(2).mean() + 0.5 * d_real.pow(2).mean();
      break;
  }
  return out;
}

}  // namespace

AdversarialLosses modality_alignment_losses(const torch::Tensor& V, const torch::Tensor& R,
                                            const Critic& critic, AdversarialForm form,
                                            double lambda_gp, const torch::Tensor& eps) {
  if (V.dim() != 2 || V.sizes() != R.sizes()) {
    fail(ErrorKind::validation, "losses", "modality_alignment_losses",
         "V and R must have equal (B, d) shapes, got " + std::string(c10::str(V.sizes())) + " and " +
             std::string(c10::str(R.sizes())));
  }
  return adversarial(V, R, critic, form, lambda_gp, eps, /*fake_only_generator=*/false);
}

AdversarialLosses image_adversarial_losses(const torch::Tensor& real, const torch::Tensor& generated,
                                           const Critic& discriminator, AdversarialForm form,
                                           double lambda_gp, const torch::Tensor& eps) {
  if (real.sizes() != generated.sizes()) {
    fail(ErrorKind::validation, "losses", "translation_consistency_recipe",
         "real and generated image batches differ in shape");
  }
  return adversarial(real, generated, discriminator, form, lambda_gp, eps, /*fake_only_generator=*/true);
}

torch::Tensor cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels,
                            const char* operation) {
  const auto C = logits.size(-1);
  if (labels.numel() != logits.size(0)) {
    fail(ErrorKind::validation, "losses", operation, "one label per row required");
  }
  if (labels.numel() > 0 && (labels.min().item<std::int64_t>() < 0 || labels.max().item<std::int64_t>() >= C)) {
    fail(ErrorKind::validation, "losses", operation, "category label outside [0, " + std::to_string(C) + ")");
  }
  auto logp = torch::log_softmax(logits, -1);
  return -logp.gather(1, labels.to(torch::kInt64).reshape({-1, 1})).mean();
}

RecipeTranslation translation_consistency_recipe(
    const torch::Tensor& generated, const torch::Tensor& real, const Critic& discriminator,
    const std::function<torch::Tensor(const torch::Tensor&)>& classifier, const torch::Tensor& categories,
    AdversarialForm form, double lambda_gp, const torch::Tensor& eps) {
  auto adv = image_adversarial_losses(real, generated, discriminator, form, lambda_gp, eps);
  RecipeTranslation out;
  out.l_r2i = adv.encoder_loss;
  out.l_cls_r2i = cross_entropy(classifier(generated), categories, "translation_consistency_recipe");
  out.l_trans_r = out.l_r2i + out.l_cls_r2i;
  out.discriminator_loss =
      adv.critic_loss + cross_entropy(classifier(real.detach()), categories, "translation_consistency_recipe");
  return out;
}

ImageTranslation translation_consistency_image(const torch::Tensor& ingredient_logits,
                                               const torch::Tensor& category_logits,
                                               const torch::Tensor& ingredient_multihot,
                                               const torch::Tensor& categories) {
  if (ingredient_logits.sizes() != ingredient_multihot.sizes()) {
    fail(ErrorKind::validation, "losses", "translation_consistency_image",
         "ingredient logits and multi-hot targets differ in shape");
  }
  auto targets = ingredient_multihot.to(ingredient_logits.dtype());
  if (!(targets.eq(0) | targets.eq(1)).all().item<bool>()) {
    fail(ErrorKind::validation, "losses", "translation_consistency_image", "multi-hot entries must be 0 or 1");
  }
  ImageTranslation out;
  // Stable BCE with logits: softplus(l) - y*l.
  out.l_i2r = (torch::softplus(ingredient_logits) - targets * ingredient_logits).mean();
  out.l_cls_i2r = cross_entropy(category_logits, categories, "translation_consistency_image");
  out.l_trans_i = out.l_i2r + out.l_cls_i2r;
  return out;
}

nlohmann::json LossReport::to_json() const {
  return nlohmann::json{{"l_rec", l_rec},         {"l_ret", l_ret},
                        {"l_ma", l_ma},           {"l_trans_r", l_trans_r},
                        {"l_trans_i", l_trans_i}, {"l_total", l_total},
                        {"l_r2i", l_r2i},         {"l_cls_r2i", l_cls_r2i},
                        {"l_i2r", l_i2r},         {"l_cls_i2r", l_cls_i2r},
                        {"critic_loss", critic_loss}, {"discriminator_loss", discriminator_loss}};
}

LossReport LossReport::from_json(const nlohmann::json& j) {
  LossReport r;
  r.l_rec = j.at("l_rec").get<double>();
  r.l_ret = j.at("l_ret").get<double>();
  r.l_ma = j.at("l_ma").get<double>();
  r.l_trans_r = j.at("l_trans_r").get<double>();
  r.l_trans_i = j.at("l_trans_i").get<double>();
  r.l_total = j.at("l_total").get<double>();
  r.l_r2i = j.value("l_r2i", 0.0);
  r.l_cls_r2i = j.value("l_cls_r2i", 0.0);
  r.l_i2r = j.value("l_i2r", 0.0);
  r.l_cls_i2r = j.value("l_cls_i2r", 0.0);
  r.critic_loss = j.value("critic_loss", 0.0);
  r.discriminator_loss = j.value("discriminator_loss", 0.0);
  return r;
}

double compose_total(const LossReport& p, const LossConfig& c) {
  return c.lambda1 * p.l_rec + c.lambda2 * p.l_ma + c.lambda3 * (p.l_trans_r + p.l_trans_i) + p.l_ret;
}

torch::Tensor total_loss(const LossTerms& t, const LossConfig& c) {
  const std::pair<const char*, const torch::Tensor*> named[] = {
      {"l_rec", &t.l_rec}, {"l_ret", &t.l_ret}, {"l_ma", &t.l_ma},
      {"l_trans_r", &t.l_trans_r}, {"l_trans_i", &t.l_trans_i}};
  for (const auto& [name, term] : named) {
    if (term->defined() && !torch::isfinite(*term).all().item<bool>()) {
      fail(ErrorKind::non_finite, "losses", "total_loss",
           std::string("term ") + name + " is not finite (" + std::to_string(term->item<double>()) + ")");
    }
  }
  torch::Tensor total;
  auto add = [&](const torch::Tensor& term, double weight) {
    if (!term.defined()) return;
    auto w = weight == 1.0 ? term : weight * term;
    total = total.defined() ? total + w : w;
  };
  add(t.l_rec, c.lambda1);
  add(t.l_ma, c.lambda2);
  add(t.l_trans_r, c.lambda3);
  add(t.l_trans_i, c.lambda3);
  add(t.l_ret, 1.0);
  if (!total.defined()) total = torch::zeros({});
  return total;
}

}  // namespace xmodal
