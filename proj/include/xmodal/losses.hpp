#pragma once

#include <torch/torch.h>

#include <functional>
#include <optional>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "xmodal/config.hpp"
#include "xmodal/encoders.hpp"

namespace xmodal {

// A scalar-valued network evaluated row-wise: (N, ...) -> (N) or (N, 1).
using Critic = std::function<torch::Tensor(const torch::Tensor&)>;

// Scalar forms on single vectors.
torch::Tensor cosine_similarity(const torch::Tensor& a, const torch::Tensor& b);
torch::Tensor euclidean_distance(const torch::Tensor& a, const torch::Tensor& b);

// (B_a, B_b) matrix of c(a_i, b_j); zero rows raise degenerate_input.
torch::Tensor cosine_matrix(const torch::Tensor& a, const torch::Tensor& b);
// (B_a, B_b) matrix of d(a_i, b_j).
torch::Tensor distance_matrix(const torch::Tensor& a, const torch::Tensor& b);

// L'_bi(i, j) for rows i != j of two aligned feature sets.
torch::Tensor bidirectional_pair_loss(const torch::Tensor& e_a, const torch::Tensor& e_b,
                                      std::int64_t i, std::int64_t j, double margin);

// (1/B) sum_{j != i} L'_bi(i, j), averaged over anchors i.
torch::Tensor batch_bidirectional_loss(const torch::Tensor& e_a, const torch::Tensor& e_b,
                                       double margin);

// (1/6) sum over ordered pairs a != b of L_bi(e_a, g_{b->a}(e_b)).
torch::Tensor recipe_loss(const ComponentEmbeddings& e, ProjectionHeads& heads, double margin);

// Triplet loss in retrieval space, image anchors plus recipe anchors, each
// direction averaged over the batch.
torch::Tensor retrieval_loss(const torch::Tensor& V, const torch::Tensor& R, double margin,
                             Mining mining);

// mean over rows of (||grad_x D(x)|| - 1)^2 at x = eps*real + (1-eps)*fake.
// eps: (N) interpolation weights in [0, 1].
torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& real,
                               const torch::Tensor& fake, const torch::Tensor& eps);

struct AdversarialLosses {
  torch::Tensor critic_loss;   // trains the critic / discriminator
  torch::Tensor encoder_loss;  // enters the encoder/generator objective
  torch::Tensor penalty;       // gradient penalty (undefined unless wgan_gp)
};

// V is the "real" side. eps is used for the gradient-penalty interpolates.
AdversarialLosses modality_alignment_losses(const torch::Tensor& V, const torch::Tensor& R,
                                            const Critic& critic, AdversarialForm form,
                                            double lambda_gp, const torch::Tensor& eps);

// Generic real-vs-generated adversarial pair used by the image GAN.
AdversarialLosses image_adversarial_losses(const torch::Tensor& real, const torch::Tensor& generated,
                                           const Critic& discriminator, AdversarialForm form,
                                           double lambda_gp, const torch::Tensor& eps);

// Mean cross-entropy; labels outside [0, C) raise validation.
torch::Tensor cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels,
                            const char* operation);

struct RecipeTranslation {
  torch::Tensor l_r2i;
  torch::Tensor l_cls_r2i;
  torch::Tensor l_trans_r;           // l_r2i + l_cls_r2i
  torch::Tensor discriminator_loss;  // D_r2i adversarial + cls_r2i on real images
};

// `generated` carries the generator graph; the discriminator side uses a
// detached copy.
RecipeTranslation translation_consistency_recipe(const torch::Tensor& generated,
                                                 const torch::Tensor& real,
                                                 const Critic& discriminator,
                                                 const std::function<torch::Tensor(const torch::Tensor&)>& classifier,
                                                 const torch::Tensor& categories,
                                                 AdversarialForm form, double lambda_gp,
                                                 const torch::Tensor& eps);

struct ImageTranslation {
  torch::Tensor l_i2r;
  torch::Tensor l_cls_i2r;
  torch::Tensor l_trans_i;
};

// From head outputs: ingredient logits (B, C_ing) and category logits (B, C_cat).
ImageTranslation translation_consistency_image(const torch::Tensor& ingredient_logits,
                                               const torch::Tensor& category_logits,
                                               const torch::Tensor& ingredient_multihot,
                                               const torch::Tensor& categories);

struct LossReport {
  double l_rec = 0, l_ret = 0, l_ma = 0, l_trans_r = 0, l_trans_i = 0, l_total = 0;
  double l_r2i = 0, l_cls_r2i = 0, l_i2r = 0, l_cls_i2r = 0;
  // Adversarial side objectives; not part of the total.
  double critic_loss = 0, discriminator_loss = 0;

  nlohmann::json to_json() const;
  static LossReport from_json(const nlohmann::json& j);
};

// lambda1*l_rec + lambda2*l_ma + lambda3*(l_trans_r + l_trans_i) + l_ret, in double.
double compose_total(const LossReport& parts, const LossConfig& config);

// Tensor-valued terms of one step; undefined tensors count as 0.
struct LossTerms {
  torch::Tensor l_rec, l_ret, l_ma, l_trans_r, l_trans_i;
};

// Differentiable total; a non-finite term raises non_finite naming the term.
torch::Tensor total_loss(const LossTerms& terms, const LossConfig& config);

}  // namespace xmodal
