#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <vector>

#include "xmodal/config.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/losses.hpp"
#include "xmodal/random.hpp"

namespace xmodal {

// G: retrieval-space recipe embedding (+ optional noise) -> (3, g_res, g_res)
// in [0, 1]. Linear seed to 4x4, then nearest-upsample/conv/BN/ReLU stages.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const ModelConfig& config);

  // r_ret: (B, d_ret); noise: (B, d_noise) or undefined when d_noise == 0.
  torch::Tensor forward(const torch::Tensor& r_ret, const torch::Tensor& noise = {});

  std::int64_t d_ret() const { return d_ret_; }
  std::int64_t d_noise() const { return d_noise_; }
  std::int64_t resolution() const { return resolution_; }

  torch::nn::Linear seed{nullptr};
  torch::nn::ModuleList stages{nullptr};
  torch::nn::Conv2d to_rgb{nullptr};

 private:
  std::int64_t d_ret_, d_noise_, resolution_, base_channels_;
};
TORCH_MODULE(Generator);

// Strided conv stack down to 4x4, then a linear map to one unbounded score.
class ImageDiscriminatorImpl : public torch::nn::Module {
 public:
  ImageDiscriminatorImpl(std::int64_t image_size, std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& images);

  torch::nn::ModuleList convs{nullptr};
  torch::nn::Linear score{nullptr};
};
TORCH_MODULE(ImageDiscriminator);

// Small conv classifier; features() is the penultimate layer.
class ImageClassifierImpl : public torch::nn::Module {
 public:
  ImageClassifierImpl(std::int64_t image_size, std::int64_t channels, std::int64_t num_classes);
  torch::Tensor features(const torch::Tensor& images);
  torch::Tensor forward(const torch::Tensor& images);
  std::int64_t feature_dim() const { return feature_dim_; }

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::Linear hidden{nullptr}, logits{nullptr};

 private:
  std::int64_t feature_dim_;
};
TORCH_MODULE(ImageClassifier);

// D_M: MLP with LeakyReLU(0.2) and no output squashing.
class ModalityCriticImpl : public torch::nn::Module {
 public:
  ModalityCriticImpl(std::int64_t d_ret, std::int64_t hidden);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr}, out{nullptr};
};
TORCH_MODULE(ModalityCritic);

// Deterministic in (R_ret, noise_seed); G is evaluated in eval mode.
ImageTensor generate_image(const torch::Tensor& r_ret, Generator& generator, std::uint64_t noise_seed);
// Batched form: one noise vector per row drawn from mix_seed(noise_seed, row).
torch::Tensor generate_images(const torch::Tensor& r_ret, Generator& generator, std::uint64_t noise_seed);
// (B, d_noise) standard normal noise, or undefined when d_noise == 0.
torch::Tensor draw_noise(std::int64_t rows, std::int64_t d_noise, std::uint64_t seed,
                         const torch::TensorOptions& options = {});

// Temporarily disables requires_grad on every parameter of a module so
// encoder/generator backward passes cannot write discriminator gradients.
class FreezeGuard {
 public:
  explicit FreezeGuard(torch::nn::Module& module);
  ~FreezeGuard();
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<std::pair<torch::Tensor, bool>> saved_;
};

// Owns the discriminator-side networks and their optimizers and performs
// the alternating updates: D_M n_critic times, D_r2i + cls_r2i once.
class AdversarialTrainer {
 public:
  AdversarialTrainer(const TrainConfig& config, ModalityCritic critic, ImageDiscriminator discriminator,
                     ImageClassifier classifier);

  struct Inputs {
    torch::Tensor V;           // (B, d_ret) image embeddings, retrieval space
    torch::Tensor R;           // (B, d_ret) recipe embeddings, retrieval space
    torch::Tensor generated;   // (B, 3, S, S) or undefined
    torch::Tensor real;        // (B, 3, S, S) or undefined
    torch::Tensor categories;  // (B)
  };

  // Inputs are detached internally. Fills critic_loss / discriminator_loss.
  void step(const Inputs& inputs, Rng& rng, LossReport& report, bool update_critic,
            bool update_discriminator);

  std::int64_t critic_updates() const { return critic_updates_; }
  std::int64_t discriminator_updates() const { return discriminator_updates_; }
  std::int64_t n_critic() const { return n_critic_; }

  torch::optim::Adam& critic_optimizer() { return *critic_opt_; }
  torch::optim::Adam& discriminator_optimizer() { return *disc_opt_; }

  ModalityCritic critic;
  ImageDiscriminator discriminator;
  ImageClassifier classifier;

 private:
  LossConfig loss_;
  std::int64_t n_critic_;
  std::unique_ptr<torch::optim::Adam> critic_opt_;
  std::unique_ptr<torch::optim::Adam> disc_opt_;
  std::int64_t critic_updates_ = 0;
  std::int64_t discriminator_updates_ = 0;
};

// (N) uniform interpolation weights from the portable generator.
torch::Tensor draw_uniform(std::int64_t n, Rng& rng, const torch::TensorOptions& options = {});

}  // namespace xmodal
