#include "xmodal/generation.hpp"

#include "xmodal/error.hpp"

namespace xmodal {
namespace {

std::int64_t stage_channels(std::int64_t base, std::int64_t stage) {
  return std::max<std::int64_t>(base >> stage, 16);
}

std::int64_t halvings_to_four(std::int64_t size, const char* what) {
  std::int64_t n = 0;
  while (size > 4 && size % 2 == 0) {
    size /= 2;
    ++n;
  }
  if (size != 4) {
    fail(ErrorKind::config, "generation", what, "resolution must be 4 * 2^k");
  }
  return n;
}

}  // namespace

GeneratorImpl::GeneratorImpl(const ModelConfig& c)
    : d_ret_(c.d_ret), d_noise_(c.d_noise), resolution_(c.g_res), base_channels_(c.g_channels) {
  const auto n_stages = halvings_to_four(c.g_res, "Generator");
  seed = register_module("seed", torch::nn::Linear(d_ret_ + d_noise_, base_channels_ * 16));
  stages = register_module("stages", torch::nn::ModuleList());
  for (std::int64_t s = 0; s < n_stages; ++s) {
    auto stage = torch::nn::Sequential(
        torch::nn::Upsample(torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(stage_channels(base_channels_, s),
                                                   stage_channels(base_channels_, s + 1), 3)
                              .padding(1)),
        torch::nn::BatchNorm2d(stage_channels(base_channels_, s + 1)), torch::nn::ReLU());
    stages->push_back(stage);
  }
  to_rgb = register_module(
      "to_rgb", torch::nn::Conv2d(torch::nn::Conv2dOptions(stage_channels(base_channels_, n_stages), 3, 3).padding(1)));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& r_ret, const torch::Tensor& noise) {
  if (r_ret.dim() != 2 || r_ret.size(1) != d_ret_) {
    fail(ErrorKind::validation, "generation", "generate_image",
         "expected (B, " + std::to_string(d_ret_) + ") recipe embeddings, got " + std::string(c10::str(r_ret.sizes())));
  }
  auto input = r_ret;
  if (d_noise_ > 0) {
    if (!noise.defined() || noise.sizes() != torch::IntArrayRef{r_ret.size(0), d_noise_}) {
      fail(ErrorKind::validation, "generation", "generate_image", "noise must be (B, d_noise)");
    }
    input = torch::cat({r_ret, noise.to(r_ret.dtype())}, 1);
  }
  auto h = torch::relu(seed(input)).view({r_ret.size(0), base_channels_, 4, 4});
  for (auto& stage : *stages) h = stage->as<torch::nn::SequentialImpl>()->forward(h);
  return torch::sigmoid(to_rgb(h));
}

ImageDiscriminatorImpl::ImageDiscriminatorImpl(std::int64_t image_size, std::int64_t channels) {
  const auto n = halvings_to_four(image_size, "ImageDiscriminator");
  convs = register_module("convs", torch::nn::ModuleList());
  std::int64_t in = 3;
  std::int64_t out = channels;
  for (std::int64_t s = 0; s < n; ++s) {
    convs->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(2).padding(1)));
    in = out;
    out = std::min<std::int64_t>(out * 2, 4 * channels);
  }
  score = register_module("score", torch::nn::Linear(in * 16, 1));
}

torch::Tensor ImageDiscriminatorImpl::forward(const torch::Tensor& images) {
  auto h = images;
  for (auto& conv : *convs) h = torch::leaky_relu(conv->as<torch::nn::Conv2dImpl>()->forward(h), 0.2);
  return score(h.flatten(1)).squeeze(1);
}

ImageClassifierImpl::ImageClassifierImpl(std::int64_t /*image_size*/, std::int64_t channels,
                                         std::int64_t num_classes)
    : feature_dim_(2 * channels) {
  conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, channels, 3).padding(1)));
  conv2 = register_module("conv2",
                          torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 2 * channels, 3).stride(2).padding(1)));
  conv3 = register_module(
      "conv3", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * channels, 2 * channels, 3).stride(2).padding(1)));
  hidden = register_module("hidden", torch::nn::Linear(2 * channels, feature_dim_));
  logits = register_module("logits", torch::nn::Linear(feature_dim_, num_classes));
}

torch::Tensor ImageClassifierImpl::features(const torch::Tensor& images) {
  auto h = torch::relu(conv1(images));
  h = torch::relu(conv2(h));
  h = torch::relu(conv3(h));
  return torch::relu(hidden(h.mean({2, 3})));
}

torch::Tensor ImageClassifierImpl::forward(const torch::Tensor& images) { return logits(features(images)); }

ModalityCriticImpl::ModalityCriticImpl(std::int64_t d_ret, std::int64_t hidden) {
  fc1 = register_module("fc1", torch::nn::Linear(d_ret, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, hidden));
  out = register_module("out", torch::nn::Linear(hidden, 1));
}

torch::Tensor ModalityCriticImpl::forward(const torch::Tensor& x) {
  auto h = torch::leaky_relu(fc1(x), 0.2);
  h = torch::leaky_relu(fc2(h), 0.2);
  return out(h).squeeze(-1);
}

torch::Tensor draw_noise(std::int64_t rows, std::int64_t d_noise, std::uint64_t seed,
                         const torch::TensorOptions& options) {
  if (d_noise <= 0) return {};
  auto noise = torch::empty({rows, d_noise}, torch::kFloat64);
  auto acc = noise.accessor<double, 2>();
  for (std::int64_t r = 0; r < rows; ++r) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(r)));
    for (std::int64_t k = 0; k < d_noise; ++k) acc[r][k] = rng.normal();
  }
  return noise.to(options.has_dtype() ? options.dtype().toScalarType() : torch::kFloat32);
}

torch::Tensor generate_images(const torch::Tensor& r_ret, Generator& generator, std::uint64_t noise_seed) {
  require_finite(r_ret, "generation", "generate_image", "recipe embedding");
  torch::NoGradGuard no_grad;
  const bool was_training = generator->is_training();
  generator->eval();
  auto noise = draw_noise(r_ret.size(0), generator->d_noise(), noise_seed, r_ret.options());
  auto images = generator->forward(r_ret, noise);
  generator->train(was_training);
  return images;
}

ImageTensor generate_image(const torch::Tensor& r_ret, Generator& generator, std::uint64_t noise_seed) {
  if (r_ret.dim() != 1) {
    fail(ErrorKind::validation, "generation", "generate_image", "expected a single (d_ret) embedding");
  }
  return ImageTensor(generate_images(r_ret.unsqueeze(0), generator, noise_seed).squeeze(0).to(torch::kFloat32));
}

FreezeGuard::FreezeGuard(torch::nn::Module& module) {
  for (auto& p : module.parameters()) {
    saved_.emplace_back(p, p.requires_grad());
    p.set_requires_grad(false);
  }
}

FreezeGuard::~FreezeGuard() {
  for (auto& [p, flag] : saved_) p.set_requires_grad(flag);
}

torch::Tensor draw_uniform(std::int64_t n, Rng& rng, const torch::TensorOptions& options) {
  std::vector<double> values(static_cast<std::size_t>(n));
  for (auto& v : values) v = rng.uniform();
  return torch::tensor(values, torch::kFloat64).to(options.has_dtype() ? options.dtype().toScalarType() : torch::kFloat32);
}

AdversarialTrainer::AdversarialTrainer(const TrainConfig& config, ModalityCritic critic_in,
                                       ImageDiscriminator discriminator_in, ImageClassifier classifier_in)
    : critic(std::move(critic_in)),
      discriminator(std::move(discriminator_in)),
      classifier(std::move(classifier_in)),
      loss_(config.loss),
      n_critic_(config.effective_n_critic()) {
  auto adam = [&](double lr) {
    return torch::optim::AdamOptions(lr).betas({config.beta1, config.beta2});
  };
  critic_opt_ = std::make_unique<torch::optim::Adam>(critic->parameters(), adam(config.critic_lr));
  auto disc_params = discriminator->parameters();
  for (auto& p : classifier->parameters()) disc_params.push_back(p);
  disc_opt_ = std::make_unique<torch::optim::Adam>(disc_params, adam(config.disc_lr));
}

void AdversarialTrainer::step(const Inputs& in, Rng& rng, LossReport& report, bool update_critic,
                              bool update_discriminator) {
  if (update_critic) {
    auto V = in.V.detach();
    auto R = in.R.detach();
    Critic fn = [this](const torch::Tensor& x) { return critic->forward(x); };
    for (std::int64_t k = 0; k < n_critic_; ++k) {
      auto eps = draw_uniform(V.size(0), rng, V.options());
      auto losses = modality_alignment_losses(V, R, fn, loss_.adversarial_form, loss_.lambda_gp, eps);
      require_finite(losses.critic_loss, "generation", "adversarial_step", "critic loss");
      critic_opt_->zero_grad(true);
      losses.critic_loss.backward();
      critic_opt_->step();
      ++critic_updates_;
      report.critic_loss = losses.critic_loss.item<double>();
    }
  }
  if (update_discriminator) {
    auto generated = in.generated.detach();
    auto real = in.real.detach().to(generated.dtype());
    Critic d = [this](const torch::Tensor& x) { return discriminator->forward(x); };
    auto cls = [this](const torch::Tensor& x) { return classifier->forward(x); };
    auto eps = draw_uniform(real.size(0), rng, real.options());
    auto t = translation_consistency_recipe(generated, real, d, cls, in.categories, loss_.image_gan_form,
                                            loss_.lambda_gp, eps);
    require_finite(t.discriminator_loss, "generation", "adversarial_step", "discriminator loss");
    disc_opt_->zero_grad(true);
    t.discriminator_loss.backward();
    disc_opt_->step();
    ++discriminator_updates_;
    report.discriminator_loss = t.discriminator_loss.item<double>();
  }
}

}  // namespace xmodal
