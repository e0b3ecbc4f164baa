#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>

#include "xmodal/config.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/generation.hpp"

namespace xmodal {

// Every learnable component of the framework, registered under stable names.
class CrossModalModelImpl : public torch::nn::Module {
 public:
  CrossModalModelImpl(const ModelConfig& config, std::int64_t vocab_size);

  const ModelConfig& config() const { return config_; }
  std::int64_t vocab_size() const { return vocab_size_; }

  RecipeEncoder recipe_encoder{nullptr};
  ImageEncoder image_encoder{nullptr};
  Generator generator{nullptr};
  torch::nn::Linear ingredient_head{nullptr};  // V_ret -> C_ing logits
  torch::nn::Linear category_head{nullptr};    // V_ret -> C_cat logits
  ModalityCritic critic{nullptr};
  ImageDiscriminator discriminator{nullptr};
  ImageClassifier classifier{nullptr};

 private:
  ModelConfig config_;
  std::int64_t vocab_size_;
};
TORCH_MODULE(CrossModalModel);

// FNV-1a over parameter names, shapes and raw bytes, in registration order.
std::uint64_t hash_parameters(const torch::nn::Module& module);

struct CheckpointMeta {
  std::string model_fingerprint;
  std::string config_fingerprint;
  std::string config_text;
  std::vector<std::string> vocabulary;
  std::int64_t paired_steps = 0;
  std::int64_t recipe_only_steps = 0;
  std::int64_t epoch = 0;  // epochs completed
  double best_medR = 0;
};

// Named tensors of `module` plus optional optimizer states.
struct CheckpointOptimizers {
  torch::optim::Optimizer* main = nullptr;
  torch::optim::Optimizer* critic = nullptr;
  torch::optim::Optimizer* discriminator = nullptr;
};

void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module,
                     const CheckpointMeta& meta, const CheckpointOptimizers& optimizers = {});

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

// Verifies the model fingerprint and every tensor shape before copying.
CheckpointMeta load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module,
                               const std::string& expected_model_fingerprint,
                               const CheckpointOptimizers& optimizers = {});

// In-memory snapshot of parameters and buffers.
std::vector<std::pair<std::string, torch::Tensor>> snapshot_state(const torch::nn::Module& module);
void restore_state(torch::nn::Module& module, const std::vector<std::pair<std::string, torch::Tensor>>& state);

}  // namespace xmodal
