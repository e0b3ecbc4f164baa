#pragma once

#include <torch/torch.h>

#include <array>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "xmodal/config.hpp"
#include "xmodal/corpus.hpp"

namespace xmodal {

struct TransformerOptions {
  std::int64_t d_model = 64;
  std::int64_t n_heads = 4;
  std::int64_t d_ff = 128;
  std::int64_t n_layers = 2;
  double dropout = 0.1;
};

// Sinusoidal table (length, d_model): sin on even, cos on odd dimensions.
torch::Tensor sinusoidal_encoding(std::int64_t length, std::int64_t d_model,
                                  const torch::TensorOptions& options = {});

// Post-norm encoder layer: masked multi-head self-attention and a ReLU
// feed-forward block, each followed by residual + LayerNorm.
class EncoderLayerImpl : public torch::nn::Module {
 public:
  EncoderLayerImpl(std::int64_t d_model, std::int64_t n_heads, std::int64_t d_ff, double dropout);

  // x: (N, L, d); key_valid: (N, L) bool, false positions are never attended.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& key_valid);

  // Test hook: the layer becomes the identity map.
  void set_identity(bool identity) { identity_ = identity; }
  std::int64_t n_heads() const { return n_heads_; }

  torch::nn::Linear query{nullptr}, key{nullptr}, value{nullptr}, output{nullptr};
  torch::nn::Linear ff1{nullptr}, ff2{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Dropout dropout{nullptr};

 private:
  std::int64_t n_heads_;
  bool identity_ = false;
};
TORCH_MODULE(EncoderLayer);

// TR: optional token embedding, positional encoding before the first layer,
// a stack of encoder layers, mean over valid positions of the last layer.
class SequenceEncoderImpl : public torch::nn::Module {
 public:
  // vocab_size == 0 builds a vector-input encoder (HTR level 2, merge).
  SequenceEncoderImpl(const TransformerOptions& options, std::int64_t vocab_size);

  // tokens: (N, L) int64; rows that are entirely PAD are rejected.
  torch::Tensor encode_tokens(const torch::Tensor& tokens);
  // x: (N, L, d); valid: (N, L) bool.
  torch::Tensor encode_vectors(const torch::Tensor& x, const torch::Tensor& valid);

  void set_identity_layers(bool identity);
  void set_positional_scale(double scale) { positional_scale_ = scale; }
  std::int64_t d_model() const { return d_model_; }

  torch::nn::Embedding embedding{nullptr};
  torch::nn::ModuleList layers{nullptr};

 private:
  std::int64_t d_model_;
  double positional_scale_ = 1.0;
};
TORCH_MODULE(SequenceEncoder);

// HTR: level 1 encodes each sentence, level 2 encodes the sequence of
// sentence embeddings.
class HierarchicalEncoderImpl : public torch::nn::Module {
 public:
  HierarchicalEncoderImpl(const TransformerOptions& options, std::int64_t vocab_size);

  // tokens: (B, M, L); sentence_valid: (B, M) bool.
  torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& sentence_valid);

  SequenceEncoder sentence_level{nullptr};
  SequenceEncoder document_level{nullptr};
};
TORCH_MODULE(HierarchicalEncoder);

enum class Space { title = 0, ingredients = 1, instructions = 2 };
inline constexpr std::array<Space, 3> kSpaces = {Space::title, Space::ingredients, Space::instructions};
std::string_view to_string(Space space);

// Six bias-free linear maps g_{a->b}, one per ordered pair of distinct spaces.
class ProjectionHeadsImpl : public torch::nn::Module {
 public:
  explicit ProjectionHeadsImpl(std::int64_t d_model);

  torch::Tensor project(const torch::Tensor& e, Space from, Space to);
  torch::nn::Linear& head(Space from, Space to);
  void set_identity();

 private:
  static std::size_t index(Space from, Space to);
  std::array<torch::nn::Linear, 6> heads_{nullptr, nullptr, nullptr, nullptr, nullptr, nullptr};
};
TORCH_MODULE(ProjectionHeads);

class MergeEncoderImpl : public torch::nn::Module {
 public:
  MergeEncoderImpl(MergeMode mode, const TransformerOptions& options);

  torch::Tensor forward(const torch::Tensor& title, const torch::Tensor& ingredients,
                        const torch::Tensor& instructions);
  // concat_linear only: R = (e_ttl + e_ing + e_ins) / 3.
  void set_averaging();
  MergeMode mode() const { return mode_; }

  torch::nn::Linear linear{nullptr};
  SequenceEncoder transformer{nullptr};

 private:
  MergeMode mode_;
};
TORCH_MODULE(MergeEncoder);

// Packed, trimmed token tensors for a batch of tokenized recipes.
struct RecipeTokens {
  torch::Tensor title;               // (B, L)
  torch::Tensor ingredients;         // (B, M, L)
  torch::Tensor ingredient_valid;    // (B, M) bool
  torch::Tensor instructions;        // (B, M', L')
  torch::Tensor instruction_valid;   // (B, M') bool
};

RecipeTokens pack_recipes(std::span<const Recipe* const> recipes);

struct ComponentEmbeddings {
  torch::Tensor title;
  torch::Tensor ingredients;
  torch::Tensor instructions;

  const torch::Tensor& operator[](Space space) const;
};

struct RecipeEncoding {
  ComponentEmbeddings components;
  torch::Tensor recipe;  // R, (B, d_model)
};

class RecipeEncoderImpl : public torch::nn::Module {
 public:
  RecipeEncoderImpl(const ModelConfig& config, std::int64_t vocab_size);

  ComponentEmbeddings encode_components(const RecipeTokens& tokens);
  torch::Tensor merge(const ComponentEmbeddings& components);
  RecipeEncoding forward(const RecipeTokens& tokens);
  torch::Tensor to_retrieval_space(const torch::Tensor& recipe_embedding);

  SequenceEncoder title{nullptr};
  HierarchicalEncoder ingredients{nullptr};
  HierarchicalEncoder instructions{nullptr};
  ProjectionHeads heads{nullptr};
  MergeEncoder merger{nullptr};
  torch::nn::Linear retrieval{nullptr};
};
TORCH_MODULE(RecipeEncoder);

class ImageEncoderImpl : public torch::nn::Module {
 public:
  explicit ImageEncoderImpl(const ModelConfig& config);

  // images: (B, 3, S, S) -> V (B, backbone_dim).
  torch::Tensor forward(const torch::Tensor& images);
  torch::Tensor to_retrieval_space(const torch::Tensor& image_embedding);

  std::int64_t backbone_dim() const { return backbone_dim_; }
  Backbone backbone() const { return backbone_; }
  // Called with the (B, n_patches, d) token tensor before pooling.
  void set_patch_token_hook(std::function<void(const torch::Tensor&)> hook) {
    patch_token_hook_ = std::move(hook);
  }
  void set_identity_layers(bool identity);

  // patch_transformer
  torch::nn::Linear patch_embed{nullptr};
  torch::nn::ModuleList layers{nullptr};
  // small_conv
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::Linear conv_out{nullptr};

  torch::nn::Linear retrieval{nullptr};

 private:
  torch::Tensor patch_tokens(const torch::Tensor& images) const;

  Backbone backbone_;
  std::int64_t image_size_;
  std::int64_t patch_;
  std::int64_t backbone_dim_;
  std::function<void(const torch::Tensor&)> patch_token_hook_;
};
TORCH_MODULE(ImageEncoder);

TransformerOptions transformer_options(const ModelConfig& config);

// Single-item forms of the encoder operations.
torch::Tensor tr_encode(const TokenSeq& tokens, SequenceEncoder& encoder);
torch::Tensor htr_encode(const std::vector<TokenSeq>& sentences, HierarchicalEncoder& encoder);
RecipeEncoding encode_recipe(const Recipe& recipe, RecipeEncoder& encoder);
torch::Tensor project(const torch::Tensor& e, Space from, Space to, ProjectionHeads& heads);
torch::Tensor encode_image(const ImageTensor& image, ImageEncoder& encoder);

enum class Modality { recipe, image };
torch::Tensor to_retrieval_space(const torch::Tensor& e, Modality which, RecipeEncoder& recipe,
                                 ImageEncoder& image);

// Throws non_finite if any element is NaN or infinite.
void require_finite(const torch::Tensor& t, const char* module, const char* operation,
                    const char* what);

}  // namespace xmodal
