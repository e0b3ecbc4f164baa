#include "xmodal/encoders.hpp"

#include <cmath>

#include "xmodal/error.hpp"

namespace xmodal {
namespace {

std::int64_t real_length(const TokenSeq& seq) {
  std::int64_t n = static_cast<std::int64_t>(seq.size());
  while (n > 0 && seq[static_cast<std::size_t>(n - 1)] == kPad) --n;
  return n;
}

// (N, L) int64 from sequences, right-padded with PAD to the longest real length.
torch::Tensor pack_sequences(const std::vector<const TokenSeq*>& seqs) {
  std::int64_t width = 1;
  for (const auto* s : seqs) width = std::max(width, real_length(*s));
  auto out = torch::full({static_cast<std::int64_t>(seqs.size()), width}, kPad, torch::kInt64);
  auto acc = out.accessor<std::int64_t, 2>();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto n = std::min(width, static_cast<std::int64_t>(seqs[i]->size()));
    for (std::int64_t t = 0; t < n; ++t) acc[static_cast<std::int64_t>(i)][t] = (*seqs[i])[static_cast<std::size_t>(t)];
  }
  return out;
}

void pack_component(std::span<const Recipe* const> recipes,
                    const std::vector<TokenSeq> Recipe::*component, torch::Tensor& tokens,
                    torch::Tensor& valid) {
  const auto B = static_cast<std::int64_t>(recipes.size());
  std::int64_t max_sentences = 1;
  std::int64_t width = 1;
  for (const Recipe* r : recipes) {
    const auto& sentences = r->*component;
    max_sentences = std::max<std::int64_t>(max_sentences, static_cast<std::int64_t>(sentences.size()));
    for (const auto& s : sentences) width = std::max(width, real_length(s));
  }
  tokens = torch::full({B, max_sentences, width}, kPad, torch::kInt64);
  valid = torch::zeros({B, max_sentences}, torch::kBool);
  auto tok = tokens.accessor<std::int64_t, 3>();
  auto val = valid.accessor<bool, 2>();
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& sentences = recipes[static_cast<std::size_t>(b)]->*component;
    for (std::size_t m = 0; m < sentences.size(); ++m) {
      val[b][static_cast<std::int64_t>(m)] = true;
      const auto n = std::min(width, static_cast<std::int64_t>(sentences[m].size()));
      for (std::int64_t t = 0; t < n; ++t) tok[b][static_cast<std::int64_t>(m)][t] = sentences[m][static_cast<std::size_t>(t)];
    }
  }
}

torch::Tensor masked_mean(const torch::Tensor& x, const torch::Tensor& valid) {
  auto w = valid.to(x.dtype()).unsqueeze(-1);
  return (x * w).sum(1) / w.sum(1);
}

}  // namespace

void require_finite(const torch::Tensor& t, const char* module, const char* operation,
                    const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    fail(ErrorKind::non_finite, module, operation, std::string(what) + " contains NaN or Inf");
  }
}

TransformerOptions transformer_options(const ModelConfig& c) {
  return TransformerOptions{c.d_model, c.n_heads, c.d_ff, c.n_layers, c.dropout};
}

torch::Tensor sinusoidal_encoding(std::int64_t length, std::int64_t d_model,
                                  const torch::TensorOptions& options) {
  auto pe = torch::zeros({length, d_model}, torch::kFloat64);
  auto acc = pe.accessor<double, 2>();
  for (std::int64_t pos = 0; pos < length; ++pos) {
    for (std::int64_t i = 0; i < d_model; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model));
      const double angle = static_cast<double>(pos) * rate;
      acc[pos][i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe.to(options.has_dtype() ? options.dtype().toScalarType() : torch::kFloat32);
}

EncoderLayerImpl::EncoderLayerImpl(std::int64_t d_model, std::int64_t n_heads, std::int64_t d_ff,
                                   double dropout_rate)
    : n_heads_(n_heads) {
  if (d_model % n_heads != 0) {
    fail(ErrorKind::config, "encoders", "EncoderLayer", "d_model must be divisible by n_heads");
  }
  query = register_module("query", torch::nn::Linear(d_model, d_model));
  key = register_module("key", torch::nn::Linear(d_model, d_model));
  value = register_module("value", torch::nn::Linear(d_model, d_model));
  output = register_module("output", torch::nn::Linear(d_model, d_model));
  ff1 = register_module("ff1", torch::nn::Linear(d_model, d_ff));
  ff2 = register_module("ff2", torch::nn::Linear(d_ff, d_model));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  dropout = register_module("dropout", torch::nn::Dropout(dropout_rate));
}

torch::Tensor EncoderLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& key_valid) {
  if (identity_) return x;
  const auto N = x.size(0);
  const auto L = x.size(1);
  const auto d = x.size(2);
  const auto dh = d / n_heads_;
  auto heads = [&](const torch::Tensor& t) { return t.view({N, L, n_heads_, dh}).transpose(1, 2); };
  auto q = heads(query(x));
  auto k = heads(key(x));
  auto v = heads(value(x));
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  auto blocked = key_valid.logical_not().view({N, 1, 1, L});
  scores = scores.masked_fill(blocked, -std::numeric_limits<double>::infinity());
  auto attn = dropout(torch::softmax(scores, -1));
  auto context = torch::matmul(attn, v).transpose(1, 2).reshape({N, L, d});
  auto h = norm1(x + dropout(output(context)));
  auto ff = ff2(dropout(torch::relu(ff1(h))));
  return norm2(h + dropout(ff));
}

SequenceEncoderImpl::SequenceEncoderImpl(const TransformerOptions& o, std::int64_t vocab_size)
    : d_model_(o.d_model) {
  if (vocab_size > 0) {
    embedding = register_module("embedding", torch::nn::Embedding(vocab_size, o.d_model));
  }
  layers = register_module("layers", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < o.n_layers; ++i) {
    layers->push_back(EncoderLayer(o.d_model, o.n_heads, o.d_ff, o.dropout));
  }
}

void SequenceEncoderImpl::set_identity_layers(bool identity) {
  for (auto& m : *layers) m->as<EncoderLayerImpl>()->set_identity(identity);
}

torch::Tensor SequenceEncoderImpl::encode_tokens(const torch::Tensor& tokens) {
  if (!embedding) {
    fail(ErrorKind::config, "encoders", "tr_encode", "encoder has no token embedding");
  }
  if (tokens.dim() != 2 || tokens.size(1) == 0) {
    fail(ErrorKind::validation, "encoders", "tr_encode", "expected (N, L) tokens with L >= 1");
  }
  auto valid = tokens.ne(kPad);
  if (valid.any(1).logical_not().any().item<bool>()) {
    fail(ErrorKind::empty_sentence, "encoders", "tr_encode", "all-PAD token sequence");
  }
  return encode_vectors(embedding(tokens), valid);
}

torch::Tensor SequenceEncoderImpl::encode_vectors(const torch::Tensor& x, const torch::Tensor& valid) {
  const auto L = x.size(1);
  auto h = x;
  if (positional_scale_ != 0.0) {
    h = h + positional_scale_ * sinusoidal_encoding(L, d_model_, x.options()).unsqueeze(0);
  }
  for (auto& m : *layers) h = m->as<EncoderLayerImpl>()->forward(h, valid);
  return masked_mean(h, valid);
}

HierarchicalEncoderImpl::HierarchicalEncoderImpl(const TransformerOptions& o, std::int64_t vocab_size) {
  sentence_level = register_module("sentence_level", SequenceEncoder(o, vocab_size));
  document_level = register_module("document_level", SequenceEncoder(o, 0));
}

torch::Tensor HierarchicalEncoderImpl::forward(const torch::Tensor& tokens,
                                               const torch::Tensor& sentence_valid) {
  const auto B = tokens.size(0);
  const auto M = tokens.size(1);
  const auto L = tokens.size(2);
  if (M == 0 || sentence_valid.any(1).logical_not().any().item<bool>()) {
    fail(ErrorKind::empty_component, "encoders", "htr_encode", "component with zero sentences");
  }
  auto flat_valid = sentence_valid.reshape({B * M});
  auto idx = flat_valid.nonzero().squeeze(1);
  auto sentences = sentence_level->encode_tokens(tokens.reshape({B * M, L}).index_select(0, idx));
  auto slots = torch::zeros({B * M, sentences.size(1)}, sentences.options()).index_copy(0, idx, sentences);
  return document_level->encode_vectors(slots.view({B, M, -1}), sentence_valid);
}

std::string_view to_string(Space space) {
  switch (space) {
    case Space::title: return "ttl";
    case Space::ingredients: return "ing";
    case Space::instructions: return "ins";
  }
  return "?";
}

std::size_t ProjectionHeadsImpl::index(Space from, Space to) {
  const auto f = static_cast<std::size_t>(from);
  const auto t = static_cast<std::size_t>(to);
  return f * 2 + (t < f ? t : t - 1);
}

ProjectionHeadsImpl::ProjectionHeadsImpl(std::int64_t d_model) {
  for (Space from : kSpaces) {
    for (Space to : kSpaces) {
      if (from == to) continue;
      const std::string name = std::string(to_string(from)) + "_to_" + std::string(to_string(to));
      heads_[index(from, to)] =
          register_module(name, torch::nn::Linear(torch::nn::LinearOptions(d_model, d_model).bias(false)));
    }
  }
}

torch::nn::Linear& ProjectionHeadsImpl::head(Space from, Space to) {
  if (from == to) {
    fail(ErrorKind::invalid_projection, "encoders", "project",
         "no projection from a space to itself (" + std::string(to_string(from)) + ")");
  }
  return heads_[index(from, to)];
}

torch::Tensor ProjectionHeadsImpl::project(const torch::Tensor& e, Space from, Space to) {
  return head(from, to)->forward(e);
}

void ProjectionHeadsImpl::set_identity() {
  torch::NoGradGuard guard;
  for (auto& h : heads_) {
    const auto d = h->weight.size(0);
    h->weight.copy_(torch::eye(d, h->weight.options()));
  }
}

MergeEncoderImpl::MergeEncoderImpl(MergeMode mode, const TransformerOptions& o) : mode_(mode) {
  if (mode == MergeMode::concat_linear) {
    linear = register_module("linear", torch::nn::Linear(3 * o.d_model, o.d_model));
  } else {
    transformer = register_module("transformer", SequenceEncoder(o, 0));
  }
}

torch::Tensor MergeEncoderImpl::forward(const torch::Tensor& title, const torch::Tensor& ingredients,
                                        const torch::Tensor& instructions) {
  if (mode_ == MergeMode::concat_linear) {
    return linear(torch::cat({title, ingredients, instructions}, -1));
  }
  auto seq = torch::stack({title, ingredients, instructions}, 1);
  auto valid = torch::ones({seq.size(0), 3}, torch::TensorOptions().dtype(torch::kBool));
  return transformer->encode_vectors(seq, valid);
}

void MergeEncoderImpl::set_averaging() {
  if (mode_ != MergeMode::concat_linear) {
    fail(ErrorKind::config, "encoders", "E_mrg", "averaging weights need concat_linear mode");
  }
  torch::NoGradGuard guard;
  const auto d = linear->weight.size(0);
  auto third = torch::eye(d, linear->weight.options()) / 3.0;
  linear->weight.copy_(torch::cat({third, third, third}, 1));
  linear->bias.zero_();
}

RecipeTokens pack_recipes(std::span<const Recipe* const> recipes) {
  if (recipes.empty()) fail(ErrorKind::validation, "encoders", "encode_recipe", "no recipes to pack");
  std::vector<const TokenSeq*> titles;
  for (const Recipe* r : recipes) {
    if (!r->tokenized()) {
      fail(ErrorKind::validation, "encoders", "encode_recipe", "recipe '" + r->id + "' is not tokenized");
    }
    titles.push_back(&r->title_tokens);
  }
  RecipeTokens out;
  out.title = pack_sequences(titles);
  pack_component(recipes, &Recipe::ingredient_tokens, out.ingredients, out.ingredient_valid);
  pack_component(recipes, &Recipe::instruction_tokens, out.instructions, out.instruction_valid);
  return out;
}

const torch::Tensor& ComponentEmbeddings::operator[](Space space) const {
  switch (space) {
    case Space::title: return title;
    case Space::ingredients: return ingredients;
    default: return instructions;
  }
}

RecipeEncoderImpl::RecipeEncoderImpl(const ModelConfig& c, std::int64_t vocab_size) {
  const auto o = transformer_options(c);
  title = register_module("title", SequenceEncoder(o, vocab_size));
  ingredients = register_module("ingredients", HierarchicalEncoder(o, vocab_size));
  instructions = register_module("instructions", HierarchicalEncoder(o, vocab_size));
  heads = register_module("heads", ProjectionHeads(c.d_model));
  merger = register_module("merger", MergeEncoder(c.merge_mode, o));
  retrieval = register_module("retrieval", torch::nn::Linear(c.d_model, c.d_ret));
}

ComponentEmbeddings RecipeEncoderImpl::encode_components(const RecipeTokens& t) {
  ComponentEmbeddings e;
  e.title = title->encode_tokens(t.title);
  e.ingredients = ingredients->forward(t.ingredients, t.ingredient_valid);
  e.instructions = instructions->forward(t.instructions, t.instruction_valid);
  return e;
}

torch::Tensor RecipeEncoderImpl::merge(const ComponentEmbeddings& e) {
  return merger->forward(e.title, e.ingredients, e.instructions);
}

RecipeEncoding RecipeEncoderImpl::forward(const RecipeTokens& tokens) {
  RecipeEncoding out;
  out.components = encode_components(tokens);
  out.recipe = merge(out.components);
  require_finite(out.recipe, "encoders", "encode_recipe", "recipe embedding");
  return out;
}

torch::Tensor RecipeEncoderImpl::to_retrieval_space(const torch::Tensor& r) { return retrieval(r); }

ImageEncoderImpl::ImageEncoderImpl(const ModelConfig& c)
    : backbone_(c.backbone), image_size_(c.image_size), patch_(c.patch), backbone_dim_(c.d_model) {
  if (backbone_ == Backbone::patch_transformer) {
    if (c.image_size % c.patch != 0) {
      fail(ErrorKind::config, "encoders", "ImageEncoder", "image_size must be divisible by patch");
    }
    patch_embed = register_module("patch_embed", torch::nn::Linear(3 * c.patch * c.patch, c.d_model));
    layers = register_module("layers", torch::nn::ModuleList());
    for (std::int64_t i = 0; i < c.image_layers; ++i) {
      layers->push_back(EncoderLayer(c.d_model, c.n_heads, c.d_ff, c.dropout));
    }
  } else {
    const auto ch = c.conv_channels;
    conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, ch, 3).padding(1)));
    conv2 = register_module("conv2",
                            torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 2 * ch, 3).stride(2).padding(1)));
    conv3 = register_module("conv3",
                            torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * ch, 2 * ch, 3).stride(2).padding(1)));
    conv_out = register_module("conv_out", torch::nn::Linear(2 * ch, c.d_model));
  }
  retrieval = register_module("retrieval", torch::nn::Linear(c.d_model, c.d_ret));
}

void ImageEncoderImpl::set_identity_layers(bool identity) {
  if (!layers) return;
  for (auto& m : *layers) m->as<EncoderLayerImpl>()->set_identity(identity);
}

torch::Tensor ImageEncoderImpl::patch_tokens(const torch::Tensor& images) const {
  const auto B = images.size(0);
  const auto grid = image_size_ / patch_;
  return images.unfold(2, patch_, patch_)
      .unfold(3, patch_, patch_)          // (B, 3, g, g, p, p)
      .permute({0, 2, 3, 1, 4, 5})        // (B, g, g, 3, p, p)
      .reshape({B, grid * grid, 3 * patch_ * patch_});
}

torch::Tensor ImageEncoderImpl::forward(const torch::Tensor& images_in) {
  if (images_in.dim() != 4 || images_in.size(1) != 3 || images_in.size(2) != image_size_ ||
      images_in.size(3) != image_size_) {
    fail(ErrorKind::validation, "encoders", "encode_image",
         "expected (B, 3, " + std::to_string(image_size_) + ", " + std::to_string(image_size_) +
             ") images, got " + std::string(c10::str(images_in.sizes())));
  }
  const auto dtype = retrieval->weight.scalar_type();
  auto images = images_in.to(dtype);
  torch::Tensor v;
  if (backbone_ == Backbone::patch_transformer) {
    auto tokens = patch_embed(patch_tokens(images));
    tokens = tokens + sinusoidal_encoding(tokens.size(1), backbone_dim_, tokens.options()).unsqueeze(0);
    auto valid = torch::ones({tokens.size(0), tokens.size(1)}, torch::TensorOptions().dtype(torch::kBool));
    for (auto& m : *layers) tokens = m->as<EncoderLayerImpl>()->forward(tokens, valid);
    if (patch_token_hook_) patch_token_hook_(tokens);
    v = tokens.mean(1);
  } else {
    auto h = torch::relu(conv1(images));
    h = torch::relu(conv2(h));
    h = torch::relu(conv3(h));
    v = conv_out(h.mean({2, 3}));
  }
  require_finite(v, "encoders", "encode_image", "image embedding");
  return v;
}

torch::Tensor ImageEncoderImpl::to_retrieval_space(const torch::Tensor& v) { return retrieval(v); }

torch::Tensor tr_encode(const TokenSeq& tokens, SequenceEncoder& encoder) {
  if (tokens.empty()) fail(ErrorKind::empty_sentence, "encoders", "tr_encode", "empty token sequence");
  auto t = torch::tensor(tokens, torch::kInt64).unsqueeze(0);
  auto out = encoder->encode_tokens(t).squeeze(0);
  require_finite(out, "encoders", "tr_encode", "sentence embedding");
  return out;
}

torch::Tensor htr_encode(const std::vector<TokenSeq>& sentences, HierarchicalEncoder& encoder) {
  if (sentences.empty()) fail(ErrorKind::empty_component, "encoders", "htr_encode", "M = 0 sentences");
  std::vector<const TokenSeq*> ptrs;
  for (const auto& s : sentences) ptrs.push_back(&s);
  auto tokens = pack_sequences(ptrs).unsqueeze(0);
  auto valid = torch::ones({1, static_cast<std::int64_t>(sentences.size())},
                           torch::TensorOptions().dtype(torch::kBool));
  auto out = encoder->forward(tokens, valid).squeeze(0);
  require_finite(out, "encoders", "htr_encode", "component embedding");
  return out;
}

RecipeEncoding encode_recipe(const Recipe& recipe, RecipeEncoder& encoder) {
  const Recipe* one[] = {&recipe};
  auto enc = encoder->forward(pack_recipes(one));
  enc.components.title = enc.components.title.squeeze(0);
  enc.components.ingredients = enc.components.ingredients.squeeze(0);
  enc.components.instructions = enc.components.instructions.squeeze(0);
  enc.recipe = enc.recipe.squeeze(0);
  return enc;
}

torch::Tensor project(const torch::Tensor& e, Space from, Space to, ProjectionHeads& heads) {
  return heads->project(e, from, to);
}

torch::Tensor encode_image(const ImageTensor& image, ImageEncoder& encoder) {
  if (image.empty()) fail(ErrorKind::validation, "encoders", "encode_image", "empty image");
  return encoder->forward(image.pixels().unsqueeze(0)).squeeze(0);
}

torch::Tensor to_retrieval_space(const torch::Tensor& e, Modality which, RecipeEncoder& recipe,
                                 ImageEncoder& image) {
  if (which == Modality::recipe) {
    if (e.size(-1) != recipe->retrieval->weight.size(1)) {
      fail(ErrorKind::validation, "encoders", "to_retrieval_space", "recipe embedding has wrong width");
    }
    return recipe->to_retrieval_space(e);
  }
  if (e.size(-1) != image->retrieval->weight.size(1)) {
    fail(ErrorKind::validation, "encoders", "to_retrieval_space", "image embedding has wrong width");
  }
  return image->to_retrieval_space(e);
}

}  // namespace xmodal
