#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace xmodal {

inline constexpr std::int64_t kPad = 0;
inline constexpr std::int64_t kUnk = 1;
inline constexpr std::int64_t kBos = 2;
inline constexpr std::int64_t kEos = 3;

using TokenSeq = std::vector<std::int64_t>;

// RGB image, float32 (3, H, W) with H == W and values in [0, 1].
class ImageTensor {
 public:
  ImageTensor() = default;
  explicit ImageTensor(torch::Tensor pixels);

  const torch::Tensor& pixels() const { return pixels_; }
  std::int64_t size() const { return pixels_.defined() ? pixels_.size(1) : 0; }
  bool empty() const { return !pixels_.defined(); }

 private:
  torch::Tensor pixels_;
};

class Vocabulary {
 public:
  Vocabulary();

  std::int64_t add(std::string_view token);
  // UNK for unknown tokens.
  std::int64_t id(std::string_view token) const;
  const std::string& token(std::int64_t id) const;
  bool contains(std::string_view token) const;
  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> ids_;
};

// Lowercases and splits on whitespace and punctuation.
std::vector<std::string> split_words(std::string_view sentence);

// [BOS, words..., PAD...] of length exactly max_len (truncating if needed).
TokenSeq tokenize(std::string_view sentence, const Vocabulary& vocab, std::int64_t max_len);

struct Recipe {
  std::string id;
  std::string title;
  std::vector<std::string> ingredients;
  std::vector<std::string> instructions;
  std::int64_t category = 0;
  std::vector<std::int64_t> ingredient_ids;
  std::optional<ImageTensor> image;

  // Filled by tokenize_recipe.
  TokenSeq title_tokens;
  std::vector<TokenSeq> ingredient_tokens;
  std::vector<TokenSeq> instruction_tokens;

  bool tokenized() const { return !title_tokens.empty(); }
};

void tokenize_recipe(Recipe& recipe, const Vocabulary& vocab, std::int64_t max_len);
void validate_recipe(const Recipe& recipe, std::int64_t num_categories,
                     std::int64_t num_ingredients);

struct CorpusSplit {
  std::vector<Recipe> train_paired;
  std::vector<Recipe> val_paired;
  std::vector<Recipe> test_paired;
  std::vector<Recipe> train_recipe_only;

  // Disjoint ids; paired records carry images, recipe-only records do not.
  void validate() const;
};

// Vocabulary over the training text (paired and recipe-only).
Vocabulary build_vocabulary(const CorpusSplit& corpus);
void tokenize_corpus(CorpusSplit& corpus, const Vocabulary& vocab, std::int64_t max_len);

struct SyntheticSpec {
  std::int64_t paired = 100;
  std::int64_t val = 0;
  std::int64_t test = 0;
  std::int64_t recipe_only = 0;
  std::uint64_t seed = 7;
  std::int64_t num_categories = 20;
  std::int64_t num_ingredients = 100;
  std::int64_t image_size = 32;
};

// Each record is drawn from a latent dish concept (category plus an
// ingredient set) that drives both the text and a procedurally rendered
// image, so the two modalities share recoverable structure.
CorpusSplit generate_synthetic_corpus(const SyntheticSpec& spec);

// Deterministic rendering of a dish; per-sample jitter and pixel noise come
// from `noise_seed`.
ImageTensor render_dish(std::int64_t category, std::span<const std::int64_t> ingredient_ids,
                        std::int64_t num_categories, std::int64_t image_size,
                        std::uint64_t noise_seed);

std::string ingredient_name(std::int64_t ingredient);
std::string category_name(std::int64_t category);

struct LoadOptions {
  std::int64_t image_size = 32;
  std::int64_t num_categories = 20;
  std::int64_t num_ingredients = 100;
};

// JSON-lines ingestion; image paths resolve relative to the file's directory.
CorpusSplit load_recipe1m_layer(const std::filesystem::path& path, const LoadOptions& options = {});

// Writes `dir/corpus.jsonl` and `dir/images/<id>.png` in the layout that
// load_recipe1m_layer reads.
void write_recipe1m_layer(const CorpusSplit& corpus, const std::filesystem::path& dir);

enum class BatchMode { paired, recipe_only };

struct Batch {
  BatchMode mode = BatchMode::paired;
  // Non-owning; the split must outlive the batch.
  std::vector<const Recipe*> recipes;
  // (B, 3, H, W) when mode == paired.
  std::optional<torch::Tensor> images;
  torch::Tensor categories;           // (B) int64
  torch::Tensor ingredient_multihot;  // (B, C_ing) float32, entries 0/1

  std::int64_t size() const { return static_cast<std::int64_t>(recipes.size()); }
};

Batch assemble_batch(std::span<const Recipe* const> recipes, BatchMode mode,
                     std::int64_t num_ingredients);

// Seeded per-epoch shuffles partitioned into full batches of size B; the
// trailing partial batch is dropped.
class BatchStream {
 public:
  BatchStream(const std::vector<Recipe>& split, std::int64_t batch_size, BatchMode mode,
              std::uint64_t seed, std::int64_t num_ingredients);

  std::int64_t batches_per_epoch() const { return batches_per_epoch_; }
  std::int64_t batch_size() const { return batch_size_; }
  Batch batch(std::int64_t epoch, std::int64_t index) const;
  std::vector<Batch> epoch(std::int64_t epoch) const;

 private:
  std::vector<std::size_t> order(std::int64_t epoch) const;

  const std::vector<Recipe>* split_;
  std::int64_t batch_size_;
  BatchMode mode_;
  std::uint64_t seed_;
  std::int64_t num_ingredients_;
  std::int64_t batches_per_epoch_;
};

// One epoch of batches.
std::vector<Batch> make_batches(const std::vector<Recipe>& split, std::int64_t batch_size,
                                BatchMode mode, std::uint64_t seed,
                                std::int64_t num_ingredients, std::int64_t epoch = 0);

}  // namespace xmodal
