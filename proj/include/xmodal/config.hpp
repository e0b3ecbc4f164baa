#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace xmodal {

enum class AdversarialForm { wgan_gp, log_form, least_squares };
enum class Mining { hardest_in_batch, all_negatives };
enum class Backbone { patch_transformer, small_conv };
enum class MergeMode { concat_linear, transformer };
enum class FeatureExtractor { raw_pool, trained_classifier_head };

std::string_view to_string(AdversarialForm v);
std::string_view to_string(Mining v);
std::string_view to_string(Backbone v);
std::string_view to_string(MergeMode v);
std::string_view to_string(FeatureExtractor v);

void parse_value(std::string_view text, AdversarialForm& out);
void parse_value(std::string_view text, Mining& out);
void parse_value(std::string_view text, Backbone& out);
void parse_value(std::string_view text, MergeMode& out);
void parse_value(std::string_view text, FeatureExtractor& out);

// Shapes of every learnable component. Changing any of these changes the
// checkpoint fingerprint.
struct ModelConfig {
  std::int64_t max_len = 16;
  std::int64_t d_model = 64;
  std::int64_t d_ret = 64;
  std::int64_t n_heads = 4;
  std::int64_t d_ff = 128;
  std::int64_t n_layers = 2;
  double dropout = 0.1;
  MergeMode merge_mode = MergeMode::concat_linear;
  std::int64_t image_size = 32;
  std::int64_t patch = 8;
  Backbone backbone = Backbone::patch_transformer;
  std::int64_t image_layers = 2;
  std::int64_t conv_channels = 32;
  std::int64_t num_categories = 20;
  std::int64_t num_ingredients = 100;
  std::int64_t g_res = 32;
  std::int64_t d_noise = 0;
  std::int64_t g_channels = 64;
  std::int64_t d_channels = 32;
  std::int64_t critic_hidden = 128;

  void validate() const;
};

struct LossConfig {
  double margin = 0.3;
  double lambda1 = 0.05;
  double lambda2 = 0.005;
  double lambda3 = 0.002;
  double lambda_gp = 10.0;
  // Modality critic D_M: wgan_gp or log_form.
  AdversarialForm adversarial_form = AdversarialForm::wgan_gp;
  // Image GAN (G vs D_r2i): least_squares, wgan_gp or log_form.
  AdversarialForm image_gan_form = AdversarialForm::least_squares;
  Mining mining = Mining::hardest_in_batch;

  void validate() const;
};

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;

  std::int64_t epochs = 30;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::int64_t batch_size = 32;
  bool use_rec = true;
  bool use_ma = true;
  bool use_trans_r = true;
  bool use_trans_i = true;
  bool use_recipe_only = true;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 1;
  std::string checkpoint_dir;

  // 0 selects the form default: 5 for wgan_gp, 1 otherwise.
  std::int64_t n_critic = 0;
  double critic_lr = 1e-4;
  double disc_lr = 1e-4;
  // When > 0, training stops after this many paired steps regardless of
  // epochs (batch-size sweeps equalize on it).
  std::int64_t max_steps = 0;
  // 0 evaluates on the whole validation split as one group.
  std::int64_t eval_group_size = 0;
  std::int64_t eval_groups = 1;
  FeatureExtractor fid_extractor = FeatureExtractor::raw_pool;
  std::int64_t fid_classifier_steps = 200;

  // Synthetic corpus used when no dataset file is given.
  std::int64_t corpus_paired = 2000;
  std::int64_t corpus_recipe_only = 4000;
  std::int64_t corpus_val = 500;
  std::int64_t corpus_test = 500;
  std::uint64_t corpus_seed = 7;

  std::int64_t effective_n_critic() const;
  void validate() const;
};

// Applies key=value pairs using the field names above; unknown keys and
// unparsable values raise config errors.
void set_config_value(TrainConfig& config, std::string_view key, std::string_view value);
std::optional<std::string> get_config_value(const TrainConfig& config, std::string_view key);
std::vector<std::string> config_keys();

// Flat "key = value" text, '#' comments.
TrainConfig parse_config_text(std::string_view text, TrainConfig base = {});
TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base = {});
std::string serialize_config(const TrainConfig& config);
std::map<std::string, std::string> config_map(const TrainConfig& config);

// Hash of every key (run identity) and of the model-shape keys only
// (checkpoint compatibility).
std::string config_fingerprint(const TrainConfig& config);
std::string model_fingerprint(const ModelConfig& model, std::int64_t vocab_size);

std::uint64_t fnv1a(std::string_view data, std::uint64_t hash = 0xcbf29ce484222325ULL);
std::string to_hex(std::uint64_t value);

}  // namespace xmodal
