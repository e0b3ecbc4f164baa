#pragma once

#include <torch/torch.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodal/config.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/evaluation.hpp"
#include "xmodal/generation.hpp"
#include "xmodal/losses.hpp"
#include "xmodal/model.hpp"

namespace xmodal {

// Append-only JSON-lines log: one header, then step and eval records, then
// a footer. Records are kept in memory and optionally streamed to a file.
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(const std::filesystem::path& path, bool append = false);

  void header(const TrainConfig& config, const std::string& fingerprint);
  void step(const std::string& kind, std::int64_t step, std::int64_t epoch, const LossReport& report);
  void eval(const std::string& split, std::int64_t step, std::int64_t epoch, const MetricsReport& report);
  void footer(const nlohmann::json& extra = {});

  const std::vector<nlohmann::json>& records() const { return records_; }
  std::vector<nlohmann::json> records_of(const std::string& type) const;
  double elapsed_seconds() const;

  static RunLog read(const std::filesystem::path& path);

 private:
  void append(nlohmann::json record);

  std::vector<nlohmann::json> records_;
  std::unique_ptr<std::ofstream> out_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Model, vocabulary and optimizer state for one training run.
class TrainState {
 public:
  TrainState(const TrainConfig& config, Vocabulary vocab);

  const TrainConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  CrossModalModel& model() { return model_; }
  AdversarialTrainer& adversarial() { return *adversarial_; }
  torch::optim::Adam& optimizer() { return *optimizer_; }
  std::string model_fingerprint() const;

  std::int64_t paired_steps = 0;
  std::int64_t recipe_only_steps = 0;
  std::int64_t epoch = 0;  // epochs completed
  double best_medR = 0;    // 0 until the first evaluation

  void save(const std::filesystem::path& path);
  // Restores parameters, optimizers and counters; the vocabulary and config
  // of the checkpoint must match this state.
  void load(const std::filesystem::path& path);

 private:
  TrainConfig config_;
  Vocabulary vocab_;
  CrossModalModel model_{nullptr};
  std::unique_ptr<torch::optim::Adam> optimizer_;
  std::unique_ptr<AdversarialTrainer> adversarial_;
};

// One paired step: encoders forward, adversarial updates (critic n_critic
// times, image discriminator once) and one update of encoders, generator and
// heads on the total loss.
LossReport training_step(const Batch& batch, TrainState& state);

// lambda1 * L_rec on a recipe-only batch; touches only the recipe branches and
// projection heads.
LossReport recipe_only_step(const Batch& batch, TrainState& state);

// Held-out L_rec (eval mode, no gradient), averaged over full batches.
double evaluate_recipe_loss(const std::vector<Recipe>& split, TrainState& state, std::int64_t batch_size);

// Retrieval-space embeddings (V, R) of a paired split in eval mode.
std::pair<torch::Tensor, torch::Tensor> embed_pairs(const std::vector<Recipe>& split, TrainState& state,
                                                    std::int64_t batch_size = 128);

struct EvaluationOptions {
  std::int64_t group_size = 0;  // 0 = whole split
  std::int64_t n_groups = 1;
  std::uint64_t seed = 0;
  bool with_fid = false;
  FeatureExtractor extractor = FeatureExtractor::raw_pool;
  ImageClassifier* classifier = nullptr;
};

MetricsReport evaluate_split(const std::vector<Recipe>& split, TrainState& state, const EvaluationOptions& options);

struct TrainResult {
  std::unique_ptr<TrainState> state;  // holds the best-validation weights
  RunLog log;
  std::optional<MetricsReport> best_validation;
  std::filesystem::path best_checkpoint;  // empty unless checkpoint_dir is set
};

struct TrainOptions {
  std::filesystem::path log_path;     // stream the RunLog here when non-empty
  std::filesystem::path resume_from;  // checkpoint to continue from
  bool quiet = false;
};

// Builds the vocabulary from the training text, tokenizes the corpus (in
// place) and trains.
TrainResult train(const TrainConfig& config, CorpusSplit& corpus, const TrainOptions& options = {});

struct SweepRow {
  std::int64_t batch_size = 0;
  bool ok = false;
  std::string error;
  RetrievalMetrics image_to_recipe;
  RetrievalMetrics recipe_to_image;
  std::optional<double> fid;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::int64_t steps = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SweepReport from_json(const nlohmann::json& j);
  std::string to_csv() const;
};

inline constexpr const char* kSweepColumns =
    "batch_size,medR_i2r,r1_i2r,r5_i2r,r10_i2r,medR_r2i,r1_r2i,r5_r2i,r10_r2i,fid";

// Trains once per batch size with the same seed and the same number of
// optimizer steps (config.max_steps, or epochs x the batches per epoch of
// the largest size), then evaluates on the test split.
SweepReport batch_size_sweep(const TrainConfig& config, const std::vector<std::int64_t>& sizes,
                             CorpusSplit& corpus, bool quiet = true);

// Synthetic corpus from the corpus_* config keys.
CorpusSplit synthetic_corpus_for(const TrainConfig& config);

}  // namespace xmodal
