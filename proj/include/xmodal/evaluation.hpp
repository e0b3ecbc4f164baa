#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "xmodal/config.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/generation.hpp"

namespace xmodal {

enum class Direction { image_to_recipe, recipe_to_image };
enum class DistanceMetric { euclidean, cosine_distance };
std::string_view to_string(Direction d);
std::string_view to_string(DistanceMetric m);

struct RankingResult {
  std::vector<std::int64_t> ranks;  // 1-based
  Direction direction = Direction::image_to_recipe;
  std::int64_t group_size = 0;
};

// rank_i = 1 + #{j != i : d(q_i, g_j) <= d(q_i, g_i)}; ties count against the
// query. Distances are computed in blocks of queries.
RankingResult rank_matrix(const torch::Tensor& queries, const torch::Tensor& gallery,
                          DistanceMetric metric = DistanceMetric::euclidean,
                          Direction direction = Direction::image_to_recipe);

struct RetrievalMetrics {
  double medR = 0, r1 = 0, r5 = 0, r10 = 0;
};

RetrievalMetrics retrieval_metrics(const std::vector<std::int64_t>& ranks);
RetrievalMetrics retrieval_metrics(const RankingResult& result);

struct GroupMetrics {
  RetrievalMetrics image_to_recipe;
  RetrievalMetrics recipe_to_image;
};

struct MetricsReport {
  std::vector<GroupMetrics> groups;
  GroupMetrics mean;
  std::int64_t group_size = 0;
  std::int64_t n_groups = 0;
  std::uint64_t seed = 0;
  std::optional<double> fid;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

// Empty string when valid, otherwise a description of the first problem.
std::string metrics_schema_error(const nlohmann::json& j);

// n_groups subsets of group_size drawn without replacement inside a group
// (groups may overlap), each from its own seed mix_seed(seed, g). Image-to-
// recipe uses V as queries, recipe-to-image uses R.
MetricsReport sampled_protocol(const torch::Tensor& V, const torch::Tensor& R, std::int64_t group_size,
                               std::int64_t n_groups, std::uint64_t seed,
                               DistanceMetric metric = DistanceMetric::euclidean);

struct FeatureSet {
  torch::Tensor features;  // (N, d_feat), float64
  std::string extractor;
};

// Frechet distance between Gaussian fits (unbiased covariance). Negative
// eigenvalues down to -1e-6 (relative to the largest) are clamped to 0.
double fid(const FeatureSet& real, const FeatureSet& generated);

// raw_pool: per-channel mean then per-channel variance (6 values).
// trained_classifier_head: penultimate layer of `classifier`.
FeatureSet extract_features(const torch::Tensor& images, FeatureExtractor extractor,
                            ImageClassifier* classifier = nullptr);
FeatureSet extract_features(const std::vector<ImageTensor>& images, FeatureExtractor extractor,
                            ImageClassifier* classifier = nullptr);

// Trains a small category classifier on real images for the FID extractor.
ImageClassifier train_feature_classifier(const std::vector<Recipe>& paired, const ModelConfig& model,
                                         std::int64_t steps, std::int64_t batch_size, std::uint64_t seed);

// Embedding export: CSV rows "id,x0,x1,...".
void write_embeddings_csv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                          const torch::Tensor& embeddings);
torch::Tensor read_embeddings_csv(const std::filesystem::path& path, std::vector<std::string>* ids = nullptr);

}  // namespace xmodal
