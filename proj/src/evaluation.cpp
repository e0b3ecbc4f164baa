#include "xmodal/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xmodal/error.hpp"
#include "xmodal/random.hpp"

namespace xmodal {

std::string_view to_string(Direction d) {
  return d == Direction::image_to_recipe ? "image_to_recipe" : "recipe_to_image";
}

std::string_view to_string(DistanceMetric m) {
  return m == DistanceMetric::euclidean ? "euclidean" : "cosine_distance";
}

RankingResult rank_matrix(const torch::Tensor& queries_in, const torch::Tensor& gallery_in,
                          DistanceMetric metric, Direction direction) {
  if (queries_in.dim() != 2 || queries_in.sizes() != gallery_in.sizes()) {
    fail(ErrorKind::validation, "evaluation", "rank_matrix",
         "queries and gallery must be index-aligned (N, d), got " + std::string(c10::str(queries_in.sizes())) +
             " and " + std::string(c10::str(gallery_in.sizes())));
  }
  torch::NoGradGuard no_grad;
  auto queries = queries_in.detach().to(torch::kFloat64);
  auto gallery = gallery_in.detach().to(torch::kFloat64);
  if (metric == DistanceMetric::cosine_distance) {
    auto qn = queries.norm(2, 1, true);
    auto gn = gallery.norm(2, 1, true);
    if (qn.eq(0).any().item<bool>() || gn.eq(0).any().item<bool>()) {
      fail(ErrorKind::degenerate_input, "evaluation", "rank_matrix", "cosine distance of a zero vector");
    }
    queries = queries / qn;
    gallery = gallery / gn;
  }
  const auto N = queries.size(0);
  RankingResult out;
  out.direction = direction;
  out.group_size = N;
  out.ranks.reserve(static_cast<std::size_t>(N));
  constexpr std::int64_t kBlock = 32;
  for (std::int64_t start = 0; start < N; start += kBlock) {
    const auto stop = std::min(N, start + kBlock);
    auto q = queries.slice(0, start, stop);
    torch::Tensor d;
    if (metric == DistanceMetric::euclidean) {
      d = (q.unsqueeze(1) - gallery.unsqueeze(0)).pow(2).sum(-1);
    } else {
      d = 1.0 - torch::matmul(q, gallery.t());
    }
    auto idx = torch::arange(start, stop, torch::kInt64);
    auto own = d.gather(1, idx.unsqueeze(1));
    // Count j with d_ij <= d_ii; j = i always counts, which supplies the "1 +".
    auto counts = d.le(own).sum(1);
    auto acc = counts.accessor<std::int64_t, 1>();
    for (std::int64_t k = 0; k < stop - start; ++k) out.ranks.push_back(acc[k]);
  }
  return out;
}

RetrievalMetrics retrieval_metrics(const std::vector<std::int64_t>& ranks_in) {
  if (ranks_in.empty()) fail(ErrorKind::validation, "evaluation", "retrieval_metrics", "no ranks");
  auto ranks = ranks_in;
  std::sort(ranks.begin(), ranks.end());
  const auto n = ranks.size();
  RetrievalMetrics m;
  m.medR = n % 2 == 1 ? static_cast<double>(ranks[n / 2])
                      : 0.5 * static_cast<double>(ranks[n / 2 - 1] + ranks[n / 2]);
  auto recall = [&](std::int64_t k) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::int64_t r) { return r <= k; });
    return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
  };
  m.r1 = recall(1);
  m.r5 = recall(5);
  m.r10 = recall(10);
  return m;
}

RetrievalMetrics retrieval_metrics(const RankingResult& result) { return retrieval_metrics(result.ranks); }

namespace {

nlohmann::json metrics_json(const RetrievalMetrics& m) {
  return {{"medR", m.medR}, {"r1", m.r1}, {"r5", m.r5}, {"r10", m.r10}};
}

RetrievalMetrics metrics_from(const nlohmann::json& j) {
  return {j.at("medR").get<double>(), j.at("r1").get<double>(), j.at("r5").get<double>(),
          j.at("r10").get<double>()};
}

void accumulate(RetrievalMetrics& total, const RetrievalMetrics& m) {
  total.medR += m.medR;
  total.r1 += m.r1;
  total.r5 += m.r5;
  total.r10 += m.r10;
}

void scale(RetrievalMetrics& m, double s) {
  m.medR *= s;
  m.r1 *= s;
  m.r5 *= s;
  m.r10 *= s;
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  for (auto dir : {Direction::image_to_recipe, Direction::recipe_to_image}) {
    nlohmann::json per_group = nlohmann::json::array();
    for (const auto& g : groups) {
      per_group.push_back(metrics_json(dir == Direction::image_to_recipe ? g.image_to_recipe : g.recipe_to_image));
    }
    j[std::string(to_string(dir))] = {
        {"groups", per_group},
        {"mean", metrics_json(dir == Direction::image_to_recipe ? mean.image_to_recipe : mean.recipe_to_image)}};
  }
  j["group_size"] = group_size;
  j["n_groups"] = n_groups;
  j["seed"] = seed;
  if (fid) j["fid"] = *fid;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  if (auto err = metrics_schema_error(j); !err.empty()) {
    fail(ErrorKind::parse, "evaluation", "MetricsReport", err);
  }
  MetricsReport r;
  r.group_size = j.at("group_size").get<std::int64_t>();
  r.n_groups = j.at("n_groups").get<std::int64_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  const auto& i2r = j.at("image_to_recipe");
  const auto& r2i = j.at("recipe_to_image");
  for (std::size_t g = 0; g < i2r.at("groups").size(); ++g) {
    r.groups.push_back({metrics_from(i2r["groups"][g]), metrics_from(r2i["groups"][g])});
  }
  r.mean = {metrics_from(i2r.at("mean")), metrics_from(r2i.at("mean"))};
  if (j.contains("fid") && !j["fid"].is_null()) r.fid = j["fid"].get<double>();
  return r;
}

std::string metrics_schema_error(const nlohmann::json& j) {
  if (!j.is_object()) return "report is not an object";
  for (const char* key : {"group_size", "n_groups", "seed"}) {
    if (!j.contains(key) || !j[key].is_number_integer()) return std::string("missing integer field '") + key + "'";
  }
  const auto n_groups = j["n_groups"].get<std::int64_t>();
  const auto group_size = j["group_size"].get<std::int64_t>();
  if (n_groups < 1 || group_size < 1) return "n_groups and group_size must be positive";
  auto check_metrics = [&](const nlohmann::json& m, const std::string& where) -> std::string {
    if (!m.is_object()) return where + " is not an object";
    for (const char* key : {"medR", "r1", "r5", "r10"}) {
      if (!m.contains(key) || !m[key].is_number()) return where + " lacks numeric '" + key + "'";
      const double v = m[key].get<double>();
      if (!std::isfinite(v)) return where + "." + key + " is not finite";
      if (std::string(key) == "medR" ? (v < 1.0 || v > static_cast<double>(group_size))
                                     : (v < 0.0 || v > 100.0)) {
        return where + "." + key + " is out of range";
      }
    }
    return {};
  };
  for (const char* dir : {"image_to_recipe", "recipe_to_image"}) {
    if (!j.contains(dir) || !j[dir].is_object()) return std::string("missing direction '") + dir + "'";
    const auto& d = j[dir];
    if (!d.contains("groups") || !d["groups"].is_array()) return std::string(dir) + " lacks a groups array";
    if (static_cast<std::int64_t>(d["groups"].size()) != n_groups) return std::string(dir) + " group count mismatch";
    for (std::size_t g = 0; g < d["groups"].size(); ++g) {
      if (auto e = check_metrics(d["groups"][g], std::string(dir) + ".groups[" + std::to_string(g) + "]"); !e.empty()) {
        return e;
      }
    }
    if (!d.contains("mean")) return std::string(dir) + " lacks mean";
    if (auto e = check_metrics(d["mean"], std::string(dir) + ".mean"); !e.empty()) return e;
  }
  if (j.contains("fid") && !j["fid"].is_null()) {
    if (!j["fid"].is_number() || j["fid"].get<double>() < 0) return "fid must be a non-negative number";
  }
  return {};
}

MetricsReport sampled_protocol(const torch::Tensor& V, const torch::Tensor& R, std::int64_t group_size,
                               std::int64_t n_groups, std::uint64_t seed, DistanceMetric metric) {
  if (V.dim() != 2 || V.sizes() != R.sizes()) {
    fail(ErrorKind::validation, "evaluation", "sampled_protocol", "V and R must be aligned (N, d)");
  }
  const auto N = V.size(0);
  if (group_size < 1 || group_size > N) {
    fail(ErrorKind::validation, "evaluation", "sampled_protocol",
         "group_size " + std::to_string(group_size) + " exceeds split size " + std::to_string(N));
  }
  if (n_groups < 1) fail(ErrorKind::validation, "evaluation", "sampled_protocol", "n_groups must be >= 1");
  MetricsReport report;
  report.group_size = group_size;
  report.n_groups = n_groups;
  report.seed = seed;
  for (std::int64_t g = 0; g < n_groups; ++g) {
    torch::Tensor v = V, r = R;
    if (group_size < N) {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(g)));
      auto picks = rng.sample_without_replacement(N, group_size);
      auto idx = torch::tensor(picks, torch::kInt64);
      v = V.index_select(0, idx);
      r = R.index_select(0, idx);
    }
    GroupMetrics gm;
    gm.image_to_recipe = retrieval_metrics(rank_matrix(v, r, metric, Direction::image_to_recipe));
    gm.recipe_to_image = retrieval_metrics(rank_matrix(r, v, metric, Direction::recipe_to_image));
    accumulate(report.mean.image_to_recipe, gm.image_to_recipe);
    accumulate(report.mean.recipe_to_image, gm.recipe_to_image);
    report.groups.push_back(gm);
  }
  scale(report.mean.image_to_recipe, 1.0 / static_cast<double>(n_groups));
  scale(report.mean.recipe_to_image, 1.0 / static_cast<double>(n_groups));
  return report;
}

namespace {

constexpr double kEigenTolerance = 1e-6;

// Symmetric eigen-decomposition with small negative eigenvalues clamped.
std::pair<torch::Tensor, torch::Tensor> clamped_eigh(const torch::Tensor& sym) {
  auto [values, vectors] = torch::linalg_eigh((sym + sym.t()) / 2);
  const double scale = std::max(1.0, values.abs().max().item<double>());
  const double lowest = values.min().item<double>();
  if (lowest < -kEigenTolerance * scale) {
    fail(ErrorKind::degenerate_input, "evaluation", "fid",
         "covariance square root failed: eigenvalue " + std::to_string(lowest) + " below tolerance");
  }
  return {values.clamp_min(0), vectors};
}

torch::Tensor sqrtm_psd(const torch::Tensor& sym) {
  auto [values, vectors] = clamped_eigh(sym);
  return torch::matmul(vectors * values.sqrt().unsqueeze(0), vectors.t());
}

}  // namespace

double fid(const FeatureSet& real, const FeatureSet& generated) {
  const auto& a = real.features;
  const auto& b = generated.features;
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(1)) {
    fail(ErrorKind::validation, "evaluation", "fid", "feature sets must share d_feat");
  }
  if (a.size(0) < 2 || b.size(0) < 2) fail(ErrorKind::validation, "evaluation", "fid", "need N >= 2 per set");
  require_finite(a, "evaluation", "fid", "real features");
  require_finite(b, "evaluation", "fid", "generated features");
  torch::NoGradGuard no_grad;
  auto x = a.to(torch::kFloat64);
  auto y = b.to(torch::kFloat64);
  auto mu_x = x.mean(0);
  auto mu_y = y.mean(0);
  auto cov = [](const torch::Tensor& z, const torch::Tensor& mu) {
    auto c = z - mu;
    return torch::matmul(c.t(), c) / static_cast<double>(z.size(0) - 1);
  };
  auto sx = cov(x, mu_x);
  auto sy = cov(y, mu_y);
  // Tr (Sx Sy)^{1/2} = Tr (Sx^{1/2} Sy Sx^{1/2})^{1/2}, a symmetric PSD form.
  auto root = sqrtm_psd(sx);
  auto middle = torch::matmul(torch::matmul(root, sy), root);
  auto eig = clamped_eigh(middle).first;
  const double trace_sqrt = eig.sqrt().sum().item<double>();
  const double mean_term = (mu_x - mu_y).pow(2).sum().item<double>();
  const double value = mean_term + sx.trace().item<double>() + sy.trace().item<double>() - 2.0 * trace_sqrt;
  return std::max(0.0, value);
}

FeatureSet extract_features(const torch::Tensor& images_in, FeatureExtractor extractor,
                            ImageClassifier* classifier) {
  if (!images_in.defined() || images_in.size(0) == 0) {
    fail(ErrorKind::validation, "evaluation", "extract_features", "empty image list");
  }
  if (images_in.dim() != 4 || images_in.size(1) != 3) {
    fail(ErrorKind::validation, "evaluation", "extract_features", "expected (N, 3, H, W) images");
  }
  torch::NoGradGuard no_grad;
  FeatureSet out;
  out.extractor = std::string(to_string(extractor));
  if (extractor == FeatureExtractor::raw_pool) {
    auto x = images_in.to(torch::kFloat64).flatten(2);  // (N, 3, HW)
    auto mean = x.mean(2);
    auto var = (x - mean.unsqueeze(2)).pow(2).mean(2);
    out.features = torch::cat({mean, var}, 1);
    return out;
  }
  if (classifier == nullptr || !*classifier) {
    fail(ErrorKind::config, "evaluation", "extract_features", "trained_classifier_head needs a classifier");
  }
  const bool was_training = (*classifier)->is_training();
  (*classifier)->eval();
  const auto dtype = (*classifier)->logits->weight.scalar_type();
  std::vector<torch::Tensor> chunks;
  for (std::int64_t s = 0; s < images_in.size(0); s += 256) {
    chunks.push_back((*classifier)->features(images_in.slice(0, s, std::min(images_in.size(0), s + 256)).to(dtype)));
  }
  (*classifier)->train(was_training);
  out.features = torch::cat(chunks, 0).to(torch::kFloat64);
  return out;
}

FeatureSet extract_features(const std::vector<ImageTensor>& images, FeatureExtractor extractor,
                            ImageClassifier* classifier) {
  if (images.empty()) fail(ErrorKind::validation, "evaluation", "extract_features", "empty image list");
  std::vector<torch::Tensor> pixels;
  for (const auto& im : images) pixels.push_back(im.pixels());
  return extract_features(torch::stack(pixels), extractor, classifier);
}

ImageClassifier train_feature_classifier(const std::vector<Recipe>& paired, const ModelConfig& model,
                                         std::int64_t steps, std::int64_t batch_size, std::uint64_t seed) {
  torch::manual_seed(mix_seed(seed, 0xf1d));
  ImageClassifier cls(model.image_size, model.d_channels, model.num_categories);
  if (paired.size() < 2) fail(ErrorKind::validation, "evaluation", "extract_features", "need >= 2 images");
  const auto B = std::min<std::int64_t>(batch_size, static_cast<std::int64_t>(paired.size()));
  BatchStream stream(paired, B, BatchMode::paired, mix_seed(seed, 0xf1e), model.num_ingredients);
  torch::optim::Adam opt(cls->parameters(), torch::optim::AdamOptions(1e-3));
  cls->train();
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; step < steps; ++epoch) {
    for (std::int64_t i = 0; i < stream.batches_per_epoch() && step < steps; ++i, ++step) {
      auto batch = stream.batch(epoch, i);
      auto loss = cross_entropy(cls->forward(*batch.images), batch.categories, "extract_features");
      opt.zero_grad(true);
      loss.backward();
      opt.step();
    }
  }
  cls->eval();
  return cls;
}

void write_embeddings_csv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                          const torch::Tensor& embeddings) {
  if (embeddings.dim() != 2 || static_cast<std::int64_t>(ids.size()) != embeddings.size(0)) {
    fail(ErrorKind::validation, "evaluation", "write_embeddings", "one id per embedding row required");
  }
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "evaluation", "write_embeddings", "cannot open " + path.string());
  auto e = embeddings.detach().to(torch::kFloat64).contiguous();
  auto acc = e.accessor<double, 2>();
  out.precision(17);
  for (std::int64_t i = 0; i < e.size(0); ++i) {
    out << ids[static_cast<std::size_t>(i)];
    for (std::int64_t k = 0; k < e.size(1); ++k) out << ',' << acc[i][k];
    out << '\n';
  }
  if (!out) fail(ErrorKind::io, "evaluation", "write_embeddings", "write failed for " + path.string());
}

torch::Tensor read_embeddings_csv(const std::filesystem::path& path, std::vector<std::string>* ids) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "evaluation", "read_embeddings", "cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    if (ids) ids->push_back(cell);
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail(ErrorKind::parse, "evaluation", "read_embeddings",
             path.string() + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      fail(ErrorKind::parse, "evaluation", "read_embeddings",
           path.string() + ":" + std::to_string(line_no) + ": inconsistent width");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty() || rows.front().empty()) {
    fail(ErrorKind::parse, "evaluation", "read_embeddings", path.string() + " has no embeddings");
  }
  auto out = torch::empty({static_cast<std::int64_t>(rows.size()), static_cast<std::int64_t>(rows.front().size())},
                          torch::kFloat64);
  auto acc = out.accessor<double, 2>();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < rows[i].size(); ++k) acc[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(k)] = rows[i][k];
  }
  return out;
}

}  // namespace xmodal
