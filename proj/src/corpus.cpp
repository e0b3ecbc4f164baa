#include "xmodal/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "xmodal/error.hpp"
#include "xmodal/image_io.hpp"
#include "xmodal/random.hpp"

namespace xmodal {
namespace {

constexpr std::array<const char*, 12> kSyllables = {"ka", "lo", "mi", "ra", "te", "su",
                                                    "bo", "ni", "ve", "za", "pu", "go"};
constexpr std::array<const char*, 20> kDishes = {
    "soup",  "salad",    "stew",   "curry",    "pie",    "cake",     "bread",
    "pasta", "risotto",  "tart",   "omelette", "casserole", "sandwich", "taco",
    "pudding", "roast",  "gratin", "chowder",  "skewers", "dumplings"};
constexpr std::array<const char*, 10> kAdjectives = {
    "easy", "spicy", "classic", "quick", "creamy", "rustic", "simple", "golden", "hearty", "light"};
constexpr std::array<const char*, 8> kUnits = {"cups",  "tbsp",   "tsp",   "grams",
                                               "pieces", "cloves", "slices", "pinch"};
constexpr std::array<const char*, 8> kPreps = {"chopped", "diced", "minced", "sliced",
                                               "grated",  "whole", "crushed", "fresh"};
constexpr std::array<const char*, 16> kVerbs = {"bake",  "boil",  "fry",   "simmer", "roast", "grill",
                                                "steam", "whisk", "saute", "braise", "toss",  "knead",
                                                "blend", "poach", "sear",  "mash"};
constexpr std::array<const char*, 7> kVessels = {"pan", "pot", "bowl", "oven", "skillet", "tray", "wok"};

constexpr std::int64_t kCorePoolSize = 6;

template <std::size_t N>
const char* pick(Rng& rng, const std::array<const char*, N>& words) {
  return words[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(N)))];
}

[[noreturn]] void corpus_error(ErrorKind kind, const std::string& op, const std::string& msg) {
  fail(kind, "corpus", op, msg);
}

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

std::vector<std::int64_t> core_pool(std::uint64_t seed, std::int64_t category,
                                    std::int64_t num_ingredients) {
  Rng rng(mix_seed(seed, 0x5eed0000ULL + static_cast<std::uint64_t>(category)));
  return rng.sample_without_replacement(num_ingredients, std::min(kCorePoolSize, num_ingredients));
}

Recipe make_recipe(std::string id, std::uint64_t record_seed, const SyntheticSpec& spec,
                   bool with_image) {
  Rng rng(record_seed);
  Recipe r;
  r.id = std::move(id);
  r.category = rng.uniform_int(spec.num_categories);

  // Dish concept: two or three signature ingredients of the category plus a
  // few free ingredients.
  const auto pool = core_pool(spec.seed, r.category, spec.num_ingredients);
  const auto pool_order = rng.sample_without_replacement(static_cast<std::int64_t>(pool.size()),
                                                         static_cast<std::int64_t>(pool.size()));
  const std::int64_t n_core =
      std::min<std::int64_t>(2 + rng.uniform_int(2), static_cast<std::int64_t>(pool.size()));
  for (std::int64_t i = 0; i < n_core; ++i) {
    r.ingredient_ids.push_back(pool[static_cast<std::size_t>(pool_order[static_cast<std::size_t>(i)])]);
  }
  const std::int64_t n_extra = 2 + rng.uniform_int(3);
  for (std::int64_t tries = 0; tries < 64 &&
                               static_cast<std::int64_t>(r.ingredient_ids.size()) < n_core + n_extra &&
                               static_cast<std::int64_t>(r.ingredient_ids.size()) < spec.num_ingredients;
       ++tries) {
    const std::int64_t k = rng.uniform_int(spec.num_ingredients);
    if (std::find(r.ingredient_ids.begin(), r.ingredient_ids.end(), k) == r.ingredient_ids.end()) {
      r.ingredient_ids.push_back(k);
    }
  }

  const std::string dish = category_name(r.category);
  const std::string main = ingredient_name(r.ingredient_ids.front());
  r.title = std::string(pick(rng, kAdjectives)) + " " + main + " " + dish;
  if (r.ingredient_ids.size() > 1 && rng.uniform() < 0.5) {
    r.title += " with " + ingredient_name(r.ingredient_ids[1]);
  }

  for (std::int64_t k : r.ingredient_ids) {
    std::string line = std::to_string(1 + rng.uniform_int(4)) + " " + pick(rng, kUnits) + " " +
                       ingredient_name(k);
    if (rng.uniform() < 0.7) line += ", " + std::string(pick(rng, kPreps));
    r.ingredients.push_back(std::move(line));
  }

  // Category-typical verbs keep instructions informative about the dish.
  std::array<const char*, 3> verbs{};
  for (std::size_t j = 0; j < verbs.size(); ++j) {
    verbs[j] = kVerbs[static_cast<std::size_t>((r.category * 5 + static_cast<std::int64_t>(j) * 7) % 16)];
  }
  auto verb = [&] {
    return rng.uniform() < 0.8 ? verbs[static_cast<std::size_t>(rng.uniform_int(3))] : pick(rng, kVerbs);
  };
  std::vector<std::int64_t> mention = r.ingredient_ids;
  rng.shuffle(mention);
  std::size_t cursor = 0;
  auto next_ingredient = [&] { return ingredient_name(mention[cursor++ % mention.size()]); };
  const std::int64_t n_steps = 2 + rng.uniform_int(3);
  for (std::int64_t s = 0; s < n_steps; ++s) {
    switch (rng.uniform_int(3)) {
      case 0:
        r.instructions.push_back(std::string(verb()) + " the " + next_ingredient() + " and " +
                                 next_ingredient() + " in a " + pick(rng, kVessels));
        break;
      case 1:
        r.instructions.push_back(std::string(verb()) + " the " + next_ingredient() + " for " +
                                 std::to_string(5 * (1 + rng.uniform_int(8))) + " minutes");
        break;
      default:
        r.instructions.push_back("add the " + next_ingredient() + " then " + verb() + " gently");
        break;
    }
  }
  r.instructions.push_back("serve the " + dish + (rng.uniform() < 0.5 ? " warm" : " right away"));

  if (with_image) {
    r.image = render_dish(r.category, r.ingredient_ids, spec.num_categories, spec.image_size,
                          mix_seed(record_seed, 0x1a6eULL));
  }
  return r;
}

std::string padded_id(const char* prefix, std::int64_t i) {
  std::string digits = std::to_string(i);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return std::string(prefix) + "-" + digits;
}

}  // namespace

ImageTensor::ImageTensor(torch::Tensor pixels) {
  if (pixels.dim() != 3 || pixels.size(0) != 3 || pixels.size(1) != pixels.size(2)) {
    corpus_error(ErrorKind::validation, "ImageTensor",
                 "expected (3, H, W) with H == W, got " + std::string(c10::str(pixels.sizes())));
  }
  pixels = pixels.to(torch::kFloat32).contiguous();
  if (!torch::isfinite(pixels).all().item<bool>()) {
    corpus_error(ErrorKind::validation, "ImageTensor", "non-finite pixel values");
  }
  if (pixels.min().item<float>() < 0.0f || pixels.max().item<float>() > 1.0f) {
    corpus_error(ErrorKind::validation, "ImageTensor", "pixel values outside [0, 1]");
  }
  pixels_ = std::move(pixels);
}

Vocabulary::Vocabulary() : tokens_{"<pad>", "<unk>", "<bos>", "<eos>"} {
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<std::int64_t>(i));
}

std::int64_t Vocabulary::add(std::string_view token) {
  const std::string key(token);
  if (auto it = ids_.find(key); it != ids_.end()) return it->second;
  const auto id = static_cast<std::int64_t>(tokens_.size());
  tokens_.push_back(key);
  ids_.emplace(key, id);
  return id;
}

std::int64_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || id >= size()) {
    corpus_error(ErrorKind::validation, "Vocabulary", "token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  if (tokens.size() < 4 || !std::equal(v.tokens_.begin(), v.tokens_.end(), tokens.begin())) {
    corpus_error(ErrorKind::validation, "Vocabulary", "token list does not start with the special tokens");
  }
  for (std::size_t i = 4; i < tokens.size(); ++i) {
    if (v.add(tokens[i]) != static_cast<std::int64_t>(i)) {
      corpus_error(ErrorKind::validation, "Vocabulary", "duplicate token '" + tokens[i] + "'");
    }
  }
  return v;
}

std::vector<std::string> split_words(std::string_view sentence) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : sentence) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

TokenSeq tokenize(std::string_view sentence, const Vocabulary& vocab, std::int64_t max_len) {
  if (max_len < 1) corpus_error(ErrorKind::config, "tokenize", "max_len must be >= 1");
  const auto words = split_words(sentence);
  if (words.empty()) {
    corpus_error(ErrorKind::empty_sentence, "tokenize",
                 "sentence has no tokens: '" + std::string(sentence) + "'");
  }
  TokenSeq out;
  out.reserve(static_cast<std::size_t>(max_len));
  out.push_back(kBos);
  for (const auto& w : words) {
    if (static_cast<std::int64_t>(out.size()) == max_len) break;
    out.push_back(vocab.id(w));
  }
  out.resize(static_cast<std::size_t>(max_len), kPad);
  return out;
}

void tokenize_recipe(Recipe& recipe, const Vocabulary& vocab, std::int64_t max_len) {
  if (recipe.ingredients.empty() || recipe.instructions.empty()) {
    corpus_error(ErrorKind::empty_component, "tokenize_recipe",
                 "recipe " + recipe.id + " has no ingredients or no instructions");
  }
  recipe.title_tokens = tokenize(recipe.title, vocab, max_len);
  recipe.ingredient_tokens.clear();
  recipe.instruction_tokens.clear();
  for (const auto& s : recipe.ingredients) recipe.ingredient_tokens.push_back(tokenize(s, vocab, max_len));
  for (const auto& s : recipe.instructions) recipe.instruction_tokens.push_back(tokenize(s, vocab, max_len));
}

void validate_recipe(const Recipe& r, std::int64_t num_categories, std::int64_t num_ingredients) {
  auto bad = [&](const std::string& what) {
    corpus_error(ErrorKind::validation, "validate_recipe", "recipe '" + r.id + "': " + what);
  };
  if (r.id.empty()) bad("empty id");
  if (split_words(r.title).empty()) bad("empty title");
  if (r.ingredients.empty()) bad("no ingredient sentences");
  if (r.instructions.empty()) bad("no instruction sentences");
  for (const auto& s : r.ingredients) {
    if (split_words(s).empty()) bad("empty ingredient sentence");
  }
  for (const auto& s : r.instructions) {
    if (split_words(s).empty()) bad("empty instruction sentence");
  }
  if (r.category < 0 || r.category >= num_categories) bad("category out of range");
  for (auto k : r.ingredient_ids) {
    if (k < 0 || k >= num_ingredients) bad("ingredient id out of range");
  }
}

void CorpusSplit::validate() const {
  std::unordered_set<std::string> seen;
  auto check = [&](const std::vector<Recipe>& records, bool need_image, const char* name) {
    for (const auto& r : records) {
      if (!seen.insert(r.id).second) {
        corpus_error(ErrorKind::validation, "CorpusSplit", "duplicate id '" + r.id + "'");
      }
      if (need_image != r.image.has_value()) {
        corpus_error(ErrorKind::validation, "CorpusSplit",
                     std::string(name) + " record '" + r.id +
                         (need_image ? "' lacks an image" : "' must not carry an image"));
      }
    }
  };
  check(train_paired, true, "train_paired");
  check(val_paired, true, "val_paired");
  check(test_paired, true, "test_paired");
  check(train_recipe_only, false, "train_recipe_only");
}

Vocabulary build_vocabulary(const CorpusSplit& corpus) {
  Vocabulary vocab;
  auto add_all = [&](const std::vector<Recipe>& records) {
    for (const auto& r : records) {
      for (auto& w : split_words(r.title)) vocab.add(w);
      for (const auto& s : r.ingredients) for (auto& w : split_words(s)) vocab.add(w);
      for (const auto& s : r.instructions) for (auto& w : split_words(s)) vocab.add(w);
    }
  };
  add_all(corpus.train_paired);
  add_all(corpus.train_recipe_only);
  return vocab;
}

void tokenize_corpus(CorpusSplit& corpus, const Vocabulary& vocab, std::int64_t max_len) {
  for (auto* split : {&corpus.train_paired, &corpus.val_paired, &corpus.test_paired,
                      &corpus.train_recipe_only}) {
    for (auto& r : *split) tokenize_recipe(r, vocab, max_len);
  }
}

std::string ingredient_name(std::int64_t k) {
  std::string name = std::string(kSyllables[static_cast<std::size_t>(k % 12)]) +
                     kSyllables[static_cast<std::size_t>((k / 12) % 12)];
  if (k >= 144) name += std::to_string(k / 144);
  return name;
}

std::string category_name(std::int64_t c) {
  std::string name = kDishes[static_cast<std::size_t>(c % 20)];
  if (c >= 20) name += std::to_string(c / 20);
  return name;
}

ImageTensor render_dish(std::int64_t category, std::span<const std::int64_t> ingredient_ids,
                        std::int64_t num_categories, std::int64_t image_size,
                        std::uint64_t noise_seed) {
  const auto S = image_size;
  const double scale = static_cast<double>(S) / 32.0;
  Rng rng(noise_seed);
  std::vector<float> px(static_cast<std::size_t>(3 * S * S));
  auto at = [&](std::int64_t c, std::int64_t y, std::int64_t x) -> float& {
    return px[static_cast<std::size_t>((c * S + y) * S + x)];
  };

  // Category sets the table and plate palette.
  const double hue = 0.618033988749895 * static_cast<double>(category) +
                     0.5 * static_cast<double>(category) / static_cast<double>(num_categories);
  const auto table = hsv_to_rgb(hue, 0.55, 0.7);
  const auto plate = hsv_to_rgb(hue, 0.2, 0.95);
  const double brightness = rng.uniform(-0.04, 0.04);
  const double centre = (static_cast<double>(S) - 1.0) / 2.0;
  const double plate_r = 0.46 * static_cast<double>(S);
  for (std::int64_t y = 0; y < S; ++y) {
    for (std::int64_t x = 0; x < S; ++x) {
      const double dy = static_cast<double>(y) - centre;
      const double dx = static_cast<double>(x) - centre;
      const bool on_plate = dx * dx + dy * dy <= plate_r * plate_r;
      const double shade = brightness + 0.06 * (static_cast<double>(y) / static_cast<double>(S) - 0.5);
      for (std::int64_t c = 0; c < 3; ++c) {
        const float base = on_plate ? plate[static_cast<std::size_t>(c)] : table[static_cast<std::size_t>(c)];
        at(c, y, x) = static_cast<float>(base + shade);
      }
    }
  }

  // Ingredient k sits in cell (k mod 16) of a 4x4 grid, in the sub-quadrant
  // picked by (k / 16) mod 4, with a hue keyed to k / 16 and one of three
  // shapes.
  const double cell = static_cast<double>(S) / 4.0;
  const double radius = 2.2 * scale;
  for (std::int64_t k : ingredient_ids) {
    const std::int64_t slot = k % 16;
    const std::int64_t group = k / 16;
    const std::int64_t sub = group % 4;
    const double cx = (static_cast<double>(slot % 4) + 0.5) * cell + (sub % 2 == 0 ? -1.0 : 1.0) * cell / 5.0 +
                      rng.uniform(-1.0, 1.0) * scale;
    const double cy = (static_cast<double>(slot / 4) + 0.5) * cell + (sub / 2 == 0 ? -1.0 : 1.0) * cell / 5.0 +
                      rng.uniform(-1.0, 1.0) * scale;
    const auto colour = hsv_to_rgb(static_cast<double>(group) / 7.0 + 0.04 * static_cast<double>(slot % 3),
                                   0.9, 0.5 + 0.4 * static_cast<double>((k / 3) % 2));
    const std::int64_t shape = k % 3;
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cy - 2 * radius)));
    const auto y1 = std::min<std::int64_t>(S - 1, static_cast<std::int64_t>(std::ceil(cy + 2 * radius)));
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cx - 2 * radius)));
    const auto x1 = std::min<std::int64_t>(S - 1, static_cast<std::int64_t>(std::ceil(cx + 2 * radius)));
    for (std::int64_t y = y0; y <= y1; ++y) {
      for (std::int64_t x = x0; x <= x1; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        bool inside = false;
        if (shape == 0) inside = dx * dx + dy * dy <= radius * radius;
        else if (shape == 1) inside = std::fabs(dx) <= radius * 0.9 && std::fabs(dy) <= radius * 0.9;
        else inside = std::fabs(dx) + std::fabs(dy) <= radius * 1.3;
        if (!inside) continue;
        for (std::int64_t c = 0; c < 3; ++c) at(c, y, x) = colour[static_cast<std::size_t>(c)];
      }
    }
  }

  for (auto& v : px) {
    v = static_cast<float>(std::clamp(static_cast<double>(v) + 0.03 * rng.normal(), 0.0, 1.0));
  }
  auto pixels = torch::from_blob(px.data(), {3, S, S}, torch::kFloat32).clone();
  return ImageTensor(std::move(pixels));
}

CorpusSplit generate_synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.paired < 1 || spec.val < 0 || spec.test < 0 || spec.recipe_only < 0) {
    corpus_error(ErrorKind::config, "generate_synthetic_corpus",
                 "counts must be non-negative with at least one paired record");
  }
  if (spec.num_categories < 1 || spec.num_ingredients < 1 || spec.image_size < 4) {
    corpus_error(ErrorKind::config, "generate_synthetic_corpus",
                 "num_categories, num_ingredients must be >= 1 and image_size >= 4");
  }
  CorpusSplit out;
  std::uint64_t index = 0;
  auto fill = [&](std::vector<Recipe>& dst, std::int64_t n, const char* prefix, bool image) {
    dst.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      dst.push_back(make_recipe(padded_id(prefix, i), mix_seed(spec.seed, index++), spec, image));
    }
  };
  fill(out.train_paired, spec.paired, "train", true);
  fill(out.val_paired, spec.val, "val", true);
  fill(out.test_paired, spec.test, "test", true);
  fill(out.train_recipe_only, spec.recipe_only, "extra", false);
  return out;
}

CorpusSplit load_recipe1m_layer(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) corpus_error(ErrorKind::io, "load_recipe1m_layer", "cannot open " + path.string());
  const auto base_dir = path.parent_path();
  CorpusSplit out;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    auto parse_error = [&](const std::string& msg) {
      corpus_error(ErrorKind::parse, "load_recipe1m_layer", where + msg);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      parse_error(std::string("malformed JSON (") + e.what() + ")");
    }
    if (!j.is_object()) parse_error("expected a JSON object");
    auto require_string = [&](const char* key) -> std::string {
      if (!j.contains(key) || !j[key].is_string()) parse_error(std::string("missing string field \"") + key + "\"");
      return j[key].get<std::string>();
    };
    auto require_strings = [&](const char* key) {
      if (!j.contains(key) || !j[key].is_array()) parse_error(std::string("missing array field \"") + key + "\"");
      std::vector<std::string> v;
      for (const auto& e : j[key]) {
        if (!e.is_string()) parse_error(std::string("non-string entry in \"") + key + "\"");
        v.push_back(e.get<std::string>());
      }
      return v;
    };
    Recipe r;
    r.id = require_string("id");
    r.title = require_string("title");
    r.ingredients = require_strings("ingredients");
    r.instructions = require_strings("instructions");
    const std::string partition = require_string("partition");
    if (j.contains("category")) {
      if (!j["category"].is_number_integer()) parse_error("\"category\" must be an integer");
      r.category = j["category"].get<std::int64_t>();
    }
    if (j.contains("ingredient_ids")) {
      if (!j["ingredient_ids"].is_array()) parse_error("\"ingredient_ids\" must be an array");
      for (const auto& e : j["ingredient_ids"]) {
        if (!e.is_number_integer()) parse_error("non-integer entry in \"ingredient_ids\"");
        r.ingredient_ids.push_back(e.get<std::int64_t>());
      }
    }
    if (partition != "train" && partition != "val" && partition != "test") {
      corpus_error(ErrorKind::validation, "load_recipe1m_layer",
                   where + "unknown partition '" + partition + "'");
    }
    try {
      validate_recipe(r, options.num_categories, options.num_ingredients);
    } catch (const Error& e) {
      corpus_error(ErrorKind::validation, "load_recipe1m_layer", where + e.detail());
    }
    if (j.contains("image") && !j["image"].is_null()) {
      if (!j["image"].is_string()) parse_error("\"image\" must be a path string");
      std::filesystem::path image_path = j["image"].get<std::string>();
      if (image_path.is_relative()) image_path = base_dir / image_path;
      r.image = load_image(image_path, options.image_size);
    }
    if (!r.image) {
      out.train_recipe_only.push_back(std::move(r));
    } else if (partition == "train") {
      out.train_paired.push_back(std::move(r));
    } else if (partition == "val") {
      out.val_paired.push_back(std::move(r));
    } else {
      out.test_paired.push_back(std::move(r));
    }
  }
  out.validate();
  return out;
}

void write_recipe1m_layer(const CorpusSplit& corpus, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) corpus_error(ErrorKind::io, "write_recipe1m_layer", "cannot create " + dir.string());
  std::ofstream out(dir / "corpus.jsonl");
  if (!out) corpus_error(ErrorKind::io, "write_recipe1m_layer", "cannot write corpus.jsonl");
  auto emit = [&](const std::vector<Recipe>& records, const char* partition) {
    for (const auto& r : records) {
      nlohmann::json j;
      j["id"] = r.id;
      j["title"] = r.title;
      j["ingredients"] = r.ingredients;
      j["instructions"] = r.instructions;
      j["category"] = r.category;
      j["ingredient_ids"] = r.ingredient_ids;
      j["partition"] = partition;
      if (r.image) {
        const std::string rel = "images/" + r.id + ".png";
        save_png(dir / rel, *r.image);
        j["image"] = rel;
      }
      out << j.dump() << '\n';
    }
  };
  emit(corpus.train_paired, "train");
  emit(corpus.val_paired, "val");
  emit(corpus.test_paired, "test");
  emit(corpus.train_recipe_only, "train");
  if (!out) corpus_error(ErrorKind::io, "write_recipe1m_layer", "write failed");
}

Batch assemble_batch(std::span<const Recipe* const> recipes, BatchMode mode,
                     std::int64_t num_ingredients) {
  Batch b;
  b.mode = mode;
  b.recipes.assign(recipes.begin(), recipes.end());
  const auto n = static_cast<std::int64_t>(recipes.size());
  b.categories = torch::empty({n}, torch::kInt64);
  b.ingredient_multihot = torch::zeros({n, num_ingredients}, torch::kFloat32);
  auto cat = b.categories.accessor<std::int64_t, 1>();
  auto hot = b.ingredient_multihot.accessor<float, 2>();
  std::vector<torch::Tensor> images;
  for (std::int64_t i = 0; i < n; ++i) {
    const Recipe& r = *recipes[static_cast<std::size_t>(i)];
    cat[i] = r.category;
    for (auto k : r.ingredient_ids) {
      if (k < 0 || k >= num_ingredients) {
        corpus_error(ErrorKind::validation, "make_batches", "ingredient id out of range in " + r.id);
      }
      hot[i][k] = 1.0f;
    }
    if (mode == BatchMode::paired) {
      if (!r.image) {
        corpus_error(ErrorKind::validation, "make_batches", "paired batch record '" + r.id + "' has no image");
      }
      images.push_back(r.image->pixels());
    }
  }
  if (mode == BatchMode::paired) b.images = torch::stack(images);
  return b;
}

BatchStream::BatchStream(const std::vector<Recipe>& split, std::int64_t batch_size, BatchMode mode,
                         std::uint64_t seed, std::int64_t num_ingredients)
    : split_(&split),
      batch_size_(batch_size),
      mode_(mode),
      seed_(seed),
      num_ingredients_(num_ingredients) {
  if (batch_size < 2) corpus_error(ErrorKind::config, "make_batches", "batch size must be >= 2");
  if (split.empty()) corpus_error(ErrorKind::config, "make_batches", "split is empty");
  if (batch_size > static_cast<std::int64_t>(split.size())) {
    corpus_error(ErrorKind::config, "make_batches",
                 "batch size " + std::to_string(batch_size) + " exceeds split size " +
                     std::to_string(split.size()));
  }
  batches_per_epoch_ = static_cast<std::int64_t>(split.size()) / batch_size;
}

std::vector<std::size_t> BatchStream::order(std::int64_t epoch) const {
  std::vector<std::size_t> idx(split_->size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(mix_seed(seed_, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(idx);
  return idx;
}

Batch BatchStream::batch(std::int64_t epoch, std::int64_t index) const {
  if (index < 0 || index >= batches_per_epoch_) {
    corpus_error(ErrorKind::validation, "make_batches", "batch index out of range");
  }
  const auto idx = order(epoch);
  std::vector<const Recipe*> members;
  for (std::int64_t i = 0; i < batch_size_; ++i) {
    members.push_back(&(*split_)[idx[static_cast<std::size_t>(index * batch_size_ + i)]]);
  }
  return assemble_batch(members, mode_, num_ingredients_);
}

std::vector<Batch> BatchStream::epoch(std::int64_t epoch) const {
  const auto idx = order(epoch);
  std::vector<Batch> out;
  out.reserve(static_cast<std::size_t>(batches_per_epoch_));
  for (std::int64_t b = 0; b < batches_per_epoch_; ++b) {
    std::vector<const Recipe*> members;
    for (std::int64_t i = 0; i < batch_size_; ++i) {
      members.push_back(&(*split_)[idx[static_cast<std::size_t>(b * batch_size_ + i)]]);
    }
    out.push_back(assemble_batch(members, mode_, num_ingredients_));
  }
  return out;
}

std::vector<Batch> make_batches(const std::vector<Recipe>& split, std::int64_t batch_size,
                                BatchMode mode, std::uint64_t seed, std::int64_t num_ingredients,
                                std::int64_t epoch) {
  return BatchStream(split, batch_size, mode, seed, num_ingredients).epoch(epoch);
}

}  // namespace xmodal
