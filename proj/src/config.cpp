#include "xmodal/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <type_traits>

#include "xmodal/error.hpp"

namespace xmodal {
namespace {

[[noreturn]] void config_error(const std::string& op, const std::string& message) {
  fail(ErrorKind::config, "config", op, message);
}

template <class Enum, std::size_t N>
void parse_enum(std::string_view text, Enum& out, const Enum (&values)[N]) {
  for (Enum v : values) {
    if (to_string(v) == text) {
      out = v;
      return;
    }
  }
  config_error("parse_value", "unknown option '" + std::string(text) + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
void parse_scalar(std::string_view text, T& out) {
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1" || text == "on") {
      out = true;
    } else if (text == "false" || text == "0" || text == "off") {
      out = false;
    } else {
      config_error("parse_value", "expected boolean, got '" + std::string(text) + "'");
    }
  } else if constexpr (std::is_same_v<T, std::string>) {
    out = std::string(text);
  } else if constexpr (std::is_same_v<T, double>) {
    try {
      std::size_t used = 0;
      const std::string s(text);
      out = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      config_error("parse_value", "expected number, got '" + std::string(text) + "'");
    }
  } else if constexpr (std::is_integral_v<T>) {
    const auto* first = text.data();
    const auto* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last) {
      config_error("parse_value", "expected integer, got '" + std::string(text) + "'");
    }
  } else {
    parse_value(text, out);
  }
}

template <class T>
std::string format_scalar(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, double>) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  } else if constexpr (std::is_integral_v<T>) {
    return std::to_string(v);
  } else {
    return std::string(to_string(v));
  }
}

// Visits every field as (key, reference, is_model_shape).
template <class Config, class Visitor>
void visit_fields(Config& c, Visitor&& v) {
  auto& m = c.model;
  v("max_len", m.max_len, true);
  v("d_model", m.d_model, true);
  v("d_ret", m.d_ret, true);
  v("n_heads", m.n_heads, true);
  v("d_ff", m.d_ff, true);
  v("n_layers", m.n_layers, true);
  v("dropout", m.dropout, false);
  v("merge_mode", m.merge_mode, true);
  v("image_size", m.image_size, true);
  v("patch", m.patch, true);
  v("backbone", m.backbone, true);
  v("image_layers", m.image_layers, true);
  v("conv_channels", m.conv_channels, true);
  v("num_categories", m.num_categories, true);
  v("num_ingredients", m.num_ingredients, true);
  v("g_res", m.g_res, true);
  v("d_noise", m.d_noise, true);
  v("g_channels", m.g_channels, true);
  v("d_channels", m.d_channels, true);
  v("critic_hidden", m.critic_hidden, true);

  auto& l = c.loss;
  v("margin", l.margin, false);
  v("lambda1", l.lambda1, false);
  v("lambda2", l.lambda2, false);
  v("lambda3", l.lambda3, false);
  v("lambda_gp", l.lambda_gp, false);
  v("adversarial_form", l.adversarial_form, false);
  v("image_gan_form", l.image_gan_form, false);
  v("mining", l.mining, false);

  v("epochs", c.epochs, false);
  v("learning_rate", c.learning_rate, false);
  v("beta1", c.beta1, false);
  v("beta2", c.beta2, false);
  v("batch_size", c.batch_size, false);
  v("use_rec", c.use_rec, false);
  v("use_ma", c.use_ma, false);
  v("use_trans_r", c.use_trans_r, false);
  v("use_trans_i", c.use_trans_i, false);
  v("use_recipe_only", c.use_recipe_only, false);
  v("seed", c.seed, false);
  v("eval_every", c.eval_every, false);
  v("checkpoint_dir", c.checkpoint_dir, false);
  v("n_critic", c.n_critic, false);
  v("critic_lr", c.critic_lr, false);
  v("disc_lr", c.disc_lr, false);
  v("max_steps", c.max_steps, false);
  v("eval_group_size", c.eval_group_size, false);
  v("eval_groups", c.eval_groups, false);
  v("fid_extractor", c.fid_extractor, false);
  v("fid_classifier_steps", c.fid_classifier_steps, false);
  v("corpus_paired", c.corpus_paired, false);
  v("corpus_recipe_only", c.corpus_recipe_only, false);
  v("corpus_val", c.corpus_val, false);
  v("corpus_test", c.corpus_test, false);
  v("corpus_seed", c.corpus_seed, false);
}

}  // namespace

std::string_view to_string(AdversarialForm v) {
  switch (v) {
    case AdversarialForm::wgan_gp: return "wgan_gp";
    case AdversarialForm::log_form: return "log_form";
    case AdversarialForm::least_squares: return "least_squares";
  }
  return "?";
}
std::string_view to_string(Mining v) {
  return v == Mining::hardest_in_batch ? "hardest_in_batch" : "all_negatives";
}
std::string_view to_string(Backbone v) {
  return v == Backbone::patch_transformer ? "patch_transformer" : "small_conv";
}
std::string_view to_string(MergeMode v) {
  return v == MergeMode::concat_linear ? "concat_linear" : "transformer";
}
std::string_view to_string(FeatureExtractor v) {
  return v == FeatureExtractor::raw_pool ? "raw_pool" : "trained_classifier_head";
}

void parse_value(std::string_view text, AdversarialForm& out) {
  static constexpr AdversarialForm all[] = {AdversarialForm::wgan_gp, AdversarialForm::log_form,
                                            AdversarialForm::least_squares};
  parse_enum(text, out, all);
}
void parse_value(std::string_view text, Mining& out) {
  static constexpr Mining all[] = {Mining::hardest_in_batch, Mining::all_negatives};
  parse_enum(text, out, all);
}
void parse_value(std::string_view text, Backbone& out) {
  static constexpr Backbone all[] = {Backbone::patch_transformer, Backbone::small_conv};
  parse_enum(text, out, all);
}
void parse_value(std::string_view text, MergeMode& out) {
  static constexpr MergeMode all[] = {MergeMode::concat_linear, MergeMode::transformer};
  parse_enum(text, out, all);
}
void parse_value(std::string_view text, FeatureExtractor& out) {
  static constexpr FeatureExtractor all[] = {FeatureExtractor::raw_pool,
                                             FeatureExtractor::trained_classifier_head};
  parse_enum(text, out, all);
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) config_error("validate", what);
  };
  require(max_len >= 2, "max_len must be >= 2");
  require(d_model >= 1 && d_ret >= 1, "d_model and d_ret must be positive");
  require(n_heads >= 1 && d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(d_ff >= 1 && n_layers >= 1 && image_layers >= 1, "layer sizes must be positive");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  require(image_size >= 4, "image_size must be >= 4");
  require(patch >= 1 && image_size % patch == 0, "image_size must be divisible by patch");
  require(num_categories >= 2, "num_categories must be >= 2");
  require(num_ingredients >= 1, "num_ingredients must be >= 1");
  bool pow2 = g_res >= 4 && (g_res & (g_res - 1)) == 0;
  require(pow2, "g_res must be a power of two >= 4");
  require(g_res == image_size, "g_res must equal image_size (D_r2i compares generated and real images)");
  require(d_noise >= 0, "d_noise must be >= 0");
  require(g_channels >= 1 && d_channels >= 1 && critic_hidden >= 1 && conv_channels >= 1,
          "channel counts must be positive");
}

void LossConfig::validate() const {
  if (!(margin > 0.0)) config_error("validate", "margin must be > 0");
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda_gp < 0) {
    config_error("validate", "loss weights must be >= 0");
  }
  if (adversarial_form == AdversarialForm::least_squares) {
    config_error("validate", "adversarial_form must be wgan_gp or log_form");
  }
}

std::int64_t TrainConfig::effective_n_critic() const {
  if (n_critic > 0) return n_critic;
  return loss.adversarial_form == AdversarialForm::wgan_gp ? 5 : 1;
}

void TrainConfig::validate() const {
  model.validate();
  loss.validate();
  if (batch_size < 2) config_error("validate", "batch_size must be >= 2");
  if (epochs < 1) config_error("validate", "epochs must be >= 1");
  if (learning_rate < 0 || critic_lr < 0 || disc_lr < 0) {
    config_error("validate", "learning rates must be >= 0");
  }
  if (eval_every < 1) config_error("validate", "eval_every must be >= 1");
  if (eval_groups < 1) config_error("validate", "eval_groups must be >= 1");
  if (n_critic < 0 || max_steps < 0 || eval_group_size < 0) {
    config_error("validate", "counts must be >= 0");
  }
  if (corpus_paired < 1 || corpus_recipe_only < 0 || corpus_val < 0 || corpus_test < 0) {
    config_error("validate", "corpus counts must be non-negative (paired >= 1)");
  }
}

void set_config_value(TrainConfig& config, std::string_view key, std::string_view value) {
  bool found = false;
  visit_fields(config, [&](std::string_view k, auto& field, bool) {
    if (k != key) return;
    found = true;
    parse_scalar(value, field);
  });
  if (!found) config_error("set", "unknown key '" + std::string(key) + "'");
}

std::optional<std::string> get_config_value(const TrainConfig& config, std::string_view key) {
  std::optional<std::string> out;
  visit_fields(config, [&](std::string_view k, const auto& field, bool) {
    if (k == key) out = format_scalar(field);
  });
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  TrainConfig c;
  visit_fields(c, [&](std::string_view k, auto&, bool) { keys.emplace_back(k); });
  return keys;
}

TrainConfig parse_config_text(std::string_view text, TrainConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      config_error("parse", "line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(stripped).substr(0, eq));
    const std::string value = trim(std::string_view(stripped).substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const Error& e) {
      config_error("parse", "line " + std::to_string(line_no) + ": " + e.detail());
    }
  }
  return base;
}

TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) config_error("load", "cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str(), std::move(base));
}

std::string serialize_config(const TrainConfig& config) {
  std::string out;
  visit_fields(config, [&](std::string_view k, const auto& field, bool) {
    out.append(k);
    out.append(" = ");
    out.append(format_scalar(field));
    out.push_back('\n');
  });
  return out;
}

std::map<std::string, std::string> config_map(const TrainConfig& config) {
  std::map<std::string, std::string> out;
  visit_fields(config, [&](std::string_view k, const auto& field, bool) {
    out.emplace(std::string(k), format_scalar(field));
  });
  return out;
}

std::uint64_t fnv1a(std::string_view data, std::uint64_t hash) {
  for (unsigned char c : data) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::string to_hex(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return out;
}

std::string config_fingerprint(const TrainConfig& config) {
  return to_hex(fnv1a(serialize_config(config)));
}

std::string model_fingerprint(const ModelConfig& model, std::int64_t vocab_size) {
  TrainConfig c;
  c.model = model;
  std::string text = "vocab_size = " + std::to_string(vocab_size) + "\n";
  visit_fields(c, [&](std::string_view k, const auto& field, bool is_model) {
    if (!is_model) return;
    text.append(k);
    text.append(" = ");
    text.append(format_scalar(field));
    text.push_back('\n');
  });
  return to_hex(fnv1a(text));
}

}  // namespace xmodal
