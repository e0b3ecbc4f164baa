#include "xmodal/model.hpp"

#include <cstring>

#include <nlohmann/json.hpp>

#include "xmodal/error.hpp"

namespace xmodal {

CrossModalModelImpl::CrossModalModelImpl(const ModelConfig& c, std::int64_t vocab_size)
    : config_(c), vocab_size_(vocab_size) {
  c.validate();
  recipe_encoder = register_module("recipe_encoder", RecipeEncoder(c, vocab_size));
  image_encoder = register_module("image_encoder", ImageEncoder(c));
  generator = register_module("generator", Generator(c));
  ingredient_head = register_module("ingredient_head", torch::nn::Linear(c.d_ret, c.num_ingredients));
  category_head = register_module("category_head", torch::nn::Linear(c.d_ret, c.num_categories));
  critic = register_module("critic", ModalityCritic(c.d_ret, c.critic_hidden));
  discriminator = register_module("discriminator", ImageDiscriminator(c.image_size, c.d_channels));
  classifier = register_module("classifier", ImageClassifier(c.image_size, c.d_channels, c.num_categories));
}

std::uint64_t hash_parameters(const torch::nn::Module& module) {
  std::uint64_t h = fnv1a("params");
  for (const auto& item : module.named_parameters(true)) {
    h = fnv1a(item.key(), h);
    auto t = item.value().detach().contiguous().cpu();
    h = fnv1a(std::string(c10::str(t.sizes())), h);
    h = fnv1a(std::string_view(static_cast<const char*>(t.data_ptr()), t.numel() * t.element_size()), h);
  }
  return h;
}

namespace {

// Archive keys may not contain '.'.
std::string sanitize(const std::string& name) {
  std::string out;
  for (char ch : name) {
    if (ch == '.') {
      out += "__";
    } else {
      out += ch;
    }
  }
  return out;
}

std::vector<std::pair<std::string, torch::Tensor>> named_state(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : module.named_parameters(true)) out.emplace_back("p__" + sanitize(p.key()), p.value());
  for (const auto& b : module.named_buffers(true)) out.emplace_back("b__" + sanitize(b.key()), b.value());
  return out;
}

nlohmann::json meta_json(const CheckpointMeta& m) {
  return {{"model_fingerprint", m.model_fingerprint},
          {"config_fingerprint", m.config_fingerprint},
          {"config_text", m.config_text},
          {"vocabulary", m.vocabulary},
          {"paired_steps", m.paired_steps},
          {"recipe_only_steps", m.recipe_only_steps},
          {"epoch", m.epoch},
          {"best_medR", m.best_medR}};
}

CheckpointMeta meta_from(const nlohmann::json& j) {
  CheckpointMeta m;
  m.model_fingerprint = j.at("model_fingerprint").get<std::string>();
  m.config_fingerprint = j.at("config_fingerprint").get<std::string>();
  m.config_text = j.at("config_text").get<std::string>();
  m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  m.paired_steps = j.at("paired_steps").get<std::int64_t>();
  m.recipe_only_steps = j.at("recipe_only_steps").get<std::int64_t>();
  m.epoch = j.at("epoch").get<std::int64_t>();
  m.best_medR = j.at("best_medR").get<double>();
  return m;
}

void load_archive(const std::filesystem::path& path, torch::serialize::InputArchive& archive) {
  try {
    archive.load_from(path.string());
  } catch (const std::exception& e) {
    fail(ErrorKind::io, "trainer", "load_checkpoint", "cannot read " + path.string() + ": " + e.what());
  }
}

CheckpointMeta read_meta(torch::serialize::InputArchive& archive, const std::filesystem::path& path) {
  c10::IValue value;
  if (!archive.try_read("meta", value) || !value.isString()) {
    fail(ErrorKind::parse, "trainer", "load_checkpoint", path.string() + " has no metadata record");
  }
  try {
    return meta_from(nlohmann::json::parse(value.toStringRef()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, "trainer", "load_checkpoint", path.string() + ": bad metadata: " + e.what());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module,
                     const CheckpointMeta& meta, const CheckpointOptimizers& optimizers) {
  torch::serialize::OutputArchive archive;
  archive.write("meta", c10::IValue(meta_json(meta).dump()));
  for (const auto& [name, tensor] : named_state(module)) archive.write(name, tensor.detach());
  auto nested = [&](const char* key, torch::optim::Optimizer* opt) {
    if (opt == nullptr) return;
    torch::serialize::OutputArchive sub;
    opt->save(sub);
    archive.write(key, sub);
  };
  nested("opt_main", optimizers.main);
  nested("opt_critic", optimizers.critic);
  nested("opt_discriminator", optimizers.discriminator);
  try {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    archive.save_to(tmp);
    std::filesystem::rename(tmp, path);
  } catch (const std::exception& e) {
    fail(ErrorKind::io, "trainer", "save_checkpoint", "cannot write " + path.string() + ": " + e.what());
  }
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  torch::serialize::InputArchive archive;
  load_archive(path, archive);
  return read_meta(archive, path);
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module,
                               const std::string& expected_model_fingerprint,
                               const CheckpointOptimizers& optimizers) {
  torch::serialize::InputArchive archive;
  load_archive(path, archive);
  auto meta = read_meta(archive, path);
  if (meta.model_fingerprint != expected_model_fingerprint) {
    fail(ErrorKind::validation, "trainer", "load_checkpoint",
         path.string() + ": model fingerprint " + meta.model_fingerprint + " does not match " +
             expected_model_fingerprint);
  }
  torch::NoGradGuard no_grad;
  for (auto& [name, tensor] : named_state(module)) {
    c10::IValue value;
    if (!archive.try_read(name, value) || !value.isTensor()) {
      fail(ErrorKind::validation, "trainer", "load_checkpoint", path.string() + ": missing tensor " + name);
    }
    auto stored = value.toTensor();
    if (stored.sizes() != tensor.sizes()) {
      fail(ErrorKind::validation, "trainer", "load_checkpoint",
           path.string() + ": tensor " + name + " has shape " + std::string(c10::str(stored.sizes())) +
               ", expected " + std::string(c10::str(tensor.sizes())));
    }
    tensor.copy_(stored);
  }
  auto nested = [&](const char* key, torch::optim::Optimizer* opt) {
    if (opt == nullptr) return;
    torch::serialize::InputArchive sub;
    if (!archive.try_read(key, sub)) {
      fail(ErrorKind::validation, "trainer", "load_checkpoint", path.string() + ": missing optimizer state " + key);
    }
    opt->load(sub);
  };
  nested("opt_main", optimizers.main);
  nested("opt_critic", optimizers.critic);
  nested("opt_discriminator", optimizers.discriminator);
  return meta;
}

std::vector<std::pair<std::string, torch::Tensor>> snapshot_state(const torch::nn::Module& module) {
  auto state = named_state(module);
  for (auto& entry : state) entry.second = entry.second.detach().clone();
  return state;
}

void restore_state(torch::nn::Module& module, const std::vector<std::pair<std::string, torch::Tensor>>& state) {
  torch::NoGradGuard no_grad;
  auto live = named_state(module);
  if (live.size() != state.size()) {
    fail(ErrorKind::validation, "trainer", "restore_state", "snapshot does not match the module");
  }
  for (std::size_t i = 0; i < live.size(); ++i) live[i].second.copy_(state[i].second);
}

}  // namespace xmodal
