#include "xmodal/gradcheck.hpp"

#include <cmath>

#include "xmodal/encoders.hpp"
#include "xmodal/error.hpp"
#include "xmodal/losses.hpp"
#include "xmodal/random.hpp"

namespace xmodal {

GradCheckResult check_gradients(const std::string& probe, const std::function<torch::Tensor()>& f,
                                const NamedTensors& inputs, const GradCheckOptions& o) {
  GradCheckResult result;
  result.probe = probe;
  std::vector<torch::Tensor> leaves;
  for (const auto& [name, t] : inputs) leaves.push_back(t);
  auto out = f();
  if (out.numel() != 1) fail(ErrorKind::validation, "trainer", "gradient_check", probe + ": probe is not a scalar");
  std::vector<torch::Tensor> analytic;
  if (out.requires_grad()) {
    analytic = torch::autograd::grad({out}, leaves, {}, false, false, /*allow_unused=*/true);
  } else {
    analytic.resize(leaves.size());
  }
  auto eval = [&]() { return f().item<double>(); };
  Rng rng(mix_seed(o.seed, 0x9c));
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto& t = leaves[k];
    auto flat = t.data().view({-1});
    auto grad = analytic[k].defined() ? analytic[k].reshape({-1}) : torch::zeros({t.numel()}, t.options());
    const auto n = t.numel();
    std::vector<std::int64_t> coords;
    if (o.max_coordinates > 0 && n > o.max_coordinates) {
      coords = rng.sample_without_replacement(n, o.max_coordinates);
    } else {
      for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
    }
    for (auto i : coords) {
      const double orig = flat[i].item<double>();
      auto central = [&](double h, double* forward, double* backward) {
        flat[i] = orig + h;
        const double fp = eval();
        flat[i] = orig - h;
        const double fm = eval();
        flat[i] = orig;
        if (forward != nullptr) {
          const double f0 = eval();
          *forward = (fp - f0) / h;
          *backward = (f0 - fm) / h;
        }
        return (fp - fm) / (2 * h);
      };
      const double a = grad[i].item<double>();
      double numeric = central(o.step, nullptr, nullptr);
      auto rel = [&](double fd) { return std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8}); };
      double err = rel(numeric);
      if (err > o.tolerance && o.kink_retry) {
        double fwd = 0, bwd = 0;
        central(o.step, &fwd, &bwd);
        // A kink inside the stencil shows up as disagreeing one-sided slopes.
        if (std::abs(fwd - bwd) > o.tolerance * std::max({std::abs(fwd), std::abs(bwd), 1e-8})) {
          ++result.kink_retries;
          numeric = central(o.kink_step, nullptr, nullptr);
          err = rel(numeric);
        }
      }
      ++result.coordinates;
      if (result.worst.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = inputs[k].first + "[" + std::to_string(i) + "]";
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

namespace {

torch::Tensor randn(std::vector<std::int64_t> shape, Rng& rng) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> values(static_cast<std::size_t>(n));
  for (auto& v : values) v = rng.normal();
  return torch::tensor(values, torch::kFloat64).reshape(shape).requires_grad_(true);
}

torch::Tensor uniform01(std::vector<std::int64_t> shape, Rng& rng) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> values(static_cast<std::size_t>(n));
  for (auto& v : values) v = rng.uniform(0.05, 0.95);
  return torch::tensor(values, torch::kFloat64).reshape(shape).requires_grad_(true);
}

void add_params(NamedTensors& out, const std::string& prefix, torch::nn::Module& m) {
  for (auto& p : m.named_parameters(true)) out.emplace_back(prefix + "." + p.key(), p.value());
}

// Smooth stand-ins (tanh) for the critic networks, so the probes exercise
// the loss algebra rather than activation kinks.
struct SmoothCriticImpl : torch::nn::Module {
  explicit SmoothCriticImpl(std::int64_t d) {
    fc1 = register_module("fc1", torch::nn::Linear(d, 8));
    fc2 = register_module("fc2", torch::nn::Linear(8, 1));
  }
  torch::Tensor forward(const torch::Tensor& x) { return fc2(torch::tanh(fc1(x))).squeeze(-1); }
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(SmoothCritic);

struct SmoothImageNetImpl : torch::nn::Module {
  SmoothImageNetImpl(std::int64_t outputs) {
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, 4, 4).stride(2).padding(1)));
    fc = register_module("fc", torch::nn::Linear(4 * 16, outputs));
  }
  torch::Tensor forward(const torch::Tensor& x) { return fc(torch::tanh(conv(x)).flatten(1)); }
  torch::nn::Conv2d conv{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(SmoothImageNet);

constexpr std::int64_t kB = 4;
constexpr std::int64_t kDim = 16;

GradCheckResult retrieval_probe(const std::string& name, Mining mining, std::uint64_t seed) {
  Rng rng(seed);
  auto V = randn({kB, kDim}, rng);
  auto R = randn({kB, kDim}, rng);
  return check_gradients(name, [&] { return retrieval_loss(V, R, 0.3, mining); }, {{"V", V}, {"R", R}},
                         {.seed = seed});
}

GradCheckResult recipe_probe(const std::string& name, std::uint64_t seed) {
  Rng rng(seed);
  torch::manual_seed(mix_seed(seed, 1));
  constexpr std::int64_t d = 8;
  ProjectionHeads heads(d);
  heads->to(torch::kFloat64);
  ComponentEmbeddings e{randn({kB, d}, rng), randn({kB, d}, rng), randn({kB, d}, rng)};
  NamedTensors inputs = {{"e_ttl", e.title}, {"e_ing", e.ingredients}, {"e_ins", e.instructions}};
  add_params(inputs, "g", *heads);
  return check_gradients(name, [&] { return recipe_loss(e, heads, 0.3); }, inputs, {.seed = seed});
}

GradCheckResult alignment_probe(const std::string& name, AdversarialForm form, bool critic_side,
                                std::uint64_t seed) {
  Rng rng(seed);
  torch::manual_seed(mix_seed(seed, 2));
  SmoothCritic critic(kDim);
  critic->to(torch::kFloat64);
  auto V = randn({kB, kDim}, rng);
  auto R = randn({kB, kDim}, rng);
  auto eps = uniform01({kB}, rng).detach();
  Critic fn = [&](const torch::Tensor& x) { return critic->forward(x); };
  // The critic side sees detached embeddings, so only its weights are probed.
  NamedTensors inputs;
  if (critic_side) {
    add_params(inputs, "D_M", *critic);
  } else {
    inputs = {{"V", V}, {"R", R}};
  }
  return check_gradients(
      name,
      [&] {
        auto l = modality_alignment_losses(V, R, fn, form, 10.0, eps);
        return critic_side ? l.critic_loss : l.encoder_loss;
      },
      inputs, {.seed = seed});
}

GradCheckResult penalty_probe(const std::string& name, std::uint64_t seed) {
  Rng rng(seed);
  torch::manual_seed(mix_seed(seed, 3));
  SmoothCritic critic(kDim);
  critic->to(torch::kFloat64);
  auto real = randn({kB, kDim}, rng);
  auto fake = randn({kB, kDim}, rng);
  auto eps = uniform01({kB}, rng).detach();
  Critic fn = [&](const torch::Tensor& x) { return critic->forward(x); };
  NamedTensors inputs;
  add_params(inputs, "D_M", *critic);
  return check_gradients(name, [&] { return gradient_penalty(fn, real, fake, eps); }, inputs, {.seed = seed});
}

GradCheckResult image_gan_probe(const std::string& name, AdversarialForm form, bool discriminator_side,
                                std::uint64_t seed) {
  Rng rng(seed);
  torch::manual_seed(mix_seed(seed, 4));
  constexpr std::int64_t B = 2, C = 5;
  SmoothImageNet disc(1), cls(C);
  disc->to(torch::kFloat64);
  cls->to(torch::kFloat64);
  auto generated = uniform01({B, 3, 8, 8}, rng);
  auto real = uniform01({B, 3, 8, 8}, rng).detach();
  auto eps = uniform01({B}, rng).detach();
  auto labels = torch::tensor({rng.uniform_int(C), rng.uniform_int(C)}, torch::kInt64);
  Critic d = [&](const torch::Tensor& x) { return disc->forward(x); };
  auto c = [&](const torch::Tensor& x) { return cls->forward(x); };
  NamedTensors inputs;
  if (discriminator_side) {
    add_params(inputs, "D_r2i", *disc);
    add_params(inputs, "cls_r2i", *cls);
  } else {
    inputs.emplace_back("generated", generated);
    add_params(inputs, "D_r2i", *disc);
  }
  return check_gradients(
      name,
      [&] {
        auto t = translation_consistency_recipe(generated, real, d, c, labels, form, 10.0, eps);
        return discriminator_side ? t.discriminator_loss : t.l_r2i;
      },
      inputs, {.seed = seed});
}

GradCheckResult cls_r2i_probe(const std::string& name, std::uint64_t seed) {
  Rng rng(seed);
  torch::manual_seed(mix_seed(seed, 5));
  constexpr std::int64_t B = 2, C = 5;
  SmoothImageNet disc(1), cls(C);
  disc->to(torch::kFloat64);
  cls->to(torch::kFloat64);
  auto generated = uniform01({B, 3, 8, 8}, rng);
  auto real = uniform01({B, 3, 8, 8}, rng).detach();
  auto eps = uniform01({B}, rng).detach();
  auto labels = torch::tensor({rng.uniform_int(C), rng.uniform_int(C)}, torch::kInt64);
  Critic d = [&](const torch::Tensor& x) { return disc->forward(x); };
  auto c = [&](const torch::Tensor& x) { return cls->forward(x); };
  NamedTensors inputs = {{"generated", generated}};
  add_params(inputs, "cls_r2i", *cls);
  return check_gradients(
      name,
      [&] {
        return translation_consistency_recipe(generated, real, d, c, labels, AdversarialForm::least_squares, 10.0, eps)
            .l_cls_r2i;
      },
      inputs, {.seed = seed});
}

GradCheckResult image_translation_probe(const std::string& name, bool category, std::uint64_t seed) {
  Rng rng(seed);
  torch::manual_seed(mix_seed(seed, 6));
  constexpr std::int64_t C_ing = 6, C_cat = 5;
  torch::nn::Linear ing(kDim, C_ing), cat(kDim, C_cat);
  ing->to(torch::kFloat64);
  cat->to(torch::kFloat64);
  auto V = randn({kB, kDim}, rng);
  auto multihot = torch::zeros({kB, C_ing}, torch::kFloat64);
  std::vector<std::int64_t> labels;
  for (std::int64_t b = 0; b < kB; ++b) {
    labels.push_back(rng.uniform_int(C_cat));
    for (std::int64_t k = 0; k < C_ing; ++k) multihot[b][k] = rng.uniform() < 0.4 ? 1.0 : 0.0;
  }
  auto cats = torch::tensor(labels, torch::kInt64);
  NamedTensors inputs = {{"V", V}};
  add_params(inputs, category ? "category_head" : "ingredient_head", category ? *cat : *ing);
  return check_gradients(
      name,
      [&] {
        auto t = translation_consistency_image(ing(V), cat(V), multihot, cats);
        return category ? t.l_cls_i2r : t.l_i2r;
      },
      inputs, {.seed = seed});
}

// ---- encoder probes (float64, eval mode, dropout 0)

ModelConfig probe_model() {
  ModelConfig m;
  m.d_model = 16;
  m.d_ret = 16;
  m.n_heads = 2;
  m.d_ff = 16;
  m.dropout = 0.0;
  m.max_len = 8;
  m.image_size = 8;
  m.patch = 4;
  m.image_layers = 1;
  m.conv_channels = 4;
  m.g_res = 8;
  return m;
}

CorpusSplit probe_corpus(std::uint64_t seed, Vocabulary& vocab, std::int64_t max_len) {
  SyntheticSpec spec;
  spec.paired = 3;
  spec.seed = seed;
  spec.image_size = 8;
  auto corpus = generate_synthetic_corpus(spec);
  vocab = build_vocabulary(corpus);
  tokenize_corpus(corpus, vocab, max_len);
  return corpus;
}

torch::Tensor weighted_sum(const torch::Tensor& out, std::uint64_t seed) {
  // A fixed random readout: a plain sum is blind to directions that the
  // final LayerNorm maps to zero-sum vectors.
  Rng rng(mix_seed(seed, 0x5e));
  std::vector<double> w(static_cast<std::size_t>(out.numel()));
  for (auto& v : w) v = rng.normal();
  return (out * torch::tensor(w, torch::kFloat64).reshape(out.sizes())).sum();
}

// Attention key biases add the same score to every key of a query, which
// softmax ignores: their gradient is identically zero and central differences
// only measure round-off, so they are left out of the encoder probes.
NamedTensors without_key_bias(NamedTensors inputs) {
  std::erase_if(inputs, [](const auto& entry) { return entry.first.ends_with("key.bias"); });
  return inputs;
}

GradCheckOptions encoder_options(std::uint64_t seed) {
  GradCheckOptions o;
  o.seed = seed;
  o.max_coordinates = 6;
  o.kink_retry = true;
  return o;
}

GradCheckResult encoder_probe(const std::string& name, std::uint64_t seed) {
  torch::manual_seed(mix_seed(seed, 7));
  const auto cfg = probe_model();
  Vocabulary vocab;
  auto corpus = probe_corpus(seed, vocab, cfg.max_len);
  std::vector<const Recipe*> recipes;
  for (const auto& r : corpus.train_paired) recipes.push_back(&r);
  if (name == "tr_encode" || name == "htr_encode" || name == "recipe_encoder") {
    RecipeEncoder enc(cfg, vocab.size());
    enc->to(torch::kFloat64);
    enc->eval();
    auto tokens = pack_recipes(recipes);
    NamedTensors inputs;
    std::function<torch::Tensor()> f;
    if (name == "tr_encode") {
      add_params(inputs, "E_ttl", *enc->title);
      f = [&] { return weighted_sum(enc->title->encode_tokens(tokens.title), seed); };
    } else if (name == "htr_encode") {
      add_params(inputs, "E_ing", *enc->ingredients);
      f = [&] { return weighted_sum(enc->ingredients->forward(tokens.ingredients, tokens.ingredient_valid), seed); };
    } else {
      add_params(inputs, "E_R", *enc);
      f = [&] { return weighted_sum(enc->to_retrieval_space(enc->forward(tokens).recipe), seed); };
    }
    return check_gradients(name, f, without_key_bias(inputs), encoder_options(seed));
  }
  auto c = cfg;
  c.backbone = name == "image_encoder_conv" ? Backbone::small_conv : Backbone::patch_transformer;
  ImageEncoder enc(c);
  enc->to(torch::kFloat64);
  enc->eval();
  std::vector<torch::Tensor> px;
  for (const auto* r : recipes) px.push_back(r->image->pixels().to(torch::kFloat64));
  auto images = torch::stack(px);
  NamedTensors inputs;
  std::function<torch::Tensor()> f;
  if (name == "retrieval_fc") {
    add_params(inputs, "FC_v", *enc->retrieval);
    f = [&] { return weighted_sum(enc->to_retrieval_space(enc->forward(images)), seed); };
  } else {
    add_params(inputs, "E_V", *enc);
    f = [&] { return weighted_sum(enc->forward(images), seed); };
  }
  return check_gradients(name, f, without_key_bias(inputs), encoder_options(seed));
}

using ProbeRunner = std::function<GradCheckResult(const std::string&, std::uint64_t)>;

const std::vector<std::pair<std::string, ProbeRunner>>& registry() {
  static const std::vector<std::pair<std::string, ProbeRunner>> probes = {
      {"l_ret_hardest", [](auto& n, auto s) { return retrieval_probe(n, Mining::hardest_in_batch, s); }},
      {"l_ret_all", [](auto& n, auto s) { return retrieval_probe(n, Mining::all_negatives, s); }},
      {"l_rec", [](auto& n, auto s) { return recipe_probe(n, s); }},
      {"l_ma_wgan_gp", [](auto& n, auto s) { return alignment_probe(n, AdversarialForm::wgan_gp, false, s); }},
      {"l_ma_wgan_gp_critic", [](auto& n, auto s) { return alignment_probe(n, AdversarialForm::wgan_gp, true, s); }},
      {"l_ma_log_form", [](auto& n, auto s) { return alignment_probe(n, AdversarialForm::log_form, false, s); }},
      {"l_ma_log_form_critic", [](auto& n, auto s) { return alignment_probe(n, AdversarialForm::log_form, true, s); }},
      {"gradient_penalty", [](auto& n, auto s) { return penalty_probe(n, s); }},
      {"l_r2i", [](auto& n, auto s) { return image_gan_probe(n, AdversarialForm::least_squares, false, s); }},
      {"l_r2i_discriminator",
       [](auto& n, auto s) { return image_gan_probe(n, AdversarialForm::least_squares, true, s); }},
      {"l_r2i_wgan_gp", [](auto& n, auto s) { return image_gan_probe(n, AdversarialForm::wgan_gp, false, s); }},
      {"l_r2i_log_form", [](auto& n, auto s) { return image_gan_probe(n, AdversarialForm::log_form, false, s); }},
      {"l_cls_r2i", [](auto& n, auto s) { return cls_r2i_probe(n, s); }},
      {"l_i2r", [](auto& n, auto s) { return image_translation_probe(n, false, s); }},
      {"l_cls_i2r", [](auto& n, auto s) { return image_translation_probe(n, true, s); }},
      {"constant",
       [](auto& n, auto s) {
         Rng rng(s);
         auto x = randn({3}, rng);
         return check_gradients(n, [&] { return torch::full({}, 3.0, torch::kFloat64); }, {{"x", x}}, {.seed = s});
       }},
      {"tr_encode", encoder_probe},
      {"htr_encode", encoder_probe},
      {"recipe_encoder", encoder_probe},
      {"image_encoder_patch", encoder_probe},
      {"image_encoder_conv", encoder_probe},
      {"retrieval_fc", encoder_probe},
  };
  return probes;
}

}  // namespace

std::vector<std::string> probe_names() {
  std::vector<std::string> out;
  for (const auto& [name, fn] : registry()) out.push_back(name);
  return out;
}

std::vector<std::string> loss_probe_names() {
  return {"l_rec",         "l_ret_hardest",       "l_ret_all",      "l_ma_wgan_gp",   "l_ma_wgan_gp_critic",
          "l_ma_log_form", "l_ma_log_form_critic", "gradient_penalty", "l_r2i",         "l_r2i_discriminator",
          "l_r2i_wgan_gp", "l_r2i_log_form",      "l_cls_r2i",      "l_i2r",          "l_cls_i2r"};
}

GradCheckResult run_probe(const std::string& name, std::uint64_t seed) {
  for (const auto& [n, fn] : registry()) {
    if (n == name) return fn(n, seed);
  }
  fail(ErrorKind::config, "trainer", "gradient_check", "unknown probe '" + name + "'");
}

double gradient_check(const std::string& name, std::uint64_t seed, double tolerance) {
  auto r = run_probe(name, seed);
  if (r.max_rel_error > tolerance) {
    fail(ErrorKind::gradient_check, "trainer", "gradient_check",
         name + " (seed " + std::to_string(seed) + "): relative error " + std::to_string(r.max_rel_error) +
             " at " + r.worst + " (analytic " + std::to_string(r.worst_analytic) + ", numeric " +
             std::to_string(r.worst_numeric) + ")");
  }
  return r.max_rel_error;
}

}  // namespace xmodal
