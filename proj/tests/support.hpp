#pragma once

#include <torch/torch.h>

// The torch logging header defines glog-style CHECK macros; doctest's must win.
#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LE
#undef CHECK_LT
#undef CHECK_GE
#undef CHECK_GT
#undef CHECK_NOTNULL
#include <doctest.h>

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "xmodal/config.hpp"
#include "xmodal/corpus.hpp"
#include "xmodal/error.hpp"

namespace test {

// Runs `f` and checks that it raises an xmodal::Error of the given kind.
template <typename F>
void expect_error(xmodal::ErrorKind kind, F&& f) {
  try {
    f();
  } catch (const xmodal::Error& e) {
    CHECK_MESSAGE(e.kind() == kind, e.what());
    return;
  }
  FAIL("expected an error of kind " << xmodal::to_string(kind));
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("xmodal_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Small shapes that keep unit tests fast.
inline xmodal::ModelConfig tiny_model() {
  xmodal::ModelConfig m;
  m.max_len = 8;
  m.d_model = 16;
  m.d_ret = 16;
  m.n_heads = 2;
  m.d_ff = 32;
  m.image_size = 16;
  m.patch = 4;
  m.image_layers = 1;
  m.conv_channels = 8;
  m.num_categories = 5;
  m.num_ingredients = 20;
  m.g_res = 16;
  m.g_channels = 16;
  m.d_channels = 8;
  m.critic_hidden = 16;
  return m;
}

inline xmodal::TrainConfig tiny_config() {
  xmodal::TrainConfig c;
  c.model = tiny_model();
  c.epochs = 1;
  c.batch_size = 8;
  c.corpus_paired = 32;
  c.corpus_recipe_only = 32;
  c.corpus_val = 16;
  c.corpus_test = 16;
  return c;
}

inline xmodal::CorpusSplit tiny_corpus(std::int64_t paired = 32, std::int64_t recipe_only = 32, std::uint64_t seed = 7) {
  xmodal::SyntheticSpec s;
  s.paired = paired;
  s.recipe_only = recipe_only;
  s.val = 16;
  s.test = 16;
  s.seed = seed;
  s.num_categories = 5;
  s.num_ingredients = 20;
  s.image_size = 16;
  return xmodal::generate_synthetic_corpus(s);
}

// Orthonormal rows e_0..e_{n-1} in R^d.
inline torch::Tensor basis(std::int64_t n, std::int64_t d) {
  return torch::eye(d, torch::kFloat64).slice(0, 0, n).clone();
}

}  // namespace test
