#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace xmodal {

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // 0 checks every coordinate; otherwise a seeded sample per tensor.
  std::int64_t max_coordinates = 0;
  std::uint64_t seed = 0;
  // When a coordinate's stencil straddles a kink (ReLU / hinge), the two
  // one-sided differences disagree; such coordinates are re-checked with a
  // much smaller step instead of being reported as failures.
  bool kink_retry = false;
  double kink_step = 1e-7;
};

struct GradCheckResult {
  std::string probe;
  double max_rel_error = 0;
  std::string worst;  // "tensor[flat index]"
  double worst_analytic = 0;
  double worst_numeric = 0;
  std::int64_t coordinates = 0;
  std::int64_t kink_retries = 0;
};

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

// Central differences against autograd for a scalar function of `inputs`
// (float64 leaves with requires_grad). The relative error denominator is
// max(|analytic|, |numeric|, 1e-8).
GradCheckResult check_gradients(const std::string& probe, const std::function<torch::Tensor()>& f,
                                const NamedTensors& inputs, const GradCheckOptions& options = {});

// Registered probes: every loss (per adversarial form), the gradient
// penalty, each encoder, the retrieval FC and a constant probe.
std::vector<std::string> probe_names();
std::vector<std::string> loss_probe_names();
GradCheckResult run_probe(const std::string& name, std::uint64_t seed);

// run_probe, raising a gradient_check error that names the worst coordinate
// when the error exceeds `tolerance`.
double gradient_check(const std::string& name, std::uint64_t seed, double tolerance = 1e-4);

}  // namespace xmodal
