#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cafpn/pyramid.hpp"

// Central finite-difference checks of the analytic gradients.
namespace cafpn::gradcheck {

struct Options {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct Result {
  std::string name;
  std::int64_t entries = 0;  // perturbed scalars
  double max_rel_error = 0;  // |a - n| / max(|a|, |n|, 1e-6)
  bool passed = false;
};

// One result per differentiable operator.
std::vector<Result> check_ops(const Options& options = {});
// CA, SRR and SRR-CA fusion sites, all parameters and both flows.
std::vector<Result> check_fusion_modules(const Options& options = {});
// Every parameter and the input of a toy model (CIFAR-style, 1 block per
// stage, 2x3x16x16 input, C_d = 8, t = 2) with the given fusion.
Result check_model(Fusion fusion, const Options& options = {});
// All of the above, model variants last.
std::vector<Result> run_suite(const Options& options = {});

}  // namespace cafpn::gradcheck
