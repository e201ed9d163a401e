#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qfae/autograd.hpp"
#include "qfae/nn.hpp"

namespace qfae::gradcheck {

struct Options {
  std::uint64_t seed = 42;
  int max_coords_per_tensor = 0;  // 0 checks every coordinate
  double step = 1e-6;
};

struct Result {
  std::string name;
  double rel_error = 0.0;
  std::size_t coords = 0;
};

/// Compares reverse-mode gradients of a scalar function of the targets with
/// central finite differences. Returns ||g - g_fd|| / (||g|| + ||g_fd||) over
/// the sampled coordinates.
double compare(const std::function<ad::Var(ad::Tape<double>&)>& f, const nn::ParamList<double>& targets,
               const Options& opt, std::mt19937_64& rng, std::size_t* coords = nullptr);

/// Q-Former block, decoder, projection and perceptual loss (both forms) at
/// width 16 on 16x16 inputs.
std::vector<Result> run_all(const Options& opt = {});

double max_error(const std::vector<Result>& results);

}  // namespace qfae::gradcheck
