#pragma once

// Finite-difference checks for every differentiable layer, at a number of
// random points each. Shared by the unit tests and the acceptance suite.

#include <map>
#include <memory>
#include <random>
#include <string>

#include "support/gradcheck.hpp"

namespace graftnet::testing {

struct LayerCheck {
  std::string layer;
  double worst_rel_error = 0.0;
  std::size_t points = 0;
};

inline std::vector<LayerCheck> check_all_layers(std::size_t points, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LayerCheck> out;
  auto run = [&](const std::string& name, auto make) {
    LayerCheck c{name, 0.0, 0};
    for (std::size_t p = 0; p < points; ++p) {
      const double e = make(rng, 1000 + p);
      c.worst_rel_error = std::max(c.worst_rel_error, e);
      ++c.points;
    }
    out.push_back(c);
  };

  for (std::size_t stride : {1u, 2u}) {
    run("conv2d/stride" + std::to_string(stride), [stride](std::mt19937_64& g, std::uint64_t s) {
      std::vector<BasicParameter<double>> in;
      in.emplace_back("x", random_tensor({2, 2, 5, 6}, g));
      in.emplace_back("w", random_tensor({3, 2, 3, 3}, g));
      in.emplace_back("b", random_tensor({3}, g));
      auto build = [stride, s](Tape<double>& t, std::vector<BasicParameter<double>>& v) {
        Var y = conv2d(t, t.param(v[0]), t.param(v[1]), t.param(v[2]), stride, 1);
        return random_projection(t, y, s);
      };
      return grad_check(build, in).max_rel_error;
    });
  }

  for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
    const std::string name = mode == Mode::kTrain ? "batch_norm/train" : "batch_norm/infer";
    run(name, [mode](std::mt19937_64& g, std::uint64_t s) {
      std::vector<BasicParameter<double>> in;
      in.emplace_back("x", random_tensor({3, 2, 3, 3}, g));
      in.emplace_back("gamma", random_tensor({2}, g, 0.5, 1.5));
      in.emplace_back("beta", random_tensor({2}, g));
      auto bn = std::make_shared<BasicBatchNormState<double>>("bn", 2);
      bn->running_mean = random_tensor({2}, g);
      bn->running_var = random_tensor({2}, g, 0.5, 2.0);
      const auto rm = bn->running_mean, rv = bn->running_var;
      auto build = [bn, mode, s, rm, rv](Tape<double>& t,
                                         std::vector<BasicParameter<double>>& v) {
        bn->gamma = v[1];
        bn->beta = v[2];
        bn->running_mean = rm;
        bn->running_var = rv;
        return random_projection(t, batch_norm(t, t.param(v[0]), *bn, mode), s);
      };
      auto collect = [bn](std::vector<BasicParameter<double>>& v) {
        v[1].grad = bn->gamma.grad;
        v[2].grad = bn->beta.grad;
      };
      return grad_check(build, in, 1e-4, 1e-6, collect).max_rel_error;
    });
  }

  run("relu", [](std::mt19937_64& g, std::uint64_t s) {
    std::vector<BasicParameter<double>> in;
    in.emplace_back("x", random_tensor_away_from_zero({2, 3, 2, 2}, g));
    auto build = [s](Tape<double>& t, std::vector<BasicParameter<double>>& v) {
      return random_projection(t, relu(t, t.param(v[0])), s);
    };
    return grad_check(build, in).max_rel_error;
  });

  run("global_avg_pool", [](std::mt19937_64& g, std::uint64_t s) {
    std::vector<BasicParameter<double>> in;
    in.emplace_back("x", random_tensor({2, 3, 3, 4}, g));
    auto build = [s](Tape<double>& t, std::vector<BasicParameter<double>>& v) {
      return random_projection(t, global_avg_pool(t, t.param(v[0])), s);
    };
    return grad_check(build, in).max_rel_error;
  });

  run("bilinear_pool", [](std::mt19937_64& g, std::uint64_t s) {
    std::vector<BasicParameter<double>> in;
    // Positive features keep every Gram entry away from the signed-sqrt kink.
    in.emplace_back("x", random_tensor({2, 3, 2, 3}, g, 0.1, 1.0));
    auto build = [s](Tape<double>& t, std::vector<BasicParameter<double>>& v) {
      return random_projection(t, bilinear_pool(t, t.param(v[0])), s);
    };
    return grad_check(build, in).max_rel_error;
  });

  run("dense", [](std::mt19937_64& g, std::uint64_t s) {
    std::vector<BasicParameter<double>> in;
    in.emplace_back("v", random_tensor({3, 4}, g));
    in.emplace_back("W", random_tensor({2, 4}, g));
    in.emplace_back("b", random_tensor({2}, g));
    auto build = [s](Tape<double>& t, std::vector<BasicParameter<double>>& v) {
      return random_projection(t, dense(t, t.param(v[0]), t.param(v[1]), t.param(v[2])), s);
    };
    return grad_check(build, in).max_rel_error;
  });

  run("softmax_cross_entropy", [](std::mt19937_64& g, std::uint64_t) {
    std::vector<BasicParameter<double>> in;
    in.emplace_back("logits", random_tensor({4, 3}, g, -2.0, 2.0));
    std::uniform_int_distribution<int> cls(0, 2);
    std::vector<int> labels(4);
    for (auto& l : labels) l = cls(g);
    auto build = [labels](Tape<double>& t, std::vector<BasicParameter<double>>& v) {
      return softmax_cross_entropy(t, t.param(v[0]), labels);
    };
    return grad_check(build, in).max_rel_error;
  });
  return out;
}

}  // namespace graftnet::testing
