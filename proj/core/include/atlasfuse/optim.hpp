#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace atlasfuse {

/// Evaluates the objective at `params` and writes the gradient into `grad`
/// (same length). Returns the loss.
using LossGradFn = std::function<double(std::span<const double> params,
                                        std::span<double> grad)>;

struct OptimizerSettings {
  double lr = 1e-3;
  int iters = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimResult {
  std::vector<double> best_params;
  double best_loss = 0.0;
  int best_iter = 0;              // index into trace
  std::vector<double> trace;      // loss at each evaluation, incl. the final state
};

/// Adam with best-iterate return: the loss is evaluated at the initial point,
/// after every step, and the lowest-loss iterate seen is returned. Throws
/// DivergedError (tagged with `stage`) if the loss goes non-finite.
OptimResult adam_minimize(const LossGradFn& fn, std::vector<double> init,
                          const OptimizerSettings& s, const std::string& stage);

/// Plain gradient descent with the same best-iterate and divergence rules.
OptimResult gd_minimize(const LossGradFn& fn, std::vector<double> init,
                        double lr, int iters, const std::string& stage);

}  // namespace atlasfuse
