#include "atlasfuse/optim.hpp"

#include <cmath>
#include <limits>

#include "atlasfuse/errors.hpp"

namespace atlasfuse {

namespace {

OptimResult run_loop(const LossGradFn& fn, std::vector<double> params, int iters,
                     const std::string& stage,
                     const std::function<void(std::span<const double> grad,
                                              std::vector<double>& x, int t)>& step) {
  const std::size_t n = params.size();
  std::vector<double> grad(n, 0.0);

  OptimResult out;
  out.trace.reserve(static_cast<std::size_t>(iters) + 1);
  out.best_params = params;
  out.best_loss = std::numeric_limits<double>::infinity();

  for (int t = 0; t < iters; ++t) {
    const double loss = fn(params, grad);
    if (!std::isfinite(loss)) throw DivergedError(stage, t);
    out.trace.push_back(loss);
    if (loss < out.best_loss) {
      out.best_loss = loss;
      out.best_params = params;
      out.best_iter = t;
    }
    step(grad, params, t);
  }

  // Loss of the final state, so the last iterate can also win.
  const double final_loss = fn(params, grad);
  if (!std::isfinite(final_loss)) throw DivergedError(stage, iters);
  out.trace.push_back(final_loss);
  if (final_loss < out.best_loss) {
    out.best_loss = final_loss;
    out.best_params = params;
    out.best_iter = iters;
  }
  // Record the returned iterate's loss as the trace's final entry.
  out.trace.push_back(out.best_loss);
  return out;
}

}  // namespace

OptimResult adam_minimize(const LossGradFn& fn, std::vector<double> init,
                          const OptimizerSettings& s, const std::string& stage) {
  std::vector<double> m(init.size(), 0.0), v(init.size(), 0.0);
  auto step = [&](std::span<const double> grad, std::vector<double>& x, int t) {
    const double b1t = 1.0 - std::pow(s.beta1, t + 1);
    const double b2t = 1.0 - std::pow(s.beta2, t + 1);
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * grad[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
      const double mhat = m[i] / b1t;
      const double vhat = v[i] / b2t;
      x[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  };
  return run_loop(fn, std::move(init), s.iters, stage, step);
}

OptimResult gd_minimize(const LossGradFn& fn, std::vector<double> init, double lr,
                        int iters, const std::string& stage) {
  auto step = [&](std::span<const double> grad, std::vector<double>& x, int /*t*/) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= lr * grad[i];
  };
  return run_loop(fn, std::move(init), iters, stage, step);
}

}  // namespace atlasfuse
