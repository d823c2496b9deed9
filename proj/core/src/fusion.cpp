#include "atlasfuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <vector>

#include <nlohmann/json.hpp>

#include "atlasfuse/errors.hpp"
#include "atlasfuse/optim.hpp"
#include "atlasfuse/rng.hpp"
#include "atlasfuse/transform.hpp"

using json = nlohmann::json;

namespace atlasfuse {

void FitConfig::validate() const {
  if (!(lr > 0.0)) throw ContractError("fit lr must be > 0");
  if (iters < 0) throw ContractError("fit iters must be >= 0");
  if (n_pseudo_queries < 1) throw ContractError("need at least one pseudo-query");
  if (!(dice_eps > 0.0)) throw ContractError("dice_eps must be > 0");
  if (aug.max_disp_vox < 0.0 || aug.smooth_sigma_vox < 0.0)
    throw ContractError("augmentation parameters must be >= 0");
}

ProbMask maxpool3d(const ProbMask& m, int k) {
  if (k < 1 || k % 2 == 0) throw ContractError("maxpool kernel must be odd");
  const int r = k / 2;
  const auto& g = m.geom;
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];

  // Separable: 1D windowed max along x, then y, then z.
  std::vector<float> a(m.values), b(m.values.size());
  auto pass = [&](int axis, const std::vector<float>& src, std::vector<float>& dst) {
    const int n_axis = g.dims[axis];
    for (int k2 = 0; k2 < nz; ++k2)
      for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) {
          const int idx3[3] = {i, j, k2};
          const int lo = std::max(0, idx3[axis] - r);
          const int hi = std::min(n_axis - 1, idx3[axis] + r);
          float best = -1.0f;
          int q[3] = {i, j, k2};
          for (int t = lo; t <= hi; ++t) {
            q[axis] = t;
            best = std::max(best, src[g.linear(q[0], q[1], q[2])]);
          }
          dst[g.linear(i, j, k2)] = best;
        }
  };
  pass(0, a, b);
  pass(1, b, a);
  pass(2, a, b);
  return ProbMask(g, std::move(b));
}

std::array<ProbMask, 6> pooled_features(const ProbMask& m_atlas, const ProbMask& m_fm) {
  if (m_atlas.geom != m_fm.geom)
    throw ContractError("pooled_features requires matching geometry");
  return {maxpool3d(m_atlas, 3), maxpool3d(m_atlas, 5), maxpool3d(m_atlas, 7),
          maxpool3d(m_fm, 3),    maxpool3d(m_fm, 5),    maxpool3d(m_fm, 7)};
}

namespace {

// Sigmoid that saturates to exactly 0/1 outside the double-precision
// resolvable range, so extreme biases reproduce the pure inputs bitwise.
inline double sigmoid_saturated(double z) {
  if (z >= 37.0) return 1.0;
  if (z <= -37.0) return 0.0;
  return 1.0 / (1.0 + std::exp(-z));
}

}  // namespace

ProbMask kalman_gain(const ProbMask& m_atlas, const ProbMask& m_fm,
                     const FusionParams& p, GainMode mode) {
  const auto pooled = pooled_features(m_atlas, m_fm);
  const std::size_t n = m_atlas.values.size();

  if (mode == GainMode::Scalar) {
    double z = p.b;
    for (int f = 0; f < 6; ++f) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += pooled[f].values[i];
      z += p.w[f] * (mean / static_cast<double>(n));
    }
    return ProbMask::filled(m_atlas.geom, static_cast<float>(sigmoid_saturated(z)));
  }

  std::vector<float> gain(n);
  for (std::size_t i = 0; i < n; ++i) {
    double z = p.b;
    for (int f = 0; f < 6; ++f) z += p.w[f] * pooled[f].values[i];
    gain[i] = static_cast<float>(sigmoid_saturated(z));
  }
  return ProbMask(m_atlas.geom, std::move(gain));
}

ProbMask fuse(const ProbMask& m_atlas, const ProbMask& m_fm, const ProbMask& gain) {
  if (m_atlas.geom != m_fm.geom || m_atlas.geom != gain.geom)
    throw ContractError("fuse requires matching geometry");
  std::vector<float> out(m_atlas.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double k = gain.values[i];
    out[i] = static_cast<float>((1.0 - k) * static_cast<double>(m_fm.values[i]) +
                                k * static_cast<double>(m_atlas.values[i]));
  }
  return ProbMask(m_atlas.geom, std::move(out));
}

double soft_dice_loss(const ProbMask& pred, const LabelMask& gt, double eps,
                      std::span<double> grad) {
  if (pred.geom != gt.geom) throw ContractError("soft_dice_loss geometry mismatch");
  if (!(eps > 0.0)) throw ContractError("dice eps must be > 0");
  const std::size_t n = pred.values.size();
  if (!grad.empty() && grad.size() != n)
    throw ContractError("soft_dice_loss gradient span size mismatch");

  double inter = 0.0, sum_p = 0.0, sum_g = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = pred.values[i];
    const double g = gt.labels[i] != 0 ? 1.0 : 0.0;
    inter += p * g;
    sum_p += p;
    sum_g += g;
  }
  const double num = 2.0 * inter + eps;
  const double den = sum_p + sum_g + eps;
  const double loss = 1.0 - num / den;

  if (!grad.empty()) {
    const double inv_den = 1.0 / den;
    const double num_den2 = num * inv_den * inv_den;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = gt.labels[i] != 0 ? 1.0 : 0.0;
      grad[i] = -(2.0 * g * inv_den - num_den2);
    }
  }
  return loss;
}

LabelMask binarize(const ProbMask& m, double thresh) {
  std::vector<std::int32_t> out(m.values.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<double>(m.values[i]) >= thresh ? 1 : 0;
  return LabelMask(m.geom, std::move(out));
}

// ---------------------------------------------------------------------------
// Test-time fitting
// ---------------------------------------------------------------------------

namespace {

struct Triplet {
  ProbMask m_atlas;
  ProbMask m_fm;
  LabelMask gt;
  std::array<ProbMask, 6> pooled;
};

// Summed soft Dice loss over the triplets for fixed pooled features, with
// the analytic gradient wrt the 7 gate parameters.
double fit_loss_and_grad(const std::vector<Triplet>& triplets, const FusionParams& p,
                         double eps, std::span<double> grad) {
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  double total = 0.0;
  std::vector<double> dice_grad;

  for (const auto& t : triplets) {
    const std::size_t n = t.m_atlas.values.size();
    std::vector<float> fused(n);
    std::vector<float> gain(n);
    for (std::size_t i = 0; i < n; ++i) {
      double z = p.b;
      for (int f = 0; f < 6; ++f) z += p.w[f] * t.pooled[f].values[i];
      const double k = sigmoid_saturated(z);
      gain[i] = static_cast<float>(k);
      fused[i] = static_cast<float>((1.0 - k) * static_cast<double>(t.m_fm.values[i]) +
                                    k * static_cast<double>(t.m_atlas.values[i]));
    }
    const ProbMask fused_mask(t.m_atlas.geom, std::move(fused));
    if (grad.empty()) {
      total += soft_dice_loss(fused_mask, t.gt, eps);
      continue;
    }
    dice_grad.resize(n);
    total += soft_dice_loss(fused_mask, t.gt, eps, dice_grad);
    for (std::size_t i = 0; i < n; ++i) {
      const double k = gain[i];
      const double chain = dice_grad[i] *
                           (static_cast<double>(t.m_atlas.values[i]) -
                            static_cast<double>(t.m_fm.values[i])) *
                           k * (1.0 - k);
      for (int f = 0; f < 6; ++f) grad[f] += chain * t.pooled[f].values[i];
      grad[6] += chain;
    }
  }
  return total;
}

FusionParams params_from_vec(std::span<const double> v) {
  FusionParams p;
  for (int f = 0; f < 6; ++f) p.w[f] = v[f];
  p.b = v[6];
  return p;
}

}  // namespace

FitOutcome fit_fusion(const Volume& support_img, const LabelMask& support_mask,
                      const BackendSpec& backend, const RegConfig& reg_cfg,
                      const FitConfig& fit_cfg, PromptKind prompt_kind,
                      bool backend_promptable) {
  fit_cfg.validate();
  reg_cfg.validate();
  if (support_mask.geom != support_img.geom)
    throw ContractError("support mask and image geometry differ");

  Rng rng(fit_cfg.aug.seed);
  std::vector<Triplet> triplets;
  triplets.reserve(fit_cfg.n_pseudo_queries);

  for (int t = 0; t < fit_cfg.n_pseudo_queries; ++t) {
    Rng sub = rng.fork(static_cast<std::uint64_t>(t) + 1);
    const DisplacementField psi = smooth_random_displacement(
        support_img.geom, fit_cfg.aug.max_disp_vox, fit_cfg.aug.smooth_sigma_vox, sub);

    const Volume pseudo_query =
        warp_volume(support_img, nullptr, &psi, support_img.geom);
    const LabelMask pseudo_gt =
        warp_mask(support_mask, nullptr, &psi, support_img.geom, MaskWarpMode::Nearest);

    const RegistrationResult reg =
        register_pipeline(support_img, support_mask, pseudo_query, reg_cfg);

    std::optional<Prompt> prompt;
    if (backend_promptable) {
      Prompt pr = make_prompt(reg.warped_mask, prompt_kind);
      pr.context_label = 1;
      prompt = std::move(pr);
    }
    const ProbMask m_fm =
        segment(backend, normalize_intensity(pseudo_query), prompt, &pseudo_gt);

    Triplet trip{mask_to_prob(binarize_labels(reg.warped_mask), 1), m_fm,
                 binarize_labels(pseudo_gt), {}};
    trip.pooled = pooled_features(trip.m_atlas, trip.m_fm);
    triplets.push_back(std::move(trip));
  }

  // Plain gradient descent from the unbiased start (all zeros: K = 0.5).
  std::vector<double> init(7, 0.0);
  std::vector<double> fitted_vec = init;
  if (fit_cfg.iters > 0) {
    const OptimResult r = gd_minimize(
        [&](std::span<const double> v, std::span<double> g) {
          return fit_loss_and_grad(triplets, params_from_vec(v), fit_cfg.dice_eps, g);
        },
        init, fit_cfg.lr, fit_cfg.iters, "fusion-fit");
    fitted_vec = r.best_params;
  }

  // Safeguard selection: the returned gate never scores worse than either
  // pure input on the fitting objective.
  const FusionParams fitted = params_from_vec(fitted_vec);
  const FusionParams k0 = FusionParams::pure_fm();
  const FusionParams k1 = FusionParams::pure_atlas();

  FitOutcome out;
  out.report.fitted_loss =
      (fit_cfg.iters > 0)
          ? fit_loss_and_grad(triplets, fitted, fit_cfg.dice_eps, {})
          : std::numeric_limits<double>::infinity();
  out.report.pure_fm_loss = fit_loss_and_grad(triplets, k0, fit_cfg.dice_eps, {});
  out.report.pure_atlas_loss = fit_loss_and_grad(triplets, k1, fit_cfg.dice_eps, {});

  out.params = fitted;
  out.report.chosen = "fitted";
  double best = out.report.fitted_loss;
  if (out.report.pure_fm_loss < best) {
    best = out.report.pure_fm_loss;
    out.params = k0;
    out.report.chosen = "pure_fm";
  }
  if (out.report.pure_atlas_loss < best) {
    out.params = k1;
    out.report.chosen = "pure_atlas";
  }
  return out;
}

void save_fusion_params(const FusionParams& p, const std::string& path) {
  json j;
  j["w"] = p.w;
  j["b"] = p.b;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f << j.dump(2) << '\n';
}

FusionParams load_fusion_params(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open '" + path + "'");
  json j;
  try {
    f >> j;
    FusionParams p;
    for (int i = 0; i < 6; ++i) p.w[i] = j.at("w").at(i).get<double>();
    p.b = j.at("b").get<double>();
    return p;
  } catch (const json::exception& ex) {
    throw FormatError("'" + path + "': " + ex.what());
  }
}

}  // namespace atlasfuse
