#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>

#include "atlasfuse/backend.hpp"
#include "atlasfuse/registration.hpp"
#include "atlasfuse/volume.hpp"

namespace atlasfuse {

/// The learnable gate behind the per-voxel Kalman gain: one weight per
/// (input channel, pooling kernel) pair — channels {atlas, fm} x kernels
/// {3,5,7} in that order — plus a bias.
struct FusionParams {
  std::array<double, 6> w{0, 0, 0, 0, 0, 0};
  double b = 0.0;

  /// Saturated candidates used by the safeguard.
  static FusionParams pure_fm() { return {{0, 0, 0, 0, 0, 0}, -40.0}; }   // K = 0
  static FusionParams pure_atlas() { return {{0, 0, 0, 0, 0, 0}, 40.0}; } // K = 1
};

struct FitAugmentation {
  double max_disp_vox = 6.0;
  double smooth_sigma_vox = 8.0;
  std::uint64_t seed = 0;
};

struct FitConfig {
  double lr = 1e-5;
  int iters = 100;
  int n_pseudo_queries = 3;
  FitAugmentation aug;
  double dice_eps = 1.0;

  void validate() const;
};

enum class GainMode { PerVoxel, Scalar };

/// Stride-1 same-size sliding-window maximum with windows clamped to the
/// grid at borders. k must be odd.
ProbMask maxpool3d(const ProbMask& m, int k);

/// The six pooled feature maps in parameter order.
std::array<ProbMask, 6> pooled_features(const ProbMask& m_atlas, const ProbMask& m_fm);

/// K(x) = sigmoid(sum_i w_i P_i(x) + b). The sigmoid saturates to exactly 0
/// or 1 beyond |z| ~ 37 so that extreme biases reproduce the pure inputs
/// bitwise. Scalar mode applies the gate to the spatial means of the pooled
/// maps, yielding a constant gain.
ProbMask kalman_gain(const ProbMask& m_atlas, const ProbMask& m_fm,
                     const FusionParams& p, GainMode mode = GainMode::PerVoxel);

/// Per-voxel convex combination (1-K) * m_fm + K * m_atlas.
ProbMask fuse(const ProbMask& m_atlas, const ProbMask& m_fm, const ProbMask& gain);

/// 1 - (2 sum(pred*gt) + eps) / (sum(pred) + sum(gt) + eps) on the binary
/// view of gt. When `grad` is non-empty it receives dLoss/dpred per voxel.
double soft_dice_loss(const ProbMask& pred, const LabelMask& gt, double eps,
                      std::span<double> grad = {});

/// value >= thresh -> 1.
LabelMask binarize(const ProbMask& m, double thresh = 0.5);

/// One pseudo-query training triplet plus the fit diagnostics.
struct FitReport {
  double fitted_loss = 0.0;
  double pure_fm_loss = 0.0;      // K = 0 candidate
  double pure_atlas_loss = 0.0;   // K = 1 candidate
  std::string chosen;             // "fitted" | "pure_fm" | "pure_atlas"
};

struct FitOutcome {
  FusionParams params;
  FitReport report;
};

/// Test-time fit of the fusion gate from a single annotated support pair:
/// builds n_pseudo_queries smoothly warped copies of the support, registers
/// the support to each, queries the backend, and runs plain gradient descent
/// on the summed soft Dice loss. Finishes with safeguard selection among
/// {fitted, K=0, K=1} on the same objective. The support mask must be binary
/// (binarize per context first).
FitOutcome fit_fusion(const Volume& support_img, const LabelMask& support_mask,
                      const BackendSpec& backend, const RegConfig& reg_cfg,
                      const FitConfig& fit_cfg,
                      PromptKind prompt_kind = PromptKind::Mask,
                      bool backend_promptable = true);

void save_fusion_params(const FusionParams& p, const std::string& path);
FusionParams load_fusion_params(const std::string& path);

}  // namespace atlasfuse
