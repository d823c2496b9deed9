#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atlasfuse/transform.hpp"
#include "atlasfuse/volume.hpp"

namespace atlasfuse {

enum class SimilarityKind { MSE, NCC };

struct RegConfig {
  std::vector<int> pyramid_levels{4, 2, 1};  // descending downsample factors
  int rigid_iters = 300;                     // per pyramid level
  int affine_iters = 300;                    // per pyramid level
  int deform_iters = 1000;
  double deform_lr = 1e-4;
  double pre_reg_lr = 1e-2;
  double smooth_lambda = 0.01;
  SimilarityKind loss = SimilarityKind::MSE;
  bool enable_rigid = true;
  bool enable_affine = true;
  bool enable_deform = true;
  int deform_grid_factor = 2;  // control grid at 1/factor of image resolution

  void validate() const;
};

struct TraceEntry {
  std::string stage;  // "rigid", "affine", "deform"
  int level = 1;      // pyramid factor the entry was recorded at
  int iter = 0;
  double loss = 0.0;
};

struct RegistrationResult {
  AffineTransform affine;     // rigid and affine stages composed
  DisplacementField field;    // deformable stage output
  Volume warped_image;        // atlas image resampled into query space
  LabelMask warped_mask;      // M_atlas
  std::vector<TraceEntry> loss_trace;
};

/// MSE = mean squared intensity difference; NCC = 1 - global normalized
/// cross-correlation. Throws ContractError on geometry mismatch.
double similarity_loss(const Volume& fixed, const Volume& warped, SimilarityKind kind);

/// Objective for the 6-parameter rigid stage at one pyramid level. Parameter
/// layout: [euler_x, euler_y, euler_z, tfrac_x, tfrac_y, tfrac_z]. Center and
/// field-of-view extent are taken from the full-resolution fixed geometry so
/// parameters mean the same thing at every level.
class RigidObjective {
public:
  RigidObjective(const Volume& fixed, const Volume& moving, Vec3 center, Vec3 fov,
                 SimilarityKind kind);
  double loss_and_grad(std::span<const double> params, std::span<double> grad) const;

private:
  const Volume& fixed_;
  const Volume& moving_;
  Vec3 center_, fov_;
  SimilarityKind kind_;
};

/// Objective for the 12-parameter affine stage. Layout: 9 row-major matrix
/// entries followed by 3 fractional translations.
class AffineObjective {
public:
  AffineObjective(const Volume& fixed, const Volume& moving, Vec3 center, Vec3 fov,
                  SimilarityKind kind);
  double loss_and_grad(std::span<const double> params, std::span<double> grad) const;

private:
  const Volume& fixed_;
  const Volume& moving_;
  Vec3 center_, fov_;
  SimilarityKind kind_;
};

/// Objective for the deformable stage: similarity plus lambda * smoothness,
/// optimized over the control-grid displacements (interleaved mm vectors).
/// Per-voxel sampling positions under the pre-alignment and the control-grid
/// interpolation weights are precomputed once.
class DeformObjective {
public:
  DeformObjective(const Volume& fixed, const Volume& moving,
                  const AffineTransform& pre, const GridGeometry& control_grid,
                  double smooth_lambda, SimilarityKind kind);
  ~DeformObjective();
  DeformObjective(const DeformObjective&) = delete;
  DeformObjective& operator=(const DeformObjective&) = delete;

  double loss_and_grad(std::span<const double> u, std::span<double> grad) const;
  std::size_t param_count() const;

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Rigid pre-registration over the coarse-to-fine pyramid (Adam, analytic
/// gradients, best-iterate return). Inputs should be normalized to [0,1].
AffineTransform register_rigid(const Volume& fixed, const Volume& moving,
                               const RegConfig& cfg,
                               std::vector<TraceEntry>* trace = nullptr);

/// Affine refinement initialized from `init`.
AffineTransform register_affine(const Volume& fixed, const Volume& moving,
                                const AffineTransform& init, const RegConfig& cfg,
                                std::vector<TraceEntry>* trace = nullptr);

/// Deformable stage: optimizes the displacement field behind the fixed
/// pre-alignment at full resolution.
DisplacementField register_deformable(const Volume& fixed, const Volume& moving,
                                      const AffineTransform& pre, const RegConfig& cfg,
                                      std::vector<TraceEntry>* trace = nullptr);

/// Full registration: normalizes both images, runs the enabled stages in
/// order rigid -> affine -> deformable, and warps the original atlas image
/// (trilinear) and mask (nearest) onto the query grid.
RegistrationResult register_pipeline(const Volume& atlas_img, const LabelMask& atlas_mask,
                                     const Volume& query_img, const RegConfig& cfg);

}  // namespace atlasfuse
