#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "atlasfuse/rng.hpp"
#include "atlasfuse/volume.hpp"

namespace atlasfuse {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 mat3_identity();
Mat3 mat3_mul(const Mat3& a, const Mat3& b);
Vec3 mat3_apply(const Mat3& m, const Vec3& v);
Mat3 mat3_inverse(const Mat3& m);
double mat3_det(const Mat3& m);

/// World-space affine map applied about a fixed center:
///   apply(p) = matrix * (p - center) + center + translation.
struct AffineTransform {
  Mat3 matrix = mat3_identity();
  Vec3 translation_mm;
  Vec3 center_mm;

  static AffineTransform identity(const Vec3& center = {});

  Vec3 apply(const Vec3& p) const;

  /// Same map expressed about a different center.
  AffineTransform recentered(const Vec3& new_center) const;
};

Vec3 apply_affine(const AffineTransform& t, const Vec3& p);

/// compose(a, b) applies b first: apply(compose(a,b), p) == a.apply(b.apply(p)).
AffineTransform compose(const AffineTransform& outer, const AffineTransform& inner);
AffineTransform inverse(const AffineTransform& t);

/// Rigid pre-registration parameters: intrinsic X-Y-Z Euler angles plus
/// translations expressed as a fraction of the field-of-view extent, so one
/// optimizer step size fits all axes and volume sizes.
struct RigidParams {
  std::array<double, 3> euler_xyz{0.0, 0.0, 0.0};       // radians
  std::array<double, 3> translation_frac{0.0, 0.0, 0.0};

  /// Rotation matrix R = Rx * Ry * Rz.
  Mat3 rotation() const;

  AffineTransform to_affine(const Vec3& center, const Vec3& fov_extent_mm) const;
};

/// Derivative of the rotation matrix wrt each Euler angle.
std::array<Mat3, 3> rotation_derivatives(const RigidParams& p);

/// Dense deformable part of the transform: per-control-point displacement
/// vectors (mm) on a coarser grid spanning the target volume, trilinearly
/// upsampled when applied.
struct DisplacementField {
  GridGeometry grid;       // control grid geometry
  std::vector<double> u;   // 3 * grid.voxel_count(), interleaved (ux,uy,uz)

  DisplacementField() = default;
  DisplacementField(GridGeometry g, std::vector<double> values);

  /// Zero field on a control grid at 1/factor of the image resolution
  /// (factor 1 = one control point per voxel), spanning the same extent.
  static DisplacementField zeros(const GridGeometry& image_geom, int factor);

  /// Displacement (mm) at a world point, trilinear and edge-clamped.
  Vec3 sample_mm(const Vec3& world) const;

  double max_magnitude_mm() const;
  std::size_t point_count() const { return grid.voxel_count(); }
};

enum class MaskWarpMode { Nearest, LinearThreshold };

/// Backward (pull) warping: each target voxel x samples the moving volume at
/// phi(x) = affine(x) + field(x). Either part may be null.
Volume warp_volume(const Volume& moving, const AffineTransform* affine,
                   const DisplacementField* field, const GridGeometry& target);

/// Mask warping. Nearest samples the nearest label; LinearThreshold warps
/// per-label indicators trilinearly and keeps the argmax (ties go to the
/// lower label id, background included).
LabelMask warp_mask(const LabelMask& moving, const AffineTransform* affine,
                    const DisplacementField* field, const GridGeometry& target,
                    MaskWarpMode mode = MaskWarpMode::Nearest);

/// Mean over grid points of the squared forward-difference Jacobian of u
/// (differences divided by control spacing; missing forward neighbors
/// contribute zero). Zero iff the field is constant.
double smoothness_energy(const DisplacementField& field);

/// Energy plus its exact gradient wrt every displacement component.
/// `grad` must have size 3 * point_count(); it is overwritten.
double smoothness_energy_grad(const DisplacementField& field, std::span<double> grad);

/// Core of the smoothness term over raw interleaved displacements: returns
/// the energy and, when `grad_accum` is non-empty, adds scale * dE/du into
/// it (no zeroing). Shared by smoothness_energy_grad and the deformable
/// registration objective.
double smoothness_energy_accumulate(const GridGeometry& grid, std::span<const double> u,
                                    std::span<double> grad_accum, double scale);

/// Gaussian-smoothed random displacement on a full-resolution grid, scaled so
/// the largest displacement magnitude equals max_disp_vox voxels. Used for
/// phantom deformation and pseudo-query augmentation.
DisplacementField smooth_random_displacement(const GridGeometry& image_geom,
                                             double max_disp_vox,
                                             double smooth_sigma_vox, Rng& rng);

// JSON (+raw) serialization for CLI artifacts.
void save_affine_json(const AffineTransform& t, const std::string& path);
AffineTransform load_affine_json(const std::string& path);
void save_field(const DisplacementField& f, const std::string& manifest_path);
DisplacementField load_field(const std::string& manifest_path);

}  // namespace atlasfuse
