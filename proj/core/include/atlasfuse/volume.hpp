#pragma once

#include <cstdint>
#include <vector>

#include "atlasfuse/geometry.hpp"

namespace atlasfuse {

/// Dense 3D scalar volume, 32-bit float, x-fastest. Treated as immutable
/// after construction; all operations on it are pure functions.
struct Volume {
  GridGeometry geom;
  std::vector<float> data;

  Volume() = default;
  Volume(GridGeometry g, std::vector<float> values);

  /// Uniform fill constructor.
  static Volume filled(GridGeometry g, float value);

  float at(int i, int j, int k) const { return data[geom.linear(i, j, k)]; }
  float& at(int i, int j, int k) { return data[geom.linear(i, j, k)]; }
};

/// Dense 3D label grid (0 = background), sharing Volume geometry semantics.
struct LabelMask {
  GridGeometry geom;
  std::vector<std::int32_t> labels;

  LabelMask() = default;
  LabelMask(GridGeometry g, std::vector<std::int32_t> values);

  static LabelMask filled(GridGeometry g, std::int32_t value);

  std::int32_t at(int i, int j, int k) const { return labels[geom.linear(i, j, k)]; }
  std::int32_t& at(int i, int j, int k) { return labels[geom.linear(i, j, k)]; }

  std::size_t foreground_count() const;
  bool empty_foreground() const { return foreground_count() == 0; }
};

/// Per-voxel probability map with every value in [0,1].
struct ProbMask {
  GridGeometry geom;
  std::vector<float> values;

  ProbMask() = default;
  ProbMask(GridGeometry g, std::vector<float> v);

  static ProbMask filled(GridGeometry g, float value);

  float at(int i, int j, int k) const { return values[geom.linear(i, j, k)]; }
};

struct TrilinearSample {
  double value = 0.0;
  Vec3 d_voxel;  // derivative wrt the continuous voxel coordinate
};

/// Trilinear interpolation at continuous voxel coordinate p, edge-clamped.
/// Exact at grid points. All blending arithmetic is done in double.
double trilinear_sample(const Volume& v, const Vec3& p_voxel);

/// Same, plus the analytic derivative of the interpolant wrt p (zero along
/// axes where p is clamped outside the grid).
TrilinearSample trilinear_sample_grad(const Volume& v, const Vec3& p_voxel);

/// Central differences in the interior, one-sided at borders, divided by
/// spacing (intensity per mm). Axes of extent 1 get a zero gradient.
std::array<Volume, 3> spatial_gradient(const Volume& v);

/// Clip to the [lo_pct, hi_pct] percentile range and min-max scale to [0,1].
/// A constant input maps to all zeros.
Volume normalize_intensity(const Volume& v, double lo_pct = 0.5, double hi_pct = 99.5);

/// Percentile of pre-sorted values with linear interpolation between order
/// statistics (the convention used everywhere in this project).
double percentile_sorted(const std::vector<double>& sorted, double pct);

/// Mean-pool downsample by an integer factor; spacing scales by the factor
/// and the origin shifts to the pooled block centers.
Volume downsample_mean(const Volume& v, int factor);

/// Indicator of `label` as a probability mask (1 inside, 0 elsewhere).
ProbMask mask_to_prob(const LabelMask& m, std::int32_t label);

/// Binary view: any nonzero label becomes 1.
LabelMask binarize_labels(const LabelMask& m);

/// Keep voxels equal to `label` as 1, all else 0.
LabelMask select_label(const LabelMask& m, std::int32_t label);

}  // namespace atlasfuse
