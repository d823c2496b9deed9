#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "atlasfuse/volume.hpp"

namespace atlasfuse {

/// Overlap coefficient 2|A^B| / (|A|+|B|) on the binary (nonzero) view of
/// both masks; 1.0 when both are empty.
double dice(const LabelMask& a, const LabelMask& b);

/// Foreground voxels with at least one six-neighbor background voxel
/// (out-of-grid counts as background).
std::vector<Index3> surface_voxels(const LabelMask& m);

/// Exact anisotropic Euclidean distance (mm) from every voxel to the nearest
/// foreground voxel (voxel-center to voxel-center), by the separable
/// lower-envelope transform. `finite` is false for an empty mask, in which
/// case every distance is +infinity.
struct DistanceMap {
  GridGeometry geom;
  std::vector<double> mm;
  bool finite = true;

  double at(int i, int j, int k) const { return mm[geom.linear(i, j, k)]; }
};

DistanceMap edt(const LabelMask& m);

/// Distance map with an explicit spacing override (used for voxel-space
/// morphology).
DistanceMap edt_with_spacing(const LabelMask& m, const std::array<double, 3>& spacing);

enum class Hd95Convention { PooledSymmetric, MaxOfDirected };

/// 95th percentile (linear interpolation between order statistics) of the
/// pooled surface-to-surface distances of both masks. Empty inputs make the
/// metric undefined.
std::optional<double> hd95(const LabelMask& a, const LabelMask& b,
                           Hd95Convention convention = Hd95Convention::PooledSymmetric);

/// Normalized surface Dice at tolerance tol_mm. Both empty -> 1, one empty -> 0.
double nsd(const LabelMask& a, const LabelMask& b, double tol_mm);

/// Topology-preserving iterative thinning (6 border-direction subiterations;
/// a voxel is deleted only while simple — one 26-component of foreground
/// neighbors and one 6-component of background in the 18-neighborhood — and
/// not a curve endpoint).
LabelMask skeletonize3d(const LabelMask& m);

/// Centerline Dice: harmonic mean of skeleton precision/sensitivity.
/// Undefined when either skeleton is empty.
std::optional<double> cl_dice(const LabelMask& pred, const LabelMask& gt);

/// The four paper metrics for one mask pair, plus the conventions used.
struct MetricsReport {
  std::optional<double> dice;
  std::optional<double> nsd;
  std::optional<double> hd95_mm;
  std::optional<double> cl_dice;
  double tolerance_mm = 1.0;
  std::string hd95_convention = "pooled";
};

MetricsReport compute_metrics(const LabelMask& pred, const LabelMask& gt,
                              double tol_mm = 1.0, bool with_cl_dice = false);

}  // namespace atlasfuse
