#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atlasfuse/transform.hpp"
#include "atlasfuse/volume.hpp"

namespace atlasfuse {

enum class PhantomKind { Sphere, TwoOrgan, TubeTree };

std::string to_string(PhantomKind k);
PhantomKind phantom_kind_from_string(const std::string& s);

/// Desk-scale stand-ins for the abdominal / brain / vessel contexts: analytic
/// shapes rasterized with additive noise, plus a deformed copy produced by a
/// known smooth warp (optionally composed with a global rigid/scale
/// perturbation) so recovery can be scored against ground truth.
struct PhantomSpec {
  PhantomKind kind = PhantomKind::TwoOrgan;
  std::array<int, 3> dims{64, 64, 64};
  double noise_sigma = 0.02;
  struct Deform {
    double max_disp_vox = 6.0;
    double smooth_sigma_vox = 8.0;
    std::uint64_t seed = 0;
  } deform;
  struct Global {  // optional global misalignment of the query
    double max_rot_deg = 0.0;
    double max_shift_vox = 0.0;
    double max_scale_dev = 0.0;  // e.g. 0.1 allows scales in [0.9, 1.1]
  } global;

  void validate() const;
};

struct PhantomCase {
  Volume atlas_img;
  LabelMask atlas_mask;
  Volume query_img;
  LabelMask query_gt;
  DisplacementField true_field;  // full-resolution composite displacement
  std::vector<std::int32_t> context_labels;
};

PhantomCase generate_phantom(const PhantomSpec& spec);

/// The bundled 10-pair suite used by the ablation and fusion scenarios.
std::vector<PhantomSpec> bundled_phantom_suite();

}  // namespace atlasfuse
