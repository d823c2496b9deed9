#pragma once

#include <optional>
#include <string>

#include "atlasfuse/prompt.hpp"
#include "atlasfuse/volume.hpp"

namespace atlasfuse {

enum class BackendKind { Oracle, RegionGrow, External };

/// Seeded corruption applied by the Oracle backend, in order
/// erode -> dilate -> component drop -> boundary flip. Radii are in voxels.
struct CorruptionSpec {
  double erode_r = 0.0;
  double dilate_r = 0.0;
  double drop_component_prob = 0.0;
  double boundary_noise_prob = 0.0;
  std::uint64_t seed = 0;
};

struct OracleSpec {
  std::string gt_mask_path;  // empty: caller supplies the ground truth in memory
  CorruptionSpec corruption;
};

struct RegionGrowSpec {
  double k_sigma = 2.5;
  int max_iters = 200;
};

struct ExternalSpec {
  std::string command;   // run via /bin/sh -c with the request dir appended
  std::string workdir;   // request directories are created beneath this
  double timeout_s = 300.0;
};

struct BackendSpec {
  BackendKind kind = BackendKind::RegionGrow;
  OracleSpec oracle;
  RegionGrowSpec region_grow;
  ExternalSpec external;

  void validate() const;
};

BackendSpec load_backend_spec(const std::string& json_path);
void save_backend_spec(const BackendSpec& spec, const std::string& json_path);

/// Binary morphology in voxel space with a Euclidean-ball structuring
/// element of radius r (exposed for the Oracle corruption and its tests).
LabelMask erode_ball(const LabelMask& m, double r_vox);
LabelMask dilate_ball(const LabelMask& m, double r_vox);

/// Applies the corruption chain to a binary mask.
LabelMask corrupt_mask(const LabelMask& gt, const CorruptionSpec& c);

/// Runs the backend: M_fm = f_FM(X_query, Prompt). The prompt may be absent
/// for non-promptable backends. `oracle_gt` supplies the Oracle's ground
/// truth when the spec carries no path (e.g. pseudo-query fitting).
ProbMask segment(const BackendSpec& backend, const Volume& query,
                 const std::optional<Prompt>& prompt,
                 const LabelMask* oracle_gt = nullptr);

/// The file-based external protocol: writes a request directory
/// {request.json, query.mvol.*, prompt mask if any}, invokes the command
/// with the directory path as its last argument, and reads mask.mvol.* back.
ProbMask external_roundtrip(const ExternalSpec& spec, const Volume& query,
                            const std::optional<Prompt>& prompt);

}  // namespace atlasfuse
