#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atlasfuse/volume.hpp"

namespace atlasfuse {

enum class PromptKind { Click, Box, Mask, SliceBox };

std::string to_string(PromptKind k);
PromptKind prompt_kind_from_string(const std::string& s);

/// Tagged prompt derived from a warped atlas mask. `click` is a voxel index;
/// `box_min`/`box_max` are inclusive voxel corners; `mask` is a binary mask;
/// `slice_index` is set for SliceBox only.
struct Prompt {
  PromptKind kind = PromptKind::Click;
  Index3 click;
  Index3 box_min, box_max;
  LabelMask mask;
  int slice_index = -1;
  std::int32_t context_label = 1;
};

struct ComponentLabeling {
  LabelMask components;            // ids 1..K, ordered by decreasing size
  std::vector<std::size_t> sizes;  // sizes[i] = voxels in component i+1
};

/// Connected components of a binary mask under 6- or 26-connectivity.
/// Component ids are assigned by decreasing size; equal sizes are ordered by
/// their smallest linear index. An empty mask yields zero components.
ComponentLabeling connected_components(const LabelMask& mask, int connectivity = 26);

/// Click at the rounded centroid of the largest 26-connected component,
/// snapped to that component's nearest foreground voxel when the centroid
/// lands on background (ring shapes). Throws EmptyPriorError on empty masks.
Prompt click_from_mask(const LabelMask& m);

/// Tight axis-aligned bounding box over all foreground voxels.
Prompt box_from_mask(const LabelMask& m);

/// 2D tight box on the middle foreground-bearing z slice (median of the
/// foreground z range, snapping to the nearest nonempty slice).
Prompt box_from_middle_slice(const LabelMask& m);

Prompt make_prompt(const LabelMask& m, PromptKind kind);

/// prompt.json schema: {kind, click:[i,j,k]?, box:{min,max}?, mask_file?,
/// slice_index?, context_label}. A Mask prompt writes its mask as an MVOL
/// pair next to the JSON file and references it by name.
void save_prompt_json(const Prompt& p, const std::string& path);
Prompt load_prompt_json(const std::string& path);

}  // namespace atlasfuse
