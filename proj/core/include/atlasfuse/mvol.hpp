#pragma once

#include <string>

#include "atlasfuse/volume.hpp"

namespace atlasfuse {

/// MVOL is the portable internal exchange format: a JSON manifest
/// `<name>.mvol.json` holding {dims, spacing, origin, dtype, data_file}
/// next to a raw little-endian payload `<name>.mvol.raw`. f32 payloads
/// round-trip bit-exactly.
///
/// `manifest_path` always names the JSON file; the raw file is referenced
/// by the manifest's data_file entry, resolved relative to the manifest.
void write_mvol(const Volume& v, const std::string& manifest_path);
void write_mvol(const LabelMask& m, const std::string& manifest_path);
void write_mvol(const ProbMask& m, const std::string& manifest_path);

Volume read_mvol_volume(const std::string& manifest_path);
LabelMask read_mvol_mask(const std::string& manifest_path);
ProbMask read_mvol_prob(const std::string& manifest_path);

/// Reads a volume or mask by extension: .mvol.json -> MVOL, anything else
/// is treated as NIfTI.
Volume read_volume_any(const std::string& path);
LabelMask read_mask_any(const std::string& path);

}  // namespace atlasfuse
