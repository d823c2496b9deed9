#pragma once

#include <string>

#include "atlasfuse/volume.hpp"

namespace atlasfuse {

/// Minimal NIfTI-1 single-file reader (.nii, optionally gzip-compressed).
/// Accepts sizeof_hdr 348 and magic "n+1"; datatype codes 2/4/8/16/64;
/// applies scl_slope/scl_inter; takes dim[1..3], pixdim[1..3] and the
/// qform/sform offset as origin. Orientation beyond the offset is ignored
/// with a one-line warning on stderr.
Volume read_nifti_volume(const std::string& path);

/// Reads as above and converts to integer labels (values are rounded;
/// negative results are rejected).
LabelMask read_nifti_mask(const std::string& path);

/// Writes a single-file NIfTI-1 volume, datatype f32 (gzip when the path
/// ends in .gz). Round-trips f32 data bit-exactly.
void write_nifti(const Volume& v, const std::string& path);

/// Writes labels as datatype i32.
void write_nifti(const LabelMask& m, const std::string& path);

}  // namespace atlasfuse
