#include "atlasfuse/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <vector>

#include "atlasfuse/errors.hpp"

namespace atlasfuse {

namespace {

// The 348-byte NIfTI-1 header. Field names follow the published struct.
#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtypeU8 = 2;
constexpr std::int16_t kDtypeI16 = 4;
constexpr std::int16_t kDtypeI32 = 8;
constexpr std::int16_t kDtypeF32 = 16;
constexpr std::int16_t kDtypeF64 = 64;

// gzFile reads both plain and gzip streams transparently.
class GzReader {
public:
  explicit GzReader(const std::string& path) : f_(gzopen(path.c_str(), "rb")) {
    if (!f_) throw FormatError("cannot open '" + path + "'");
  }
  ~GzReader() {
    if (f_) gzclose(f_);
  }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  void read_exact(void* dst, std::size_t n, const std::string& what) {
    const int got = gzread(f_, dst, static_cast<unsigned>(n));
    if (got < 0 || static_cast<std::size_t>(got) != n)
      throw FormatError("truncated NIfTI file while reading " + what);
  }
  void skip(std::size_t n) {
    std::vector<char> sink(4096);
    while (n > 0) {
      const std::size_t chunk = std::min(n, sink.size());
      read_exact(sink.data(), chunk, "padding");
      n -= chunk;
    }
  }

private:
  gzFile f_;
};

void warn_if_oriented(const Nifti1Header& h, const std::string& path) {
  bool oriented = false;
  if (h.qform_code > 0) {
    oriented = std::fabs(h.quatern_b) > 1e-6f || std::fabs(h.quatern_c) > 1e-6f ||
               std::fabs(h.quatern_d) > 1e-6f || h.pixdim[0] < 0.0f;
  } else if (h.sform_code > 0) {
    const float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        const float expected = (r == c) ? h.pixdim[c + 1] : 0.0f;
        if (std::fabs(rows[r][c] - expected) > 1e-4f * (1.0f + std::fabs(expected)))
          oriented = true;
      }
  }
  if (oriented)
    std::fprintf(stderr,
                 "atlasfuse: warning: '%s' carries a non-trivial orientation; "
                 "only origin and spacing are honored\n",
                 path.c_str());
}

struct RawNifti {
  GridGeometry geom;
  std::vector<float> data;  // scaled values
};

RawNifti read_nifti_raw(const std::string& path) {
  GzReader in(path);
  Nifti1Header h{};
  in.read_exact(&h, sizeof(h), "header");

  if (h.sizeof_hdr != 348)
    throw FormatError("'" + path + "': sizeof_hdr is not 348 (not NIfTI-1 or byte-swapped)");
  if (std::memcmp(h.magic, "ni1", 3) == 0)
    throw FormatError("'" + path + "': detached header/data pairs (magic \"ni1\") are not supported");
  if (std::memcmp(h.magic, "n+1", 3) != 0)
    throw FormatError("'" + path + "': bad magic, expected \"n+1\"");

  if (h.dim[0] < 1 || h.dim[0] > 7)
    throw FormatError("'" + path + "': dim[0] out of range");
  if (h.dim[0] > 3) {
    for (int a = 4; a <= h.dim[0]; ++a)
      if (h.dim[a] > 1)
        throw UnsupportedError("'" + path + "': more than 3 non-trivial dimensions");
  }

  RawNifti out;
  for (int a = 0; a < 3; ++a) {
    const int extent = (a < h.dim[0]) ? h.dim[a + 1] : 1;
    if (extent < 1) throw FormatError("'" + path + "': non-positive dimension");
    out.geom.dims[a] = extent;
    const float sp = h.pixdim[a + 1];
    if (!(sp > 0.0f) || !std::isfinite(sp))
      throw FormatError("'" + path + "': non-positive pixdim");
    out.geom.spacing[a] = static_cast<double>(sp);
  }
  if (h.qform_code > 0) {
    out.geom.origin = {static_cast<double>(h.qoffset_x), static_cast<double>(h.qoffset_y),
                       static_cast<double>(h.qoffset_z)};
  } else if (h.sform_code > 0) {
    out.geom.origin = {static_cast<double>(h.srow_x[3]), static_cast<double>(h.srow_y[3]),
                       static_cast<double>(h.srow_z[3])};
  }
  warn_if_oriented(h, path);

  const std::size_t n = out.geom.voxel_count();
  const std::size_t offset = static_cast<std::size_t>(std::max(h.vox_offset, 348.0f));
  if (offset > sizeof(h)) in.skip(offset - sizeof(h));

  out.data.resize(n);
  const bool apply_scale =
      h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f);

  auto convert = [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> raw(n);
    in.read_exact(raw.data(), n * sizeof(T), "voxel data");
    for (std::size_t i = 0; i < n; ++i) {
      double v = static_cast<double>(raw[i]);
      if (apply_scale) v = v * h.scl_slope + h.scl_inter;
      out.data[i] = static_cast<float>(v);
    }
  };

  switch (h.datatype) {
    case kDtypeU8: convert(std::uint8_t{}); break;
    case kDtypeI16: convert(std::int16_t{}); break;
    case kDtypeI32: convert(std::int32_t{}); break;
    case kDtypeF32: {
      in.read_exact(out.data.data(), n * sizeof(float), "voxel data");
      if (apply_scale)
        for (float& v : out.data)
          v = static_cast<float>(static_cast<double>(v) * h.scl_slope + h.scl_inter);
      break;
    }
    case kDtypeF64: convert(double{}); break;
    default:
      throw UnsupportedError("'" + path + "': datatype code " + std::to_string(h.datatype));
  }
  return out;
}

Nifti1Header make_header(const GridGeometry& g, std::int16_t dtype, std::int16_t bitpix) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(g.dims[0]);
  h.dim[2] = static_cast<std::int16_t>(g.dims[1]);
  h.dim[3] = static_cast<std::int16_t>(g.dims[2]);
  for (int a = 4; a <= 7; ++a) h.dim[a] = 1;
  h.datatype = dtype;
  h.bitpix = bitpix;
  h.pixdim[0] = 1.0f;  // qfac
  h.pixdim[1] = static_cast<float>(g.spacing[0]);
  h.pixdim[2] = static_cast<float>(g.spacing[1]);
  h.pixdim[3] = static_cast<float>(g.spacing[2]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // NIFTI_UNITS_MM
  h.qform_code = 1;
  h.sform_code = 1;
  h.quatern_b = h.quatern_c = h.quatern_d = 0.0f;
  h.qoffset_x = static_cast<float>(g.origin[0]);
  h.qoffset_y = static_cast<float>(g.origin[1]);
  h.qoffset_z = static_cast<float>(g.origin[2]);
  h.srow_x[0] = h.pixdim[1];
  h.srow_y[1] = h.pixdim[2];
  h.srow_z[2] = h.pixdim[3];
  h.srow_x[3] = h.qoffset_x;
  h.srow_y[3] = h.qoffset_y;
  h.srow_z[3] = h.qoffset_z;
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

void gz_write_all(const std::string& path, const void* hdr, std::size_t hdr_len,
                  const void* payload, std::size_t payload_len) {
  const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  gzFile f = gzopen(path.c_str(), gz ? "wb" : "wbT");  // 'T' = store uncompressed
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  const char pad[4] = {0, 0, 0, 0};
  bool ok = gzwrite(f, hdr, static_cast<unsigned>(hdr_len)) ==
                static_cast<int>(hdr_len) &&
            gzwrite(f, pad, 4) == 4;
  // gzwrite rejects zero-length writes, so guard the (impossible) empty case.
  if (ok && payload_len > 0)
    ok = gzwrite(f, payload, static_cast<unsigned>(payload_len)) ==
         static_cast<int>(payload_len);
  gzclose(f);
  if (!ok) throw FormatError("short write to '" + path + "'");
}

}  // namespace

Volume read_nifti_volume(const std::string& path) {
  RawNifti raw = read_nifti_raw(path);
  return Volume(raw.geom, std::move(raw.data));
}

LabelMask read_nifti_mask(const std::string& path) {
  RawNifti raw = read_nifti_raw(path);
  std::vector<std::int32_t> labels(raw.data.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double v = std::round(static_cast<double>(raw.data[i]));
    if (v < 0.0) throw FormatError("'" + path + "': negative label value");
    labels[i] = static_cast<std::int32_t>(v);
  }
  return LabelMask(raw.geom, std::move(labels));
}

void write_nifti(const Volume& v, const std::string& path) {
  const Nifti1Header h = make_header(v.geom, kDtypeF32, 32);
  gz_write_all(path, &h, sizeof(h), v.data.data(), v.data.size() * sizeof(float));
}

void write_nifti(const LabelMask& m, const std::string& path) {
  const Nifti1Header h = make_header(m.geom, kDtypeI32, 32);
  gz_write_all(path, &h, sizeof(h), m.labels.data(),
               m.labels.size() * sizeof(std::int32_t));
}

}  // namespace atlasfuse
