#include "atlasfuse/mvol.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "atlasfuse/errors.hpp"
#include "atlasfuse/nifti.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace atlasfuse {

namespace {

static_assert(std::endian::native == std::endian::little,
              "MVOL raw I/O assumes a little-endian host");

std::string raw_name_for(const std::string& manifest_path) {
  const std::string suffix = ".mvol.json";
  if (manifest_path.size() <= suffix.size() ||
      manifest_path.compare(manifest_path.size() - suffix.size(), suffix.size(),
                            suffix) != 0)
    throw ContractError("MVOL manifest path must end in .mvol.json: '" +
                        manifest_path + "'");
  return manifest_path.substr(0, manifest_path.size() - 5) + ".raw";
}

void write_manifest(const GridGeometry& g, const std::string& dtype,
                    const std::string& manifest_path, const void* payload,
                    std::size_t payload_bytes) {
  const std::string raw_path = raw_name_for(manifest_path);

  json j;
  j["dims"] = g.dims;
  j["spacing"] = g.spacing;
  j["origin"] = g.origin;
  j["dtype"] = dtype;
  j["data_file"] = fs::path(raw_path).filename().string();

  std::ofstream mf(manifest_path, std::ios::trunc);
  if (!mf) throw FormatError("cannot open '" + manifest_path + "' for writing");
  mf << j.dump(2) << '\n';
  mf.close();
  if (!mf) throw FormatError("short write to '" + manifest_path + "'");

  std::ofstream rf(raw_path, std::ios::binary | std::ios::trunc);
  if (!rf) throw FormatError("cannot open '" + raw_path + "' for writing");
  rf.write(static_cast<const char*>(payload),
           static_cast<std::streamsize>(payload_bytes));
  rf.close();
  if (!rf) throw FormatError("short write to '" + raw_path + "'");
}

struct Manifest {
  GridGeometry geom;
  std::string dtype;
  fs::path raw_path;
};

Manifest read_manifest(const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw FormatError("cannot open '" + manifest_path + "'");
  json j;
  try {
    mf >> j;
  } catch (const json::exception& ex) {
    throw FormatError("'" + manifest_path + "': " + ex.what());
  }

  Manifest m;
  try {
    const auto dims = j.at("dims");
    const auto spacing = j.at("spacing");
    const auto origin = j.at("origin");
    for (int a = 0; a < 3; ++a) {
      m.geom.dims[a] = dims.at(a).get<int>();
      m.geom.spacing[a] = spacing.at(a).get<double>();
      m.geom.origin[a] = origin.at(a).get<double>();
    }
    m.dtype = j.at("dtype").get<std::string>();
    const std::string data_file = j.at("data_file").get<std::string>();
    if (data_file.empty())
      throw FormatError("'" + manifest_path + "': empty data_file");
    m.raw_path = fs::path(manifest_path).parent_path() / data_file;
  } catch (const json::exception& ex) {
    throw FormatError("'" + manifest_path + "': " + ex.what());
  }
  if (!m.geom.valid())
    throw FormatError("'" + manifest_path + "': invalid dims/spacing");
  return m;
}

template <typename T>
std::vector<T> read_raw(const Manifest& m, const std::string& manifest_path) {
  std::ifstream rf(m.raw_path, std::ios::binary);
  if (!rf) throw FormatError("cannot open data file '" + m.raw_path.string() + "'");
  rf.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(rf.tellg());
  rf.seekg(0, std::ios::beg);

  const std::size_t expect = m.geom.voxel_count() * sizeof(T);
  if (bytes != expect)
    throw FormatError("'" + manifest_path + "': data file holds " +
                      std::to_string(bytes) + " bytes, expected " +
                      std::to_string(expect));
  std::vector<T> out(m.geom.voxel_count());
  rf.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!rf) throw FormatError("short read from '" + m.raw_path.string() + "'");
  return out;
}

bool is_mvol(const std::string& path) {
  const std::string suffix = ".mvol.json";
  return path.size() > suffix.size() &&
         path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void write_mvol(const Volume& v, const std::string& manifest_path) {
  write_manifest(v.geom, "f32", manifest_path, v.data.data(),
                 v.data.size() * sizeof(float));
}

void write_mvol(const LabelMask& m, const std::string& manifest_path) {
  write_manifest(m.geom, "i32", manifest_path, m.labels.data(),
                 m.labels.size() * sizeof(std::int32_t));
}

void write_mvol(const ProbMask& m, const std::string& manifest_path) {
  write_manifest(m.geom, "f32", manifest_path, m.values.data(),
                 m.values.size() * sizeof(float));
}

Volume read_mvol_volume(const std::string& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  if (m.dtype == "f32")
    return Volume(m.geom, read_raw<float>(m, manifest_path));
  if (m.dtype == "i32") {
    const auto raw = read_raw<std::int32_t>(m, manifest_path);
    std::vector<float> data(raw.begin(), raw.end());
    return Volume(m.geom, std::move(data));
  }
  throw UnsupportedError("'" + manifest_path + "': dtype '" + m.dtype + "'");
}

LabelMask read_mvol_mask(const std::string& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  if (m.dtype == "i32")
    return LabelMask(m.geom, read_raw<std::int32_t>(m, manifest_path));
  if (m.dtype == "f32") {
    const auto raw = read_raw<float>(m, manifest_path);
    std::vector<std::int32_t> labels(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const double v = std::round(static_cast<double>(raw[i]));
      if (v < 0.0)
        throw FormatError("'" + manifest_path + "': negative label value");
      labels[i] = static_cast<std::int32_t>(v);
    }
    return LabelMask(m.geom, std::move(labels));
  }
  throw UnsupportedError("'" + manifest_path + "': dtype '" + m.dtype + "'");
}

ProbMask read_mvol_prob(const std::string& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  if (m.dtype == "f32")
    return ProbMask(m.geom, read_raw<float>(m, manifest_path));
  if (m.dtype == "i32") {
    const auto raw = read_raw<std::int32_t>(m, manifest_path);
    std::vector<float> v(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) v[i] = raw[i] != 0 ? 1.0f : 0.0f;
    return ProbMask(m.geom, std::move(v));
  }
  throw UnsupportedError("'" + manifest_path + "': dtype '" + m.dtype + "'");
}

Volume read_volume_any(const std::string& path) {
  return is_mvol(path) ? read_mvol_volume(path) : read_nifti_volume(path);
}

LabelMask read_mask_any(const std::string& path) {
  return is_mvol(path) ? read_mvol_mask(path) : read_nifti_mask(path);
}

}  // namespace atlasfuse
