#include "atlasfuse/transform.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "atlasfuse/errors.hpp"

using json = nlohmann::json;

namespace atlasfuse {

Mat3 mat3_identity() {
  return {{{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}};
}

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
          m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
          m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
}

double mat3_det(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Mat3 mat3_inverse(const Mat3& m) {
  const double det = mat3_det(m);
  if (det == 0.0 || !std::isfinite(det))
    throw ContractError("singular matrix has no inverse");
  const double s = 1.0 / det;
  Mat3 inv;
  inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * s;
  inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * s;
  inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * s;
  inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * s;
  inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * s;
  inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * s;
  inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * s;
  inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * s;
  inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * s;
  return inv;
}

AffineTransform AffineTransform::identity(const Vec3& center) {
  AffineTransform t;
  t.center_mm = center;
  return t;
}

Vec3 AffineTransform::apply(const Vec3& p) const {
  return mat3_apply(matrix, p - center_mm) + center_mm + translation_mm;
}

AffineTransform AffineTransform::recentered(const Vec3& c2) const {
  // apply(p) = M p + q with q = -M c + c + t; about c2: t2 = q + M c2 - c2.
  AffineTransform out;
  out.matrix = matrix;
  out.center_mm = c2;
  const Vec3 q = translation_mm + center_mm - mat3_apply(matrix, center_mm);
  out.translation_mm = q + mat3_apply(matrix, c2) - c2;
  return out;
}

Vec3 apply_affine(const AffineTransform& t, const Vec3& p) { return t.apply(p); }

AffineTransform compose(const AffineTransform& outer, const AffineTransform& inner) {
  AffineTransform out;
  out.matrix = mat3_mul(outer.matrix, inner.matrix);
  out.center_mm = inner.center_mm;
  // outer(inner(p)) with p expanded about inner.center:
  const Vec3 inner_off = inner.center_mm + inner.translation_mm;
  out.translation_mm = mat3_apply(outer.matrix, inner_off - outer.center_mm) +
                       outer.center_mm + outer.translation_mm - inner.center_mm;
  return out;
}

AffineTransform inverse(const AffineTransform& t) {
  AffineTransform out;
  out.matrix = mat3_inverse(t.matrix);
  out.center_mm = t.center_mm;
  // p = M^-1 (q - c - t) + c  ->  translation = -M^-1 t about the same center.
  out.translation_mm = mat3_apply(out.matrix, t.translation_mm) * -1.0;
  return out;
}

Mat3 RigidParams::rotation() const {
  const double cx = std::cos(euler_xyz[0]), sx = std::sin(euler_xyz[0]);
  const double cy = std::cos(euler_xyz[1]), sy = std::sin(euler_xyz[1]);
  const double cz = std::cos(euler_xyz[2]), sz = std::sin(euler_xyz[2]);
  const Mat3 rx = {{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
  const Mat3 ry = {{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
  const Mat3 rz = {{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
  return mat3_mul(rx, mat3_mul(ry, rz));
}

std::array<Mat3, 3> rotation_derivatives(const RigidParams& p) {
  const double cx = std::cos(p.euler_xyz[0]), sx = std::sin(p.euler_xyz[0]);
  const double cy = std::cos(p.euler_xyz[1]), sy = std::sin(p.euler_xyz[1]);
  const double cz = std::cos(p.euler_xyz[2]), sz = std::sin(p.euler_xyz[2]);
  const Mat3 rx = {{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
  const Mat3 ry = {{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
  const Mat3 rz = {{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
  const Mat3 drx = {{{0, 0, 0}, {0, -sx, -cx}, {0, cx, -sx}}};
  const Mat3 dry = {{{-sy, 0, cy}, {0, 0, 0}, {-cy, 0, -sy}}};
  const Mat3 drz = {{{-sz, -cz, 0}, {cz, -sz, 0}, {0, 0, 0}}};
  return {mat3_mul(drx, mat3_mul(ry, rz)), mat3_mul(rx, mat3_mul(dry, rz)),
          mat3_mul(rx, mat3_mul(ry, drz))};
}

AffineTransform RigidParams::to_affine(const Vec3& center, const Vec3& fov) const {
  AffineTransform t;
  t.matrix = rotation();
  t.center_mm = center;
  t.translation_mm = {translation_frac[0] * fov.x, translation_frac[1] * fov.y,
                      translation_frac[2] * fov.z};
  return t;
}

DisplacementField::DisplacementField(GridGeometry g, std::vector<double> values)
    : grid(g), u(std::move(values)) {
  if (!grid.valid() || grid.dims[0] < 2 || grid.dims[1] < 2 || grid.dims[2] < 2)
    throw ContractError("displacement grid needs at least 2 points per axis");
  if (u.size() != 3 * grid.voxel_count())
    throw ContractError("displacement data length does not match grid");
  for (double v : u)
    if (!std::isfinite(v)) throw ContractError("displacement contains non-finite values");
}

DisplacementField DisplacementField::zeros(const GridGeometry& image_geom, int factor) {
  if (factor < 1) throw ContractError("control grid factor must be >= 1");
  GridGeometry g;
  for (int a = 0; a < 3; ++a) {
    const int n = image_geom.dims[a];
    g.dims[a] = std::max(2, (n + factor - 1) / factor);
    // Span exactly the image bounding box: first point at origin, last at the
    // far voxel center.
    g.origin[a] = image_geom.origin[a];
    g.spacing[a] = (n > 1)
                       ? (n - 1) * image_geom.spacing[a] / (g.dims[a] - 1)
                       : image_geom.spacing[a];
  }
  return DisplacementField(g, std::vector<double>(3 * g.voxel_count(), 0.0));
}

Vec3 DisplacementField::sample_mm(const Vec3& world) const {
  const Vec3 p = grid.voxel_from_world(world);
  const auto& d = grid.dims;

  auto clampf = [](double x, int n) {
    if (x < 0.0) return 0.0;
    const double hi = static_cast<double>(n - 1);
    return x > hi ? hi : x;
  };
  const double px = clampf(p.x, d[0]), py = clampf(p.y, d[1]), pz = clampf(p.z, d[2]);
  int i0 = static_cast<int>(px), j0 = static_cast<int>(py), k0 = static_cast<int>(pz);
  if (i0 > d[0] - 2) i0 = d[0] - 2;
  if (j0 > d[1] - 2) j0 = d[1] - 2;
  if (k0 > d[2] - 2) k0 = d[2] - 2;
  const double fx = px - i0, fy = py - j0, fz = pz - k0;
  const double gx = 1.0 - fx, gy = 1.0 - fy, gz = 1.0 - fz;

  const double w000 = gx * gy * gz, w100 = fx * gy * gz;
  const double w010 = gx * fy * gz, w110 = fx * fy * gz;
  const double w001 = gx * gy * fz, w101 = fx * gy * fz;
  const double w011 = gx * fy * fz, w111 = fx * fy * fz;

  Vec3 out;
  auto acc = [&](int i, int j, int k, double w) {
    const std::size_t base = 3 * grid.linear(i, j, k);
    out.x += w * u[base];
    out.y += w * u[base + 1];
    out.z += w * u[base + 2];
  };
  acc(i0, j0, k0, w000);
  acc(i0 + 1, j0, k0, w100);
  acc(i0, j0 + 1, k0, w010);
  acc(i0 + 1, j0 + 1, k0, w110);
  acc(i0, j0, k0 + 1, w001);
  acc(i0 + 1, j0, k0 + 1, w101);
  acc(i0, j0 + 1, k0 + 1, w011);
  acc(i0 + 1, j0 + 1, k0 + 1, w111);
  return out;
}

double DisplacementField::max_magnitude_mm() const {
  double best = 0.0;
  for (std::size_t n = 0; n < u.size(); n += 3) {
    const double m = u[n] * u[n] + u[n + 1] * u[n + 1] + u[n + 2] * u[n + 2];
    best = std::max(best, m);
  }
  return std::sqrt(best);
}

namespace {

inline Vec3 warp_point(const AffineTransform* affine, const DisplacementField* field,
                       const Vec3& x) {
  Vec3 phi = affine ? affine->apply(x) : x;
  if (field) phi += field->sample_mm(x);
  return phi;
}

}  // namespace

Volume warp_volume(const Volume& moving, const AffineTransform* affine,
                   const DisplacementField* field, const GridGeometry& target) {
  std::vector<float> out(target.voxel_count());
  std::size_t n = 0;
  for (int k = 0; k < target.dims[2]; ++k)
    for (int j = 0; j < target.dims[1]; ++j)
      for (int i = 0; i < target.dims[0]; ++i, ++n) {
        const Vec3 x = target.world(i, j, k);
        const Vec3 phi = warp_point(affine, field, x);
        out[n] = static_cast<float>(
            trilinear_sample(moving, moving.geom.voxel_from_world(phi)));
      }
  return Volume(target, std::move(out));
}

LabelMask warp_mask(const LabelMask& moving, const AffineTransform* affine,
                    const DisplacementField* field, const GridGeometry& target,
                    MaskWarpMode mode) {
  std::vector<std::int32_t> out(target.voxel_count(), 0);

  if (mode == MaskWarpMode::Nearest) {
    std::size_t n = 0;
    for (int k = 0; k < target.dims[2]; ++k)
      for (int j = 0; j < target.dims[1]; ++j)
        for (int i = 0; i < target.dims[0]; ++i, ++n) {
          const Vec3 x = target.world(i, j, k);
          const Vec3 p = moving.geom.voxel_from_world(warp_point(affine, field, x));
          const int ii = std::clamp(static_cast<int>(std::lround(p.x)), 0,
                                    moving.geom.dims[0] - 1);
          const int jj = std::clamp(static_cast<int>(std::lround(p.y)), 0,
                                    moving.geom.dims[1] - 1);
          const int kk = std::clamp(static_cast<int>(std::lround(p.z)), 0,
                                    moving.geom.dims[2] - 1);
          out[n] = moving.at(ii, jj, kk);
        }
    return LabelMask(target, std::move(out));
  }

  // LinearThreshold: warp one indicator per present label (background
  // included) and keep the argmax, ties to the lower label id.
  std::vector<std::int32_t> present;
  {
    std::vector<std::int32_t> sorted(moving.labels.begin(), moving.labels.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    present = std::move(sorted);
  }

  std::vector<double> best_score(target.voxel_count(),
                                 -std::numeric_limits<double>::infinity());
  for (std::int32_t label : present) {  // ascending: ties keep the lower id
    std::vector<float> indicator(moving.labels.size());
    for (std::size_t n = 0; n < indicator.size(); ++n)
      indicator[n] = moving.labels[n] == label ? 1.0f : 0.0f;
    const Volume ind(moving.geom, std::move(indicator));

    std::size_t n = 0;
    for (int k = 0; k < target.dims[2]; ++k)
      for (int j = 0; j < target.dims[1]; ++j)
        for (int i = 0; i < target.dims[0]; ++i, ++n) {
          const Vec3 x = target.world(i, j, k);
          const double s =
              trilinear_sample(ind, ind.geom.voxel_from_world(warp_point(affine, field, x)));
          if (s > best_score[n]) {
            best_score[n] = s;
            out[n] = label;
          }
        }
  }
  return LabelMask(target, std::move(out));
}

double smoothness_energy(const DisplacementField& field) {
  return smoothness_energy_accumulate(field.grid, field.u, std::span<double>(), 1.0);
}

double smoothness_energy_grad(const DisplacementField& field, std::span<double> grad) {
  if (grad.size() != field.u.size())
    throw ContractError("smoothness gradient span has wrong size");
  std::fill(grad.begin(), grad.end(), 0.0);
  return smoothness_energy_accumulate(field.grid, field.u, grad, 1.0);
}

double smoothness_energy_accumulate(const GridGeometry& g, std::span<const double> u,
                                    std::span<double> grad, double scale) {
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != u.size())
    throw ContractError("smoothness gradient span has wrong size");

  const double inv_n = 1.0 / static_cast<double>(g.voxel_count());
  const std::size_t stride[3] = {3, 3 * static_cast<std::size_t>(g.dims[0]),
                                 3 * static_cast<std::size_t>(g.dims[0]) * g.dims[1]};
  double energy = 0.0;

  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t base = 3 * g.linear(i, j, k);
        const int idx[3] = {i, j, k};
        for (int axis = 0; axis < 3; ++axis) {
          if (idx[axis] + 1 >= g.dims[axis]) continue;
          const std::size_t nbase = base + stride[axis];
          const double inv_h = 1.0 / g.spacing[axis];
          for (int c = 0; c < 3; ++c) {
            const double d = (u[nbase + c] - u[base + c]) * inv_h;
            energy += d * d;
            if (want_grad) {
              const double gterm = scale * 2.0 * d * inv_h * inv_n;
              grad[nbase + c] += gterm;
              grad[base + c] -= gterm;
            }
          }
        }
      }
  return energy * inv_n;
}

DisplacementField smooth_random_displacement(const GridGeometry& image_geom,
                                             double max_disp_vox,
                                             double smooth_sigma_vox, Rng& rng) {
  DisplacementField field = DisplacementField::zeros(image_geom, 1);
  if (max_disp_vox <= 0.0) return field;

  const auto& g = field.grid;
  const std::size_t n = g.voxel_count();
  std::vector<double> noise(3 * n);
  for (double& v : noise) v = rng.normal();

  // Separable Gaussian blur per component, truncated at 3 sigma.
  if (smooth_sigma_vox > 0.0) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * smooth_sigma_vox)));
    std::vector<double> kernel(2 * radius + 1);
    double ksum = 0.0;
    for (int t = -radius; t <= radius; ++t) {
      kernel[t + radius] = std::exp(-0.5 * (t * t) / (smooth_sigma_vox * smooth_sigma_vox));
      ksum += kernel[t + radius];
    }
    for (double& kv : kernel) kv /= ksum;

    std::vector<double> tmp(3 * n);
    const int dims[3] = {g.dims[0], g.dims[1], g.dims[2]};
    for (int axis = 0; axis < 3; ++axis) {
      const auto& src = noise;
      auto& dst = tmp;
      for (int k = 0; k < dims[2]; ++k)
        for (int j = 0; j < dims[1]; ++j)
          for (int i = 0; i < dims[0]; ++i) {
            const int idx[3] = {i, j, k};
            double acc[3] = {0.0, 0.0, 0.0};
            for (int t = -radius; t <= radius; ++t) {
              int q[3] = {idx[0], idx[1], idx[2]};
              q[axis] = std::clamp(idx[axis] + t, 0, dims[axis] - 1);
              const std::size_t s = 3 * g.linear(q[0], q[1], q[2]);
              const double w = kernel[t + radius];
              acc[0] += w * src[s];
              acc[1] += w * src[s + 1];
              acc[2] += w * src[s + 2];
            }
            const std::size_t d = 3 * g.linear(i, j, k);
            dst[d] = acc[0];
            dst[d + 1] = acc[1];
            dst[d + 2] = acc[2];
          }
      noise.swap(tmp);
    }
  }

  // Scale so the peak magnitude is max_disp_vox voxels, expressed in mm.
  double peak = 0.0;
  for (std::size_t m = 0; m < n; ++m) {
    const double mag = noise[3 * m] * noise[3 * m] + noise[3 * m + 1] * noise[3 * m + 1] +
                       noise[3 * m + 2] * noise[3 * m + 2];
    peak = std::max(peak, mag);
  }
  peak = std::sqrt(peak);
  if (peak > 0.0) {
    const double scale = max_disp_vox / peak;
    for (std::size_t m = 0; m < n; ++m)
      for (int c = 0; c < 3; ++c)
        field.u[3 * m + c] = noise[3 * m + c] * scale * image_geom.spacing[c];
  }
  return field;
}

void save_affine_json(const AffineTransform& t, const std::string& path) {
  json j;
  j["matrix"] = {t.matrix[0], t.matrix[1], t.matrix[2]};
  j["translation_mm"] = {t.translation_mm.x, t.translation_mm.y, t.translation_mm.z};
  j["center_mm"] = {t.center_mm.x, t.center_mm.y, t.center_mm.z};
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f << j.dump(2) << '\n';
}

AffineTransform load_affine_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open '" + path + "'");
  json j;
  try {
    f >> j;
    AffineTransform t;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) t.matrix[r][c] = j.at("matrix").at(r).at(c).get<double>();
    for (int c = 0; c < 3; ++c) {
      t.translation_mm[c] = j.at("translation_mm").at(c).get<double>();
      t.center_mm[c] = j.at("center_mm").at(c).get<double>();
    }
    return t;
  } catch (const json::exception& ex) {
    throw FormatError("'" + path + "': " + ex.what());
  }
}

void save_field(const DisplacementField& f, const std::string& manifest_path) {
  const std::string suffix = ".mvol.json";
  if (manifest_path.size() <= suffix.size() ||
      manifest_path.compare(manifest_path.size() - suffix.size(), suffix.size(),
                            suffix) != 0)
    throw ContractError("field manifest path must end in .mvol.json");
  const std::string raw_path =
      manifest_path.substr(0, manifest_path.size() - 5) + ".raw";

  json j;
  j["dims"] = f.grid.dims;
  j["spacing"] = f.grid.spacing;
  j["origin"] = f.grid.origin;
  j["dtype"] = "f64";
  j["components"] = 3;
  j["data_file"] = std::filesystem::path(raw_path).filename().string();
  std::ofstream mf(manifest_path, std::ios::trunc);
  if (!mf) throw FormatError("cannot open '" + manifest_path + "' for writing");
  mf << j.dump(2) << '\n';

  std::ofstream rf(raw_path, std::ios::binary | std::ios::trunc);
  if (!rf) throw FormatError("cannot open '" + raw_path + "' for writing");
  rf.write(reinterpret_cast<const char*>(f.u.data()),
           static_cast<std::streamsize>(f.u.size() * sizeof(double)));
  if (!rf) throw FormatError("short write to '" + raw_path + "'");
}

DisplacementField load_field(const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw FormatError("cannot open '" + manifest_path + "'");
  json j;
  try {
    mf >> j;
  } catch (const json::exception& ex) {
    throw FormatError("'" + manifest_path + "': " + ex.what());
  }
  try {
    GridGeometry g;
    for (int a = 0; a < 3; ++a) {
      g.dims[a] = j.at("dims").at(a).get<int>();
      g.spacing[a] = j.at("spacing").at(a).get<double>();
      g.origin[a] = j.at("origin").at(a).get<double>();
    }
    if (j.at("dtype").get<std::string>() != "f64" || j.at("components").get<int>() != 3)
      throw UnsupportedError("'" + manifest_path + "': not a displacement field");
    const std::string data_file = j.at("data_file").get<std::string>();
    if (data_file.empty()) throw FormatError("'" + manifest_path + "': empty data_file");
    const auto raw_path = std::filesystem::path(manifest_path).parent_path() / data_file;

    std::ifstream rf(raw_path, std::ios::binary);
    if (!rf) throw FormatError("cannot open '" + raw_path.string() + "'");
    std::vector<double> u(3 * g.voxel_count());
    rf.read(reinterpret_cast<char*>(u.data()),
            static_cast<std::streamsize>(u.size() * sizeof(double)));
    if (!rf || rf.gcount() != static_cast<std::streamsize>(u.size() * sizeof(double)))
      throw FormatError("'" + raw_path.string() + "': truncated field data");
    return DisplacementField(g, std::move(u));
  } catch (const json::exception& ex) {
    throw FormatError("'" + manifest_path + "': " + ex.what());
  }
}

}  // namespace atlasfuse
