#include "atlasfuse/volume.hpp"

#include <algorithm>
#include <cmath>

#include "atlasfuse/errors.hpp"

namespace atlasfuse {

namespace {

void require_valid_geom(const GridGeometry& g) {
  if (!g.valid()) throw ContractError("invalid grid geometry");
}

}  // namespace

Volume::Volume(GridGeometry g, std::vector<float> values)
    : geom(g), data(std::move(values)) {
  require_valid_geom(geom);
  if (data.size() != geom.voxel_count())
    throw ContractError("volume data length does not match dims");
  for (float f : data)
    if (!std::isfinite(f)) throw ContractError("volume contains non-finite values");
}

Volume Volume::filled(GridGeometry g, float value) {
  return Volume(g, std::vector<float>(g.voxel_count(), value));
}

LabelMask::LabelMask(GridGeometry g, std::vector<std::int32_t> values)
    : geom(g), labels(std::move(values)) {
  require_valid_geom(geom);
  if (labels.size() != geom.voxel_count())
    throw ContractError("mask label length does not match dims");
  for (std::int32_t v : labels)
    if (v < 0) throw ContractError("mask contains negative labels");
}

LabelMask LabelMask::filled(GridGeometry g, std::int32_t value) {
  return LabelMask(g, std::vector<std::int32_t>(g.voxel_count(), value));
}

std::size_t LabelMask::foreground_count() const {
  std::size_t n = 0;
  for (std::int32_t v : labels) n += (v != 0);
  return n;
}

ProbMask::ProbMask(GridGeometry g, std::vector<float> v)
    : geom(g), values(std::move(v)) {
  require_valid_geom(geom);
  if (values.size() != geom.voxel_count())
    throw ContractError("probability data length does not match dims");
  for (float f : values)
    if (!(f >= 0.0f && f <= 1.0f))
      throw ContractError("probability values must lie in [0,1]");
}

ProbMask ProbMask::filled(GridGeometry g, float value) {
  return ProbMask(g, std::vector<float>(g.voxel_count(), value));
}

namespace {

// Per-axis clamp + cell decomposition shared by value and gradient sampling.
struct AxisSample {
  int i0;
  int i1;
  double frac;
  bool clamped;  // outside the grid: derivative along this axis is zero
};

inline AxisSample decompose(double p, int n) {
  AxisSample s;
  if (n == 1) return {0, 0, 0.0, true};
  if (p < 0.0) return {0, 0, 0.0, true};
  if (p >= static_cast<double>(n - 1)) return {n - 1, n - 1, 0.0, p > n - 1};
  double fl = std::floor(p);
  int i0 = static_cast<int>(fl);
  if (i0 > n - 2) i0 = n - 2;
  s.i0 = i0;
  s.i1 = i0 + 1;
  s.frac = p - static_cast<double>(i0);
  s.clamped = false;
  return s;
}

}  // namespace

double trilinear_sample(const Volume& v, const Vec3& p) {
  const auto& d = v.geom.dims;
  const AxisSample ax = decompose(p.x, d[0]);
  const AxisSample ay = decompose(p.y, d[1]);
  const AxisSample az = decompose(p.z, d[2]);

  auto val = [&](int i, int j, int k) -> double {
    return static_cast<double>(v.data[v.geom.linear(i, j, k)]);
  };

  const double c00 = val(ax.i0, ay.i0, az.i0) +
                     ax.frac * (val(ax.i1, ay.i0, az.i0) - val(ax.i0, ay.i0, az.i0));
  const double c10 = val(ax.i0, ay.i1, az.i0) +
                     ax.frac * (val(ax.i1, ay.i1, az.i0) - val(ax.i0, ay.i1, az.i0));
  const double c01 = val(ax.i0, ay.i0, az.i1) +
                     ax.frac * (val(ax.i1, ay.i0, az.i1) - val(ax.i0, ay.i0, az.i1));
  const double c11 = val(ax.i0, ay.i1, az.i1) +
                     ax.frac * (val(ax.i1, ay.i1, az.i1) - val(ax.i0, ay.i1, az.i1));
  const double c0 = c00 + ay.frac * (c10 - c00);
  const double c1 = c01 + ay.frac * (c11 - c01);
  return c0 + az.frac * (c1 - c0);
}

TrilinearSample trilinear_sample_grad(const Volume& v, const Vec3& p) {
  const auto& d = v.geom.dims;
  const AxisSample ax = decompose(p.x, d[0]);
  const AxisSample ay = decompose(p.y, d[1]);
  const AxisSample az = decompose(p.z, d[2]);

  auto val = [&](int i, int j, int k) -> double {
    return static_cast<double>(v.data[v.geom.linear(i, j, k)]);
  };

  const double v000 = val(ax.i0, ay.i0, az.i0), v100 = val(ax.i1, ay.i0, az.i0);
  const double v010 = val(ax.i0, ay.i1, az.i0), v110 = val(ax.i1, ay.i1, az.i0);
  const double v001 = val(ax.i0, ay.i0, az.i1), v101 = val(ax.i1, ay.i0, az.i1);
  const double v011 = val(ax.i0, ay.i1, az.i1), v111 = val(ax.i1, ay.i1, az.i1);

  const double fx = ax.frac, fy = ay.frac, fz = az.frac;
  const double gx = 1.0 - fx, gy = 1.0 - fy, gz = 1.0 - fz;

  TrilinearSample out;
  out.value = gz * (gy * (gx * v000 + fx * v100) + fy * (gx * v010 + fx * v110)) +
              fz * (gy * (gx * v001 + fx * v101) + fy * (gx * v011 + fx * v111));

  out.d_voxel.x = ax.clamped ? 0.0
                             : gz * (gy * (v100 - v000) + fy * (v110 - v010)) +
                                   fz * (gy * (v101 - v001) + fy * (v111 - v011));
  out.d_voxel.y = ay.clamped ? 0.0
                             : gz * (gx * (v010 - v000) + fx * (v110 - v100)) +
                                   fz * (gx * (v011 - v001) + fx * (v111 - v101));
  out.d_voxel.z = az.clamped ? 0.0
                             : gy * (gx * (v001 - v000) + fx * (v101 - v100)) +
                                   fy * (gx * (v011 - v010) + fx * (v111 - v110));
  return out;
}

std::array<Volume, 3> spatial_gradient(const Volume& v) {
  const auto& g = v.geom;
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  std::array<std::vector<float>, 3> out;
  for (auto& o : out) o.assign(g.voxel_count(), 0.0f);

  auto val = [&](int i, int j, int k) -> double {
    return static_cast<double>(v.data[g.linear(i, j, k)]);
  };

  for (int k = 0; k < nz; ++k) {
    for (int j = 0; j < ny; ++j) {
      for (int i = 0; i < nx; ++i) {
        const std::size_t idx = g.linear(i, j, k);
        if (nx >= 2) {
          double d;
          if (i == 0) d = val(1, j, k) - val(0, j, k);
          else if (i == nx - 1) d = val(nx - 1, j, k) - val(nx - 2, j, k);
          else d = 0.5 * (val(i + 1, j, k) - val(i - 1, j, k));
          out[0][idx] = static_cast<float>(d / g.spacing[0]);
        }
        if (ny >= 2) {
          double d;
          if (j == 0) d = val(i, 1, k) - val(i, 0, k);
          else if (j == ny - 1) d = val(i, ny - 1, k) - val(i, ny - 2, k);
          else d = 0.5 * (val(i, j + 1, k) - val(i, j - 1, k));
          out[1][idx] = static_cast<float>(d / g.spacing[1]);
        }
        if (nz >= 2) {
          double d;
          if (k == 0) d = val(i, j, 1) - val(i, j, 0);
          else if (k == nz - 1) d = val(i, j, nz - 1) - val(i, j, nz - 2);
          else d = 0.5 * (val(i, j, k + 1) - val(i, j, k - 1));
          out[2][idx] = static_cast<float>(d / g.spacing[2]);
        }
      }
    }
  }
  return {Volume(g, std::move(out[0])), Volume(g, std::move(out[1])),
          Volume(g, std::move(out[2]))};
}

double percentile_sorted(const std::vector<double>& sorted, double pct) {
  if (sorted.empty()) throw ContractError("percentile of empty set");
  if (sorted.size() == 1) return sorted[0];
  const double pos = pct / 100.0 * static_cast<double>(sorted.size() - 1);
  const double fl = std::floor(pos);
  std::size_t lo = static_cast<std::size_t>(fl);
  if (lo >= sorted.size() - 1) return sorted.back();
  const double frac = pos - fl;
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

Volume normalize_intensity(const Volume& v, double lo_pct, double hi_pct) {
  if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0))
    throw ContractError("normalize_intensity requires 0 <= lo < hi <= 100");

  std::vector<double> sorted(v.data.begin(), v.data.end());
  std::sort(sorted.begin(), sorted.end());
  const double lo = percentile_sorted(sorted, lo_pct);
  const double hi = percentile_sorted(sorted, hi_pct);

  std::vector<float> out(v.data.size());
  if (!(hi > lo)) {
    std::fill(out.begin(), out.end(), 0.0f);
    return Volume(v.geom, std::move(out));
  }
  const double inv = 1.0 / (hi - lo);
  for (std::size_t n = 0; n < v.data.size(); ++n) {
    double x = static_cast<double>(v.data[n]);
    x = std::clamp(x, lo, hi);
    out[n] = static_cast<float>((x - lo) * inv);
  }
  return Volume(v.geom, std::move(out));
}

Volume downsample_mean(const Volume& v, int factor) {
  if (factor < 1) throw ContractError("downsample factor must be >= 1");
  if (factor == 1) return v;
  const auto& g = v.geom;
  GridGeometry out_g;
  for (int a = 0; a < 3; ++a) {
    out_g.dims[a] = (g.dims[a] + factor - 1) / factor;
    out_g.spacing[a] = g.spacing[a] * factor;
    out_g.origin[a] = g.origin[a] + 0.5 * (factor - 1) * g.spacing[a];
  }
  std::vector<float> out(out_g.voxel_count(), 0.0f);
  for (int K = 0; K < out_g.dims[2]; ++K) {
    const int k0 = K * factor, k1 = std::min(k0 + factor, g.dims[2]);
    for (int J = 0; J < out_g.dims[1]; ++J) {
      const int j0 = J * factor, j1 = std::min(j0 + factor, g.dims[1]);
      for (int I = 0; I < out_g.dims[0]; ++I) {
        const int i0 = I * factor, i1 = std::min(i0 + factor, g.dims[0]);
        double sum = 0.0;
        int count = 0;
        for (int k = k0; k < k1; ++k)
          for (int j = j0; j < j1; ++j)
            for (int i = i0; i < i1; ++i) {
              sum += v.data[g.linear(i, j, k)];
              ++count;
            }
        out[out_g.linear(I, J, K)] = static_cast<float>(sum / count);
      }
    }
  }
  return Volume(out_g, std::move(out));
}

ProbMask mask_to_prob(const LabelMask& m, std::int32_t label) {
  std::vector<float> v(m.labels.size());
  for (std::size_t n = 0; n < v.size(); ++n)
    v[n] = (m.labels[n] == label) ? 1.0f : 0.0f;
  return ProbMask(m.geom, std::move(v));
}

LabelMask binarize_labels(const LabelMask& m) {
  std::vector<std::int32_t> v(m.labels.size());
  for (std::size_t n = 0; n < v.size(); ++n) v[n] = m.labels[n] != 0 ? 1 : 0;
  return LabelMask(m.geom, std::move(v));
}

LabelMask select_label(const LabelMask& m, std::int32_t label) {
  std::vector<std::int32_t> v(m.labels.size());
  for (std::size_t n = 0; n < v.size(); ++n) v[n] = m.labels[n] == label ? 1 : 0;
  return LabelMask(m.geom, std::move(v));
}

}  // namespace atlasfuse
