#include "atlasfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "atlasfuse/errors.hpp"

namespace atlasfuse {

double dice(const LabelMask& a, const LabelMask& b) {
  if (a.geom != b.geom) throw ContractError("dice requires matching geometry");
  std::size_t na = 0, nb = 0, ninter = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const bool fa = a.labels[i] != 0, fb = b.labels[i] != 0;
    na += fa;
    nb += fb;
    ninter += fa && fb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ninter) / static_cast<double>(na + nb);
}

std::vector<Index3> surface_voxels(const LabelMask& m) {
  const auto& g = m.geom;
  std::vector<Index3> out;
  constexpr int d6[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0},
                            {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        if (m.at(i, j, k) == 0) continue;
        for (const auto& d : d6) {
          const int ii = i + d[0], jj = j + d[1], kk = k + d[2];
          if (!g.contains(ii, jj, kk) || m.at(ii, jj, kk) == 0) {
            out.push_back({i, j, k});
            break;
          }
        }
      }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D squared-distance lower envelope (Felzenszwalb-Huttenlocher) with
// physical sample positions x_i = i * h. f is overwritten with the result.
void edt_1d(std::vector<double>& f, double h, std::vector<int>& v,
            std::vector<double>& z, std::vector<double>& fcopy) {
  const int n = static_cast<int>(f.size());
  fcopy.assign(f.begin(), f.end());

  int kk = -1;  // rightmost parabola index, -1 when none yet
  v.resize(n);
  z.resize(n + 1);
  for (int q = 0; q < n; ++q) {
    if (fcopy[q] == kInf) continue;
    const double xq = q * h;
    if (kk < 0) {
      kk = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    for (;;) {
      const int p = v[kk];
      const double xp = p * h;
      s = ((fcopy[q] + xq * xq) - (fcopy[p] + xp * xp)) / (2.0 * xq - 2.0 * xp);
      if (s <= z[kk]) {
        --kk;
        if (kk < 0) break;
      } else {
        break;
      }
    }
    ++kk;
    v[kk] = q;
    z[kk] = (kk == 0) ? -kInf : s;
    z[kk + 1] = kInf;
  }

  if (kk < 0) {
    std::fill(f.begin(), f.end(), kInf);
    return;
  }
  int idx = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = q * h;
    while (z[idx + 1] < xq) ++idx;
    const double d = xq - v[idx] * h;
    f[q] = d * d + fcopy[v[idx]];
  }
}

DistanceMap edt_impl(const LabelMask& m, const std::array<double, 3>& spacing) {
  const auto& g = m.geom;
  DistanceMap out;
  out.geom = g;
  out.geom.spacing = spacing;
  out.mm.assign(g.voxel_count(), kInf);
  out.finite = !m.empty_foreground();
  for (std::size_t i = 0; i < m.labels.size(); ++i)
    if (m.labels[i] != 0) out.mm[i] = 0.0;
  if (!out.finite) return out;

  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  std::vector<double> line, fcopy, z;
  std::vector<int> v;

  // x pass
  line.resize(nx);
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j) {
      for (int i = 0; i < nx; ++i) line[i] = out.mm[g.linear(i, j, k)];
      edt_1d(line, spacing[0], v, z, fcopy);
      for (int i = 0; i < nx; ++i) out.mm[g.linear(i, j, k)] = line[i];
    }
  // y pass
  line.resize(ny);
  for (int k = 0; k < nz; ++k)
    for (int i = 0; i < nx; ++i) {
      for (int j = 0; j < ny; ++j) line[j] = out.mm[g.linear(i, j, k)];
      edt_1d(line, spacing[1], v, z, fcopy);
      for (int j = 0; j < ny; ++j) out.mm[g.linear(i, j, k)] = line[j];
    }
  // z pass
  line.resize(nz);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      for (int k = 0; k < nz; ++k) line[k] = out.mm[g.linear(i, j, k)];
      edt_1d(line, spacing[2], v, z, fcopy);
      for (int k = 0; k < nz; ++k) out.mm[g.linear(i, j, k)] = line[k];
    }

  for (double& d : out.mm) d = std::sqrt(d);
  return out;
}

LabelMask mask_from_voxels(const GridGeometry& g, const std::vector<Index3>& voxels) {
  std::vector<std::int32_t> lab(g.voxel_count(), 0);
  for (const auto& v : voxels) lab[g.linear(v.i, v.j, v.k)] = 1;
  return LabelMask(g, std::move(lab));
}

}  // namespace

DistanceMap edt(const LabelMask& m) { return edt_impl(m, m.geom.spacing); }

DistanceMap edt_with_spacing(const LabelMask& m, const std::array<double, 3>& spacing) {
  return edt_impl(m, spacing);
}

std::optional<double> hd95(const LabelMask& a, const LabelMask& b,
                           Hd95Convention convention) {
  if (a.geom != b.geom) throw ContractError("hd95 requires matching geometry");
  const auto sa = surface_voxels(a);
  const auto sb = surface_voxels(b);
  if (sa.empty() || sb.empty()) return std::nullopt;

  const DistanceMap db = edt(mask_from_voxels(a.geom, sb));
  const DistanceMap da = edt(mask_from_voxels(a.geom, sa));

  std::vector<double> ab, ba;
  ab.reserve(sa.size());
  ba.reserve(sb.size());
  for (const auto& v : sa) ab.push_back(db.at(v.i, v.j, v.k));
  for (const auto& v : sb) ba.push_back(da.at(v.i, v.j, v.k));

  if (convention == Hd95Convention::PooledSymmetric) {
    std::vector<double> pooled;
    pooled.reserve(ab.size() + ba.size());
    pooled.insert(pooled.end(), ab.begin(), ab.end());
    pooled.insert(pooled.end(), ba.begin(), ba.end());
    std::sort(pooled.begin(), pooled.end());
    return percentile_sorted(pooled, 95.0);
  }
  std::sort(ab.begin(), ab.end());
  std::sort(ba.begin(), ba.end());
  return std::max(percentile_sorted(ab, 95.0), percentile_sorted(ba, 95.0));
}

double nsd(const LabelMask& a, const LabelMask& b, double tol_mm) {
  if (a.geom != b.geom) throw ContractError("nsd requires matching geometry");
  const auto sa = surface_voxels(a);
  const auto sb = surface_voxels(b);
  if (sa.empty() && sb.empty()) return 1.0;
  if (sa.empty() || sb.empty()) return 0.0;

  const DistanceMap db = edt(mask_from_voxels(a.geom, sb));
  const DistanceMap da = edt(mask_from_voxels(a.geom, sa));

  std::size_t hits = 0;
  for (const auto& v : sa) hits += db.at(v.i, v.j, v.k) <= tol_mm;
  for (const auto& v : sb) hits += da.at(v.i, v.j, v.k) <= tol_mm;
  return static_cast<double>(hits) / static_cast<double>(sa.size() + sb.size());
}

// ---------------------------------------------------------------------------
// Skeletonization
// ---------------------------------------------------------------------------

namespace {

// Local topology checks on the 3x3x3 neighborhood, by component counting.
// A border voxel may be deleted iff exactly one 26-component of foreground
// neighbors exists and exactly one 6-component of background voxels in the
// 18-neighborhood touches the center by a face.
struct NeighborhoodTopology {
  // n[d] for d in [0,27), d = (dz+1)*9 + (dy+1)*3 + (dx+1); center is 13.
  bool fg[27];

  int count_fg_26_components() const {
    int comp = 0;
    bool seen[27] = {};
    int stack[27];
    for (int s = 0; s < 27; ++s) {
      if (s == 13 || !fg[s] || seen[s]) continue;
      ++comp;
      int top = 0;
      stack[top++] = s;
      seen[s] = true;
      while (top > 0) {
        const int cur = stack[--top];
        const int cx = cur % 3, cy = (cur / 3) % 3, cz = cur / 9;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int nx2 = cx + dx, ny2 = cy + dy, nz2 = cz + dz;
              if (nx2 < 0 || nx2 > 2 || ny2 < 0 || ny2 > 2 || nz2 < 0 || nz2 > 2)
                continue;
              const int nb = nz2 * 9 + ny2 * 3 + nx2;
              if (nb == 13 || nb == cur || !fg[nb] || seen[nb]) continue;
              seen[nb] = true;
              stack[top++] = nb;
            }
      }
    }
    return comp;
  }

  // 6-components of background restricted to the 18-neighborhood, counting
  // only those that contain a face neighbor of the center.
  int count_bg_6_components_touching_center() const {
    auto in18 = [](int d) {
      if (d == 13) return false;
      const int dx = d % 3 - 1, dy = (d / 3) % 3 - 1, dz = d / 9 - 1;
      return std::abs(dx) + std::abs(dy) + std::abs(dz) <= 2;
    };
    auto is_face = [](int d) {
      const int dx = d % 3 - 1, dy = (d / 3) % 3 - 1, dz = d / 9 - 1;
      return std::abs(dx) + std::abs(dy) + std::abs(dz) == 1;
    };

    bool seen[27] = {};
    int comp = 0;
    int stack[27];
    for (int s = 0; s < 27; ++s) {
      if (!in18(s) || fg[s] || seen[s] || !is_face(s)) continue;
      // BFS over 6-adjacency within the 18-neighborhood.
      ++comp;
      int top = 0;
      stack[top++] = s;
      seen[s] = true;
      while (top > 0) {
        const int cur = stack[--top];
        const int cx = cur % 3, cy = (cur / 3) % 3, cz = cur / 9;
        constexpr int d6[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0},
                                  {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
        for (const auto& d : d6) {
          const int nx2 = cx + d[0], ny2 = cy + d[1], nz2 = cz + d[2];
          if (nx2 < 0 || nx2 > 2 || ny2 < 0 || ny2 > 2 || nz2 < 0 || nz2 > 2) continue;
          const int nb = nz2 * 9 + ny2 * 3 + nx2;
          if (!in18(nb) || fg[nb] || seen[nb]) continue;
          seen[nb] = true;
          stack[top++] = nb;
        }
      }
    }
    return comp;
  }
};

}  // namespace

LabelMask skeletonize3d(const LabelMask& m) {
  const auto& g = m.geom;
  std::vector<std::int32_t> fg(m.labels.size());
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = m.labels[i] != 0 ? 1 : 0;

  auto at = [&](int i, int j, int k) -> bool {
    return g.contains(i, j, k) && fg[g.linear(i, j, k)] != 0;
  };

  auto fill_topology = [&](int i, int j, int k, NeighborhoodTopology& t) {
    int d = 0;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx, ++d) t.fg[d] = at(i + dx, j + dy, k + dz);
  };

  auto is_deletable = [&](int i, int j, int k) {
    NeighborhoodTopology t;
    fill_topology(i, j, k, t);
    int n26 = 0;
    for (int d = 0; d < 27; ++d) n26 += (d != 13 && t.fg[d]);
    if (n26 <= 1) return false;  // endpoint or isolated voxel
    if (t.count_fg_26_components() != 1) return false;
    if (t.count_bg_6_components_touching_center() != 1) return false;
    return true;
  };

  constexpr int dirs[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0},
                              {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
  std::vector<std::size_t> candidates;

  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& dir : dirs) {
      candidates.clear();
      for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
          for (int i = 0; i < g.dims[0]; ++i) {
            if (fg[g.linear(i, j, k)] == 0) continue;
            if (at(i + dir[0], j + dir[1], k + dir[2])) continue;  // not a border
            candidates.push_back(g.linear(i, j, k));
          }
      // Sequential deletion with re-checking keeps topology exact.
      for (std::size_t lin : candidates) {
        const Index3 v = g.unlinear(lin);
        if (fg[lin] != 0 && is_deletable(v.i, v.j, v.k)) {
          fg[lin] = 0;
          changed = true;
        }
      }
    }
  }
  return LabelMask(g, std::move(fg));
}

std::optional<double> cl_dice(const LabelMask& pred, const LabelMask& gt) {
  if (pred.geom != gt.geom) throw ContractError("cl_dice requires matching geometry");
  const LabelMask skel_pred = skeletonize3d(pred);
  const LabelMask skel_gt = skeletonize3d(gt);

  std::size_t sp = 0, sp_in_gt = 0, sg = 0, sg_in_pred = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    if (skel_pred.labels[i] != 0) {
      ++sp;
      sp_in_gt += gt.labels[i] != 0;
    }
    if (skel_gt.labels[i] != 0) {
      ++sg;
      sg_in_pred += pred.labels[i] != 0;
    }
  }
  if (sp == 0 || sg == 0) return std::nullopt;
  const double tprec = static_cast<double>(sp_in_gt) / static_cast<double>(sp);
  const double tsens = static_cast<double>(sg_in_pred) / static_cast<double>(sg);
  if (tprec + tsens == 0.0) return 0.0;
  return 2.0 * tprec * tsens / (tprec + tsens);
}

MetricsReport compute_metrics(const LabelMask& pred, const LabelMask& gt, double tol_mm,
                              bool with_cl_dice) {
  MetricsReport r;
  r.tolerance_mm = tol_mm;
  r.dice = dice(pred, gt);
  r.nsd = nsd(pred, gt, tol_mm);
  r.hd95_mm = hd95(pred, gt);
  if (with_cl_dice) r.cl_dice = cl_dice(pred, gt);
  return r;
}

}  // namespace atlasfuse
