#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "atlasfuse/errors.hpp"
#include "atlasfuse/metrics.hpp"
#include "atlasfuse/prompt.hpp"
#include "helpers/test_support.hpp"

using namespace atlasfuse;
using namespace testsupport;

namespace {

// O(n^2) distances used as the ground truth for edt/hd95/nsd.
std::vector<double> brute_force_edt(const LabelMask& m,
                                    const std::array<double, 3>& spacing) {
  const auto& g = m.geom;
  std::vector<Index3> fg;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        if (m.at(i, j, k)) fg.push_back({i, j, k});

  std::vector<double> out(g.voxel_count(),
                          std::numeric_limits<double>::infinity());
  if (fg.empty()) return out;
  std::size_t n = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i, ++n) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& v : fg) {
          const double dx = (i - v.i) * spacing[0];
          const double dy = (j - v.j) * spacing[1];
          const double dz = (k - v.k) * spacing[2];
          const double d2 = dx * dx + dy * dy + dz * dz;
          best = std::min(best, d2);
        }
        out[n] = std::sqrt(best);
      }
  return out;
}

LabelMask voxels_to_mask(const GridGeometry& g, const std::vector<Index3>& vox) {
  LabelMask m = LabelMask::filled(g, 0);
  for (const auto& v : vox) m.at(v.i, v.j, v.k) = 1;
  return m;
}

std::optional<double> brute_force_hd95(const LabelMask& a, const LabelMask& b) {
  const auto sa = surface_voxels(a);
  const auto sb = surface_voxels(b);
  if (sa.empty() || sb.empty()) return std::nullopt;
  const auto& sp = a.geom.spacing;
  auto dist = [&](const Index3& p, const Index3& q) {
    const double dx = (p.i - q.i) * sp[0], dy = (p.j - q.j) * sp[1],
                 dz = (p.k - q.k) * sp[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
  };
  std::vector<double> pooled;
  for (const auto& p : sa) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : sb) best = std::min(best, dist(p, q));
    pooled.push_back(best);
  }
  for (const auto& q : sb) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : sa) best = std::min(best, dist(p, q));
    pooled.push_back(best);
  }
  std::sort(pooled.begin(), pooled.end());
  return percentile_sorted(pooled, 95.0);
}

LabelMask straight_tube(const GridGeometry& g, int z0, int z1, double radius,
                        double cx, double cy) {
  LabelMask m = LabelMask::filled(g, 0);
  for (int k = z0; k <= z1; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const double dx = i - cx, dy = j - cy;
        if (dx * dx + dy * dy <= radius * radius) m.at(i, j, k) = 1;
      }
  return m;
}

}  // namespace

TEST_CASE("dice basics") {
  const GridGeometry g = make_geom(6);
  LabelMask a = LabelMask::filled(g, 0), b = LabelMask::filled(g, 0);
  CHECK(dice(a, b) == 1.0);  // both empty

  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k) {
        a.at(i, j, k) = 1;           // 8 voxels
        b.at(i + 1, j, k) = 1;       // 8 voxels, overlap 4
      }
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, b) == doctest::Approx(0.5));

  LabelMask c = LabelMask::filled(g, 0);
  c.at(5, 5, 5) = 1;
  CHECK(dice(a, c) == 0.0);
  CHECK(dice(a, b) == dice(b, a));
}

TEST_CASE("surface_voxels of cube, single voxel and full grid") {
  const GridGeometry g = make_geom(5);
  LabelMask cube = LabelMask::filled(g, 0);
  for (int k = 1; k <= 3; ++k)
    for (int j = 1; j <= 3; ++j)
      for (int i = 1; i <= 3; ++i) cube.at(i, j, k) = 1;
  // 3^3 solid cube: all but the single interior voxel are surface.
  CHECK(surface_voxels(cube).size() == 26);

  LabelMask single = LabelMask::filled(g, 0);
  single.at(2, 2, 2) = 1;
  const auto sv = surface_voxels(single);
  REQUIRE(sv.size() == 1);
  CHECK(sv[0] == Index3{2, 2, 2});

  // Full grid: only the shell touches out-of-grid background.
  const auto shell = surface_voxels(LabelMask::filled(g, 1));
  CHECK(shell.size() == 125 - 27);
}

TEST_CASE("edt analytic single-voxel case") {
  GridGeometry g;
  g.dims = {8, 1, 1};
  g.spacing = {2.0, 1.0, 1.0};
  LabelMask m = LabelMask::filled(g, 0);
  m.at(0, 0, 0) = 1;
  const DistanceMap d = edt(m);
  CHECK(d.at(3, 0, 0) == doctest::Approx(6.0));
  CHECK(d.at(0, 0, 0) == 0.0);
}

TEST_CASE("edt of a full grid is zero, of an empty grid infinite") {
  const GridGeometry g = make_geom(4);
  const DistanceMap zero = edt(LabelMask::filled(g, 1));
  for (double v : zero.mm) CHECK(v == 0.0);

  const DistanceMap inf = edt(LabelMask::filled(g, 0));
  CHECK_FALSE(inf.finite);
  for (double v : inf.mm) CHECK(std::isinf(v));
}

TEST_CASE("edt equals the brute-force oracle exactly on random masks") {
  Rng rng(80);
  const std::array<double, 3> spacings[3] = {
      {1.0, 1.0, 1.0}, {2.0, 1.0, 0.5}, {1.5, 2.5, 1.0}};
  for (int trial = 0; trial < 30; ++trial) {
    GridGeometry g = make_geom(12);
    g.spacing = spacings[trial % 3];
    LabelMask m = random_binary_mask(g, rng, 0.08);
    if (m.empty_foreground()) m.at(3, 3, 3) = 1;
    const DistanceMap d = edt(m);
    const auto oracle = brute_force_edt(m, g.spacing);
    for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(d.mm[i] == oracle[i]);
  }
}

TEST_CASE("hd95 basics") {
  const GridGeometry g = make_geom(10);
  const LabelMask s = sphere_mask(g, {5, 5, 5}, 3.0);
  CHECK(*hd95(s, s) == 0.0);

  GridGeometry gl;
  gl.dims = {12, 1, 1};
  gl.spacing = {2.0, 1.0, 1.0};
  LabelMask a = LabelMask::filled(gl, 0), b = LabelMask::filled(gl, 0);
  a.at(2, 0, 0) = 1;
  b.at(4, 0, 0) = 1;  // 2 voxels * 2 mm apart
  CHECK(*hd95(a, b) == doctest::Approx(4.0));

  CHECK_FALSE(hd95(a, LabelMask::filled(gl, 0)).has_value());
}

TEST_CASE("hd95 matches the brute-force pooled-percentile oracle") {
  Rng rng(81);
  for (int trial = 0; trial < 15; ++trial) {
    GridGeometry g = make_geom(12);
    if (trial % 2) g.spacing = {1.5, 1.0, 2.0};
    LabelMask a = random_binary_mask(g, rng, 0.1);
    LabelMask b = random_binary_mask(g, rng, 0.1);
    if (a.empty_foreground()) a.at(2, 2, 2) = 1;
    if (b.empty_foreground()) b.at(9, 9, 9) = 1;
    const auto got = hd95(a, b);
    const auto expect = brute_force_hd95(a, b);
    REQUIRE(got.has_value());
    CHECK(std::fabs(*got - *expect) < 1e-9);
  }
}

TEST_CASE("hd95 is symmetric and the max-of-directed variant is available") {
  Rng rng(82);
  const GridGeometry g = make_geom(10);
  const LabelMask a = sphere_mask(g, {4, 4, 4}, 2.5);
  const LabelMask b = sphere_mask(g, {6, 5, 5}, 3.0);
  CHECK(*hd95(a, b) == *hd95(b, a));
  CHECK(hd95(a, b, Hd95Convention::MaxOfDirected).has_value());
  CHECK(*hd95(a, b, Hd95Convention::MaxOfDirected) >= *hd95(a, b) - 1e-12);
}

TEST_CASE("nsd identities and slab separation") {
  const GridGeometry g = make_geom(10);
  const LabelMask s = sphere_mask(g, {5, 5, 5}, 3.0);
  CHECK(nsd(s, s, 0.5) == 1.0);
  CHECK(nsd(s, s, 1e9) == 1.0);

  // Two parallel one-voxel slabs 3 mm apart: every surface voxel of one is
  // 3 mm from the other's surface, so tolerance 1 mm scores zero.
  GridGeometry gs = make_geom(8);
  LabelMask slab_a = LabelMask::filled(gs, 0), slab_b = LabelMask::filled(gs, 0);
  for (int j = 0; j < 8; ++j)
    for (int i = 0; i < 8; ++i) {
      slab_a.at(i, j, 2) = 1;
      slab_b.at(i, j, 5) = 1;
    }
  CHECK(nsd(slab_a, slab_b, 1.0) == 0.0);
  CHECK(nsd(slab_a, slab_b, 3.0) == 1.0);

  const LabelMask empty = LabelMask::filled(gs, 0);
  CHECK(nsd(empty, empty, 1.0) == 1.0);
  CHECK(nsd(slab_a, empty, 1.0) == 0.0);
}

TEST_CASE("nsd is monotone in the tolerance") {
  Rng rng(83);
  const GridGeometry g = make_geom(12);
  const LabelMask a = sphere_mask(g, {5, 6, 6}, 3.0);
  const LabelMask b = sphere_mask(g, {7, 6, 5}, 3.5);
  double prev = 0.0;
  for (double tol : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0}) {
    const double v = nsd(a, b, tol);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("skeletonize3d keeps a one-voxel line unchanged") {
  const GridGeometry g = make_geom(12);
  LabelMask line = LabelMask::filled(g, 0);
  for (int k = 2; k <= 9; ++k) line.at(5, 5, k) = 1;
  const LabelMask skel = skeletonize3d(line);
  CHECK(skel.labels == line.labels);
}

TEST_CASE("skeletonize3d thins a solid bar to a single spanning curve") {
  GridGeometry g;
  g.dims = {9, 9, 20};
  LabelMask bar = LabelMask::filled(g, 0);
  for (int k = 2; k <= 17; ++k)
    for (int j = 3; j <= 5; ++j)
      for (int i = 3; i <= 5; ++i) bar.at(i, j, k) = 1;

  const LabelMask skel = skeletonize3d(bar);
  const ComponentLabeling cl = connected_components(skel, 26);
  REQUIRE(cl.sizes.size() == 1);

  // Thickness 1: every voxel has at most 2 skeleton neighbors.
  int zmin = 100, zmax = -1;
  for (int k = 0; k < 20; ++k)
    for (int j = 0; j < 9; ++j)
      for (int i = 0; i < 9; ++i) {
        if (!skel.at(i, j, k)) continue;
        zmin = std::min(zmin, k);
        zmax = std::max(zmax, k);
        int nb = 0;
        for (int dk = -1; dk <= 1; ++dk)
          for (int dj = -1; dj <= 1; ++dj)
            for (int di = -1; di <= 1; ++di) {
              if (!di && !dj && !dk) continue;
              const int ii = i + di, jj = j + dj, kk = k + dk;
              if (g.contains(ii, jj, kk) && skel.at(ii, jj, kk)) ++nb;
            }
        CHECK(nb <= 2);
      }
  // The curve spans most of the bar's z extent (ends may retract a little).
  CHECK(zmin <= 4);
  CHECK(zmax >= 15);
}

TEST_CASE("skeleton of a solid torus keeps exactly one cycle") {
  const GridGeometry g = make_geom(24);
  LabelMask torus = LabelMask::filled(g, 0);
  const double R = 7.0, r = 2.2, c = 11.5;
  for (int k = 0; k < 24; ++k)
    for (int j = 0; j < 24; ++j)
      for (int i = 0; i < 24; ++i) {
        const double x = i - c, y = j - c, z = k - c;
        const double rho = std::sqrt(x * x + y * y) - R;
        if (rho * rho + z * z <= r * r) torus.at(i, j, k) = 1;
      }

  const LabelMask skel = skeletonize3d(torus);
  const ComponentLabeling cl = connected_components(skel, 26);
  REQUIRE(cl.sizes.size() == 1);

  // Euler check for a single cycle: #vertices == #edges (V - E = 0).
  std::size_t v_count = 0, e2_count = 0;  // e2 counts ordered pairs
  for (int k = 0; k < 24; ++k)
    for (int j = 0; j < 24; ++j)
      for (int i = 0; i < 24; ++i) {
        if (!skel.at(i, j, k)) continue;
        ++v_count;
        for (int dk = -1; dk <= 1; ++dk)
          for (int dj = -1; dj <= 1; ++dj)
            for (int di = -1; di <= 1; ++di) {
              if (!di && !dj && !dk) continue;
              const int ii = i + di, jj = j + dj, kk = k + dk;
              if (g.contains(ii, jj, kk) && skel.at(ii, jj, kk)) ++e2_count;
            }
      }
  CHECK(v_count == e2_count / 2);
}

TEST_CASE("cl_dice identities and the half-tube scenario") {
  GridGeometry g;
  g.dims = {16, 16, 32};
  const LabelMask tube = straight_tube(g, 2, 29, 2.5, 7.5, 7.5);
  CHECK(*cl_dice(tube, tube) == 1.0);

  // Prediction covering the first half of the tube: Tprec = 1, Tsens ~ 0.5.
  const LabelMask half = straight_tube(g, 2, 15, 2.5, 7.5, 7.5);
  const auto v = cl_dice(half, tube);
  REQUIRE(v.has_value());
  CHECK(std::fabs(*v - 2.0 / 3.0) < 0.05);

  // Disjoint tubes score zero.
  const LabelMask other = straight_tube(g, 2, 29, 1.5, 12.5, 12.5);
  CHECK(*cl_dice(tube, other) == doctest::Approx(0.0).epsilon(0.02));

  const LabelMask empty = LabelMask::filled(g, 0);
  CHECK_FALSE(cl_dice(tube, empty).has_value());
}

TEST_CASE("compute_metrics fills the report") {
  const GridGeometry g = make_geom(12);
  const LabelMask a = sphere_mask(g, {6, 6, 6}, 3.0);
  const LabelMask b = sphere_mask(g, {6, 6, 6}, 3.5);
  const MetricsReport r = compute_metrics(a, b, 1.0, true);
  CHECK(r.dice.has_value());
  CHECK(r.nsd.has_value());
  CHECK(r.hd95_mm.has_value());
  CHECK(r.cl_dice.has_value());
  CHECK(r.tolerance_mm == 1.0);
}
