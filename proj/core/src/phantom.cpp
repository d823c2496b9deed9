#include "atlasfuse/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "atlasfuse/errors.hpp"
#include "atlasfuse/rng.hpp"

namespace atlasfuse {

std::string to_string(PhantomKind k) {
  switch (k) {
    case PhantomKind::Sphere: return "sphere";
    case PhantomKind::TwoOrgan: return "two-organ";
    case PhantomKind::TubeTree: return "tube-tree";
  }
  return "sphere";
}

PhantomKind phantom_kind_from_string(const std::string& s) {
  if (s == "sphere") return PhantomKind::Sphere;
  if (s == "two-organ") return PhantomKind::TwoOrgan;
  if (s == "tube-tree") return PhantomKind::TubeTree;
  throw ContractError("unknown phantom kind '" + s + "'");
}

void PhantomSpec::validate() const {
  for (int a = 0; a < 3; ++a)
    if (dims[a] < 16) throw ContractError("phantom dims must be >= 16 per axis");
  if (noise_sigma < 0.0) throw ContractError("noise_sigma must be >= 0");
  if (deform.max_disp_vox < 0.0 || deform.smooth_sigma_vox < 0.0)
    throw ContractError("deform parameters must be >= 0");
  if (global.max_rot_deg < 0.0 || global.max_shift_vox < 0.0 || global.max_scale_dev < 0.0)
    throw ContractError("global perturbation parameters must be >= 0");
}

namespace {

struct Shapes {
  std::vector<float> intensity;
  std::vector<std::int32_t> labels;
  std::vector<std::int32_t> contexts;
};

constexpr float kBackground = 0.05f;

Shapes rasterize_sphere(const GridGeometry& g) {
  Shapes s;
  s.intensity.assign(g.voxel_count(), kBackground);
  s.labels.assign(g.voxel_count(), 0);
  s.contexts = {1};
  const double cx = 0.5 * (g.dims[0] - 1), cy = 0.5 * (g.dims[1] - 1),
               cz = 0.5 * (g.dims[2] - 1);
  const int min_dim = std::min({g.dims[0], g.dims[1], g.dims[2]});
  const double r = min_dim * (10.0 / 64.0);
  const double r2 = r * r;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const double d2 = (i - cx) * (i - cx) + (j - cy) * (j - cy) + (k - cz) * (k - cz);
        if (d2 <= r2) {
          const std::size_t lin = g.linear(i, j, k);
          s.intensity[lin] = 1.0f;
          s.labels[lin] = 1;
        }
      }
  return s;
}

Shapes rasterize_two_organ(const GridGeometry& g) {
  Shapes s;
  s.intensity.assign(g.voxel_count(), kBackground);
  s.labels.assign(g.voxel_count(), 0);
  s.contexts = {1, 2};
  const double nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];

  struct Ellipsoid {
    double cx, cy, cz, ax, ay, az;
    float intensity;
    std::int32_t label;
  };
  const Ellipsoid organs[2] = {
      {0.34 * nx, 0.46 * ny, 0.50 * nz, 0.15 * nx, 0.20 * ny, 0.15 * nz, 0.85f, 1},
      {0.68 * nx, 0.56 * ny, 0.47 * nz, 0.11 * nx, 0.11 * ny, 0.16 * nz, 0.55f, 2},
  };
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        for (const auto& e : organs) {
          const double dx = (i - e.cx) / e.ax, dy = (j - e.cy) / e.ay,
                       dz = (k - e.cz) / e.az;
          if (dx * dx + dy * dy + dz * dz <= 1.0) {
            const std::size_t lin = g.linear(i, j, k);
            s.intensity[lin] = e.intensity;
            s.labels[lin] = e.label;
            break;
          }
        }
  return s;
}

double point_segment_dist(double px, double py, double pz, const double a[3],
                          const double b[3]) {
  const double abx = b[0] - a[0], aby = b[1] - a[1], abz = b[2] - a[2];
  const double apx = px - a[0], apy = py - a[1], apz = pz - a[2];
  const double len2 = abx * abx + aby * aby + abz * abz;
  double t = len2 > 0.0 ? (apx * abx + apy * aby + apz * abz) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = apx - t * abx, dy = apy - t * aby, dz = apz - t * abz;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

Shapes rasterize_tube_tree(const GridGeometry& g) {
  Shapes s;
  s.intensity.assign(g.voxel_count(), kBackground);
  s.labels.assign(g.voxel_count(), 0);
  s.contexts = {1};
  const double nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  const int min_dim = std::min({g.dims[0], g.dims[1], g.dims[2]});
  const double radius = std::max(2.0, min_dim * 0.045);

  // Trunk plus two branches splitting halfway up.
  const double trunk_a[3] = {0.5 * nx, 0.5 * ny, 0.10 * nz};
  const double trunk_b[3] = {0.5 * nx, 0.5 * ny, 0.55 * nz};
  const double left_b[3] = {0.28 * nx, 0.62 * ny, 0.88 * nz};
  const double right_b[3] = {0.72 * nx, 0.40 * ny, 0.88 * nz};
  const double* segs[3][2] = {{trunk_a, trunk_b}, {trunk_b, left_b}, {trunk_b, right_b}};

  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        for (const auto& seg : segs) {
          if (point_segment_dist(i, j, k, seg[0], seg[1]) <= radius) {
            const std::size_t lin = g.linear(i, j, k);
            s.intensity[lin] = 0.9f;
            s.labels[lin] = 1;
            break;
          }
        }
  return s;
}

}  // namespace

PhantomCase generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  GridGeometry g;
  g.dims = spec.dims;

  Shapes shapes;
  switch (spec.kind) {
    case PhantomKind::Sphere: shapes = rasterize_sphere(g); break;
    case PhantomKind::TwoOrgan: shapes = rasterize_two_organ(g); break;
    case PhantomKind::TubeTree: shapes = rasterize_tube_tree(g); break;
  }

  Rng rng(spec.deform.seed);
  Rng noise_rng = rng.fork(101);
  Rng field_rng = rng.fork(202);
  Rng global_rng = rng.fork(303);

  // Noise is baked into the atlas; the query is the warped noisy atlas, so a
  // zero deformation leaves the pair bitwise identical.
  if (spec.noise_sigma > 0.0)
    for (auto& v : shapes.intensity)
      v = static_cast<float>(v + spec.noise_sigma * noise_rng.normal());

  PhantomCase out;
  out.atlas_img = Volume(g, shapes.intensity);
  out.atlas_mask = LabelMask(g, shapes.labels);
  out.context_labels = shapes.contexts;

  // Global rigid/scale perturbation of the query.
  AffineTransform global_t = AffineTransform::identity(g.center());
  bool has_global = false;
  if (spec.global.max_rot_deg > 0.0 || spec.global.max_shift_vox > 0.0 ||
      spec.global.max_scale_dev > 0.0) {
    has_global = true;
    RigidParams rp;
    const double max_rad = spec.global.max_rot_deg * 3.14159265358979323846 / 180.0;
    for (int a = 0; a < 3; ++a)
      rp.euler_xyz[a] = global_rng.uniform(-max_rad, max_rad);
    Mat3 m = rp.rotation();
    for (int a = 0; a < 3; ++a) {
      const double scale =
          1.0 + global_rng.uniform(-spec.global.max_scale_dev, spec.global.max_scale_dev);
      for (int r = 0; r < 3; ++r) m[r][a] *= scale;
    }
    global_t.matrix = m;
    for (int a = 0; a < 3; ++a)
      global_t.translation_mm[a] =
          global_rng.uniform(-spec.global.max_shift_vox, spec.global.max_shift_vox) *
          g.spacing[a];
  }

  const DisplacementField psi = smooth_random_displacement(
      g, spec.deform.max_disp_vox, spec.deform.smooth_sigma_vox, field_rng);

  const AffineTransform* t_ptr = has_global ? &global_t : nullptr;
  const bool has_field = spec.deform.max_disp_vox > 0.0;
  const DisplacementField* f_ptr = has_field ? &psi : nullptr;

  out.query_img = (t_ptr || f_ptr)
                      ? warp_volume(out.atlas_img, t_ptr, f_ptr, g)
                      : out.atlas_img;
  out.query_gt = (t_ptr || f_ptr)
                     ? warp_mask(out.atlas_mask, t_ptr, f_ptr, g, MaskWarpMode::Nearest)
                     : out.atlas_mask;

  // Record the composite displacement phi(x) - x at every voxel.
  out.true_field = DisplacementField::zeros(g, 1);
  std::size_t n = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i, ++n) {
        const Vec3 x = g.world(i, j, k);
        Vec3 phi = t_ptr ? global_t.apply(x) : x;
        if (f_ptr) phi += psi.sample_mm(x);
        out.true_field.u[3 * n] = phi.x - x.x;
        out.true_field.u[3 * n + 1] = phi.y - x.y;
        out.true_field.u[3 * n + 2] = phi.z - x.z;
      }
  return out;
}

std::vector<PhantomSpec> bundled_phantom_suite() {
  std::vector<PhantomSpec> suite;
  auto push = [&suite](PhantomKind kind, std::uint64_t seed) {
    PhantomSpec s;
    s.kind = kind;
    s.dims = {48, 48, 48};
    s.noise_sigma = 0.02;
    s.deform.max_disp_vox = 4.0;
    s.deform.smooth_sigma_vox = 9.0;
    s.deform.seed = seed;
    s.global.max_rot_deg = 7.0;
    s.global.max_shift_vox = 4.0;
    s.global.max_scale_dev = 0.08;
    suite.push_back(s);
  };
  for (std::uint64_t seed = 11; seed <= 16; ++seed) push(PhantomKind::TwoOrgan, seed);
  push(PhantomKind::Sphere, 17);
  push(PhantomKind::Sphere, 18);
  push(PhantomKind::TubeTree, 19);
  push(PhantomKind::TubeTree, 20);
  return suite;
}

}  // namespace atlasfuse
