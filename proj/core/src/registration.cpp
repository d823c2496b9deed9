#include "atlasfuse/registration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "atlasfuse/errors.hpp"
#include "atlasfuse/optim.hpp"

namespace atlasfuse {

void RegConfig::validate() const {
  if (pyramid_levels.empty()) throw ContractError("pyramid_levels must be nonempty");
  int prev = std::numeric_limits<int>::max();
  for (int f : pyramid_levels) {
    if (f < 1) throw ContractError("pyramid factors must be positive");
    if (f > prev) throw ContractError("pyramid factors must be descending");
    prev = f;
  }
  if (rigid_iters < 0 || affine_iters < 0 || deform_iters < 0)
    throw ContractError("iteration counts must be >= 0");
  if (!(deform_lr > 0.0) || !(pre_reg_lr > 0.0))
    throw ContractError("learning rates must be > 0");
  if (smooth_lambda < 0.0) throw ContractError("smooth_lambda must be >= 0");
  if (deform_grid_factor < 1) throw ContractError("deform_grid_factor must be >= 1");
}

double similarity_loss(const Volume& fixed, const Volume& warped, SimilarityKind kind) {
  if (fixed.geom != warped.geom)
    throw ContractError("similarity_loss requires matching geometry");
  const std::size_t n = fixed.data.size();
  if (kind == SimilarityKind::MSE) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(warped.data[i]) - fixed.data[i];
      acc += d * d;
    }
    return acc / static_cast<double>(n);
  }
  // NCC: 1 - global normalized cross-correlation.
  double sw = 0.0, sf = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sw += warped.data[i];
    sf += fixed.data[i];
  }
  const double mw = sw / n, mf = sf / n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = warped.data[i] - mw;
    const double b = fixed.data[i] - mf;
    saa += a * a;
    sbb += b * b;
    sab += a * b;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 1.0;
  return 1.0 - sab / std::sqrt(saa * sbb);
}

namespace {

// ---------------------------------------------------------------------------
// Inline clamped trilinear sampling of a float volume at a voxel coordinate.
// Hot path of every objective; keeps the derivative of the interpolant.
// ---------------------------------------------------------------------------

struct SampleG {
  double value;
  double dx, dy, dz;  // derivative wrt the voxel coordinate
};

struct MovingView {
  const float* data;
  int nx, ny, nz;
  std::size_t sy, sz;

  explicit MovingView(const Volume& v)
      : data(v.data.data()),
        nx(v.geom.dims[0]), ny(v.geom.dims[1]), nz(v.geom.dims[2]),
        sy(static_cast<std::size_t>(v.geom.dims[0])),
        sz(static_cast<std::size_t>(v.geom.dims[0]) * v.geom.dims[1]) {}

  SampleG sample(double px, double py, double pz) const {
    bool cx = false, cy = false, cz = false;
    int i0, j0, k0;
    double fx, fy, fz;

    auto axis = [](double p, int n, int& a0, double& f, bool& clamped) {
      if (n == 1) { a0 = 0; f = 0.0; clamped = true; return; }
      if (p < 0.0) { a0 = 0; f = 0.0; clamped = true; return; }
      if (p >= static_cast<double>(n - 1)) {
        a0 = n - 2; f = 1.0; clamped = p > static_cast<double>(n - 1); return;
      }
      const double fl = std::floor(p);
      a0 = static_cast<int>(fl);
      if (a0 > n - 2) a0 = n - 2;
      f = p - a0;
      clamped = false;
    };
    axis(px, nx, i0, fx, cx);
    axis(py, ny, j0, fy, cy);
    axis(pz, nz, k0, fz, cz);

    const std::size_t b = static_cast<std::size_t>(k0) * sz +
                          static_cast<std::size_t>(j0) * sy + i0;
    const std::size_t ox = (nx == 1) ? 0 : 1;
    const std::size_t oy = (ny == 1) ? 0 : sy;
    const std::size_t oz = (nz == 1) ? 0 : sz;
    const double v000 = data[b],           v100 = data[b + ox];
    const double v010 = data[b + oy],      v110 = data[b + oy + ox];
    const double v001 = data[b + oz],      v101 = data[b + oz + ox];
    const double v011 = data[b + oz + oy], v111 = data[b + oz + oy + ox];

    const double gx = 1.0 - fx, gy = 1.0 - fy, gz = 1.0 - fz;
    const double c00 = gx * v000 + fx * v100, c10 = gx * v010 + fx * v110;
    const double c01 = gx * v001 + fx * v101, c11 = gx * v011 + fx * v111;
    const double c0 = gy * c00 + fy * c10, c1 = gy * c01 + fy * c11;

    SampleG s;
    s.value = gz * c0 + fz * c1;
    s.dx = cx ? 0.0
              : gz * (gy * (v100 - v000) + fy * (v110 - v010)) +
                    fz * (gy * (v101 - v001) + fy * (v111 - v011));
    s.dy = cy ? 0.0 : gz * (c10 - c00) + fz * (c11 - c01);
    s.dz = cz ? 0.0 : c1 - c0;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Shared machinery of the rigid/affine stages: loss plus the accumulated
// dL/dMatrix (about the center) and dL/dtranslation_mm.
// ---------------------------------------------------------------------------

struct LinearGrad {
  double loss = 0.0;
  Mat3 d_matrix{};  // dL/dM_ab with phi(x) = M (x - c) + c + t
  Vec3 d_translation;
};

// NCC global statistics for a warped/fixed pair.
struct NccStats {
  double mw, saa, sbb, sab;
  bool degenerate;
};

LinearGrad linear_stage_eval(const Volume& fixed, const Volume& moving,
                             const Mat3& M, const Vec3& t_mm, const Vec3& center,
                             SimilarityKind kind, std::vector<float>& wbuf) {
  const MovingView mv(moving);
  const auto& fg = fixed.geom;
  const std::size_t n = fg.voxel_count();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_ms[3] = {1.0 / moving.geom.spacing[0], 1.0 / moving.geom.spacing[1],
                            1.0 / moving.geom.spacing[2]};

  // phi_vox = B (x - c) + q in moving voxel coordinates.
  Mat3 B;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) B[r][c] = M[r][c] * inv_ms[r];
  const Vec3 q = {(center.x + t_mm.x - moving.geom.origin[0]) * inv_ms[0],
                  (center.y + t_mm.y - moving.geom.origin[1]) * inv_ms[1],
                  (center.z + t_mm.z - moving.geom.origin[2]) * inv_ms[2]};

  LinearGrad out;

  // Pass 0 (NCC only): sample warped values to get the global statistics.
  NccStats st{0.0, 0.0, 0.0, 0.0, false};
  double mf = 0.0;
  if (kind == SimilarityKind::NCC) {
    wbuf.resize(n);
    std::size_t idx = 0;
    double sw = 0.0, sf = 0.0;
    for (int k = 0; k < fg.dims[2]; ++k)
      for (int j = 0; j < fg.dims[1]; ++j)
        for (int i = 0; i < fg.dims[0]; ++i, ++idx) {
          const Vec3 r = fg.world(i, j, k) - center;
          const double px = B[0][0] * r.x + B[0][1] * r.y + B[0][2] * r.z + q.x;
          const double py = B[1][0] * r.x + B[1][1] * r.y + B[1][2] * r.z + q.y;
          const double pz = B[2][0] * r.x + B[2][1] * r.y + B[2][2] * r.z + q.z;
          const SampleG s = mv.sample(px, py, pz);
          wbuf[idx] = static_cast<float>(s.value);
          sw += s.value;
          sf += fixed.data[idx];
        }
    st.mw = sw * inv_n;
    mf = sf * inv_n;
    for (std::size_t i2 = 0; i2 < n; ++i2) {
      const double a = wbuf[i2] - st.mw;
      const double b = fixed.data[i2] - mf;
      st.saa += a * a;
      st.sbb += b * b;
      st.sab += a * b;
    }
    st.degenerate = st.saa <= 0.0 || st.sbb <= 0.0;
    if (st.degenerate) {
      out.loss = 1.0;
      return out;
    }
  }
  const double ncc_norm = (kind == SimilarityKind::NCC) ? std::sqrt(st.saa * st.sbb) : 0.0;

  double loss_acc = 0.0;
  std::size_t idx = 0;
  for (int k = 0; k < fg.dims[2]; ++k)
    for (int j = 0; j < fg.dims[1]; ++j)
      for (int i = 0; i < fg.dims[0]; ++i, ++idx) {
        const Vec3 r = fg.world(i, j, k) - center;
        const double px = B[0][0] * r.x + B[0][1] * r.y + B[0][2] * r.z + q.x;
        const double py = B[1][0] * r.x + B[1][1] * r.y + B[1][2] * r.z + q.y;
        const double pz = B[2][0] * r.x + B[2][1] * r.y + B[2][2] * r.z + q.z;
        const SampleG s = mv.sample(px, py, pz);

        double coef;  // dL/dwarped(x)
        if (kind == SimilarityKind::MSE) {
          const double resid = s.value - fixed.data[idx];
          loss_acc += resid * resid;
          coef = 2.0 * resid * inv_n;
        } else {
          const double a = s.value - st.mw;
          const double b = fixed.data[idx] - mf;
          coef = -(b - a * st.sab / st.saa) / ncc_norm;
        }

        // dL/dphi_world via the voxel-space sample gradient.
        const double gwx = coef * s.dx * inv_ms[0];
        const double gwy = coef * s.dy * inv_ms[1];
        const double gwz = coef * s.dz * inv_ms[2];

        out.d_matrix[0][0] += gwx * r.x;
        out.d_matrix[0][1] += gwx * r.y;
        out.d_matrix[0][2] += gwx * r.z;
        out.d_matrix[1][0] += gwy * r.x;
        out.d_matrix[1][1] += gwy * r.y;
        out.d_matrix[1][2] += gwy * r.z;
        out.d_matrix[2][0] += gwz * r.x;
        out.d_matrix[2][1] += gwz * r.y;
        out.d_matrix[2][2] += gwz * r.z;
        out.d_translation.x += gwx;
        out.d_translation.y += gwy;
        out.d_translation.z += gwz;
      }

  out.loss = (kind == SimilarityKind::MSE) ? loss_acc * inv_n
                                           : 1.0 - st.sab / ncc_norm;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Rigid objective
// ---------------------------------------------------------------------------

RigidObjective::RigidObjective(const Volume& fixed, const Volume& moving, Vec3 center,
                               Vec3 fov, SimilarityKind kind)
    : fixed_(fixed), moving_(moving), center_(center), fov_(fov), kind_(kind) {}

double RigidObjective::loss_and_grad(std::span<const double> params,
                                     std::span<double> grad) const {
  if (params.size() != 6 || grad.size() != 6)
    throw ContractError("rigid objective expects 6 parameters");
  RigidParams rp;
  for (int a = 0; a < 3; ++a) {
    rp.euler_xyz[a] = params[a];
    rp.translation_frac[a] = params[3 + a];
  }
  const Mat3 R = rp.rotation();
  const Vec3 t_mm = {rp.translation_frac[0] * fov_.x, rp.translation_frac[1] * fov_.y,
                     rp.translation_frac[2] * fov_.z};

  std::vector<float> scratch;
  const LinearGrad lg =
      linear_stage_eval(fixed_, moving_, R, t_mm, center_, kind_, scratch);

  const auto dR = rotation_derivatives(rp);
  for (int a = 0; a < 3; ++a) {
    double g = 0.0;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) g += lg.d_matrix[r][c] * dR[a][r][c];
    grad[a] = g;
    grad[3 + a] = lg.d_translation[a] * fov_[a];
  }
  return lg.loss;
}

// ---------------------------------------------------------------------------
// Affine objective
// ---------------------------------------------------------------------------

AffineObjective::AffineObjective(const Volume& fixed, const Volume& moving, Vec3 center,
                                 Vec3 fov, SimilarityKind kind)
    : fixed_(fixed), moving_(moving), center_(center), fov_(fov), kind_(kind) {}

double AffineObjective::loss_and_grad(std::span<const double> params,
                                      std::span<double> grad) const {
  if (params.size() != 12 || grad.size() != 12)
    throw ContractError("affine objective expects 12 parameters");
  Mat3 M;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) M[r][c] = params[3 * r + c];
  const Vec3 t_mm = {params[9] * fov_.x, params[10] * fov_.y, params[11] * fov_.z};

  std::vector<float> scratch;
  const LinearGrad lg =
      linear_stage_eval(fixed_, moving_, M, t_mm, center_, kind_, scratch);

  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) grad[3 * r + c] = lg.d_matrix[r][c];
  for (int a = 0; a < 3; ++a) grad[9 + a] = lg.d_translation[a] * fov_[a];
  return lg.loss;
}

// ---------------------------------------------------------------------------
// Deformable objective
// ---------------------------------------------------------------------------

struct DeformObjective::Impl {
  const Volume& fixed;
  const Volume& moving;
  GridGeometry cgrid;
  double lambda;
  SimilarityKind kind;

  std::size_t n_vox;
  std::size_t n_ctrl;
  double inv_ms[3];

  // Per-voxel constants: moving-space base coordinate under the
  // pre-alignment, control cell index and interpolation fractions.
  std::vector<float> base;          // 3 * n_vox
  std::vector<std::int32_t> cbase;  // n_vox (control point index)
  std::vector<float> cfrac;         // 3 * n_vox
  std::size_t coff[8];              // control cell corner offsets

  mutable std::vector<float> wbuf;  // NCC scratch

  Impl(const Volume& f, const Volume& m, const AffineTransform& pre,
       const GridGeometry& grid, double lam, SimilarityKind k)
      : fixed(f), moving(m), cgrid(grid), lambda(lam), kind(k) {
    const auto& fg = fixed.geom;
    n_vox = fg.voxel_count();
    n_ctrl = cgrid.voxel_count();
    for (int a = 0; a < 3; ++a) inv_ms[a] = 1.0 / moving.geom.spacing[a];

    base.resize(3 * n_vox);
    cbase.resize(n_vox);
    cfrac.resize(3 * n_vox);

    const std::size_t csy = static_cast<std::size_t>(cgrid.dims[0]);
    const std::size_t csz = csy * cgrid.dims[1];
    coff[0] = 0;
    coff[1] = 1;
    coff[2] = csy;
    coff[3] = csy + 1;
    coff[4] = csz;
    coff[5] = csz + 1;
    coff[6] = csz + csy;
    coff[7] = csz + csy + 1;

    std::size_t idx = 0;
    for (int k2 = 0; k2 < fg.dims[2]; ++k2)
      for (int j = 0; j < fg.dims[1]; ++j)
        for (int i = 0; i < fg.dims[0]; ++i, ++idx) {
          const Vec3 x = fg.world(i, j, k2);
          const Vec3 phi = pre.apply(x);
          const Vec3 pv = moving.geom.voxel_from_world(phi);
          base[3 * idx] = static_cast<float>(pv.x);
          base[3 * idx + 1] = static_cast<float>(pv.y);
          base[3 * idx + 2] = static_cast<float>(pv.z);

          // Control-grid interpolation weights depend only on x.
          const Vec3 cc = cgrid.voxel_from_world(x);
          int ci[3];
          float cf[3];
          for (int a = 0; a < 3; ++a) {
            double p = std::clamp(cc[a], 0.0, static_cast<double>(cgrid.dims[a] - 1));
            int c0 = static_cast<int>(p);
            if (c0 > cgrid.dims[a] - 2) c0 = cgrid.dims[a] - 2;
            ci[a] = c0;
            cf[a] = static_cast<float>(p - c0);
          }
          cbase[idx] = static_cast<std::int32_t>(
              static_cast<std::size_t>(ci[2]) * csz + static_cast<std::size_t>(ci[1]) * csy +
              ci[0]);
          cfrac[3 * idx] = cf[0];
          cfrac[3 * idx + 1] = cf[1];
          cfrac[3 * idx + 2] = cf[2];
        }
  }
};

DeformObjective::DeformObjective(const Volume& fixed, const Volume& moving,
                                 const AffineTransform& pre, const GridGeometry& grid,
                                 double smooth_lambda, SimilarityKind kind)
    : impl_(std::make_unique<Impl>(fixed, moving, pre, grid, smooth_lambda, kind)) {}

DeformObjective::~DeformObjective() = default;

std::size_t DeformObjective::param_count() const { return 3 * impl_->n_ctrl; }

double DeformObjective::loss_and_grad(std::span<const double> u,
                                      std::span<double> grad) const {
  const Impl& im = *impl_;
  if (u.size() != 3 * im.n_ctrl || grad.size() != u.size())
    throw ContractError("deform objective parameter size mismatch");
  std::fill(grad.begin(), grad.end(), 0.0);

  const MovingView mv(im.moving);
  const double inv_n = 1.0 / static_cast<double>(im.n_vox);
  const float* fdat = im.fixed.data.data();
  const double* up = u.data();
  double* gp = grad.data();

  // NCC needs the warped values before gradient coefficients exist.
  NccStats st{0.0, 0.0, 0.0, 0.0, false};
  double mf = 0.0, ncc_norm = 0.0;

  auto sample_at = [&](std::size_t idx) {
    const float* cf = &im.cfrac[3 * idx];
    const double fx = cf[0], fy = cf[1], fz = cf[2];
    const double gx = 1.0 - fx, gy = 1.0 - fy, gz = 1.0 - fz;
    const double w0 = gx * gy * gz, w1 = fx * gy * gz, w2 = gx * fy * gz,
                 w3 = fx * fy * gz, w4 = gx * gy * fz, w5 = fx * gy * fz,
                 w6 = gx * fy * fz, w7 = fx * fy * fz;
    const std::size_t cb = static_cast<std::size_t>(im.cbase[idx]);
    double ux = 0.0, uy = 0.0, uz = 0.0;
    const double w[8] = {w0, w1, w2, w3, w4, w5, w6, w7};
    for (int c = 0; c < 8; ++c) {
      const double* uc = up + 3 * (cb + im.coff[c]);
      ux += w[c] * uc[0];
      uy += w[c] * uc[1];
      uz += w[c] * uc[2];
    }
    const float* bp = &im.base[3 * idx];
    const double px = bp[0] + ux * im.inv_ms[0];
    const double py = bp[1] + uy * im.inv_ms[1];
    const double pz = bp[2] + uz * im.inv_ms[2];
    struct R { SampleG s; double w[8]; std::size_t cb; };
    R r;
    r.s = mv.sample(px, py, pz);
    for (int c = 0; c < 8; ++c) r.w[c] = w[c];
    r.cb = cb;
    return r;
  };

  if (im.kind == SimilarityKind::NCC) {
    im.wbuf.resize(im.n_vox);
    double sw = 0.0, sf = 0.0;
    for (std::size_t idx = 0; idx < im.n_vox; ++idx) {
      const auto r = sample_at(idx);
      im.wbuf[idx] = static_cast<float>(r.s.value);
      sw += r.s.value;
      sf += fdat[idx];
    }
    st.mw = sw * inv_n;
    mf = sf * inv_n;
    for (std::size_t i = 0; i < im.n_vox; ++i) {
      const double a = im.wbuf[i] - st.mw;
      const double b = fdat[i] - mf;
      st.saa += a * a;
      st.sbb += b * b;
      st.sab += a * b;
    }
    st.degenerate = st.saa <= 0.0 || st.sbb <= 0.0;
    if (!st.degenerate) ncc_norm = std::sqrt(st.saa * st.sbb);
  }

  double loss_acc = 0.0;
  if (!(im.kind == SimilarityKind::NCC && st.degenerate)) {
    for (std::size_t idx = 0; idx < im.n_vox; ++idx) {
      const auto r = sample_at(idx);

      double coef;
      if (im.kind == SimilarityKind::MSE) {
        const double resid = r.s.value - fdat[idx];
        loss_acc += resid * resid;
        coef = 2.0 * resid * inv_n;
      } else {
        const double a = r.s.value - st.mw;
        const double b = fdat[idx] - mf;
        coef = -(b - a * st.sab / st.saa) / ncc_norm;
      }

      const double gux = coef * r.s.dx * im.inv_ms[0];
      const double guy = coef * r.s.dy * im.inv_ms[1];
      const double guz = coef * r.s.dz * im.inv_ms[2];
      for (int c = 0; c < 8; ++c) {
        double* gc = gp + 3 * (r.cb + im.coff[c]);
        gc[0] += r.w[c] * gux;
        gc[1] += r.w[c] * guy;
        gc[2] += r.w[c] * guz;
      }
    }
  }

  double sim_loss;
  if (im.kind == SimilarityKind::MSE) {
    sim_loss = loss_acc * inv_n;
  } else {
    sim_loss = st.degenerate ? 1.0 : 1.0 - st.sab / ncc_norm;
  }

  const double smooth =
      (im.lambda > 0.0)
          ? smoothness_energy_accumulate(im.cgrid, u, grad, im.lambda)
          : smoothness_energy_accumulate(im.cgrid, u, std::span<double>(), 1.0);
  return sim_loss + im.lambda * smooth;
}

// ---------------------------------------------------------------------------
// Stage drivers
// ---------------------------------------------------------------------------

namespace {

void append_trace(std::vector<TraceEntry>* trace, const std::string& stage, int level,
                  const std::vector<double>& losses) {
  if (!trace) return;
  for (std::size_t t = 0; t < losses.size(); ++t)
    trace->push_back({stage, level, static_cast<int>(t), losses[t]});
}

struct PyramidPair {
  Volume fixed;
  Volume moving;
};

PyramidPair make_level(const Volume& fixed, const Volume& moving, int factor) {
  return {downsample_mean(fixed, factor), downsample_mean(moving, factor)};
}

}  // namespace

AffineTransform register_rigid(const Volume& fixed, const Volume& moving,
                               const RegConfig& cfg, std::vector<TraceEntry>* trace) {
  cfg.validate();
  const Vec3 center = fixed.geom.center();
  const Vec3 fov = fixed.geom.extent_mm();

  std::vector<double> params(6, 0.0);
  for (int factor : cfg.pyramid_levels) {
    const PyramidPair lv = make_level(fixed, moving, factor);
    RigidObjective obj(lv.fixed, lv.moving, center, fov, cfg.loss);
    OptimizerSettings s;
    s.lr = cfg.pre_reg_lr;
    s.iters = cfg.rigid_iters;
    const OptimResult r = adam_minimize(
        [&obj](std::span<const double> p, std::span<double> g) {
          return obj.loss_and_grad(p, g);
        },
        params, s, "rigid");
    params = r.best_params;
    append_trace(trace, "rigid", factor, r.trace);
  }

  RigidParams rp;
  for (int a = 0; a < 3; ++a) {
    rp.euler_xyz[a] = params[a];
    rp.translation_frac[a] = params[3 + a];
  }
  return rp.to_affine(center, fov);
}

AffineTransform register_affine(const Volume& fixed, const Volume& moving,
                                const AffineTransform& init, const RegConfig& cfg,
                                std::vector<TraceEntry>* trace) {
  cfg.validate();
  const Vec3 center = fixed.geom.center();
  const Vec3 fov = fixed.geom.extent_mm();
  const AffineTransform init_c = init.recentered(center);

  std::vector<double> params(12, 0.0);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) params[3 * r + c] = init_c.matrix[r][c];
  for (int a = 0; a < 3; ++a) params[9 + a] = init_c.translation_mm[a] / fov[a];

  for (int factor : cfg.pyramid_levels) {
    const PyramidPair lv = make_level(fixed, moving, factor);
    AffineObjective obj(lv.fixed, lv.moving, center, fov, cfg.loss);
    OptimizerSettings s;
    s.lr = cfg.pre_reg_lr;
    s.iters = cfg.affine_iters;
    const OptimResult r = adam_minimize(
        [&obj](std::span<const double> p, std::span<double> g) {
          return obj.loss_and_grad(p, g);
        },
        params, s, "affine");
    params = r.best_params;
    append_trace(trace, "affine", factor, r.trace);
  }

  AffineTransform t;
  t.center_mm = center;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.matrix[r][c] = params[3 * r + c];
  t.translation_mm = {params[9] * fov.x, params[10] * fov.y, params[11] * fov.z};
  return t;
}

DisplacementField register_deformable(const Volume& fixed, const Volume& moving,
                                      const AffineTransform& pre, const RegConfig& cfg,
                                      std::vector<TraceEntry>* trace) {
  cfg.validate();
  DisplacementField field = DisplacementField::zeros(fixed.geom, cfg.deform_grid_factor);
  DeformObjective obj(fixed, moving, pre, field.grid, cfg.smooth_lambda, cfg.loss);

  OptimizerSettings s;
  s.lr = cfg.deform_lr;
  s.iters = cfg.deform_iters;
  const OptimResult r = adam_minimize(
      [&obj](std::span<const double> p, std::span<double> g) {
        return obj.loss_and_grad(p, g);
      },
      field.u, s, "deform");
  append_trace(trace, "deform", 1, r.trace);
  return DisplacementField(field.grid, r.best_params);
}

RegistrationResult register_pipeline(const Volume& atlas_img, const LabelMask& atlas_mask,
                                     const Volume& query_img, const RegConfig& cfg) {
  cfg.validate();
  if (atlas_mask.geom != atlas_img.geom)
    throw ContractError("atlas mask and image geometry differ");

  const Volume fixed = normalize_intensity(query_img);
  const Volume moving = normalize_intensity(atlas_img);

  RegistrationResult out;
  out.affine = AffineTransform::identity(query_img.geom.center());

  if (cfg.enable_rigid)
    out.affine = register_rigid(fixed, moving, cfg, &out.loss_trace);
  if (cfg.enable_affine)
    out.affine = register_affine(fixed, moving, out.affine, cfg, &out.loss_trace);

  if (cfg.enable_deform) {
    out.field = register_deformable(fixed, moving, out.affine, cfg, &out.loss_trace);
  } else {
    out.field = DisplacementField::zeros(query_img.geom, cfg.deform_grid_factor);
  }

  out.warped_image = warp_volume(atlas_img, &out.affine, &out.field, query_img.geom);
  out.warped_mask =
      warp_mask(atlas_mask, &out.affine, &out.field, query_img.geom, MaskWarpMode::Nearest);
  return out;
}

}  // namespace atlasfuse
