#include "doctest.h"

#include <cmath>

#include "atlasfuse/errors.hpp"
#include "atlasfuse/fusion.hpp"
#include "atlasfuse/metrics.hpp"
#include "helpers/test_support.hpp"

using namespace atlasfuse;
using namespace testsupport;

namespace {

ProbMask random_prob(const GridGeometry& g, Rng& rng) {
  std::vector<float> v(g.voxel_count());
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return ProbMask(g, std::move(v));
}

RegConfig tiny_reg_config() {
  RegConfig cfg;
  cfg.pyramid_levels = {4, 2};
  cfg.rigid_iters = 60;
  cfg.affine_iters = 60;
  cfg.deform_iters = 120;
  return cfg;
}

}  // namespace

TEST_CASE("maxpool3d leaves constants unchanged and dilates a point") {
  const GridGeometry g = make_geom(7);
  const ProbMask c = ProbMask::filled(g, 0.4f);
  CHECK(maxpool3d(c, 3).values == c.values);
  CHECK(maxpool3d(c, 7).values == c.values);

  std::vector<float> v(g.voxel_count(), 0.0f);
  v[g.linear(3, 3, 3)] = 1.0f;
  const ProbMask point(g, std::move(v));
  const ProbMask pooled = maxpool3d(point, 3);
  for (int k = 0; k < 7; ++k)
    for (int j = 0; j < 7; ++j)
      for (int i = 0; i < 7; ++i) {
        const bool inside = std::abs(i - 3) <= 1 && std::abs(j - 3) <= 1 &&
                            std::abs(k - 3) <= 1;
        CHECK(pooled.at(i, j, k) == (inside ? 1.0f : 0.0f));
      }
}

TEST_CASE("maxpool3d matches the brute-force window oracle") {
  Rng rng(100);
  const GridGeometry g = make_geom(8);
  const ProbMask m = random_prob(g, rng);
  for (int k : {3, 5, 7}) {
    const ProbMask pooled = maxpool3d(m, k);
    const int r = k / 2;
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          float best = 0.0f;
          for (int dz = -r; dz <= r; ++dz)
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx) {
                const int i = x + dx, j = y + dy, kk = z + dz;
                if (g.contains(i, j, kk)) best = std::max(best, m.at(i, j, kk));
              }
          CHECK(pooled.at(x, y, z) == best);
        }
  }
}

TEST_CASE("kalman_gain closed-form values") {
  const GridGeometry g = make_geom(6);
  const ProbMask atlas = ProbMask::filled(g, 1.0f);
  const ProbMask fm = ProbMask::filled(g, 0.0f);

  FusionParams zero;
  const ProbMask k_half = kalman_gain(atlas, fm, zero);
  for (float v : k_half.values) CHECK(v == 0.5f);

  FusionParams one_w;
  one_w.w[0] = 1.0;  // (atlas, kernel 3)
  const ProbMask k_sig = kalman_gain(atlas, fm, one_w);
  const double expect = 1.0 / (1.0 + std::exp(-1.0));
  for (float v : k_sig.values)
    CHECK(v == doctest::Approx(expect).epsilon(1e-6));

  Rng rng(101);
  const ProbMask ra = random_prob(g, rng), rf = random_prob(g, rng);
  FusionParams sat;
  sat.b = 40.0;
  for (float v : kalman_gain(ra, rf, sat).values) CHECK(v == 1.0f);
  sat.b = -40.0;
  for (float v : kalman_gain(ra, rf, sat).values) CHECK(v == 0.0f);
}

TEST_CASE("scalar gain mode yields one constant value") {
  Rng rng(102);
  const GridGeometry g = make_geom(6);
  const ProbMask a = random_prob(g, rng), f = random_prob(g, rng);
  FusionParams p;
  p.w = {0.5, -0.2, 0.1, 0.3, -0.4, 0.2};
  p.b = 0.1;
  const ProbMask k = kalman_gain(a, f, p, GainMode::Scalar);
  for (float v : k.values) CHECK(v == k.values[0]);
}

TEST_CASE("fuse reproduces its inputs at the gain extremes, bitwise") {
  Rng rng(103);
  const GridGeometry g = make_geom(8);
  const ProbMask atlas = random_prob(g, rng), fm = random_prob(g, rng);

  const ProbMask k0 = kalman_gain(atlas, fm, FusionParams::pure_fm());
  CHECK(fuse(atlas, fm, k0).values == fm.values);

  const ProbMask k1 = kalman_gain(atlas, fm, FusionParams::pure_atlas());
  CHECK(fuse(atlas, fm, k1).values == atlas.values);

  const ProbMask khalf = ProbMask::filled(g, 0.5f);
  const ProbMask mid = fuse(ProbMask::filled(g, 1.0f), ProbMask::filled(g, 0.0f), khalf);
  for (float v : mid.values) CHECK(v == 0.5f);
}

TEST_CASE("fuse output is boxed by its inputs per voxel") {
  Rng rng(104);
  const GridGeometry g = make_geom(8);
  const ProbMask atlas = random_prob(g, rng), fm = random_prob(g, rng);
  const ProbMask gain = random_prob(g, rng);
  const ProbMask out = fuse(atlas, fm, gain);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    CHECK(out.values[i] >= std::min(atlas.values[i], fm.values[i]));
    CHECK(out.values[i] <= std::max(atlas.values[i], fm.values[i]));
  }
}

TEST_CASE("soft dice loss formula cases") {
  const GridGeometry g = make_geom(6);
  LabelMask gt = LabelMask::filled(g, 0);
  for (int i = 0; i < 4; ++i) gt.at(i, 0, 0) = 1;

  // pred == gt with tiny eps: loss -> 0.
  std::vector<float> p(g.voxel_count(), 0.0f);
  for (int i = 0; i < 4; ++i) p[g.linear(i, 0, 0)] = 1.0f;
  CHECK(soft_dice_loss(ProbMask(g, std::move(p)), gt, 1e-9) ==
        doctest::Approx(0.0).epsilon(1e-8));

  // pred == 0 with eps 1: 1 - 1/(n_gt + 1).
  const double n = 4.0;
  CHECK(soft_dice_loss(ProbMask::filled(g, 0.0f), gt, 1.0) ==
        doctest::Approx(1.0 - 1.0 / (n + 1.0)));
}

TEST_CASE("soft dice gradient matches finite differences") {
  Rng rng(105);
  const GridGeometry g = make_geom(4);
  LabelMask gt = random_binary_mask(g, rng, 0.4);
  ProbMask pred = random_prob(g, rng);

  std::vector<double> analytic(pred.values.size());
  soft_dice_loss(pred, gt, 1.0, analytic);

  for (int t = 0; t < 50; ++t) {
    const std::size_t i = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(pred.values.size()) - 1));
    const double h = 1e-5;
    ProbMask probe = pred;
    const float x0 = probe.values[i];
    probe.values[i] = static_cast<float>(std::min(1.0, x0 + h));
    const double hp = probe.values[i] - x0;
    const double fp = soft_dice_loss(probe, gt, 1.0);
    probe.values[i] = static_cast<float>(std::max(0.0, x0 - h));
    const double hm = x0 - probe.values[i];
    const double fm = soft_dice_loss(probe, gt, 1.0);
    probe.values[i] = x0;
    const double fd = (fp - fm) / (hp + hm);
    CHECK(rel_err(analytic[i], fd, 1e-9) < 1e-5);
  }
}

TEST_CASE("fusion parameter gradient (spec chain rule) matches finite differences") {
  Rng rng(106);
  const GridGeometry g = make_geom(6);
  const ProbMask atlas = random_prob(g, rng), fm = random_prob(g, rng);
  const LabelMask gt = random_binary_mask(g, rng, 0.4);
  const auto pooled = pooled_features(atlas, fm);
  const double eps = 1.0;

  auto loss_of = [&](std::span<const double> v) {
    FusionParams p;
    for (int f = 0; f < 6; ++f) p.w[f] = v[f];
    p.b = v[6];
    return soft_dice_loss(fuse(atlas, fm, kalman_gain(atlas, fm, p)), gt, eps);
  };

  std::vector<double> params{0.3, -0.2, 0.15, -0.1, 0.25, -0.3, 0.05};
  // Analytic gradient assembled from the public intermediates.
  FusionParams p;
  for (int f = 0; f < 6; ++f) p.w[f] = params[f];
  p.b = params[6];
  const ProbMask gain = kalman_gain(atlas, fm, p);
  const ProbMask fused = fuse(atlas, fm, gain);
  std::vector<double> dice_grad(fused.values.size());
  soft_dice_loss(fused, gt, eps, dice_grad);

  std::vector<double> analytic(7, 0.0);
  for (std::size_t i = 0; i < fused.values.size(); ++i) {
    const double k = gain.values[i];
    const double chain = dice_grad[i] *
                         (double(atlas.values[i]) - double(fm.values[i])) * k * (1.0 - k);
    for (int f = 0; f < 6; ++f) analytic[f] += chain * pooled[f].values[i];
    analytic[6] += chain;
  }

  const auto fd = finite_difference_gradient(loss_of, params, 1e-6);
  for (int i = 0; i < 7; ++i) CHECK(rel_err(analytic[i], fd[i], 1e-10) < 1e-5);
}

TEST_CASE("binarize thresholds inclusively") {
  const GridGeometry g = make_geom(4);
  const LabelMask ones = binarize(ProbMask::filled(g, 0.5f), 0.5);
  for (auto v : ones.labels) CHECK(v == 1);
  const LabelMask zeros = binarize(ProbMask::filled(g, 0.0f), 0.5);
  for (auto v : zeros.labels) CHECK(v == 0);

  Rng rng(107);
  const ProbMask m = random_prob(g, rng);
  const LabelMask b = binarize(m, 0.3);
  for (std::size_t i = 0; i < b.labels.size(); ++i)
    CHECK(b.labels[i] == (m.values[i] >= 0.3f ? 1 : 0));
}

TEST_CASE("fit_fusion picks the pure-FM candidate when the backend is perfect") {
  const GridGeometry g = make_geom(24);
  const LabelMask mask = sphere_mask(g, {12, 12, 12}, 6.0);
  Rng rng(108);
  const Volume img = add_noise(volume_from_mask(mask, 0.9f, 0.1f), 0.01, rng);

  BackendSpec oracle;
  oracle.kind = BackendKind::Oracle;  // zero corruption, in-memory gt

  FitConfig fit;
  fit.n_pseudo_queries = 1;
  fit.aug.max_disp_vox = 3.0;
  fit.aug.smooth_sigma_vox = 6.0;
  fit.aug.seed = 3;
  fit.iters = 20;

  const FitOutcome out =
      fit_fusion(img, mask, oracle, tiny_reg_config(), fit, PromptKind::Mask);
  CHECK(out.report.chosen == "pure_fm");
  CHECK(out.params.b == doctest::Approx(-40.0));
  // Support-set loss of the winner is (near) perfect.
  CHECK(out.report.pure_fm_loss < 1e-3);
}

TEST_CASE("fit_fusion safeguard never loses to either pure candidate") {
  const GridGeometry g = make_geom(24);
  const LabelMask mask = sphere_mask(g, {12, 12, 12}, 6.0);
  Rng rng(109);
  const Volume img = add_noise(volume_from_mask(mask, 0.9f, 0.1f), 0.01, rng);

  BackendSpec oracle;
  oracle.kind = BackendKind::Oracle;
  oracle.oracle.corruption.erode_r = 2.0;  // imperfect backend

  FitConfig fit;
  fit.n_pseudo_queries = 2;
  fit.aug.max_disp_vox = 2.0;
  fit.aug.smooth_sigma_vox = 6.0;
  fit.aug.seed = 4;
  fit.iters = 30;
  fit.lr = 0.01;

  const FitOutcome out =
      fit_fusion(img, mask, oracle, tiny_reg_config(), fit, PromptKind::Mask);
  double chosen_loss = out.report.fitted_loss;
  if (out.report.chosen == "pure_fm") chosen_loss = out.report.pure_fm_loss;
  if (out.report.chosen == "pure_atlas") chosen_loss = out.report.pure_atlas_loss;
  CHECK(chosen_loss <= out.report.pure_fm_loss + 1e-9);
  CHECK(chosen_loss <= out.report.pure_atlas_loss + 1e-9);
}

TEST_CASE("fit_fusion iters=0 selects among the pure candidates only") {
  const GridGeometry g = make_geom(20);
  const LabelMask mask = sphere_mask(g, {10, 10, 10}, 5.0);
  Rng rng(110);
  const Volume img = add_noise(volume_from_mask(mask, 0.9f, 0.1f), 0.01, rng);

  BackendSpec oracle;
  oracle.kind = BackendKind::Oracle;
  FitConfig fit;
  fit.iters = 0;
  fit.n_pseudo_queries = 1;
  fit.aug.max_disp_vox = 2.0;
  fit.aug.seed = 5;

  const FitOutcome out =
      fit_fusion(img, mask, oracle, tiny_reg_config(), fit, PromptKind::Mask);
  CHECK((out.report.chosen == "pure_fm" || out.report.chosen == "pure_atlas"));
}

TEST_CASE("fit_fusion is deterministic under a fixed seed") {
  const GridGeometry g = make_geom(20);
  const LabelMask mask = sphere_mask(g, {10, 10, 10}, 5.0);
  Rng rng(111);
  const Volume img = add_noise(volume_from_mask(mask, 0.9f, 0.1f), 0.01, rng);

  BackendSpec oracle;
  oracle.kind = BackendKind::Oracle;
  oracle.oracle.corruption.erode_r = 1.0;

  FitConfig fit;
  fit.n_pseudo_queries = 2;
  fit.aug.max_disp_vox = 2.0;
  fit.aug.seed = 6;
  fit.iters = 15;
  fit.lr = 0.01;

  const FitOutcome a =
      fit_fusion(img, mask, oracle, tiny_reg_config(), fit, PromptKind::Mask);
  const FitOutcome b =
      fit_fusion(img, mask, oracle, tiny_reg_config(), fit, PromptKind::Mask);
  CHECK(a.params.w == b.params.w);
  CHECK(a.params.b == b.params.b);
  CHECK(a.report.chosen == b.report.chosen);
}

TEST_CASE("fusion params json round-trip") {
  TempDir tmp("fusion_params");
  FusionParams p;
  p.w = {0.1, -0.2, 0.3, -0.4, 0.5, -0.6};
  p.b = 0.75;
  save_fusion_params(p, tmp.str("p.json"));
  const FusionParams r = load_fusion_params(tmp.str("p.json"));
  CHECK(r.w == p.w);
  CHECK(r.b == p.b);
}
