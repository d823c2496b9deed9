#include "doctest.h"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "atlasfuse/backend.hpp"
#include "atlasfuse/errors.hpp"
#include "atlasfuse/metrics.hpp"
#include "atlasfuse/mvol.hpp"
#include "helpers/test_support.hpp"

using namespace atlasfuse;
using namespace testsupport;

namespace {

Prompt click_at(int i, int j, int k) {
  Prompt p;
  p.kind = PromptKind::Click;
  p.click = {i, j, k};
  return p;
}

BackendSpec external_spec(const std::string& mode, const std::string& workdir,
                          double timeout_s = 60.0) {
  BackendSpec s;
  s.kind = BackendKind::External;
  s.external.command = std::string(ECHO_BACKEND_PATH) + " --mode=" + mode;
  s.external.workdir = workdir;
  s.external.timeout_s = timeout_s;
  return s;
}

}  // namespace

TEST_CASE("oracle with zero corruption returns the ground truth") {
  const GridGeometry g = make_geom(16);
  const LabelMask gt = sphere_mask(g, {8, 8, 8}, 4.0);
  const Volume query = Volume::filled(g, 0.5f);

  BackendSpec s;
  s.kind = BackendKind::Oracle;
  const ProbMask out = segment(s, query, std::nullopt, &gt);
  REQUIRE(out.geom == g);
  for (std::size_t i = 0; i < out.values.size(); ++i)
    CHECK(out.values[i] == (gt.labels[i] ? 1.0f : 0.0f));
}

TEST_CASE("oracle erosion matches the rasterized-ball oracle within 0.02 Dice") {
  const GridGeometry g = make_geom(32);
  const LabelMask gt = sphere_mask(g, {15.5, 15.5, 15.5}, 10.0);
  const Volume query = Volume::filled(g, 0.5f);

  BackendSpec s;
  s.kind = BackendKind::Oracle;
  s.oracle.corruption.erode_r = 2.0;
  const ProbMask out = segment(s, query, std::nullopt, &gt);

  // Expected Dice from rasterized radius-8 vs radius-10 balls.
  const LabelMask ball8 = sphere_mask(g, {15.5, 15.5, 15.5}, 8.0);
  const double expect = dice(ball8, gt);

  LabelMask got = LabelMask::filled(g, 0);
  for (std::size_t i = 0; i < out.values.size(); ++i)
    got.labels[i] = out.values[i] >= 0.5f ? 1 : 0;
  CHECK(std::fabs(dice(got, gt) - expect) < 0.02);
}

TEST_CASE("oracle corruption is deterministic under a fixed seed") {
  const GridGeometry g = make_geom(16);
  const LabelMask gt = sphere_mask(g, {8, 8, 8}, 5.0);
  CorruptionSpec c;
  c.erode_r = 1.0;
  c.boundary_noise_prob = 0.4;
  c.seed = 1234;
  const LabelMask a = corrupt_mask(gt, c);
  const LabelMask b = corrupt_mask(gt, c);
  CHECK(a.labels == b.labels);
  c.seed = 1235;
  const LabelMask d = corrupt_mask(gt, c);
  CHECK(a.labels != d.labels);
}

TEST_CASE("component drop removes components by seeded draws") {
  const GridGeometry g = make_geom(16);
  LabelMask gt = LabelMask::filled(g, 0);
  for (int i = 1; i < 4; ++i) gt.at(i, 2, 2) = 1;
  for (int i = 10; i < 14; ++i) gt.at(i, 10, 10) = 1;

  CorruptionSpec keep_all;
  keep_all.drop_component_prob = 0.0;
  CHECK(corrupt_mask(gt, keep_all).foreground_count() == gt.foreground_count());

  CorruptionSpec drop_all;
  drop_all.drop_component_prob = 1.0;
  CHECK(corrupt_mask(gt, drop_all).foreground_count() == 0);
}

TEST_CASE("dilation grows a sphere by roughly the requested radius") {
  const GridGeometry g = make_geom(32);
  const LabelMask gt = sphere_mask(g, {15.5, 15.5, 15.5}, 8.0);
  const LabelMask grown = dilate_ball(gt, 2.0);
  const LabelMask ball10 = sphere_mask(g, {15.5, 15.5, 15.5}, 10.0);
  CHECK(std::fabs(dice(grown, ball10) - 1.0) < 0.02);
  // Dilation is monotone: contains the input.
  for (std::size_t i = 0; i < gt.labels.size(); ++i)
    if (gt.labels[i]) CHECK(grown.labels[i] == 1);
}

TEST_CASE("region growing segments a noisy sphere from a center click") {
  const GridGeometry g = make_geom(64);
  const LabelMask truth = sphere_mask(g, {31.5, 31.5, 31.5}, 12.0);
  Rng rng(90);
  const Volume query = add_noise(volume_from_mask(truth, 1.0f, 0.0f), 0.02, rng);

  BackendSpec s;
  s.kind = BackendKind::RegionGrow;
  s.region_grow.k_sigma = 2.5;
  const ProbMask out = segment(s, query, click_at(31, 31, 31));

  LabelMask got = LabelMask::filled(g, 0);
  for (std::size_t i = 0; i < out.values.size(); ++i)
    got.labels[i] = out.values[i] >= 0.5f ? 1 : 0;
  CHECK(dice(got, truth) >= 0.98);
}

TEST_CASE("region growing output contains its seed and respects box clipping") {
  const GridGeometry g = make_geom(24);
  Rng rng(91);
  const Volume query = Volume::filled(g, 0.5f);  // uniform: grows freely

  BackendSpec s;
  s.kind = BackendKind::RegionGrow;
  s.region_grow.max_iters = 50;

  Prompt box;
  box.kind = PromptKind::Box;
  box.box_min = {8, 8, 8};
  box.box_max = {12, 12, 12};
  const ProbMask out = segment(s, query, box);
  CHECK(out.values[g.linear(10, 10, 10)] == 1.0f);  // box center seed
  for (int k = 0; k < 24; ++k)
    for (int j = 0; j < 24; ++j)
      for (int i = 0; i < 24; ++i)
        if (out.at(i, j, k) > 0.0f) {
          CHECK(i >= 8);
          CHECK(i <= 12);
          CHECK(j >= 8);
          CHECK(j <= 12);
          CHECK(k >= 8);
          CHECK(k <= 12);
        }
}

TEST_CASE("region growing without a prompt is an empty-prior error") {
  BackendSpec s;
  s.kind = BackendKind::RegionGrow;
  const Volume query = Volume::filled(make_geom(8), 0.2f);
  CHECK_THROWS_AS(segment(s, query, std::nullopt), EmptyPriorError);
}

TEST_CASE("external echo backend round-trips the prompt mask bitwise") {
  TempDir tmp("ext_echo");
  Rng rng(92);
  const GridGeometry g = make_geom(10);
  const Volume query = random_volume(g, rng);
  LabelMask mask = sphere_mask(g, {5, 5, 5}, 3.0);

  Prompt p;
  p.kind = PromptKind::Mask;
  p.mask = mask;

  const BackendSpec s = external_spec("echo", tmp.str("work"));
  const ProbMask out = segment(s, query, p);
  REQUIRE(out.geom == g);
  for (std::size_t i = 0; i < out.values.size(); ++i)
    CHECK(out.values[i] == (mask.labels[i] ? 1.0f : 0.0f));
}

TEST_CASE("external backend geometry mismatch is a backend error") {
  TempDir tmp("ext_dims");
  const GridGeometry g = make_geom(8);
  const Volume query = Volume::filled(g, 0.1f);
  Prompt p;
  p.kind = PromptKind::Mask;
  p.mask = sphere_mask(g, {4, 4, 4}, 2.0);
  const BackendSpec s = external_spec("wrongdims", tmp.str("work"));
  CHECK_THROWS_AS(segment(s, query, p), BackendError);
}

TEST_CASE("external backend nonzero exit and timeout are backend errors") {
  TempDir tmp("ext_fail");
  const Volume query = Volume::filled(make_geom(8), 0.1f);
  CHECK_THROWS_AS(segment(external_spec("fail", tmp.str("w1")), query, std::nullopt),
                  BackendError);
  CHECK_THROWS_AS(
      segment(external_spec("hang", tmp.str("w2"), 0.3), query, std::nullopt),
      BackendError);
}

TEST_CASE("request.json round-trips field-identical") {
  TempDir tmp("ext_req");
  const GridGeometry g = make_geom(8);
  const Volume query = Volume::filled(g, 0.3f);
  const BackendSpec s = external_spec("echo", tmp.str("work"));
  segment(s, query, click_at(2, 3, 4));

  // Locate the request directory and re-parse its request.json.
  bool found = false;
  for (const auto& e :
       std::filesystem::recursive_directory_iterator(tmp.str("work"))) {
    if (e.path().filename() == "request.json") {
      std::ifstream f(e.path());
      nlohmann::json j;
      f >> j;
      CHECK(j.at("version").get<int>() == 1);
      CHECK(j.at("volume").get<std::string>() == "query.mvol.json");
      CHECK(j.at("expected_output").get<std::string>() == "mask.mvol.json");
      CHECK(j.at("prompt").at("kind").get<std::string>() == "click");
      CHECK(j.at("prompt").at("click").at(0).get<int>() == 2);
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("backend spec json round-trip") {
  TempDir tmp("spec_rt");
  BackendSpec s;
  s.kind = BackendKind::Oracle;
  s.oracle.gt_mask_path = "/some/path.nii";
  s.oracle.corruption.erode_r = 1.5;
  s.oracle.corruption.seed = 42;
  save_backend_spec(s, tmp.str("spec.json"));
  const BackendSpec r = load_backend_spec(tmp.str("spec.json"));
  CHECK(r.kind == BackendKind::Oracle);
  CHECK(r.oracle.gt_mask_path == s.oracle.gt_mask_path);
  CHECK(r.oracle.corruption.erode_r == 1.5);
  CHECK(r.oracle.corruption.seed == 42);
}
