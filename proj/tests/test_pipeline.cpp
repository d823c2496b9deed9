#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "atlasfuse/errors.hpp"
#include "atlasfuse/nifti.hpp"
#include "atlasfuse/pipeline.hpp"
#include "helpers/test_support.hpp"

using namespace atlasfuse;
using namespace testsupport;
namespace fs = std::filesystem;

namespace {

RegConfig small_reg() {
  RegConfig cfg;
  cfg.pyramid_levels = {4, 2};
  cfg.rigid_iters = 50;
  cfg.affine_iters = 50;
  cfg.deform_iters = 100;
  return cfg;
}

PhantomSpec small_phantom(std::uint64_t seed) {
  PhantomSpec spec;
  spec.kind = PhantomKind::TwoOrgan;
  spec.dims = {24, 24, 24};
  spec.noise_sigma = 0.02;
  spec.deform.max_disp_vox = 2.0;
  spec.deform.smooth_sigma_vox = 5.0;
  spec.deform.seed = seed;
  return spec;
}

CaseConfig phantom_case(const PhantomCase& pc, const std::string& id) {
  CaseConfig cc;
  cc.case_id = id;
  cc.atlas_img = pc.atlas_img;
  cc.atlas_mask = pc.atlas_mask;
  cc.query_img = pc.query_img;
  cc.query_gt = pc.query_gt;
  cc.context_labels = pc.context_labels;
  cc.reg = small_reg();
  return cc;
}

bool directories_byte_identical(const fs::path& a, const fs::path& b) {
  std::vector<std::string> rel_a, rel_b;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel_a.push_back(fs::relative(e.path(), a).string());
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rel_b.push_back(fs::relative(e.path(), b).string());
  std::sort(rel_a.begin(), rel_a.end());
  std::sort(rel_b.begin(), rel_b.end());
  if (rel_a != rel_b) return false;
  for (const auto& rel : rel_a) {
    std::ifstream fa(a / rel, std::ios::binary), fb(b / rel, std::ios::binary);
    const std::string ca((std::istreambuf_iterator<char>(fa)),
                         std::istreambuf_iterator<char>());
    const std::string cb((std::istreambuf_iterator<char>(fb)),
                         std::istreambuf_iterator<char>());
    if (ca != cb) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("phantom sphere voxel count equals the rasterization oracle") {
  PhantomSpec spec;
  spec.kind = PhantomKind::Sphere;
  spec.dims = {64, 64, 64};
  spec.noise_sigma = 0.0;
  spec.deform.max_disp_vox = 0.0;
  const PhantomCase pc = generate_phantom(spec);

  // Oracle: direct rasterization of a radius-10 ball about the grid center.
  std::size_t count = 0;
  const double c = 31.5;
  for (int k = 0; k < 64; ++k)
    for (int j = 0; j < 64; ++j)
      for (int i = 0; i < 64; ++i) {
        const double d2 = (i - c) * (i - c) + (j - c) * (j - c) + (k - c) * (k - c);
        if (d2 <= 100.0) ++count;
      }
  CHECK(pc.atlas_mask.foreground_count() == count);
}

TEST_CASE("phantom with zero deformation is bitwise identical to its atlas") {
  PhantomSpec spec = small_phantom(1);
  spec.deform.max_disp_vox = 0.0;
  const PhantomCase pc = generate_phantom(spec);
  CHECK(pc.query_img.data == pc.atlas_img.data);
  CHECK(pc.query_gt.labels == pc.atlas_mask.labels);
}

TEST_CASE("phantom generation is deterministic per seed") {
  const PhantomCase a = generate_phantom(small_phantom(7));
  const PhantomCase b = generate_phantom(small_phantom(7));
  CHECK(a.atlas_img.data == b.atlas_img.data);
  CHECK(a.query_img.data == b.query_img.data);
  CHECK(a.true_field.u == b.true_field.u);
  const PhantomCase c = generate_phantom(small_phantom(8));
  CHECK(a.query_img.data != c.query_img.data);
}

TEST_CASE("atlas-only ablation: final mask equals the warped atlas mask") {
  const PhantomCase pc = generate_phantom(small_phantom(2));
  CaseConfig cc = phantom_case(pc, "atlas_only");
  cc.use_backend = false;  // forces the K=1 path

  const CaseResult r = run_case(cc);
  // Per-context combination of the warped mask labels.
  for (std::size_t i = 0; i < r.m_final.labels.size(); ++i)
    CHECK(r.m_final.labels[i] == r.m_atlas.labels[i]);
}

TEST_CASE("fm-only ablation: final mask equals the binarized backend mask") {
  const PhantomCase pc = generate_phantom(small_phantom(3));
  CaseConfig cc = phantom_case(pc, "fm_only");
  cc.use_backend = true;
  cc.backend.kind = BackendKind::Oracle;  // in-memory gt per context
  cc.fusion_source = FusionSource::PureFm;

  const CaseResult r = run_case(cc);
  CHECK(r.m_final.labels == r.m_fm.labels);
  // Zero-corruption oracle: the final mask is the ground truth itself.
  CHECK(r.m_final.labels == pc.query_gt.labels);
}

TEST_CASE("run_case reports per-context metrics when gt is available") {
  const PhantomCase pc = generate_phantom(small_phantom(4));
  CaseConfig cc = phantom_case(pc, "metrics");
  cc.use_backend = false;
  const CaseResult r = run_case(cc);
  REQUIRE(r.contexts.size() == pc.context_labels.size());
  for (const auto& ctx : r.contexts) {
    REQUIRE(ctx.final_metrics.has_value());
    CHECK(ctx.final_metrics->dice.has_value());
  }
  CHECK(r.timings.registration_s > 0.0);
}

TEST_CASE("write_case_outputs emits a reproducible directory") {
  const PhantomCase pc = generate_phantom(small_phantom(5));
  CaseConfig cc = phantom_case(pc, "repro");
  cc.use_backend = false;

  TempDir tmp("case_repro");
  const CaseResult r1 = run_case(cc);
  write_case_outputs(r1, cc, tmp.str("run1"));
  const CaseResult r2 = run_case(cc);
  write_case_outputs(r2, cc, tmp.str("run2"));
  CHECK(directories_byte_identical(tmp.path() / "run1", tmp.path() / "run2"));
}

TEST_CASE("format_percent renders paper-style numbers") {
  CHECK(format_percent(0.8122) == "81.22");
  CHECK(format_percent(0.0) == "0.00");
  CHECK(format_percent(1.0) == "100.00");
}

TEST_CASE("fold planning covers every case exactly once with no support leak") {
  std::vector<ManifestCase> manifest;
  for (int i = 0; i < 10; ++i)
    manifest.push_back({"case" + std::to_string(i), "img", "gt", {1}});

  const auto folds = plan_folds(manifest, 5, 99);
  REQUIRE(folds.size() == 5);
  std::set<std::string> seen;
  for (const auto& f : folds) {
    CHECK(f.query_ids.size() == 2);
    for (const auto& id : f.query_ids) {
      CHECK(seen.insert(id).second);  // exactly once as query
      CHECK(id != f.support_id);      // support never queries its own fold
    }
  }
  CHECK(seen.size() == 10);

  // Determinism of the plan.
  const auto again = plan_folds(manifest, 5, 99);
  for (std::size_t i = 0; i < folds.size(); ++i) {
    CHECK(folds[i].support_id == again[i].support_id);
    CHECK(folds[i].query_ids == again[i].query_ids);
  }
}

TEST_CASE("manifest loader validates structure") {
  TempDir tmp("manifest");
  {
    std::ofstream f(tmp.str("bad.json"));
    f << "{\"not\":\"a list\"}";
  }
  CHECK_THROWS_AS(load_manifest(tmp.str("bad.json")), FormatError);
  {
    std::ofstream f(tmp.str("ok.json"));
    f << R"([{"id":"a","image":"x.nii","gt":"y.nii","contexts":[1,2]}])";
  }
  const auto m = load_manifest(tmp.str("ok.json"));
  REQUIRE(m.size() == 1);
  CHECK(m[0].id == "a");
  CHECK(m[0].contexts == std::vector<std::int32_t>{1, 2});
}

TEST_CASE("crossval runs a small synthetic manifest end to end") {
  TempDir tmp("crossval");

  // Six phantoms written as NIfTI files, one manifest entry each.
  std::vector<ManifestCase> manifest;
  for (int i = 0; i < 6; ++i) {
    PhantomSpec spec = small_phantom(20 + i);
    spec.dims = {20, 20, 20};
    const PhantomCase pc = generate_phantom(spec);
    const std::string img = tmp.str("img" + std::to_string(i) + ".nii");
    const std::string gt = tmp.str("gt" + std::to_string(i) + ".nii");
    write_nifti(pc.query_img, img);
    write_nifti(pc.query_gt, gt);
    manifest.push_back({"c" + std::to_string(i), img, gt, {1, 2}});
  }

  CrossvalConfig cfg;
  cfg.n_folds = 3;
  cfg.seed = 5;
  cfg.reg = small_reg();
  cfg.reg.deform_iters = 40;
  cfg.use_backend = false;
  cfg.fusion_source = FusionSource::PureAtlas;
  cfg.max_workers = 2;

  const CrossvalResult r = run_crossval(manifest, cfg, tmp.str("out"));
  CHECK(r.cases.size() == 6);
  for (const auto& c : r.cases) CHECK(c.error.empty());
  CHECK_FALSE(r.rows.empty());
  CHECK(fs::exists(tmp.path() / "out" / "report.csv"));
  CHECK(fs::exists(tmp.path() / "out" / "report.json"));
  CHECK(fs::exists(tmp.path() / "out" / "table_dice.csv"));

  // Header-only CSV for an empty result set.
  CrossvalResult empty;
  write_crossval_reports(empty, tmp.str("empty"));
  std::ifstream f(tmp.str("empty") + "/report.csv");
  std::string header, extra;
  std::getline(f, header);
  CHECK(header.rfind("stage,context", 0) == 0);
  const bool has_more = static_cast<bool>(std::getline(f, extra)) && !extra.empty();
  CHECK_FALSE(has_more);
}

TEST_CASE("crossval fails fast on missing files") {
  std::vector<ManifestCase> manifest{{"a", "/nonexistent/img.nii", "", {1}}};
  manifest.push_back({"b", "/nonexistent/img2.nii", "", {1}});
  CrossvalConfig cfg;
  cfg.n_folds = 2;
  TempDir tmp("cv_fail");
  CHECK_THROWS_AS(run_crossval(manifest, cfg, tmp.str("out")), FormatError);
}

TEST_CASE("timing table has the stage-breakdown layout") {
  StageTimings t;
  t.registration_s = 90.0;
  t.fm_s = 0.6;
  t.fusion_s = 18.0;
  t.total_s = 108.6;
  const std::string table = timing_table(t, 3000);
  CHECK(table.find("registration,1.5,3000") != std::string::npos);
  CHECK(table.find("foundation_model,0.01,-") != std::string::npos);
  CHECK(table.find("fusion,0.3,7") != std::string::npos);
  CHECK(table.find("total,") != std::string::npos);
}
