#include "atlasfuse/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "atlasfuse/errors.hpp"
#include "atlasfuse/mvol.hpp"
#include "atlasfuse/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace atlasfuse {

namespace {

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

FusionParams resolve_fusion_params(const CaseConfig& cfg, std::int32_t label,
                                   FitReport* report) {
  switch (cfg.fusion_source) {
    case FusionSource::PureAtlas: return FusionParams::pure_atlas();
    case FusionSource::PureFm: return FusionParams::pure_fm();
    case FusionSource::Load:
    case FusionSource::Fixed: {
      const auto it = cfg.fusion_params_by_context.find(label);
      return it != cfg.fusion_params_by_context.end() ? it->second : cfg.fusion_params;
    }
    case FusionSource::Fit: {
      const FitOutcome fit = fit_fusion(cfg.atlas_img, select_label(cfg.atlas_mask, label),
                                        cfg.backend, cfg.reg, cfg.fit, cfg.prompt_kind,
                                        cfg.backend_promptable);
      if (report) *report = fit.report;
      return fit.params;
    }
  }
  throw ContractError("unreachable fusion source");
}

}  // namespace

CaseResult run_case(const CaseConfig& cfg) {
  cfg.reg.validate();
  if (cfg.context_labels.empty()) throw ContractError("case has no context labels");

  CaseResult out;
  out.case_id = cfg.case_id;
  const auto t_total = std::chrono::steady_clock::now();

  // Stage 1: registration.
  const auto t_reg = std::chrono::steady_clock::now();
  out.registration = register_pipeline(cfg.atlas_img, cfg.atlas_mask, cfg.query_img, cfg.reg);
  out.timings.registration_s = seconds_since(t_reg);
  out.m_atlas = out.registration.warped_mask;
  out.registration_params = 3 * out.registration.field.point_count();

  const Volume query_norm = normalize_intensity(cfg.query_img);
  const GridGeometry& g = cfg.query_img.geom;

  std::vector<std::int32_t> fm_combined(g.voxel_count(), 0);
  std::vector<std::int32_t> final_combined(g.voxel_count(), 0);

  for (std::int32_t label : cfg.context_labels) {
    ContextResult ctx;
    ctx.label = label;

    const LabelMask atlas_ctx = select_label(out.m_atlas, label);
    const ProbMask m_atlas_prob = mask_to_prob(atlas_ctx, 1);

    // Stage 2: prompt + backend.
    ProbMask m_fm = ProbMask::filled(g, 0.0f);
    bool backend_ran = false;
    if (cfg.use_backend) {
      const auto t_fm = std::chrono::steady_clock::now();
      try {
        std::optional<Prompt> prompt;
        if (cfg.backend_promptable) {
          Prompt p = make_prompt(atlas_ctx, cfg.prompt_kind);
          p.context_label = label;
          prompt = std::move(p);
        }
        const LabelMask* oracle_gt = nullptr;
        LabelMask gt_ctx;
        if (cfg.backend.kind == BackendKind::Oracle &&
            cfg.backend.oracle.gt_mask_path.empty()) {
          if (!cfg.query_gt.has_value())
            throw BackendError("oracle backend needs a ground truth");
          gt_ctx = select_label(*cfg.query_gt, label);
          oracle_gt = &gt_ctx;
        }
        m_fm = segment(cfg.backend, query_norm, prompt, oracle_gt);
        backend_ran = true;
      } catch (const EmptyPriorError& ex) {
        ctx.prompt_note = std::string(ex.what()) + "; backend skipped for this context";
      }
      out.timings.fm_s += seconds_since(t_fm);
    }

    // Stage 3: fusion.
    const auto t_fuse = std::chrono::steady_clock::now();
    FusionParams params;
    if (!cfg.use_backend || !backend_ran) {
      params = FusionParams::pure_atlas();
    } else {
      params = resolve_fusion_params(cfg, label, nullptr);
    }
    const ProbMask gain = kalman_gain(m_atlas_prob, m_fm, params);
    const ProbMask fused = fuse(m_atlas_prob, m_fm, gain);
    const LabelMask final_ctx = binarize(fused, cfg.binarize_thresh);
    const LabelMask fm_ctx = binarize(m_fm, cfg.binarize_thresh);
    out.timings.fusion_s += seconds_since(t_fuse);

    // Combine with earlier contexts taking priority.
    for (std::size_t i = 0; i < final_combined.size(); ++i) {
      if (fm_ctx.labels[i] != 0 && fm_combined[i] == 0) fm_combined[i] = label;
      if (final_ctx.labels[i] != 0 && final_combined[i] == 0) final_combined[i] = label;
    }

    if (cfg.query_gt.has_value()) {
      const LabelMask gt_ctx = select_label(*cfg.query_gt, label);
      ctx.atlas_metrics =
          compute_metrics(atlas_ctx, gt_ctx, cfg.metrics_tol_mm, cfg.metrics_cl_dice);
      ctx.fm_metrics =
          compute_metrics(fm_ctx, gt_ctx, cfg.metrics_tol_mm, cfg.metrics_cl_dice);
      ctx.final_metrics =
          compute_metrics(final_ctx, gt_ctx, cfg.metrics_tol_mm, cfg.metrics_cl_dice);
    }
    out.contexts.push_back(std::move(ctx));
  }

  out.m_fm = LabelMask(g, std::move(fm_combined));
  out.m_final = LabelMask(g, std::move(final_combined));
  out.timings.total_s = seconds_since(t_total);
  return out;
}

// ---------------------------------------------------------------------------
// Output writing
// ---------------------------------------------------------------------------

namespace {

json metrics_to_json(const std::optional<MetricsReport>& m) {
  if (!m.has_value()) return nullptr;
  json j;
  j["dice"] = m->dice.has_value() ? json(*m->dice) : json(nullptr);
  j["nsd"] = m->nsd.has_value() ? json(*m->nsd) : json(nullptr);
  j["hd95_mm"] = m->hd95_mm.has_value() ? json(*m->hd95_mm) : json(nullptr);
  j["cl_dice"] = m->cl_dice.has_value() ? json(*m->cl_dice) : json(nullptr);
  j["tolerance_mm"] = m->tolerance_mm;
  j["hd95_convention"] = m->hd95_convention;
  return j;
}

}  // namespace

void write_case_outputs(const CaseResult& result, const CaseConfig& cfg,
                        const std::string& outdir) {
  fs::create_directories(outdir);
  const fs::path dir(outdir);

  write_mvol(result.m_atlas, (dir / "m_atlas.mvol.json").string());
  write_mvol(result.m_fm, (dir / "m_fm.mvol.json").string());
  write_mvol(result.m_final, (dir / "m_final.mvol.json").string());
  save_affine_json(result.registration.affine, (dir / "affine.json").string());
  save_field(result.registration.field, (dir / "field.mvol.json").string());

  {
    std::ofstream f(dir / "loss_trace.csv", std::ios::trunc);
    f << "stage,level,iter,loss\n";
    for (const auto& e : result.registration.loss_trace)
      f << e.stage << ',' << e.level << ',' << e.iter << ',' << e.loss << '\n';
  }

  // Prompts per context (regenerated from the warped mask so the artifacts
  // match what the backend saw).
  if (cfg.use_backend && cfg.backend_promptable) {
    for (std::int32_t label : cfg.context_labels) {
      try {
        Prompt p = make_prompt(select_label(result.m_atlas, label), cfg.prompt_kind);
        p.context_label = label;
        save_prompt_json(p,
                         (dir / ("prompt_" + std::to_string(label) + ".json")).string());
      } catch (const EmptyPriorError&) {
        // mirrored in the metrics report notes
      }
    }
  }

  json j;
  j["case_id"] = result.case_id;
  j["contexts"] = json::array();
  for (const auto& ctx : result.contexts) {
    json c;
    c["label"] = ctx.label;
    c["atlas"] = metrics_to_json(ctx.atlas_metrics);
    c["fm"] = metrics_to_json(ctx.fm_metrics);
    c["final"] = metrics_to_json(ctx.final_metrics);
    if (!ctx.prompt_note.empty()) c["note"] = ctx.prompt_note;
    j["contexts"].push_back(c);
  }
  std::ofstream f(dir / "metrics.json", std::ios::trunc);
  f << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Manifest + folds
// ---------------------------------------------------------------------------

std::vector<ManifestCase> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open manifest '" + path + "'");
  json j;
  try {
    f >> j;
  } catch (const json::exception& ex) {
    throw FormatError("'" + path + "': " + ex.what());
  }
  if (!j.is_array()) throw FormatError("'" + path + "': manifest must be a JSON list");

  std::vector<ManifestCase> out;
  try {
    for (const auto& e : j) {
      ManifestCase c;
      c.id = e.at("id").get<std::string>();
      c.image = e.at("image").get<std::string>();
      c.gt = e.value("gt", std::string{});
      if (e.contains("contexts"))
        for (const auto& v : e["contexts"]) c.contexts.push_back(v.get<std::int32_t>());
      if (c.contexts.empty()) c.contexts.push_back(1);
      out.push_back(std::move(c));
    }
  } catch (const json::exception& ex) {
    throw FormatError("'" + path + "': " + ex.what());
  }
  if (out.empty()) throw FormatError("'" + path + "': manifest is empty");
  return out;
}

std::vector<FoldPlan> plan_folds(const std::vector<ManifestCase>& manifest, int n_folds,
                                 std::uint64_t seed) {
  if (n_folds < 2) throw ContractError("need at least 2 folds");
  if (static_cast<int>(manifest.size()) < n_folds)
    throw ContractError("fewer cases than folds");

  std::vector<std::size_t> order(manifest.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1],
              order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

  std::vector<FoldPlan> folds(n_folds);
  for (int f = 0; f < n_folds; ++f) folds[f].fold = f;
  for (std::size_t i = 0; i < order.size(); ++i)
    folds[i % n_folds].query_ids.push_back(manifest[order[i]].id);

  // Support: a seeded draw from outside the fold.
  for (int f = 0; f < n_folds; ++f) {
    std::vector<std::string> others;
    for (const auto& c : manifest) {
      const auto& q = folds[f].query_ids;
      if (std::find(q.begin(), q.end(), c.id) == q.end()) others.push_back(c.id);
    }
    if (others.empty()) throw ContractError("fold has no candidate support");
    folds[f].support_id =
        others[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(others.size()) - 1))];
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Cross-validation driver
// ---------------------------------------------------------------------------

namespace {

int resolve_workers(int requested, std::size_t n_jobs) {
  int n = requested;
  if (n <= 0) {
    if (const char* env = std::getenv("ATLASFUSE_THREADS")) n = std::atoi(env);
  }
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  return std::min<int>(n, static_cast<int>(std::max<std::size_t>(1, n_jobs)));
}

struct Accumulator {
  std::vector<double> values;
  void add(const std::optional<double>& v) {
    if (v.has_value() && std::isfinite(*v)) values.push_back(*v);
  }
  double mean() const {
    if (values.empty()) return 0.0;
    return std::accumulate(values.begin(), values.end(), 0.0) / values.size();
  }
  double stddev() const {
    if (values.size() < 2) return 0.0;
    const double m = mean();
    double acc = 0.0;
    for (double v : values) acc += (v - m) * (v - m);
    return std::sqrt(acc / values.size());
  }
};

}  // namespace

CrossvalResult run_crossval(const std::vector<ManifestCase>& manifest,
                            const CrossvalConfig& cfg, const std::string& outdir) {
  // Fail fast on manifest problems before any compute.
  std::map<std::string, const ManifestCase*> by_id;
  for (const auto& c : manifest) {
    if (by_id.count(c.id)) throw FormatError("duplicate case id '" + c.id + "'");
    by_id[c.id] = &c;
    if (!fs::exists(c.image)) throw FormatError("missing image file '" + c.image + "'");
    if (!c.gt.empty() && !fs::exists(c.gt))
      throw FormatError("missing gt file '" + c.gt + "'");
  }

  CrossvalResult result;
  result.folds = plan_folds(manifest, cfg.n_folds, cfg.seed);
  fs::create_directories(outdir);

  struct Job {
    int fold;
    const ManifestCase* support;
    const ManifestCase* query;
  };
  std::vector<Job> jobs;
  for (const auto& fold : result.folds) {
    const ManifestCase* support = by_id.at(fold.support_id);
    for (const auto& qid : fold.query_ids)
      jobs.push_back({fold.fold, support, by_id.at(qid)});
  }

  // Fit fusion once per (fold, context) on the support, paper-style, and
  // reuse the fitted gate for every query of the fold.
  std::map<std::pair<int, std::int32_t>, FusionParams> fold_params;
  if (cfg.use_backend && cfg.fusion_source == FusionSource::Fit) {
    for (const auto& fold : result.folds) {
      const ManifestCase* support = by_id.at(fold.support_id);
      const Volume img = read_volume_any(support->image);
      if (support->gt.empty())
        throw FormatError("support case '" + support->id + "' has no gt for fitting");
      const LabelMask gt = read_mask_any(support->gt);
      for (std::int32_t label : support->contexts) {
        const FitOutcome fit =
            fit_fusion(img, select_label(gt, label), cfg.backend, cfg.reg, cfg.fit,
                       cfg.prompt_kind, cfg.backend_promptable);
        fold_params[{fold.fold, label}] = fit.params;
      }
    }
  }

  std::vector<CaseSummary> summaries(jobs.size());
  std::mutex mu;
  std::size_t next_job = 0;

  auto worker = [&]() {
    for (;;) {
      std::size_t my_job;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next_job >= jobs.size()) return;
        my_job = next_job++;
      }
      const Job& job = jobs[my_job];
      CaseSummary s;
      s.case_id = job.query->id;
      s.fold = job.fold;
      try {
        CaseConfig cc;
        cc.case_id = job.query->id;
        cc.atlas_img = read_volume_any(job.support->image);
        if (job.support->gt.empty())
          throw FormatError("support '" + job.support->id + "' has no gt mask");
        cc.atlas_mask = read_mask_any(job.support->gt);
        cc.query_img = read_volume_any(job.query->image);
        if (!job.query->gt.empty()) cc.query_gt = read_mask_any(job.query->gt);
        cc.context_labels = job.support->contexts;
        cc.reg = cfg.reg;
        cc.use_backend = cfg.use_backend;
        cc.backend = cfg.backend;
        cc.prompt_kind = cfg.prompt_kind;
        cc.backend_promptable = cfg.backend_promptable;
        cc.fit = cfg.fit;
        cc.metrics_tol_mm = cfg.metrics_tol_mm;
        cc.metrics_cl_dice = cfg.metrics_cl_dice;
        if (cfg.use_backend && cfg.fusion_source == FusionSource::Fit) {
          // Per-fold fitted gates, one per context.
          cc.fusion_source = FusionSource::Fixed;
          for (std::int32_t label : cc.context_labels) {
            const auto it = fold_params.find({job.fold, label});
            if (it != fold_params.end()) cc.fusion_params_by_context[label] = it->second;
          }
        } else {
          cc.fusion_source = cfg.fusion_source;
          cc.fusion_params = cfg.fusion_params;
        }

        CaseResult r = run_case(cc);
        s.contexts = r.contexts;
        s.timings = r.timings;

        const fs::path cdir = fs::path(outdir) /
                              ("fold" + std::to_string(job.fold)) / ("case_" + s.case_id);
        write_case_outputs(r, cc, cdir.string());
        {
          std::lock_guard<std::mutex> lock(mu);
          result.registration_params = r.registration_params;
        }
      } catch (const std::exception& ex) {
        s.error = ex.what();
      }
      {
        std::lock_guard<std::mutex> lock(mu);
        summaries[my_job] = std::move(s);
      }
    }
  };

  const int n_workers = resolve_workers(cfg.max_workers, jobs.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::sort(summaries.begin(), summaries.end(),
            [](const CaseSummary& a, const CaseSummary& b) { return a.case_id < b.case_id; });
  result.cases = std::move(summaries);

  // Aggregate rows per stage x context, deterministic order.
  std::vector<std::int32_t> all_contexts;
  for (const auto& c : result.cases)
    for (const auto& ctx : c.contexts) all_contexts.push_back(ctx.label);
  std::sort(all_contexts.begin(), all_contexts.end());
  all_contexts.erase(std::unique(all_contexts.begin(), all_contexts.end()),
                     all_contexts.end());

  const char* stages[3] = {"atlas", "fm", "final"};
  for (const char* stage : stages) {
    for (std::int32_t label : all_contexts) {
      Accumulator dice_acc, nsd_acc, hd_acc, cl_acc;
      int n = 0;
      for (const auto& c : result.cases) {
        if (!c.error.empty()) continue;
        for (const auto& ctx : c.contexts) {
          if (ctx.label != label) continue;
          const std::optional<MetricsReport>* m = nullptr;
          if (std::string(stage) == "atlas") m = &ctx.atlas_metrics;
          else if (std::string(stage) == "fm") m = &ctx.fm_metrics;
          else m = &ctx.final_metrics;
          if (!m->has_value()) continue;
          ++n;
          dice_acc.add((*m)->dice);
          nsd_acc.add((*m)->nsd);
          hd_acc.add((*m)->hd95_mm);
          cl_acc.add((*m)->cl_dice);
        }
      }
      AggregateRow row;
      row.stage = stage;
      row.context = label;
      row.n = n;
      row.dice_mean = dice_acc.mean();
      row.dice_std = dice_acc.stddev();
      row.nsd_mean = nsd_acc.mean();
      row.nsd_std = nsd_acc.stddev();
      row.hd95_mean = hd_acc.mean();
      row.hd95_std = hd_acc.stddev();
      row.cldice_mean = cl_acc.mean();
      row.cldice_std = cl_acc.stddev();
      result.rows.push_back(row);
    }
  }

  int n_ok = 0;
  for (const auto& c : result.cases) {
    if (!c.error.empty()) continue;
    ++n_ok;
    result.mean_timings.registration_s += c.timings.registration_s;
    result.mean_timings.fm_s += c.timings.fm_s;
    result.mean_timings.fusion_s += c.timings.fusion_s;
    result.mean_timings.total_s += c.timings.total_s;
  }
  if (n_ok > 0) {
    result.mean_timings.registration_s /= n_ok;
    result.mean_timings.fm_s /= n_ok;
    result.mean_timings.fusion_s /= n_ok;
    result.mean_timings.total_s /= n_ok;
  }

  write_crossval_reports(result, outdir);
  return result;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
  return buf;
}

void write_crossval_reports(const CrossvalResult& result, const std::string& outdir) {
  fs::create_directories(outdir);
  const fs::path dir(outdir);

  {
    std::ofstream f(dir / "report.csv", std::ios::trunc);
    f << "stage,context,n,dice_mean,dice_std,nsd_mean,nsd_std,hd95_mean,hd95_std,"
         "cldice_mean,cldice_std\n";
    for (const auto& r : result.rows)
      f << r.stage << ',' << r.context << ',' << r.n << ',' << r.dice_mean << ','
        << r.dice_std << ',' << r.nsd_mean << ',' << r.nsd_std << ',' << r.hd95_mean
        << ',' << r.hd95_std << ',' << r.cldice_mean << ',' << r.cldice_std << '\n';
  }

  // Percent-style Dice table: rows = stages, columns = contexts + Mean.
  {
    std::vector<std::int32_t> contexts;
    for (const auto& r : result.rows)
      if (r.stage == "final") contexts.push_back(r.context);

    std::ofstream f(dir / "table_dice.csv", std::ios::trunc);
    f << "stage";
    for (auto c : contexts) f << ",context_" << c;
    f << ",mean\n";
    const char* stages[3] = {"atlas", "fm", "final"};
    for (const char* stage : stages) {
      f << stage;
      double sum = 0.0;
      int n = 0;
      for (auto c : contexts) {
        for (const auto& r : result.rows)
          if (r.stage == stage && r.context == c) {
            f << ',' << format_percent(r.dice_mean);
            sum += r.dice_mean;
            ++n;
          }
      }
      f << ',' << (n > 0 ? format_percent(sum / n) : "0.00") << '\n';
    }
  }

  {
    json j;
    j["folds"] = json::array();
    for (const auto& fold : result.folds) {
      json jf;
      jf["fold"] = fold.fold;
      jf["support"] = fold.support_id;
      jf["queries"] = fold.query_ids;
      j["folds"].push_back(jf);
    }
    j["cases"] = json::array();
    for (const auto& c : result.cases) {
      json jc;
      jc["id"] = c.case_id;
      jc["fold"] = c.fold;
      if (!c.error.empty()) jc["error"] = c.error;
      jc["contexts"] = json::array();
      for (const auto& ctx : c.contexts) {
        json jx;
        jx["label"] = ctx.label;
        jx["atlas"] = metrics_to_json(ctx.atlas_metrics);
        jx["fm"] = metrics_to_json(ctx.fm_metrics);
        jx["final"] = metrics_to_json(ctx.final_metrics);
        if (!ctx.prompt_note.empty()) jx["note"] = ctx.prompt_note;
        jc["contexts"].push_back(jx);
      }
      j["cases"].push_back(jc);
    }
    std::ofstream f(dir / "report.json", std::ios::trunc);
    f << j.dump(2) << '\n';
  }
}

std::string timing_table(const StageTimings& mean, std::size_t registration_params) {
  std::ostringstream os;
  auto minutes = [](double s) { return s / 60.0; };
  os << "stage,min_per_image,learnable_params\n";
  os << "total," << minutes(mean.total_s) << ',' << (registration_params + 7) << '\n';
  os << "registration," << minutes(mean.registration_s) << ',' << registration_params
     << '\n';
  os << "foundation_model," << minutes(mean.fm_s) << ",-\n";
  os << "fusion," << minutes(mean.fusion_s) << ",7\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Ablation sweep
// ---------------------------------------------------------------------------

std::vector<AblationRow> run_phantom_ablation(const std::vector<PhantomSpec>& suite,
                                              const RegConfig& base,
                                              const BackendSpec& backend,
                                              const FitConfig& fit,
                                              PromptKind prompt_kind) {
  struct Setting {
    std::string name;
    bool rigid, affine, deform, fusion;
  };
  const Setting settings[4] = {
      {"atlas-registration", false, false, true, false},
      {"+rigid", true, false, true, false},
      {"+affine", true, true, true, false},
      {"+fm+fusion", true, true, true, true},
  };

  std::vector<AblationRow> rows;
  for (const auto& s : settings) {
    double dice_sum = 0.0;
    int n = 0;
    for (const auto& spec : suite) {
      const PhantomCase pc = generate_phantom(spec);
      CaseConfig cc;
      cc.case_id = to_string(spec.kind) + "_" + std::to_string(spec.deform.seed);
      cc.atlas_img = pc.atlas_img;
      cc.atlas_mask = pc.atlas_mask;
      cc.query_img = pc.query_img;
      cc.query_gt = pc.query_gt;
      cc.context_labels = pc.context_labels;
      cc.reg = base;
      cc.reg.enable_rigid = s.rigid;
      cc.reg.enable_affine = s.affine;
      cc.reg.enable_deform = s.deform;
      cc.use_backend = s.fusion;
      cc.backend = backend;
      cc.prompt_kind = prompt_kind;
      cc.fusion_source = s.fusion ? FusionSource::Fit : FusionSource::PureAtlas;
      cc.fit = fit;

      const CaseResult r = run_case(cc);
      for (const auto& ctx : r.contexts) {
        if (ctx.final_metrics.has_value() && ctx.final_metrics->dice.has_value()) {
          dice_sum += *ctx.final_metrics->dice;
          ++n;
        }
      }
    }
    rows.push_back({s.name, n > 0 ? dice_sum / n : 0.0});
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f << "setting,mean_dice_percent\n";
  for (const auto& r : rows) f << r.name << ',' << format_percent(r.mean_dice) << '\n';
}

}  // namespace atlasfuse
