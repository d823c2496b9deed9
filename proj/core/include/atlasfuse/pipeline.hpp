#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "atlasfuse/backend.hpp"
#include "atlasfuse/fusion.hpp"
#include "atlasfuse/metrics.hpp"
#include "atlasfuse/phantom.hpp"
#include "atlasfuse/registration.hpp"

namespace atlasfuse {

enum class FusionSource { Fit, Load, Fixed, PureAtlas, PureFm };

/// Everything needed to run one atlas -> query case end to end.
struct CaseConfig {
  std::string case_id = "case";
  Volume atlas_img;
  LabelMask atlas_mask;
  Volume query_img;
  std::optional<LabelMask> query_gt;
  std::vector<std::int32_t> context_labels{1};  // priority order for overlaps

  RegConfig reg;
  bool use_backend = true;
  BackendSpec backend;
  PromptKind prompt_kind = PromptKind::Mask;
  bool backend_promptable = true;

  FusionSource fusion_source = FusionSource::Fit;
  FusionParams fusion_params;  // used by Load / Fixed
  std::map<std::int32_t, FusionParams> fusion_params_by_context;  // overrides per label
  FitConfig fit;

  double metrics_tol_mm = 1.0;
  bool metrics_cl_dice = false;
  double binarize_thresh = 0.5;
};

struct StageTimings {
  double registration_s = 0.0;
  double fm_s = 0.0;
  double fusion_s = 0.0;
  double total_s = 0.0;
};

struct ContextResult {
  std::int32_t label = 1;
  std::optional<MetricsReport> atlas_metrics;  // set when ground truth exists
  std::optional<MetricsReport> fm_metrics;
  std::optional<MetricsReport> final_metrics;
  std::string prompt_note;  // e.g. "empty prior: backend skipped"
};

struct CaseResult {
  std::string case_id;
  LabelMask m_atlas;   // warped atlas labels (multi-label)
  LabelMask m_fm;      // combined per-context backend outputs (binarized)
  LabelMask m_final;   // combined fused outputs
  std::vector<ContextResult> contexts;
  StageTimings timings;
  RegistrationResult registration;
  std::size_t registration_params = 0;  // displacement DOF count
};

/// register -> prompt -> backend -> fuse -> binarize -> evaluate.
CaseResult run_case(const CaseConfig& cfg);

/// Writes m_atlas/m_fm/m_final (MVOL), the per-context prompts and metrics
/// report, and the registration artifacts into `outdir`. Wall-clock timings
/// are deliberately not written here so the directory is byte-reproducible.
void write_case_outputs(const CaseResult& result, const CaseConfig& cfg,
                        const std::string& outdir);

// ---------------------------------------------------------------------------
// Dataset manifests and cross-validation
// ---------------------------------------------------------------------------

struct ManifestCase {
  std::string id;
  std::string image;
  std::string gt;  // may be empty
  std::vector<std::int32_t> contexts;
};

std::vector<ManifestCase> load_manifest(const std::string& path);

struct CrossvalConfig {
  int n_folds = 5;
  std::uint64_t seed = 0;
  RegConfig reg;
  bool use_backend = true;
  BackendSpec backend;
  PromptKind prompt_kind = PromptKind::Mask;
  bool backend_promptable = true;
  FusionSource fusion_source = FusionSource::Fit;
  FusionParams fusion_params;
  FitConfig fit;
  double metrics_tol_mm = 1.0;
  bool metrics_cl_dice = false;
  int max_workers = 0;  // 0: ATLASFUSE_THREADS or hardware concurrency
};

struct FoldPlan {
  int fold = 0;
  std::string support_id;
  std::vector<std::string> query_ids;
};

/// Seeded fold assignment; the support of each fold is drawn from outside
/// that fold, so no query of the fold ever serves as its own support.
std::vector<FoldPlan> plan_folds(const std::vector<ManifestCase>& manifest,
                                 int n_folds, std::uint64_t seed);

struct CaseSummary {
  std::string case_id;
  int fold = 0;
  std::string error;  // nonempty when the case failed
  std::vector<ContextResult> contexts;
  StageTimings timings;
};

struct AggregateRow {
  std::string stage;  // "atlas", "fm", "final"
  std::int32_t context = 0;
  int n = 0;
  double dice_mean = 0.0, dice_std = 0.0;
  double nsd_mean = 0.0, nsd_std = 0.0;
  double hd95_mean = 0.0, hd95_std = 0.0;
  double cldice_mean = 0.0, cldice_std = 0.0;
};

struct CrossvalResult {
  std::vector<FoldPlan> folds;
  std::vector<CaseSummary> cases;   // sorted by case id
  std::vector<AggregateRow> rows;   // deterministic order
  StageTimings mean_timings;
  std::size_t registration_params = 0;
};

CrossvalResult run_crossval(const std::vector<ManifestCase>& manifest,
                            const CrossvalConfig& cfg, const std::string& outdir);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// "81.22"-style percent rendering used by the tables.
std::string format_percent(double fraction);

void write_crossval_reports(const CrossvalResult& result, const std::string& outdir);

/// Stage-timing table (min/image plus learnable parameter counts). Kept out
/// of the reproducible output directory; callers print it or route it to an
/// explicit path.
std::string timing_table(const StageTimings& mean, std::size_t registration_params);

// ---------------------------------------------------------------------------
// Ablation (incremental-module sweep)
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string name;
  double mean_dice = 0.0;  // final-mask Dice averaged over cases and contexts
};

/// The four incremental configurations: deformable only, + rigid, + affine,
/// and the full pipeline with backend and fitted fusion.
std::vector<AblationRow> run_phantom_ablation(const std::vector<PhantomSpec>& suite,
                                              const RegConfig& base,
                                              const BackendSpec& backend,
                                              const FitConfig& fit,
                                              PromptKind prompt_kind);

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path);

}  // namespace atlasfuse
