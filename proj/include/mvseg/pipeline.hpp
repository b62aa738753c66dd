#pragma once

// Training, inference, multi-view fusion, post-processing and the
// experiment harness.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvseg/manifest.hpp"
#include "mvseg/metrics.hpp"
#include "mvseg/model.hpp"
#include "mvseg/preprocess.hpp"
#include "mvseg/splits.hpp"
#include "mvseg/stats.hpp"
#include "mvseg/views.hpp"

namespace mvseg {

struct TrainSpec {
  std::size_t batch_size = 30;
  std::size_t max_epochs = 200;
  AdamConfig adam;  // learning rate 2e-4, moments 0.9 / 0.999
  double dice_smooth = 1.0;
  double fusion_lambda = 0.5;
  bool literal_half_fusion = false;  // scale the two-view blend by 1/2
  double threshold = 0.5;
  double postproc_fraction = 0.2;
  std::vector<ViewAxis> views{ViewAxis::axial, ViewAxis::coronal};
  ModelConfig model;
  bool normalize = true;  // brain mask + z-score before the network
  BrainMaskOptions brain_mask;
  DistanceSet hd95_set = DistanceSet::full;
  std::uint64_t seed = 0;

  /// Throws ConfigError: lambda in [0,1], threshold in (0,1), fraction in
  /// [0, 0.5), batch and epochs >= 1, at least one view, valid model.
  void validate() const;

  nlohmann::json to_json() const;
  /// Keys missing from `doc` keep their defaults; unknown keys are rejected.
  static TrainSpec from_json(const nlohmann::json& doc);
};

/// A subject ready for the network: normalised image, optional label.
struct PreparedSubject {
  std::string subject_id;
  std::string scanner_id;
  Volume image;
  std::optional<Volume> label;
  std::optional<Volume> brain;  // mask used for normalisation
};

/// Brain mask + z-score (when spec.normalize) applied to a raw image.
PreparedSubject prepare_image(Volume image, const TrainSpec& spec);

/// Loads the record's image (and label when present) and prepares it.
PreparedSubject prepare_subject(const Manifest& manifest, const SubjectRecord& record, const TrainSpec& spec);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_vs = 0.0;
  double val_dsc = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  TrainedModel model;  // weights of the selected epoch
  std::vector<EpochRecord> curve;
  std::size_t best_epoch = 0;  // 1-based
};

using EpochCallback = std::function<void(ViewAxis, const EpochRecord&)>;

/// Mini-batch Dice-loss training on the view's slices of all training
/// subjects (one seeded shuffle per epoch, batches mix subjects). After every
/// epoch each validation subject is segmented in 3D with this model alone
/// and the epoch with the best mean validation DSC is kept (earliest on
/// ties; the last epoch when there are no validation subjects).
TrainResult train_view(ViewAxis view, const std::vector<const PreparedSubject*>& train,
                       const std::vector<const PreparedSubject*>& validation, const TrainSpec& spec,
                       std::uint64_t seed, const EpochCallback& on_epoch = {});

/// Foreground probability volume aligned with `image`. Warns when the
/// within-brain standard deviation is more than 0.1 away from 1; without a
/// brain mask, voxels differing from the corner voxel stand in for it.
Volume predict_view(const TrainedModel& model, const Volume& image, const Volume* brain = nullptr);

/// Two views: lambda * P_first + (1 - lambda) * P_second, where "first" is
/// the earlier of axial < coronal < sagittal (halved when literal_half is
/// set). Three views: unweighted mean. One view: returned unchanged.
Volume fuse_views(const std::map<ViewAxis, Volume>& probs, double lambda, bool literal_half = false);

/// Threshold at >= tau, then clear the first and last
/// floor(fraction * n_axial) axial slices.
Volume postprocess(const Volume& prob, double tau, double fraction);

struct SegmentationResult {
  std::string subject_id;
  Volume prob_fused;
  Volume mask;
  std::map<ViewAxis, Volume> per_view_probs;
};

/// preprocess -> predict_view per model -> fuse_views -> postprocess.
SegmentationResult segment_subject(const std::map<ViewAxis, TrainedModel>& models, const Volume& image,
                                   const TrainSpec& spec, const std::string& subject_id = {});

/// Same, for an already prepared subject.
SegmentationResult segment_prepared(const std::map<ViewAxis, const TrainedModel*>& models,
                                    const PreparedSubject& subject, const TrainSpec& spec);

// ---------------------------------------------------------------------------
// Experiments

using Ensemble = std::vector<ViewAxis>;

/// "A", "A+C", "A+C+S", ...
std::string ensemble_label(const Ensemble& views);

struct SubjectRow {
  std::string subject_id;
  std::string scanner_id;
  std::string fold;
  std::optional<double> vs;
  std::optional<double> hd95;
  std::optional<double> dsc;
  std::string status = "ok";  // ok | hd95_undefined | error: <message>

  bool failed() const { return status.rfind("error", 0) == 0; }
};

struct MetricSummary {
  std::size_t n = 0;
  std::optional<MedianIqr> vs, hd95, dsc;
  double mean_dsc = 0.0;
  double mean_vs = 0.0;
  nlohmann::json to_json() const;
};

MetricSummary summarize(const std::vector<const SubjectRow*>& rows);

struct EnsembleReport {
  std::string label;
  std::vector<SubjectRow> rows;
  MetricSummary overall;
  std::map<std::string, MetricSummary> per_scanner;
  std::vector<std::pair<std::string, MetricSummary>> per_fold;  // plan order
};

struct Comparison {
  std::string name;  // "A+C vs A"
  std::size_t pairs = 0;
  TestResult vs, hd95, dsc;
};

struct EvalReport {
  std::string strategy;
  std::vector<EnsembleReport> ensembles;
  std::vector<Comparison> comparisons;

  bool any_failed() const;
  nlohmann::json to_json() const;
};

struct ExperimentOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::vector<Ensemble> ensembles;  // empty: one ensemble of spec.views
  std::vector<std::pair<std::size_t, std::size_t>> paired_tests;  // indices into ensembles
  std::size_t jobs = 1;
  bool save_volumes = true;
  EpochCallback on_epoch;
};

/// Per fold: train every view any ensemble needs, segment the fold's test
/// subjects with each ensemble and score them. Failures are recorded as
/// rows with an error status. Writes checkpoints, curves, volumes, metric
/// CSVs and report.json under out_dir when set.
EvalReport run_experiment(const Manifest& manifest, const SplitPlan& plan, const TrainSpec& spec,
                          const ExperimentOptions& options = {});

/// Paired signed-rank tests of two ensembles' rows matched on (fold, subject).
Comparison compare_paired(const EnsembleReport& a, const EnsembleReport& b);

/// Unpaired rank-sum tests between two sets of rows.
Comparison compare_unpaired(const std::string& name, const std::vector<SubjectRow>& a,
                            const std::vector<SubjectRow>& b);

void write_metrics_csv(const std::vector<SubjectRow>& rows, const std::filesystem::path& path);
std::vector<SubjectRow> read_metrics_csv(const std::filesystem::path& path);

void write_curve_csv(const std::vector<EpochRecord>& curve, const std::filesystem::path& path);

}  // namespace mvseg
