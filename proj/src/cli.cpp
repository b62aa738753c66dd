#include "mvseg/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "mvseg/error.hpp"
#include "mvseg/log.hpp"
#include "mvseg/manifest.hpp"
#include "mvseg/metrics.hpp"
#include "mvseg/nifti.hpp"
#include "mvseg/parallel.hpp"
#include "mvseg/phantom.hpp"
#include "mvseg/pipeline.hpp"
#include "mvseg/preprocess.hpp"
#include "mvseg/rng.hpp"
#include "mvseg/splits.hpp"

namespace mvseg::cli {
namespace {

namespace fs = std::filesystem;

constexpr std::size_t kPaperParamCount = 4641209;

// Options shared by the commands that build a TrainSpec.
struct SpecFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string views;
  std::optional<double> lambda;
  std::optional<double> threshold;
  std::optional<std::size_t> epochs;
};

void add_spec_flags(CLI::App* cmd, SpecFlags& f) {
  cmd->add_option("--config", f.config, "TrainSpec JSON file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Seed for splits, initialisation and shuffling");
  cmd->add_option("--views", f.views, "Comma-separated views (axial,coronal,sagittal or A,C,S)");
  cmd->add_option("--lambda", f.lambda, "Two-view fusion weight of the first view");
  cmd->add_option("--threshold", f.threshold, "Probability threshold");
  cmd->add_option("--epochs", f.epochs, "Override max_epochs");
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& doc, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

std::vector<ViewAxis> parse_views(const std::string& text) {
  std::vector<ViewAxis> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto v = parse_view_axis(item);
    if (!v) throw ConfigError("unknown view: " + item);
    out.push_back(*v);
  }
  if (out.empty()) throw ConfigError("no views given");
  return out;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("not a number: " + item);
    }
  }
  return out;
}

TrainSpec build_spec(const SpecFlags& f) {
  TrainSpec spec = f.config.empty() ? TrainSpec{} : TrainSpec::from_json(read_json(f.config));
  if (f.seed) spec.seed = *f.seed;
  if (!f.views.empty()) spec.views = parse_views(f.views);
  if (f.lambda) spec.fusion_lambda = *f.lambda;
  if (f.threshold) spec.threshold = *f.threshold;
  if (f.epochs) spec.max_epochs = *f.epochs;
  spec.validate();
  return spec;
}

// Existing, non-empty output directories are only reused with --force.
void claim_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw ConfigError("output directory " + dir.string() + " is not empty (use --force to reuse it)");
  }
  fs::create_directories(dir);
}

void claim_output_file(const fs::path& file, bool force) {
  if (fs::exists(file) && !force) throw ConfigError(file.string() + " exists (use --force to overwrite)");
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

template <class... Args>
std::string format(const char* fmt, Args... args) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), fmt, args...);
  return buf;
}

std::string format_summary(const std::optional<MedianIqr>& m) {
  if (!m) return "n/a";
  return format("%.4f [%.4f, %.4f]", m->median, m->q1, m->q3);
}

void print_summary(std::ostream& out, const std::string& label, const MetricSummary& s) {
  out << label << ": n=" << s.n << "  VS " << format_summary(s.vs) << "  HD95 " << format_summary(s.hd95)
      << " mm  DSC " << format_summary(s.dsc) << '\n';
}

void print_test(std::ostream& out, const std::string& metric, const TestResult& t) {
  out << format("  %-5s stat %.4g  p %.4g%s%s\n", metric.c_str(), t.statistic, t.p_value, t.exact ? " (exact)" : "",
                t.degenerate ? " (degenerate)" : "");
}

void print_comparison(std::ostream& out, const Comparison& c) {
  out << c.name << " (" << to_string(c.dsc.method) << ", " << (c.pairs ? std::to_string(c.pairs) + " pairs" : "")
      << (c.pairs ? "" : "n=" + std::to_string(c.dsc.n1) + "/" + std::to_string(c.dsc.n2)) << ")\n";
  print_test(out, "VS", c.vs);
  print_test(out, "HD95", c.hd95);
  print_test(out, "DSC", c.dsc);
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::string counts = "5,5,5,5";
  std::size_t size = 64;
  double thickness = 1.5;
  bool force = false;
};

int cmd_phantom(const PhantomArgs& a) {
  const auto n = parse_list(a.counts);
  if (n.size() != 4) throw ConfigError("--counts needs four values (styles A, B, C, D)");
  std::map<ScannerStyle, std::size_t> counts;
  for (std::size_t i = 0; i < 4; ++i) {
    if (n[i] < 0 || n[i] != static_cast<double>(static_cast<std::size_t>(n[i]))) {
      throw ConfigError("counts must be non-negative integers");
    }
    counts[kAllStyles[i]] = static_cast<std::size_t>(n[i]);
  }
  PhantomSpec base;
  base.shape = {a.size, a.size, a.size};
  base.sheet_thickness = a.thickness;
  base.validate();
  claim_output_dir(a.out, a.force);
  const Manifest m = generate_cohort(counts, a.seed, a.out, base);
  std::cout << "wrote " << m.subjects.size() << " phantoms to " << (fs::path(a.out) / "manifest.csv").string()
            << '\n';
  return kOk;
}

struct PreprocessArgs {
  std::string manifest, out, config;
  std::size_t jobs = 1;
  bool force = false;
};

int cmd_preprocess(const PreprocessArgs& a) {
  const Manifest m = read_manifest(a.manifest);
  TrainSpec spec = a.config.empty() ? TrainSpec{} : TrainSpec::from_json(read_json(a.config));
  const fs::path out(a.out);
  claim_output_dir(out, a.force);
  fs::create_directories(out / "images");
  fs::create_directories(out / "brain");

  std::vector<std::optional<SubjectRecord>> done(m.subjects.size());
  parallel_for(m.subjects.size(), a.jobs, [&](std::size_t i) {
    const SubjectRecord& rec = m.subjects[i];
    try {
      const Volume image = load_volume(m.resolve(rec.image_path).string(), VolumeKind::image);
      const BrainMask brain = compute_brain_mask(image, spec.brain_mask);
      const Volume z = zscore_normalize(image, brain);
      const std::string image_rel = "images/" + rec.subject_id + ".nii.gz";
      save_volume(z, (out / image_rel).string());
      save_volume(brain.mask, (out / "brain" / (rec.subject_id + "_brain.nii.gz")).string());
      SubjectRecord r = rec;
      r.image_path = image_rel;
      if (rec.label_path) r.label_path = fs::absolute(m.resolve(*rec.label_path)).string();
      done[i] = std::move(r);
    } catch (const std::exception& e) {
      log::error("subject " + rec.subject_id + ": " + e.what());
    }
  });

  Manifest result;
  result.base_dir = out;
  std::size_t failed = 0;
  for (auto& r : done) {
    if (r) {
      result.subjects.push_back(std::move(*r));
    } else {
      ++failed;
    }
  }
  write_manifest(result, out / "manifest.csv");
  std::cout << "normalised " << result.subjects.size() << " of " << m.subjects.size() << " subjects into "
            << out.string() << '\n';
  return failed ? kSubjectErrors : kOk;
}

struct SplitArgs {
  std::string manifest, out, strategy = "kfold", fraction_steps = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0";
  int k = 5;
  std::uint64_t seed = 0;
  bool force = false;
};

SplitPlan make_plan(const std::string& strategy, const Manifest& m, int k, std::uint64_t seed,
                    const std::string& steps) {
  if (strategy == "kfold") return make_stratified_kfold(m.subjects, k, seed);
  if (strategy == "loso") return make_loso(m.subjects, seed);
  if (strategy == "fraction") return make_fraction_plan(m.subjects, parse_list(steps), seed);
  throw ConfigError("unknown split strategy: " + strategy);
}

int cmd_split(const SplitArgs& a) {
  const Manifest m = read_manifest(a.manifest);
  const SplitPlan plan = make_plan(a.strategy, m, a.k, a.seed, a.fraction_steps);
  claim_output_file(a.out, a.force);
  write_json(plan.to_json(), a.out);
  std::cout << "wrote " << plan.folds.size() << " folds to " << a.out << '\n';
  return kOk;
}

struct TrainArgs {
  std::string manifest, out, plan, fold;
  SpecFlags spec;
  std::size_t jobs = 1;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  const Manifest m = read_manifest(a.manifest);
  const TrainSpec spec = build_spec(a.spec);
  Fold fold;
  if (!a.plan.empty()) {
    const SplitPlan plan = SplitPlan::from_json(read_json(a.plan));
    if (plan.folds.empty()) throw ConfigError("split plan has no folds");
    const Fold* chosen = &plan.folds.front();
    if (!a.fold.empty()) {
      chosen = nullptr;
      for (const auto& f : plan.folds) {
        if (f.name == a.fold) chosen = &f;
      }
      if (!chosen) throw ConfigError("no fold named " + a.fold + " in " + a.plan);
    }
    fold = *chosen;
  } else {
    // Every labelled subject trains, minus a seeded validation carve-out.
    std::vector<std::string> pool;
    for (const auto& s : m.subjects) {
      if (s.label_path) pool.push_back(s.subject_id);
    }
    std::vector<std::string> shuffled = pool;
    Rng rng(derive_seed(spec.seed, 4000));
    rng.shuffle(std::span<std::string>(shuffled));
    const std::set<std::string> val(shuffled.begin(), shuffled.begin() + static_cast<long>(validation_count(pool.size())));
    for (const auto& id : pool) (val.count(id) ? fold.validation_ids : fold.train_ids).push_back(id);
  }

  const fs::path out(a.out);
  claim_output_dir(out, a.force);
  write_json(spec.to_json(), out / "config.json");

  std::map<std::string, PreparedSubject> prepared;
  for (const auto* ids : {&fold.train_ids, &fold.validation_ids}) {
    for (const auto& id : *ids) prepared.emplace(id, prepare_subject(m, m.find(id), spec));
  }
  std::vector<const PreparedSubject*> train, validation;
  for (const auto& id : fold.train_ids) train.push_back(&prepared.at(id));
  for (const auto& id : fold.validation_ids) validation.push_back(&prepared.at(id));

  std::vector<TrainResult> results(spec.views.size());
  parallel_for(spec.views.size(), a.jobs, [&](std::size_t v) {
    results[v] = train_view(spec.views[v], train, validation, spec,
                            derive_seed(spec.seed, 1000 + static_cast<std::uint64_t>(spec.views[v])));
  });
  for (std::size_t v = 0; v < spec.views.size(); ++v) {
    const std::string name(to_string(spec.views[v]));
    save_checkpoint(results[v].model, out / ("model_" + name + ".ckpt"));
    write_curve_csv(results[v].curve, out / ("curve_" + name + ".csv"));
    const auto& best = results[v].curve[results[v].best_epoch - 1];
    std::cout << format("%s: best epoch %zu, validation DSC %.4f, VS %.4f\n", name.c_str(), results[v].best_epoch,
                        best.val_dsc, best.val_vs);
  }
  return kOk;
}

struct PredictArgs {
  std::string manifest, out;
  std::vector<std::string> models;
  SpecFlags spec;
  std::size_t jobs = 1;
  bool force = false;
};

int cmd_predict(const PredictArgs& a) {
  const Manifest m = read_manifest(a.manifest);
  const TrainSpec spec = build_spec(a.spec);
  std::vector<TrainedModel> loaded;
  for (const auto& path : a.models) loaded.push_back(load_checkpoint(path));
  std::map<ViewAxis, const TrainedModel*> models;
  for (const auto& model : loaded) {
    if (!models.emplace(model.view, &model).second) {
      throw ConfigError("two checkpoints for the " + std::string(to_string(model.view)) + " view");
    }
  }
  const fs::path out(a.out);
  claim_output_dir(out, a.force);

  std::vector<std::string> status(m.subjects.size(), "ok");
  parallel_for(m.subjects.size(), a.jobs, [&](std::size_t i) {
    const SubjectRecord& rec = m.subjects[i];
    try {
      SubjectRecord image_only = rec;
      image_only.label_path.reset();
      const PreparedSubject subject = prepare_subject(m, image_only, spec);
      const SegmentationResult r = segment_prepared(models, subject, spec);
      save_volume(r.prob_fused, (out / (rec.subject_id + "_prob.nii.gz")).string());
      save_volume(r.mask, (out / (rec.subject_id + "_mask.nii.gz")).string());
    } catch (const std::exception& e) {
      status[i] = std::string("error: ") + e.what();
      log::error("subject " + rec.subject_id + ": " + e.what());
    }
  });
  std::size_t failed = 0;
  for (const auto& s : status) failed += s != "ok";
  std::cout << "segmented " << m.subjects.size() - failed << " of " << m.subjects.size() << " subjects into "
            << out.string() << '\n';
  return failed ? kSubjectErrors : kOk;
}

struct EvaluateArgs {
  std::string manifest, predictions, out, config;
  std::size_t jobs = 1;
  bool force = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const Manifest m = read_manifest(a.manifest);
  const TrainSpec spec = a.config.empty() ? TrainSpec{} : TrainSpec::from_json(read_json(a.config));
  std::vector<const SubjectRecord*> labelled;
  for (const auto& s : m.subjects) {
    if (s.label_path) labelled.push_back(&s);
  }
  const fs::path out(a.out);
  claim_output_dir(out, a.force);

  std::vector<SubjectRow> rows(labelled.size());
  parallel_for(labelled.size(), a.jobs, [&](std::size_t i) {
    const SubjectRecord& rec = *labelled[i];
    SubjectRow& row = rows[i];
    row.subject_id = rec.subject_id;
    row.scanner_id = rec.scanner_id;
    try {
      const Volume label = load_volume(m.resolve(*rec.label_path).string(), VolumeKind::mask);
      const Volume pred =
          load_volume((fs::path(a.predictions) / (rec.subject_id + "_mask.nii.gz")).string(), VolumeKind::mask);
      row.vs = volumetric_similarity(label, pred);
      row.dsc = dice_coefficient(label, pred);
      try {
        row.hd95 = hausdorff95(label, pred, spec.hd95_set);
      } catch (const MetricError&) {
        row.status = "hd95_undefined";
      }
    } catch (const std::exception& e) {
      row.vs.reset();
      row.dsc.reset();
      row.hd95.reset();
      row.status = std::string("error: ") + e.what();
      log::error("subject " + rec.subject_id + ": " + e.what());
    }
  });
  write_metrics_csv(rows, out / "metrics.csv");

  std::vector<const SubjectRow*> all;
  std::map<std::string, std::vector<const SubjectRow*>> by_scanner;
  bool failed = false;
  for (const auto& r : rows) {
    all.push_back(&r);
    by_scanner[r.scanner_id].push_back(&r);
    failed = failed || r.failed();
  }
  const MetricSummary overall = summarize(all);
  nlohmann::json doc = {{"overall", overall.to_json()}, {"per_scanner", nlohmann::json::object()}};
  print_summary(std::cout, "overall", overall);
  for (const auto& [scanner, rs] : by_scanner) {
    const MetricSummary s = summarize(rs);
    doc["per_scanner"][scanner] = s.to_json();
    print_summary(std::cout, scanner, s);
  }
  write_json(doc, out / "summary.json");
  return failed ? kSubjectErrors : kOk;
}

struct ExperimentArgs {
  std::string kind, manifest, out, plan;
  std::string fraction_steps = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0";
  SpecFlags spec;
  int k = 5;
  std::size_t jobs = 1;
  bool force = false;
  bool no_volumes = false;
};

int cmd_experiment(const ExperimentArgs& a) {
  const Manifest m = read_manifest(a.manifest);
  const TrainSpec spec = build_spec(a.spec);
  SplitPlan plan;
  if (!a.plan.empty()) {
    plan = SplitPlan::from_json(read_json(a.plan));
  } else if (a.kind == "crossval" || a.kind == "multiview-ablation") {
    plan = make_stratified_kfold(m.subjects, a.k, spec.seed);
  } else if (a.kind == "loso") {
    plan = make_loso(m.subjects, spec.seed);
  } else {
    plan = make_fraction_plan(m.subjects, parse_list(a.fraction_steps), spec.seed);
  }

  ExperimentOptions opt;
  opt.out_dir = a.out;
  opt.jobs = a.jobs;
  opt.save_volumes = !a.no_volumes;
  if (a.kind == "multiview-ablation") {
    const ViewAxis A = ViewAxis::axial, C = ViewAxis::coronal, S = ViewAxis::sagittal;
    opt.ensembles = {{A}, {C}, {S}, {A, C}, {A, C, S}};
    opt.paired_tests = {{3, 0}, {3, 1}, {3, 4}};
  }
  claim_output_dir(a.out, a.force);
  EvalReport report = run_experiment(m, plan, spec, opt);

  if (a.kind == "crossval" || a.kind == "loso") {
    // Each scanner against the pooled others.
    auto& rows = report.ensembles.front().rows;
    std::set<std::string> scanners;
    for (const auto& r : rows) scanners.insert(r.scanner_id);
    if (scanners.size() > 1) {
      for (const auto& sc : scanners) {
        std::vector<SubjectRow> mine, rest;
        for (const auto& r : rows) (r.scanner_id == sc ? mine : rest).push_back(r);
        report.comparisons.push_back(compare_unpaired(sc + " vs rest", mine, rest));
      }
      write_json(report.to_json(), fs::path(a.out) / "report.json");
    }
  }

  for (const auto& e : report.ensembles) {
    print_summary(std::cout, e.label, e.overall);
    if (a.kind == "fraction-ablation" || a.kind == "loso") {
      for (const auto& [name, s] : e.per_fold) print_summary(std::cout, "  " + name, s);
    } else {
      for (const auto& [scanner, s] : e.per_scanner) print_summary(std::cout, "  " + scanner, s);
    }
  }
  for (const auto& c : report.comparisons) print_comparison(std::cout, c);
  return report.any_failed() ? kSubjectErrors : kOk;
}

struct ParamsArgs {
  std::string config;
};

int cmd_params(const ParamsArgs& a) {
  ModelConfig cfg;
  if (!a.config.empty()) {
    const auto doc = read_json(a.config);
    cfg = doc.contains("model") ? ModelConfig::from_json(doc.at("model")) : ModelConfig::from_json(doc);
  }
  cfg.validate();
  const TrainedModel model = build_model(cfg);
  std::size_t enumerated = 0;
  std::ostream& out = std::cout;
  out << format("%-22s %-18s %12s\n", "tensor", "shape", "count");
  for (const auto& e : model.params.entries()) {
    std::string shape;
    for (std::size_t d : e.shape) shape += (shape.empty() ? "" : "x") + std::to_string(d);
    out << format("%-22s %-18s %12zu\n", e.name.c_str(), shape.c_str(), e.count);
    enumerated += e.count;
  }
  out << "\nconvolution layers:          " << cfg.conv_layer_count() << '\n'
      << "parameters (weight store):   " << enumerated << '\n'
      << "parameters (closed form):    " << expected_param_count(cfg) << '\n'
      << "parameters reported in the original publication: " << kPaperParamCount << '\n';
  if (enumerated != kPaperParamCount) {
    out << "note: the published count cannot be matched by this 16-layer, 180x180 topology with widths\n"
           "      64/128/256; the difference ("
        << format("%+lld", static_cast<long long>(kPaperParamCount) - static_cast<long long>(enumerated))
        << ") is left unexplained rather than fitted with guessed widths.\n";
  }
  return enumerated == model.param_count() ? kOk : kFailure;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Multi-view 2D CNN segmentation of thin brain structures"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  std::string verbosity = "info";
  app.add_option("--log-level", verbosity, "debug, info, warn, error or off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}))
      ->configurable(false);
  app.fallthrough();

  PhantomArgs phantom;
  auto* c_phantom = app.add_subcommand("phantom", "Generate a synthetic cohort");
  c_phantom->add_option("--out", phantom.out, "Output directory")->required();
  c_phantom->add_option("--seed", phantom.seed, "Cohort seed");
  c_phantom->add_option("--counts", phantom.counts, "Subjects per style A,B,C,D");
  c_phantom->add_option("--size", phantom.size, "Cube edge in voxels");
  c_phantom->add_option("--thickness", phantom.thickness, "Sheet thickness in mm");
  c_phantom->add_flag("--force", phantom.force, "Reuse a non-empty output directory");

  PreprocessArgs pre;
  auto* c_pre = app.add_subcommand("preprocess", "Brain mask and z-score every image in a manifest");
  c_pre->add_option("--manifest", pre.manifest)->required()->check(CLI::ExistingFile);
  c_pre->add_option("--out", pre.out)->required();
  c_pre->add_option("--config", pre.config, "TrainSpec JSON (brain_mask options)")->check(CLI::ExistingFile);
  c_pre->add_option("--jobs", pre.jobs)->check(CLI::PositiveNumber);
  c_pre->add_flag("--force", pre.force);

  SplitArgs split;
  auto* c_split = app.add_subcommand("split", "Write a split plan");
  c_split->add_option("--manifest", split.manifest)->required()->check(CLI::ExistingFile);
  c_split->add_option("--out", split.out, "Plan JSON file")->required();
  c_split->add_option("--strategy", split.strategy)->check(CLI::IsMember({"kfold", "loso", "fraction"}));
  c_split->add_option("--k", split.k);
  c_split->add_option("--seed", split.seed);
  c_split->add_option("--fraction-steps", split.fraction_steps);
  c_split->add_flag("--force", split.force);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train one model per view");
  c_train->add_option("--manifest", train.manifest)->required()->check(CLI::ExistingFile);
  c_train->add_option("--out", train.out)->required();
  c_train->add_option("--plan", train.plan, "Split plan JSON")->check(CLI::ExistingFile);
  c_train->add_option("--fold", train.fold, "Fold name within the plan (default: first)");
  add_spec_flags(c_train, train.spec);
  c_train->add_option("--jobs", train.jobs, "Views trained in parallel")->check(CLI::PositiveNumber);
  c_train->add_flag("--force", train.force);

  PredictArgs predict;
  auto* c_predict = app.add_subcommand("predict", "Segment every subject of a manifest");
  c_predict->add_option("--manifest", predict.manifest)->required()->check(CLI::ExistingFile);
  c_predict->add_option("--models", predict.models, "Checkpoints, one per view")
      ->required()
      ->check(CLI::ExistingFile)
      ->delimiter(',');
  c_predict->add_option("--out", predict.out)->required();
  add_spec_flags(c_predict, predict.spec);
  c_predict->add_option("--jobs", predict.jobs)->check(CLI::PositiveNumber);
  c_predict->add_flag("--force", predict.force);

  EvaluateArgs eval;
  auto* c_eval = app.add_subcommand("evaluate", "Score predicted masks against labels");
  c_eval->add_option("--manifest", eval.manifest)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--predictions", eval.predictions, "Directory with <id>_mask.nii.gz files")
      ->required()
      ->check(CLI::ExistingDirectory);
  c_eval->add_option("--out", eval.out)->required();
  c_eval->add_option("--config", eval.config, "TrainSpec JSON (hd95_surface)")->check(CLI::ExistingFile);
  c_eval->add_option("--jobs", eval.jobs)->check(CLI::PositiveNumber);
  c_eval->add_flag("--force", eval.force);

  ExperimentArgs exp;
  auto* c_exp = app.add_subcommand("experiment", "Run an evaluation protocol end to end");
  c_exp->add_option("kind", exp.kind)
      ->required()
      ->check(CLI::IsMember({"crossval", "loso", "multiview-ablation", "fraction-ablation"}));
  c_exp->add_option("--manifest", exp.manifest)->required()->check(CLI::ExistingFile);
  c_exp->add_option("--out", exp.out)->required();
  c_exp->add_option("--plan", exp.plan, "Use this split plan instead of building one")->check(CLI::ExistingFile);
  c_exp->add_option("--k", exp.k, "Folds for crossval and multiview-ablation");
  c_exp->add_option("--fraction-steps", exp.fraction_steps, "Training fractions for fraction-ablation");
  add_spec_flags(c_exp, exp.spec);
  c_exp->add_option("--jobs", exp.jobs)->check(CLI::PositiveNumber);
  c_exp->add_flag("--force", exp.force);
  c_exp->add_flag("--no-volumes", exp.no_volumes, "Skip writing probability and mask volumes");

  ParamsArgs params;
  auto* c_params = app.add_subcommand("params", "Report the network's parameter count");
  c_params->add_option("--config", params.config, "TrainSpec or ModelConfig JSON")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, std::cout, std::cerr);
    return code == 0 ? kOk : kFailure;
  }

  const std::map<std::string, log::Level> levels{{"debug", log::Level::debug},
                                                  {"info", log::Level::info},
                                                  {"warn", log::Level::warn},
                                                  {"error", log::Level::error},
                                                  {"off", log::Level::off}};
  log::set_level(levels.at(verbosity));

  try {
    if (*c_phantom) return cmd_phantom(phantom);
    if (*c_pre) return cmd_preprocess(pre);
    if (*c_split) return cmd_split(split);
    if (*c_train) return cmd_train(train);
    if (*c_predict) return cmd_predict(predict);
    if (*c_eval) return cmd_evaluate(eval);
    if (*c_exp) return cmd_experiment(exp);
    if (*c_params) return cmd_params(params);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"mvseg"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace mvseg::cli
