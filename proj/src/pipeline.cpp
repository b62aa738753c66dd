#include "mvseg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include "mvseg/error.hpp"
#include "mvseg/log.hpp"
#include "mvseg/nifti.hpp"
#include "mvseg/parallel.hpp"
#include "mvseg/rng.hpp"

namespace mvseg {

// ---------------------------------------------------------------------------
// TrainSpec

void TrainSpec::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (!(adam.learning_rate > 0.0f)) throw ConfigError("learning_rate must be > 0");
  if (!(dice_smooth > 0.0)) throw ConfigError("dice_smooth must be > 0");
  if (!(fusion_lambda >= 0.0 && fusion_lambda <= 1.0)) throw ConfigError("fusion_lambda must lie in [0, 1]");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  if (!(postproc_fraction >= 0.0 && postproc_fraction < 0.5)) {
    throw ConfigError("postproc_fraction must lie in [0, 0.5)");
  }
  if (views.empty()) throw ConfigError("at least one view is required");
  std::set<ViewAxis> seen(views.begin(), views.end());
  if (seen.size() != views.size()) throw ConfigError("views listed twice");
  model.validate();
}

nlohmann::json TrainSpec::to_json() const {
  nlohmann::json v = nlohmann::json::array();
  for (auto view : views) v.push_back(std::string(to_string(view)));
  nlohmann::json bm = {{"threshold_fraction", brain_mask.threshold_fraction},
                       {"closing_radius", brain_mask.closing_radius}};
  if (brain_mask.absolute_threshold) bm["absolute_threshold"] = *brain_mask.absolute_threshold;
  return {{"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"learning_rate", adam.learning_rate},
          {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"epsilon", adam.epsilon}}},
          {"dice_smooth", dice_smooth},
          {"fusion_lambda", fusion_lambda},
          {"literal_half_fusion", literal_half_fusion},
          {"threshold", threshold},
          {"postproc_fraction", postproc_fraction},
          {"views", v},
          {"model", model.to_json()},
          {"normalize", normalize},
          {"brain_mask", bm},
          {"hd95_surface", hd95_set == DistanceSet::surface},
          {"seed", seed}};
}

TrainSpec TrainSpec::from_json(const nlohmann::json& doc) {
  static const std::set<std::string> known = {
      "batch_size", "max_epochs", "learning_rate", "adam",       "dice_smooth",  "fusion_lambda",
      "literal_half_fusion", "threshold", "postproc_fraction", "views", "model", "normalize",
      "brain_mask", "hd95_surface", "seed"};
  if (!doc.is_object()) throw ConfigError("train spec must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (!known.count(key)) throw ConfigError("unknown train spec key: " + key);
  }
  TrainSpec s;
  try {
    s.batch_size = doc.value("batch_size", s.batch_size);
    s.max_epochs = doc.value("max_epochs", s.max_epochs);
    s.adam.learning_rate = doc.value("learning_rate", s.adam.learning_rate);
    if (doc.contains("adam")) {
      const auto& a = doc.at("adam");
      s.adam.beta1 = a.value("beta1", s.adam.beta1);
      s.adam.beta2 = a.value("beta2", s.adam.beta2);
      s.adam.epsilon = a.value("epsilon", s.adam.epsilon);
    }
    s.dice_smooth = doc.value("dice_smooth", s.dice_smooth);
    s.fusion_lambda = doc.value("fusion_lambda", s.fusion_lambda);
    s.literal_half_fusion = doc.value("literal_half_fusion", s.literal_half_fusion);
    s.threshold = doc.value("threshold", s.threshold);
    s.postproc_fraction = doc.value("postproc_fraction", s.postproc_fraction);
    if (doc.contains("views")) {
      s.views.clear();
      for (const auto& v : doc.at("views")) {
        const auto parsed = parse_view_axis(v.get<std::string>());
        if (!parsed) throw ConfigError("unknown view: " + v.get<std::string>());
        s.views.push_back(*parsed);
      }
    }
    if (doc.contains("model")) s.model = ModelConfig::from_json(doc.at("model"));
    s.normalize = doc.value("normalize", s.normalize);
    if (doc.contains("brain_mask")) {
      const auto& b = doc.at("brain_mask");
      s.brain_mask.threshold_fraction = b.value("threshold_fraction", s.brain_mask.threshold_fraction);
      s.brain_mask.closing_radius = b.value("closing_radius", s.brain_mask.closing_radius);
      if (b.contains("absolute_threshold")) s.brain_mask.absolute_threshold = b.at("absolute_threshold").get<double>();
    }
    if (doc.value("hd95_surface", false)) s.hd95_set = DistanceSet::surface;
    s.seed = doc.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid train spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Preparation

PreparedSubject prepare_image(Volume image, const TrainSpec& spec) {
  PreparedSubject out;
  image.set_kind(VolumeKind::image);
  if (spec.normalize) {
    BrainMask brain = compute_brain_mask(image, spec.brain_mask);
    out.image = zscore_normalize(image, brain);
    out.brain = std::move(brain.mask);
  } else {
    out.image = std::move(image);
  }
  return out;
}

PreparedSubject prepare_subject(const Manifest& manifest, const SubjectRecord& record, const TrainSpec& spec) {
  PreparedSubject out = prepare_image(load_volume(manifest.resolve(record.image_path), VolumeKind::image), spec);
  out.subject_id = record.subject_id;
  out.scanner_id = record.scanner_id;
  if (record.label_path) {
    Volume label = load_volume(manifest.resolve(*record.label_path), VolumeKind::mask);
    if (label.shape() != out.image.shape()) {
      throw ContractError("label shape differs from image shape for subject " + record.subject_id);
    }
    out.label = std::move(label);
  }
  return out;
}

namespace {

// Crop/pad a volume for the view, cut it into slices and pack them into one
// (n, rows, cols) buffer.
struct SliceBatch {
  std::vector<float> data;
  std::size_t n = 0;
  CropPadRecord record;
  ViewStack stack;  // metadata plus slice shapes (data moved into `data`)
};

SliceBatch slice_volume(const Volume& v, ViewAxis view, std::array<std::size_t, 2> target) {
  SliceBatch b;
  auto [cropped, rec] = crop_pad_inplane(v, target, view);
  b.record = rec;
  b.stack = to_view(cropped, view);
  b.n = b.stack.n();
  const std::size_t hw = target[0] * target[1];
  b.data.resize(b.n * hw);
  for (std::size_t s = 0; s < b.n; ++s) {
    auto& sl = b.stack.slices[s];
    if (sl.rows != target[0] || sl.cols != target[1]) throw ContractError("slice shape differs from model input");
    std::copy(sl.data.begin(), sl.data.end(), b.data.begin() + static_cast<long>(s * hw));
    sl.data.clear();
    sl.data.shrink_to_fit();
  }
  return b;
}

Volume unslice(SliceBatch& b, std::span<const float> values, VolumeKind kind) {
  const std::size_t hw = b.record.target[0] * b.record.target[1];
  for (std::size_t s = 0; s < b.n; ++s) {
    auto& sl = b.stack.slices[s];
    sl.data.assign(values.begin() + static_cast<long>(s * hw), values.begin() + static_cast<long>((s + 1) * hw));
  }
  b.stack.kind = kind;
  Volume cropped = from_view(b.stack);
  Volume out = invert_crop_pad(cropped, b.record);
  out.set_kind(kind);
  return out;
}

double dsc_of(const Volume& label, const Volume& mask) { return dice_coefficient(label, mask); }

}  // namespace

// ---------------------------------------------------------------------------
// Inference, fusion, post-processing

Volume predict_view(const TrainedModel& model, const Volume& image, const Volume* brain) {
  {
    // Within-brain spread check on the network input.
    const auto d = image.data();
    const float corner = d.empty() ? 0.0f : d[0];
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const bool inside = brain ? brain->data()[i] != 0.0f : d[i] != corner;
      if (!inside) continue;
      sum += d[i];
      sq += static_cast<double>(d[i]) * d[i];
      ++n;
    }
    if (n >= 2) {
      const double mean = sum / static_cast<double>(n);
      const double sd = std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mean * mean));
      if (std::abs(sd - 1.0) > 0.1) {
        char msg[160];
        std::snprintf(msg, sizeof(msg), "input looks un-normalised: within-brain std %.3f", sd);
        log::warn(msg);
      }
    }
  }
  SliceBatch batch = slice_volume(image, model.view, model.config.input_size);
  const std::vector<float> fg = predict_foreground(model, batch.data, batch.n);
  return unslice(batch, fg, VolumeKind::probability);
}

Volume fuse_views(const std::map<ViewAxis, Volume>& probs, double lambda, bool literal_half) {
  if (probs.empty()) throw ConfigError("fuse_views needs at least one probability volume");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("fusion lambda must lie in [0, 1]");
  const Volume& first = probs.begin()->second;
  for (const auto& [view, v] : probs) {
    if (v.shape() != first.shape()) throw ContractError("fused volumes differ in shape");
  }
  Volume out = first.zeros_like(VolumeKind::probability);
  auto o = out.data();
  if (probs.size() == 1) {
    std::copy(first.data().begin(), first.data().end(), o.begin());
    return out;
  }
  if (probs.size() == 2) {
    const auto a = first.data();
    const auto c = std::next(probs.begin())->second.data();
    const double wa = lambda, wc = 1.0 - lambda;
    const double scale = literal_half ? 0.5 : 1.0;
    for (std::size_t i = 0; i < o.size(); ++i) {
      o[i] = static_cast<float>(scale * (wa * a[i] + wc * c[i]));
    }
    return out;
  }
  const double k = static_cast<double>(probs.size());
  for (std::size_t i = 0; i < o.size(); ++i) {
    double s = 0.0;
    for (const auto& [view, v] : probs) s += v.data()[i];
    o[i] = static_cast<float>(s / k);
  }
  return out;
}

Volume postprocess(const Volume& prob, double tau, double fraction) {
  if (!(fraction >= 0.0 && fraction < 0.5)) throw ConfigError("post-processing fraction must lie in [0, 0.5)");
  const std::size_t axis = view_array_axis(prob, ViewAxis::axial);
  Volume mask = prob.zeros_like(VolumeKind::mask);
  const auto& s = prob.shape();
  const std::size_t n_axial = s[axis];
  const auto cut = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n_axial)));
  const auto p = prob.data();
  auto m = mask.data();
  for (std::size_t k = 0; k < s[2]; ++k) {
    for (std::size_t j = 0; j < s[1]; ++j) {
      for (std::size_t i = 0; i < s[0]; ++i) {
        const std::size_t idx = prob.index(i, j, k);
        const std::size_t pos = axis == 0 ? i : axis == 1 ? j : k;
        const bool kept = pos >= cut && pos + cut < n_axial;
        m[idx] = kept && p[idx] >= tau ? 1.0f : 0.0f;
      }
    }
  }
  return mask;
}

SegmentationResult segment_prepared(const std::map<ViewAxis, const TrainedModel*>& models,
                                    const PreparedSubject& subject, const TrainSpec& spec) {
  if (models.empty()) throw ConfigError("segmentation needs at least one model");
  SegmentationResult out;
  out.subject_id = subject.subject_id;
  const Volume* brain = subject.brain ? &*subject.brain : nullptr;
  for (const auto& [view, model] : models) {
    if (model->view != view) throw ContractError("model registered for a view it was not trained on");
    out.per_view_probs.emplace(view, predict_view(*model, subject.image, brain));
  }
  out.prob_fused = fuse_views(out.per_view_probs, spec.fusion_lambda, spec.literal_half_fusion);
  out.mask = postprocess(out.prob_fused, spec.threshold, spec.postproc_fraction);
  return out;
}

SegmentationResult segment_subject(const std::map<ViewAxis, TrainedModel>& models, const Volume& image,
                                   const TrainSpec& spec, const std::string& subject_id) {
  if (models.empty()) throw ConfigError("segmentation needs at least one model");
  PreparedSubject prepared = prepare_image(image, spec);
  prepared.subject_id = subject_id;
  std::map<ViewAxis, const TrainedModel*> refs;
  for (const auto& [view, m] : models) refs.emplace(view, &m);
  return segment_prepared(refs, prepared, spec);
}

// ---------------------------------------------------------------------------
// Training

TrainResult train_view(ViewAxis view, const std::vector<const PreparedSubject*>& train,
                       const std::vector<const PreparedSubject*>& validation, const TrainSpec& spec,
                       std::uint64_t seed, const EpochCallback& on_epoch) {
  spec.validate();
  if (train.empty()) throw ConfigError("training set is empty");
  const auto target = spec.model.input_size;
  const std::size_t hw = target[0] * target[1];

  std::vector<float> images, labels;
  for (const PreparedSubject* s : train) {
    if (!s->label) throw ConfigError("training subject without label: " + s->subject_id);
    SliceBatch x = slice_volume(s->image, view, target);
    SliceBatch y = slice_volume(*s->label, view, target);
    images.insert(images.end(), x.data.begin(), x.data.end());
    labels.insert(labels.end(), y.data.begin(), y.data.end());
  }
  for (const PreparedSubject* s : validation) {
    if (!s->label) throw ConfigError("validation subject without label: " + s->subject_id);
  }
  const std::size_t n_slices = images.size() / hw;

  ModelConfig cfg = spec.model;
  cfg.seed = derive_seed(seed, 1);
  TrainResult result;
  result.model = build_model(cfg, view);
  TrainedModel& model = result.model;
  auto params = model.params.values();

  AdamOptimizer optimizer(model.param_count(), spec.adam);
  TrainingPass pass(model);
  Rng order_rng(derive_seed(seed, 2));
  std::vector<std::size_t> order(n_slices);
  for (std::size_t i = 0; i < n_slices; ++i) order[i] = i;

  std::vector<float> grads(model.param_count());
  std::vector<float> bx, by, dfg;
  std::vector<float> best(params.begin(), params.end());
  double best_dsc = -1.0;

  for (std::size_t epoch = 1; epoch <= spec.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    order_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < n_slices; b0 += spec.batch_size) {
      const std::size_t nb = std::min(spec.batch_size, n_slices - b0);
      bx.resize(nb * hw);
      by.resize(nb * hw);
      dfg.resize(nb * hw);
      for (std::size_t s = 0; s < nb; ++s) {
        const std::size_t src = order[b0 + s] * hw;
        std::copy_n(images.begin() + static_cast<long>(src), hw, bx.begin() + static_cast<long>(s * hw));
        std::copy_n(labels.begin() + static_cast<long>(src), hw, by.begin() + static_cast<long>(s * hw));
      }
      const auto fg = pass.forward(bx, nb);
      loss_sum += dice_loss(fg, by, spec.dice_smooth);
      dice_loss_grad(fg, by, spec.dice_smooth, dfg);
      pass.backward(dfg, grads);
      optimizer.step(params, grads);
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    if (!validation.empty()) {
      double vs = 0.0, dsc = 0.0;
      for (const PreparedSubject* s : validation) {
        const Volume prob = predict_view(model, s->image, s->brain ? &*s->brain : nullptr);
        const Volume mask = postprocess(prob, spec.threshold, spec.postproc_fraction);
        vs += volumetric_similarity(*s->label, mask);
        dsc += dsc_of(*s->label, mask);
      }
      rec.val_vs = vs / static_cast<double>(validation.size());
      rec.val_dsc = dsc / static_cast<double>(validation.size());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.curve.push_back(rec);

    const bool improved = validation.empty() ? true : rec.val_dsc > best_dsc;
    if (improved) {
      best_dsc = rec.val_dsc;
      result.best_epoch = epoch;
      std::copy(params.begin(), params.end(), best.begin());
    }
    char msg[200];
    std::snprintf(msg, sizeof(msg), "%s epoch %zu/%zu loss %.4f val VS %.4f DSC %.4f (%.1fs)",
                  std::string(to_string(view)).c_str(), epoch, spec.max_epochs, rec.train_loss, rec.val_vs,
                  rec.val_dsc, rec.seconds);
    log::info(msg);
    if (on_epoch) on_epoch(view, rec);
  }
  std::copy(best.begin(), best.end(), params.begin());
  return result;
}

// ---------------------------------------------------------------------------
// Reports

std::string ensemble_label(const Ensemble& views) {
  std::vector<ViewAxis> sorted = views;
  std::sort(sorted.begin(), sorted.end());
  std::string out;
  for (auto v : sorted) {
    if (!out.empty()) out += '+';
    out += static_cast<char>(std::toupper(static_cast<unsigned char>(to_string(v)[0])));
  }
  return out;
}

namespace {

nlohmann::json summary_json(const std::optional<MedianIqr>& m) {
  if (!m) return nullptr;
  return {{"median", m->median}, {"q1", m->q1}, {"q3", m->q3}};
}

}  // namespace

nlohmann::json MetricSummary::to_json() const {
  return {{"n", n},
          {"vs", summary_json(vs)},
          {"hd95_mm", summary_json(hd95)},
          {"dsc", summary_json(dsc)},
          {"mean_vs", mean_vs},
          {"mean_dsc", mean_dsc}};
}

MetricSummary summarize(const std::vector<const SubjectRow*>& rows) {
  MetricSummary s;
  s.n = rows.size();
  std::vector<double> vs, hd, dsc;
  for (const auto* r : rows) {
    if (r->vs) vs.push_back(*r->vs);
    if (r->hd95) hd.push_back(*r->hd95);
    if (r->dsc) dsc.push_back(*r->dsc);
  }
  if (!vs.empty()) s.vs = median_iqr(vs);
  if (!hd.empty()) s.hd95 = median_iqr(hd);
  if (!dsc.empty()) s.dsc = median_iqr(dsc);
  auto mean = [](const std::vector<double>& x) {
    double t = 0.0;
    for (double v : x) t += v;
    return x.empty() ? 0.0 : t / static_cast<double>(x.size());
  };
  s.mean_vs = mean(vs);
  s.mean_dsc = mean(dsc);
  return s;
}

bool EvalReport::any_failed() const {
  for (const auto& e : ensembles) {
    for (const auto& r : e.rows) {
      if (r.failed()) return true;
    }
  }
  return false;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json doc;
  doc["strategy"] = strategy;
  doc["ensembles"] = nlohmann::json::array();
  for (const auto& e : ensembles) {
    nlohmann::json ej;
    ej["label"] = e.label;
    ej["overall"] = e.overall.to_json();
    ej["per_scanner"] = nlohmann::json::object();
    for (const auto& [scanner, s] : e.per_scanner) ej["per_scanner"][scanner] = s.to_json();
    ej["per_fold"] = nlohmann::json::array();
    for (const auto& [fold, s] : e.per_fold) {
      auto fj = s.to_json();
      fj["fold"] = fold;
      ej["per_fold"].push_back(fj);
    }
    doc["ensembles"].push_back(ej);
  }
  doc["comparisons"] = nlohmann::json::array();
  for (const auto& c : comparisons) {
    doc["comparisons"].push_back({{"name", c.name},
                                  {"pairs", c.pairs},
                                  {"vs", c.vs.to_json()},
                                  {"hd95_mm", c.hd95.to_json()},
                                  {"dsc", c.dsc.to_json()}});
  }
  return doc;
}

namespace {

TestResult rank_sum_or_degenerate(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) {
    TestResult t;
    t.method = TestMethod::mann_whitney_u;
    t.n1 = a.size();
    t.n2 = b.size();
    t.degenerate = true;
    return t;
  }
  return mann_whitney_u(a, b);
}

}  // namespace

Comparison compare_paired(const EnsembleReport& a, const EnsembleReport& b) {
  Comparison c;
  c.name = a.label + " vs " + b.label;
  std::map<std::pair<std::string, std::string>, const SubjectRow*> index;
  for (const auto& r : b.rows) index[{r.fold, r.subject_id}] = &r;
  std::vector<double> dvs, dhd, ddsc;
  for (const auto& r : a.rows) {
    const auto it = index.find({r.fold, r.subject_id});
    if (it == index.end()) continue;
    const SubjectRow& o = *it->second;
    if (r.failed() || o.failed()) continue;
    ++c.pairs;
    if (r.vs && o.vs) dvs.push_back(*r.vs - *o.vs);
    if (r.hd95 && o.hd95) dhd.push_back(*r.hd95 - *o.hd95);
    if (r.dsc && o.dsc) ddsc.push_back(*r.dsc - *o.dsc);
  }
  c.vs = wilcoxon_signed_rank(dvs);
  c.hd95 = wilcoxon_signed_rank(dhd);
  c.dsc = wilcoxon_signed_rank(ddsc);
  return c;
}

Comparison compare_unpaired(const std::string& name, const std::vector<SubjectRow>& a,
                            const std::vector<SubjectRow>& b) {
  auto collect = [](const std::vector<SubjectRow>& rows, auto field) {
    std::vector<double> out;
    for (const auto& r : rows) {
      if (!r.failed() && (r.*field)) out.push_back(*(r.*field));
    }
    return out;
  };
  Comparison c;
  c.name = name;
  c.pairs = 0;
  c.vs = rank_sum_or_degenerate(collect(a, &SubjectRow::vs), collect(b, &SubjectRow::vs));
  c.hd95 = rank_sum_or_degenerate(collect(a, &SubjectRow::hd95), collect(b, &SubjectRow::hd95));
  c.dsc = rank_sum_or_degenerate(collect(a, &SubjectRow::dsc), collect(b, &SubjectRow::dsc));
  return c;
}

namespace {

std::string format_number(const std::optional<double>& v) {
  if (!v) return {};
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", *v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        fields.back() += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.emplace_back();
    } else if (ch != '\r') {
      fields.back() += ch;
    }
  }
  return fields;
}

constexpr const char* kMetricsHeader = "subject_id,scanner_id,fold,vs,hd95_mm,dsc,status";

}  // namespace

void write_metrics_csv(const std::vector<SubjectRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics CSV: " + path.string());
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    out << csv_field(r.subject_id) << ',' << csv_field(r.scanner_id) << ',' << csv_field(r.fold) << ','
        << format_number(r.vs) << ',' << format_number(r.hd95) << ',' << format_number(r.dsc) << ','
        << csv_field(r.status) << '\n';
  }
  if (!out) throw IoError("failed writing metrics CSV: " + path.string());
}

std::vector<SubjectRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics CSV: " + path.string());
  std::string line;
  if (!std::getline(in, line) || parse_csv_line(line) != parse_csv_line(kMetricsHeader)) {
    throw FormatError("metrics CSV must start with '" + std::string(kMetricsHeader) + "': " + path.string());
  }
  auto number = [&](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    try {
      return std::stod(s);
    } catch (const std::exception&) {
      throw FormatError("bad number '" + s + "' in " + path.string());
    }
  };
  std::vector<SubjectRow> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto f = parse_csv_line(line);
    if (f.size() != 7) throw FormatError("metrics CSV row with " + std::to_string(f.size()) + " fields: " + path.string());
    rows.push_back({f[0], f[1], f[2], number(f[3]), number(f[4]), number(f[5]), f[6]});
  }
  return rows;
}

void write_curve_csv(const std::vector<EpochRecord>& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write training curve: " + path.string());
  out << "epoch,train_loss,val_vs,val_dsc,seconds\n";
  char buf[160];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof(buf), "%zu,%.8g,%.8g,%.8g,%.3f\n", r.epoch, r.train_loss, r.val_vs, r.val_dsc,
                  r.seconds);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

std::string dir_name(const std::string& fold) {
  std::string out = fold;
  for (char& ch : out) {
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' || ch == '_')) ch = '_';
  }
  return out;
}

std::string metrics_file(const std::vector<Ensemble>& ensembles, std::size_t e) {
  return ensembles.size() == 1 ? "metrics.csv" : "metrics_" + ensemble_label(ensembles[e]) + ".csv";
}

void write_json(const nlohmann::json& doc, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

}  // namespace

EvalReport run_experiment(const Manifest& manifest, const SplitPlan& plan, const TrainSpec& spec,
                          const ExperimentOptions& options) {
  spec.validate();
  plan.validate();
  std::vector<Ensemble> ensembles = options.ensembles;
  if (ensembles.empty()) ensembles.push_back(spec.views);
  std::set<ViewAxis> needed;
  for (const auto& e : ensembles) {
    if (e.empty()) throw ConfigError("empty ensemble");
    needed.insert(e.begin(), e.end());
  }
  for (const auto& [i, j] : options.paired_tests) {
    if (i >= ensembles.size() || j >= ensembles.size()) throw ConfigError("paired test refers to a missing ensemble");
  }
  for (const auto& fold : plan.folds) {
    for (const auto* ids : {&fold.train_ids, &fold.validation_ids, &fold.test_ids}) {
      for (const auto& id : *ids) manifest.find(id);
    }
  }

  const bool persist = !options.out_dir.empty();
  if (persist) {
    std::filesystem::create_directories(options.out_dir);
    write_json(spec.to_json(), options.out_dir / "config.json");
    write_json(plan.to_json(), options.out_dir / "plan.json");
  }

  EvalReport report;
  report.strategy = std::string(to_string(plan.strategy));
  report.ensembles.resize(ensembles.size());
  for (std::size_t e = 0; e < ensembles.size(); ++e) report.ensembles[e].label = ensemble_label(ensembles[e]);

  std::map<std::string, std::unique_ptr<PreparedSubject>> cache;
  auto prepared = [&](const std::string& id) -> const PreparedSubject& {
    auto& slot = cache[id];
    if (!slot) slot = std::make_unique<PreparedSubject>(prepare_subject(manifest, manifest.find(id), spec));
    return *slot;
  };

  for (std::size_t fi = 0; fi < plan.folds.size(); ++fi) {
    const Fold& fold = plan.folds[fi];
    log::info("fold " + fold.name + ": " + std::to_string(fold.train_ids.size()) + " train, " +
              std::to_string(fold.validation_ids.size()) + " validation, " + std::to_string(fold.test_ids.size()) +
              " test");
    const std::filesystem::path fold_dir = persist ? options.out_dir / dir_name(fold.name) : std::filesystem::path();
    if (persist) std::filesystem::create_directories(fold_dir);

    std::vector<const PreparedSubject*> train, validation;
    for (const auto& id : fold.train_ids) train.push_back(&prepared(id));
    for (const auto& id : fold.validation_ids) validation.push_back(&prepared(id));

    const std::vector<ViewAxis> views(needed.begin(), needed.end());
    std::vector<TrainResult> trained(views.size());
    parallel_for(views.size(), options.jobs, [&](std::size_t v) {
      const std::uint64_t seed = derive_seed(spec.seed, 1000 * (fi + 1) + static_cast<std::uint64_t>(views[v]));
      trained[v] = train_view(views[v], train, validation, spec, seed, options.on_epoch);
    });
    std::map<ViewAxis, const TrainedModel*> models;
    for (std::size_t v = 0; v < views.size(); ++v) {
      models.emplace(views[v], &trained[v].model);
      if (persist) {
        const std::string name(to_string(views[v]));
        save_checkpoint(trained[v].model, fold_dir / ("model_" + name + ".ckpt"));
        write_curve_csv(trained[v].curve, fold_dir / ("curve_" + name + ".csv"));
      }
    }

    // Test subjects are loaded here so a broken file becomes an error row.
    const std::size_t n_test = fold.test_ids.size();
    std::vector<std::vector<SubjectRow>> rows(ensembles.size(), std::vector<SubjectRow>(n_test));
    if (persist && options.save_volumes) std::filesystem::create_directories(fold_dir / "predictions");

    parallel_for(n_test, options.jobs, [&](std::size_t t) {
      const SubjectRecord& rec = manifest.find(fold.test_ids[t]);
      for (std::size_t e = 0; e < ensembles.size(); ++e) {
        rows[e][t].subject_id = rec.subject_id;
        rows[e][t].scanner_id = rec.scanner_id;
        rows[e][t].fold = fold.name;
      }
      try {
        const auto subject = std::make_unique<PreparedSubject>(prepare_subject(manifest, rec, spec));
        if (!subject->label) throw ConfigError("test subject has no label");
        const Volume* brain = subject->brain ? &*subject->brain : nullptr;
        std::map<ViewAxis, Volume> probs;
        for (const auto& [view, model] : models) probs.emplace(view, predict_view(*model, subject->image, brain));
        for (std::size_t e = 0; e < ensembles.size(); ++e) {
          std::map<ViewAxis, Volume> chosen;
          for (auto v : ensembles[e]) chosen.emplace(v, probs.at(v));
          const Volume fused = fuse_views(chosen, spec.fusion_lambda, spec.literal_half_fusion);
          const Volume mask = postprocess(fused, spec.threshold, spec.postproc_fraction);
          SubjectRow& row = rows[e][t];
          row.vs = volumetric_similarity(*subject->label, mask);
          row.dsc = dice_coefficient(*subject->label, mask);
          try {
            row.hd95 = hausdorff95(*subject->label, mask, spec.hd95_set);
          } catch (const MetricError&) {
            row.status = "hd95_undefined";
          }
          if (persist && options.save_volumes) {
            const std::string stem = rec.subject_id + (ensembles.size() > 1 ? "_" + report.ensembles[e].label : "");
            save_volume(fused, fold_dir / "predictions" / (stem + "_prob.nii.gz"));
            save_volume(mask, fold_dir / "predictions" / (stem + "_mask.nii.gz"));
          }
        }
      } catch (const std::exception& ex) {
        for (std::size_t e = 0; e < ensembles.size(); ++e) {
          rows[e][t].vs.reset();
          rows[e][t].hd95.reset();
          rows[e][t].dsc.reset();
          rows[e][t].status = std::string("error: ") + ex.what();
        }
        log::error("subject " + rec.subject_id + ": " + ex.what());
      }
    });

    for (std::size_t e = 0; e < ensembles.size(); ++e) {
      auto& dst = report.ensembles[e].rows;
      dst.insert(dst.end(), rows[e].begin(), rows[e].end());
      std::vector<const SubjectRow*> fold_rows;
      for (const auto& r : rows[e]) fold_rows.push_back(&r);
      report.ensembles[e].per_fold.emplace_back(fold.name, summarize(fold_rows));
      char msg[160];
      const auto& s = report.ensembles[e].per_fold.back().second;
      std::snprintf(msg, sizeof(msg), "fold %s ensemble %s: mean DSC %.4f, mean VS %.4f", fold.name.c_str(),
                    report.ensembles[e].label.c_str(), s.mean_dsc, s.mean_vs);
      log::info(msg);
    }
  }

  for (auto& e : report.ensembles) {
    std::vector<const SubjectRow*> all;
    std::map<std::string, std::vector<const SubjectRow*>> by_scanner;
    for (const auto& r : e.rows) {
      all.push_back(&r);
      by_scanner[r.scanner_id].push_back(&r);
    }
    e.overall = summarize(all);
    for (const auto& [scanner, rows] : by_scanner) e.per_scanner[scanner] = summarize(rows);
  }
  for (const auto& [i, j] : options.paired_tests) {
    report.comparisons.push_back(compare_paired(report.ensembles[i], report.ensembles[j]));
  }

  if (persist) {
    for (std::size_t e = 0; e < ensembles.size(); ++e) {
      write_metrics_csv(report.ensembles[e].rows, options.out_dir / metrics_file(ensembles, e));
    }
    write_json(report.to_json(), options.out_dir / "report.json");
  }
  return report;
}

}  // namespace mvseg
