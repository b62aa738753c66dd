#include "mvseg/splits.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "mvseg/error.hpp"
#include "mvseg/rng.hpp"

namespace mvseg {

std::string_view to_string(SplitStrategy strategy) {
  switch (strategy) {
    case SplitStrategy::stratified_kfold: return "stratified-kfold";
    case SplitStrategy::leave_one_scanner_out: return "leave-one-scanner-out";
    case SplitStrategy::fraction_ablation: return "fraction-ablation";
    case SplitStrategy::custom: return "custom";
  }
  return "custom";
}

namespace {

SplitStrategy parse_strategy(const std::string& s) {
  for (auto st : {SplitStrategy::stratified_kfold, SplitStrategy::leave_one_scanner_out,
                  SplitStrategy::fraction_ablation, SplitStrategy::custom}) {
    if (to_string(st) == s) return st;
  }
  throw FormatError("unknown split strategy: " + s);
}

// Scanner id -> subject ids in manifest order; std::map keeps scanners sorted.
std::map<std::string, std::vector<std::string>> by_scanner(std::span<const SubjectRecord> subjects) {
  std::map<std::string, std::vector<std::string>> groups;
  std::set<std::string> seen;
  for (const auto& s : subjects) {
    if (!seen.insert(s.subject_id).second) throw ConfigError("duplicate subject_id: " + s.subject_id);
    groups[s.scanner_id].push_back(s.subject_id);
  }
  return groups;
}

// Elements of `all` not in `removed`, keeping the order of `all`.
std::vector<std::string> minus(const std::vector<std::string>& all, const std::vector<std::string>& removed) {
  const std::set<std::string> drop(removed.begin(), removed.end());
  std::vector<std::string> out;
  for (const auto& id : all) {
    if (!drop.count(id)) out.push_back(id);
  }
  return out;
}

std::vector<std::string> manifest_order(std::span<const SubjectRecord> subjects) {
  std::vector<std::string> ids;
  for (const auto& s : subjects) ids.push_back(s.subject_id);
  return ids;
}

// Split a fold's training pool into (train, validation).
void carve_validation(Fold& fold, const std::vector<std::string>& pool, std::uint64_t seed) {
  std::vector<std::string> shuffled = pool;
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(shuffled));
  const std::size_t v = validation_count(pool.size());
  fold.validation_ids.assign(shuffled.begin(), shuffled.begin() + static_cast<long>(v));
  fold.train_ids = minus(pool, fold.validation_ids);
  // Validation ids follow manifest order as well, for stable serialisation.
  fold.validation_ids = minus(pool, fold.train_ids);
}

std::string fraction_name(double f) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "fraction=%.2f", f);
  return buf;
}

}  // namespace

std::size_t validation_count(std::size_t pool_size) {
  if (pool_size < 2) return 0;
  const auto v = static_cast<std::size_t>(std::llround(kValidationFraction * static_cast<double>(pool_size)));
  return std::clamp<std::size_t>(v, 1, pool_size - 1);
}

void SplitPlan::validate() const {
  for (const auto& fold : folds) {
    std::set<std::string> seen;
    for (const auto* ids : {&fold.train_ids, &fold.validation_ids, &fold.test_ids}) {
      for (const auto& id : *ids) {
        if (!seen.insert(id).second) {
          throw ConfigError("subject " + id + " appears twice in fold " + fold.name);
        }
      }
    }
  }
}

nlohmann::json SplitPlan::to_json() const {
  nlohmann::json doc;
  doc["strategy"] = std::string(to_string(strategy));
  doc["seed"] = seed;
  doc["folds"] = nlohmann::json::array();
  for (const auto& f : folds) {
    doc["folds"].push_back({{"name", f.name},
                            {"train", f.train_ids},
                            {"validation", f.validation_ids},
                            {"test", f.test_ids},
                            {"fraction", f.fraction}});
  }
  return doc;
}

SplitPlan SplitPlan::from_json(const nlohmann::json& doc) {
  SplitPlan plan;
  try {
    plan.strategy = parse_strategy(doc.value("strategy", std::string("custom")));
    plan.seed = doc.value("seed", std::uint64_t{0});
    for (const auto& f : doc.at("folds")) {
      Fold fold;
      fold.name = f.value("name", std::string("fold") + std::to_string(plan.folds.size()));
      fold.train_ids = f.at("train").get<std::vector<std::string>>();
      fold.validation_ids = f.value("validation", std::vector<std::string>{});
      fold.test_ids = f.value("test", std::vector<std::string>{});
      fold.fraction = f.value("fraction", 1.0);
      plan.folds.push_back(std::move(fold));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid split plan: ") + e.what());
  }
  plan.validate();
  return plan;
}

SplitPlan make_stratified_kfold(std::span<const SubjectRecord> subjects, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  const auto groups = by_scanner(subjects);
  const auto uk = static_cast<std::size_t>(k);
  for (const auto& [scanner, ids] : groups) {
    if (ids.size() < uk) {
      throw ConfigError("scanner " + scanner + " has " + std::to_string(ids.size()) + " subjects, fewer than k=" +
                        std::to_string(k));
    }
  }

  SplitPlan plan;
  plan.strategy = SplitStrategy::stratified_kfold;
  plan.seed = seed;
  plan.folds.resize(uk);

  Rng rng(seed);
  for (const auto& [scanner, ids] : groups) {
    std::vector<std::string> shuffled = ids;
    rng.shuffle(std::span<std::string>(shuffled));
    const std::size_t n = shuffled.size();
    std::size_t begin = 0;
    for (std::size_t i = 0; i < uk; ++i) {
      const std::size_t len = n / uk + (i < n % uk ? 1 : 0);
      auto& test = plan.folds[i].test_ids;
      test.insert(test.end(), shuffled.begin() + static_cast<long>(begin),
                  shuffled.begin() + static_cast<long>(begin + len));
      begin += len;
    }
  }

  const auto all = manifest_order(subjects);
  for (std::size_t i = 0; i < uk; ++i) {
    Fold& fold = plan.folds[i];
    fold.name = "fold" + std::to_string(i);
    carve_validation(fold, minus(all, fold.test_ids), derive_seed(seed, 1000 + i));
  }
  return plan;
}

SplitPlan make_loso(std::span<const SubjectRecord> subjects, std::uint64_t seed) {
  const auto groups = by_scanner(subjects);
  if (groups.size() < 2) throw ConfigError("leave-one-scanner-out needs at least two scanners");
  SplitPlan plan;
  plan.strategy = SplitStrategy::leave_one_scanner_out;
  plan.seed = seed;
  const auto all = manifest_order(subjects);
  std::size_t i = 0;
  for (const auto& [scanner, ids] : groups) {
    Fold fold;
    fold.name = "scanner=" + scanner;
    fold.test_ids = ids;
    carve_validation(fold, minus(all, ids), derive_seed(seed, 2000 + i));
    plan.folds.push_back(std::move(fold));
    ++i;
  }
  return plan;
}

Holdout stratified_holdout(std::span<const SubjectRecord> subjects, std::uint64_t seed) {
  const auto groups = by_scanner(subjects);
  Holdout out;
  Rng rng(seed);
  for (const auto& [scanner, ids] : groups) {
    std::vector<std::string> shuffled = ids;
    rng.shuffle(std::span<std::string>(shuffled));
    const std::size_t held = ids.size() / 5;
    out.held_out.insert(out.held_out.end(), shuffled.begin(), shuffled.begin() + static_cast<long>(held));
  }
  out.pool = minus(manifest_order(subjects), out.held_out);
  return out;
}

SplitPlan make_fraction_plan(std::span<const SubjectRecord> subjects, std::span<const double> steps,
                             std::uint64_t seed) {
  if (steps.empty()) throw ConfigError("fraction plan needs at least one step");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (!(steps[i] > 0.0 && steps[i] <= 1.0)) throw ConfigError("fractions must lie in (0, 1]");
    if (i > 0 && !(steps[i] > steps[i - 1])) throw ConfigError("fractions must be sorted ascending");
  }

  const Holdout split = stratified_holdout(subjects, seed);
  if (split.held_out.empty()) throw ConfigError("fraction plan needs a scanner with at least 5 subjects");
  std::vector<std::string> order = split.pool;
  Rng rng(derive_seed(seed, 3000));
  rng.shuffle(std::span<std::string>(order));
  const std::size_t v = validation_count(order.size());
  std::vector<std::string> validation(order.begin(), order.begin() + static_cast<long>(v));
  validation = minus(split.pool, minus(split.pool, validation));
  const std::vector<std::string> rest(order.begin() + static_cast<long>(v), order.end());

  SplitPlan plan;
  plan.strategy = SplitStrategy::fraction_ablation;
  plan.seed = seed;
  for (double f : steps) {
    Fold fold;
    fold.name = fraction_name(f);
    fold.fraction = f;
    auto count = static_cast<std::size_t>(std::ceil(f * static_cast<double>(rest.size()) - 1e-9));
    count = std::clamp<std::size_t>(count, rest.empty() ? 0 : 1, rest.size());
    fold.train_ids.assign(rest.begin(), rest.begin() + static_cast<long>(count));
    fold.validation_ids = validation;
    fold.test_ids = split.held_out;
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

}  // namespace mvseg
