#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvseg/manifest.hpp"

namespace mvseg {

enum class SplitStrategy { stratified_kfold, leave_one_scanner_out, fraction_ablation, custom };

std::string_view to_string(SplitStrategy strategy);

struct Fold {
  std::string name;
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;  // epoch selection
  std::vector<std::string> test_ids;
  double fraction = 1.0;  // training fraction (fraction_ablation only)
};

struct SplitPlan {
  std::vector<Fold> folds;
  SplitStrategy strategy = SplitStrategy::custom;
  std::uint64_t seed = 0;

  /// Throws ConfigError unless train/validation/test are pairwise disjoint
  /// within every fold.
  void validate() const;

  nlohmann::json to_json() const;
  static SplitPlan from_json(const nlohmann::json& doc);
};

/// Share of a fold's training pool held back for epoch selection (at least
/// one subject).
inline constexpr double kValidationFraction = 0.10;

std::size_t validation_count(std::size_t pool_size);

/// Per scanner (in sorted scanner-id order) the subjects are shuffled with
/// one seeded Rng and cut into k near-equal chunks; fold i tests on chunk i
/// of every scanner. The remaining subjects form the training pool, from
/// which validation_count() subjects are drawn for epoch selection.
SplitPlan make_stratified_kfold(std::span<const SubjectRecord> subjects, int k, std::uint64_t seed);

/// One fold per scanner: that scanner's subjects are the test set.
SplitPlan make_loso(std::span<const SubjectRecord> subjects, std::uint64_t seed = 0);

struct Holdout {
  std::vector<std::string> pool;
  std::vector<std::string> held_out;
};

/// Stratified 4:1 split: floor(n_s / 5) subjects of every scanner are held
/// out (181 subjects at 15/46/103/17 per scanner give 146 / 35).
Holdout stratified_holdout(std::span<const SubjectRecord> subjects, std::uint64_t seed);

/// Training-set-size study on one fixed stratified 4:1 split. The held-out
/// part is every fold's test set; a fixed validation carve-out is taken from
/// the pool, and fold i trains on the first ceil(f_i * |rest|) subjects of a
/// fixed shuffle of the rest, so larger fractions contain smaller ones.
SplitPlan make_fraction_plan(std::span<const SubjectRecord> subjects, std::span<const double> steps,
                             std::uint64_t seed);

}  // namespace mvseg
