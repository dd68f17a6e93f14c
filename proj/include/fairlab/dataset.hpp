#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace fairlab {

/// A (class, attribute) pair. Minority groups are the rare combinations
/// where the training-time correlation between y and a fails.
struct GroupId {
  int y = 0;
  int a = 0;
  auto operator<=>(const GroupId&) const = default;
  std::string to_string() const {
    return "(y=" + std::to_string(y) + ",a=" + std::to_string(a) + ")";
  }
};

struct GroupedExample {
  std::int64_t id = 0;
  int y = 0;
  int a = 0;
  std::vector<double> features;
  GroupId group() const { return {y, a}; }
};

enum class Split { kTrain, kVal, kTest };

std::string split_name(Split s);

/// Immutable ordered example list with a group index. Example ids are
/// 0..N-1 in canonical order and stay stable across reloads, so shuffling
/// can never change fair-dropout allocations.
class GroupedDataset {
 public:
  GroupedDataset(Split split, std::vector<GroupedExample> examples);

  const std::vector<GroupedExample>& examples() const { return examples_; }
  const GroupedExample& example(std::int64_t id) const { return examples_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return examples_.size(); }
  std::size_t feature_dim() const { return feature_dim_; }
  int num_classes() const { return num_classes_; }
  int num_attributes() const { return num_attributes_; }
  Split split() const { return split_; }

  /// Example ids per group, ascending; every observed group has an entry.
  const std::map<GroupId, std::vector<std::int64_t>>& group_index() const {
    return group_index_;
  }

 private:
  Split split_;
  std::vector<GroupedExample> examples_;
  std::map<GroupId, std::vector<std::int64_t>> group_index_;
  std::size_t feature_dim_ = 0;
  int num_classes_ = 0;
  int num_attributes_ = 0;
};

/// Group layout of a split: fractions over (y, a) pairs summing to 1,
/// realized as exact integer counts by largest-remainder apportionment.
struct GroupSpec {
  int num_classes = 0;
  int num_attributes = 0;
  std::map<GroupId, double> group_fractions;
  std::int64_t total_count = 0;

  void validate() const;

  /// Largest-remainder apportionment of `count` examples over the fractions;
  /// counts sum to `count` exactly. Every listed group must receive at least
  /// one example.
  std::map<GroupId, std::int64_t> apportion(std::int64_t count) const;
};

/// Gaussian block design: a core block whose mean depends on the class, a
/// spurious block whose mean depends on the attribute, and a pure-noise
/// block. The train split follows the spec fractions; val and test are
/// group-balanced so the spurious correlation breaks at evaluation time.
struct SyntheticSpec {
  GroupSpec groups;             // train-split fractions; total_count = train size
  std::int64_t val_count = 0;
  std::int64_t test_count = 0;
  int core_dim = 0;
  int spurious_dim = 0;
  int noise_dim = 0;
  double core_separation = 0.0;      // mean shift per class
  double spurious_separation = 0.0;  // mean shift per attribute
  double noise_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  int feature_dim() const { return core_dim + spurious_dim + noise_dim; }
};

struct DatasetBundle {
  GroupedDataset train;
  GroupedDataset val;
  GroupedDataset test;
};

/// Pure function of the spec, seed included.
DatasetBundle generate(const SyntheticSpec& spec);

/// CSV with header id,y,a,f0..f{d-1}; ids must be a dense permutation of
/// 0..N-1 (rows are sorted by id on load). Parse errors carry line numbers.
GroupedDataset load_csv(const std::filesystem::path& path, Split split = Split::kTrain);
void save_csv(const GroupedDataset& dataset, const std::filesystem::path& path);

struct GroupStat {
  GroupId group;
  std::int64_t count = 0;
  double fraction = 0.0;
};

/// Per-group counts and fractions; counts sum to N, fractions to 1.
std::vector<GroupStat> group_stats(const GroupedDataset& dataset);
void save_group_stats_csv(const std::vector<GroupStat>& stats,
                          const std::filesystem::path& path);

/// JSON config loader for SyntheticSpec (see docs/schemas.md for the format).
SyntheticSpec synthetic_spec_from_json_file(const std::filesystem::path& path);
SyntheticSpec synthetic_spec_from_json_string(const std::string& text);

}  // namespace fairlab
