#include "fairlab/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "fairlab/errors.hpp"
#include "fairlab/rng.hpp"

namespace fairlab {

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "unknown";
}

GroupedDataset::GroupedDataset(Split split, std::vector<GroupedExample> examples)
    : split_(split), examples_(std::move(examples)) {
  std::sort(examples_.begin(), examples_.end(),
            [](const GroupedExample& l, const GroupedExample& r) { return l.id < r.id; });
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    const GroupedExample& ex = examples_[i];
    if (ex.id != static_cast<std::int64_t>(i)) {
      throw ConfigError("example ids are not dense 0..N-1: expected id " +
                        std::to_string(i) + ", found " + std::to_string(ex.id));
    }
    if (ex.y < 0 || ex.a < 0) {
      throw ConfigError("example " + std::to_string(ex.id) +
                        " has negative class or attribute");
    }
    if (i == 0) {
      feature_dim_ = ex.features.size();
    } else if (ex.features.size() != feature_dim_) {
      throw ConfigError("example " + std::to_string(ex.id) + " has " +
                        std::to_string(ex.features.size()) + " features, expected " +
                        std::to_string(feature_dim_));
    }
    num_classes_ = std::max(num_classes_, ex.y + 1);
    num_attributes_ = std::max(num_attributes_, ex.a + 1);
    group_index_[ex.group()].push_back(ex.id);
  }
}

// ---------------------------------------------------------------------------
// GroupSpec

void GroupSpec::validate() const {
  if (num_classes < 1 || num_attributes < 1) {
    throw ConfigError("group spec needs num_classes >= 1 and num_attributes >= 1");
  }
  if (total_count < 1) {
    throw ConfigError("group spec total_count must be >= 1");
  }
  if (group_fractions.empty()) {
    throw ConfigError("group spec has no group fractions");
  }
  double sum = 0.0;
  for (const auto& [g, frac] : group_fractions) {
    if (g.y < 0 || g.y >= num_classes || g.a < 0 || g.a >= num_attributes) {
      throw ConfigError("group " + g.to_string() + " outside the declared class/attribute ranges");
    }
    if (frac < 0.0) {
      throw ConfigError("group " + g.to_string() + " has negative fraction");
    }
    sum += frac;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("group fractions sum to " + std::to_string(sum) + ", expected 1");
  }
}

std::map<GroupId, std::int64_t> GroupSpec::apportion(std::int64_t count) const {
  validate();
  struct Entry {
    GroupId g;
    std::int64_t base;
    double remainder;
  };
  std::vector<Entry> entries;
  std::int64_t assigned = 0;
  for (const auto& [g, frac] : group_fractions) {
    double exact = frac * static_cast<double>(count);
    auto base = static_cast<std::int64_t>(std::floor(exact));
    entries.push_back({g, base, exact - static_cast<double>(base)});
    assigned += base;
  }
  std::int64_t leftover = count - assigned;
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& l, const Entry& r) { return l.remainder > r.remainder; });
  for (std::int64_t i = 0; i < leftover; ++i) entries[static_cast<std::size_t>(i)].base += 1;

  std::map<GroupId, std::int64_t> counts;
  for (const Entry& e : entries) {
    if (e.base < 1) {
      throw ConfigError("group " + e.g.to_string() + " receives no examples for count " +
                        std::to_string(count) + "; increase the split size");
    }
    counts[e.g] = e.base;
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Synthetic generation

void SyntheticSpec::validate() const {
  groups.validate();
  if (val_count < 1 || test_count < 1) {
    throw ConfigError("val_count and test_count must be >= 1");
  }
  if (core_dim < 1 || spurious_dim < 0 || noise_dim < 0) {
    throw ConfigError("core_dim must be >= 1; spurious_dim and noise_dim must be >= 0");
  }
  if (!(core_separation > 0.0) || !(spurious_separation >= 0.0)) {
    throw ConfigError("core_separation must be > 0 and spurious_separation >= 0");
  }
  if (!(noise_std > 0.0)) {
    throw ConfigError("noise_std must be > 0");
  }
}

namespace {

// Sign pattern of value v at feature position d: the bits of v cycled over
// positions, so every class/attribute gets a distinct +-1 code. Two values
// reduce to the plain -s / +s shift.
double sign_pattern(int v, int d, int num_values) {
  int bits = 1;
  while ((1 << bits) < num_values) ++bits;
  return ((v >> (d % bits)) & 1) ? 1.0 : -1.0;
}

GroupedDataset generate_split(const SyntheticSpec& spec, Split split,
                              const std::map<GroupId, std::int64_t>& counts,
                              std::int64_t total) {
  // Group labels in sorted-group block order, then one seeded permutation;
  // ids are assigned after the permutation and persist with the rows.
  std::vector<GroupId> slots;
  slots.reserve(static_cast<std::size_t>(total));
  for (const auto& [g, n] : counts) {
    for (std::int64_t i = 0; i < n; ++i) slots.push_back(g);
  }
  Rng perm_rng(derive_seed(spec.seed, split_name(split) + "-perm"));
  perm_rng.shuffle(slots);

  Rng feat_rng(derive_seed(spec.seed, split_name(split) + "-features"));
  const int dim = spec.feature_dim();
  std::vector<GroupedExample> examples;
  examples.reserve(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    GroupedExample ex;
    ex.id = static_cast<std::int64_t>(i);
    ex.y = slots[i].y;
    ex.a = slots[i].a;
    ex.features.resize(static_cast<std::size_t>(dim));
    int d = 0;
    for (int c = 0; c < spec.core_dim; ++c, ++d) {
      double mean = spec.core_separation * sign_pattern(ex.y, c, spec.groups.num_classes);
      ex.features[static_cast<std::size_t>(d)] = feat_rng.normal(mean, spec.noise_std);
    }
    for (int s = 0; s < spec.spurious_dim; ++s, ++d) {
      double mean =
          spec.spurious_separation * sign_pattern(ex.a, s, spec.groups.num_attributes);
      ex.features[static_cast<std::size_t>(d)] = feat_rng.normal(mean, spec.noise_std);
    }
    for (int n = 0; n < spec.noise_dim; ++n, ++d) {
      ex.features[static_cast<std::size_t>(d)] = feat_rng.normal(0.0, spec.noise_std);
    }
    examples.push_back(std::move(ex));
  }
  return GroupedDataset(split, std::move(examples));
}

}  // namespace

DatasetBundle generate(const SyntheticSpec& spec) {
  spec.validate();

  // Balanced fractions for val/test over the same group set: worst-group
  // accuracy is only informative when every group has mass.
  GroupSpec balanced = spec.groups;
  const double uniform = 1.0 / static_cast<double>(spec.groups.group_fractions.size());
  for (auto& [g, frac] : balanced.group_fractions) frac = uniform;

  auto train_counts = spec.groups.apportion(spec.groups.total_count);
  balanced.total_count = spec.val_count;
  auto val_counts = balanced.apportion(spec.val_count);
  balanced.total_count = spec.test_count;
  auto test_counts = balanced.apportion(spec.test_count);

  return DatasetBundle{
      generate_split(spec, Split::kTrain, train_counts, spec.groups.total_count),
      generate_split(spec, Split::kVal, val_counts, spec.val_count),
      generate_split(spec, Split::kTest, test_counts, spec.test_count),
  };
}

// ---------------------------------------------------------------------------
// CSV I/O

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

std::int64_t parse_int(const std::string& s, int line_no, const std::string& what) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ParseError("line " + std::to_string(line_no) + ": " + what +
                     " is not an integer: \"" + s + "\"");
  }
  return v;
}

double parse_double(const std::string& s, int line_no, const std::string& what) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ParseError("line " + std::to_string(line_no) + ": " + what +
                     " is not numeric: \"" + s + "\"");
  }
  return v;
}

}  // namespace

GroupedDataset load_csv(const std::filesystem::path& path, Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open dataset " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw ParseError("line 1: missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  auto header = split_line(line);
  if (header.size() < 4) {
    throw ParseError("line 1: header must be id,y,a,f0..f{d-1}; got " +
                     std::to_string(header.size()) + " columns");
  }
  const char* fixed[] = {"id", "y", "a"};
  for (std::size_t i = 0; i < 3; ++i) {
    if (header[i] != fixed[i]) {
      throw ParseError("line 1: expected column \"" + std::string(fixed[i]) +
                       "\" at position " + std::to_string(i) + ", got \"" + header[i] + "\"");
    }
  }
  const std::size_t dim = header.size() - 3;
  for (std::size_t i = 0; i < dim; ++i) {
    std::string expected = "f" + std::to_string(i);
    if (header[i + 3] != expected) {
      throw ParseError("line 1: expected feature column \"" + expected + "\", got \"" +
                       header[i + 3] + "\"");
    }
  }

  std::vector<GroupedExample> examples;
  std::vector<char> seen;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_line(line);
    if (fields.size() != header.size()) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    }
    GroupedExample ex;
    ex.id = parse_int(fields[0], line_no, "id");
    ex.y = static_cast<int>(parse_int(fields[1], line_no, "y"));
    ex.a = static_cast<int>(parse_int(fields[2], line_no, "a"));
    if (ex.id < 0) {
      throw ParseError("line " + std::to_string(line_no) + ": negative id " +
                       std::to_string(ex.id));
    }
    if (static_cast<std::size_t>(ex.id) >= seen.size()) {
      seen.resize(static_cast<std::size_t>(ex.id) + 1, 0);
    }
    if (seen[static_cast<std::size_t>(ex.id)]) {
      throw ParseError("line " + std::to_string(line_no) + ": duplicate id " +
                       std::to_string(ex.id));
    }
    seen[static_cast<std::size_t>(ex.id)] = 1;
    ex.features.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      ex.features[i] = parse_double(fields[i + 3], line_no, "feature f" + std::to_string(i));
    }
    examples.push_back(std::move(ex));
  }
  if (examples.empty()) throw ParseError("dataset " + path.string() + " has no rows");
  if (seen.size() != examples.size()) {
    for (std::size_t i = 0; i < seen.size(); ++i) {
      if (!seen[i]) {
        throw ParseError("ids are not dense 0..N-1: missing id " + std::to_string(i));
      }
    }
  }
  try {
    return GroupedDataset(split, std::move(examples));
  } catch (const ConfigError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_csv(const GroupedDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "id,y,a";
  for (std::size_t i = 0; i < dataset.feature_dim(); ++i) out << ",f" << i;
  out << "\n";
  for (const GroupedExample& ex : dataset.examples()) {
    out << ex.id << ',' << ex.y << ',' << ex.a;
    for (double f : ex.features) out << ',' << format_double(f);
    out << "\n";
  }
  if (!out) throw Error("failed writing dataset to " + path.string());
}

std::vector<GroupStat> group_stats(const GroupedDataset& dataset) {
  if (dataset.size() == 0) throw EvalError("group_stats on an empty dataset");
  std::vector<GroupStat> stats;
  const double n = static_cast<double>(dataset.size());
  for (const auto& [g, ids] : dataset.group_index()) {
    GroupStat s;
    s.group = g;
    s.count = static_cast<std::int64_t>(ids.size());
    s.fraction = static_cast<double>(ids.size()) / n;
    stats.push_back(s);
  }
  return stats;
}

void save_group_stats_csv(const std::vector<GroupStat>& stats,
                          const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "group_y,group_a,count,fraction\n";
  for (const GroupStat& s : stats) {
    out << s.group.y << ',' << s.group.a << ',' << s.count << ','
        << format_double(s.fraction) << "\n";
  }
  if (!out) throw Error("failed writing group stats to " + path.string());
}

// ---------------------------------------------------------------------------
// Spec JSON

SyntheticSpec synthetic_spec_from_json_string(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("synthetic spec is not valid JSON: ") + e.what());
  }
  SyntheticSpec spec;
  try {
    spec.groups.num_classes = doc.at("num_classes").get<int>();
    spec.groups.num_attributes = doc.at("num_attributes").get<int>();
    for (const auto& entry : doc.at("group_fractions")) {
      GroupId g{entry.at("y").get<int>(), entry.at("a").get<int>()};
      if (spec.groups.group_fractions.count(g)) {
        throw ParseError("group " + g.to_string() + " listed twice in group_fractions");
      }
      spec.groups.group_fractions[g] = entry.at("fraction").get<double>();
    }
    spec.groups.total_count = doc.at("train_count").get<std::int64_t>();
    spec.val_count = doc.at("val_count").get<std::int64_t>();
    spec.test_count = doc.at("test_count").get<std::int64_t>();
    spec.core_dim = doc.at("core_dim").get<int>();
    spec.spurious_dim = doc.at("spurious_dim").get<int>();
    spec.noise_dim = doc.at("noise_dim").get<int>();
    spec.core_separation = doc.at("core_separation").get<double>();
    spec.spurious_separation = doc.at("spurious_separation").get<double>();
    spec.noise_std = doc.at("noise_std").get<double>();
    spec.seed = doc.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("synthetic spec schema mismatch: ") + e.what());
  }
  spec.validate();
  return spec;
}

SyntheticSpec synthetic_spec_from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open synthetic spec " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return synthetic_spec_from_json_string(buf.str());
}

}  // namespace fairlab
