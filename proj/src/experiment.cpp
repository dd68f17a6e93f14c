#include "fairlab/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "fairlab/errors.hpp"
#include "fairlab/rng.hpp"

namespace fairlab {

std::uint64_t ExperimentConfig::data_seed() const { return derive_seed(seed, "data"); }
std::uint64_t ExperimentConfig::init_seed() const { return derive_seed(seed, "init"); }
std::uint64_t ExperimentConfig::shuffle_seed() const { return derive_seed(seed, "shuffle"); }
std::uint64_t ExperimentConfig::allocation_seed() const {
  return derive_seed(seed, "allocation");
}
std::uint64_t ExperimentConfig::probe_seed() const { return derive_seed(seed, "probe"); }

void ExperimentConfig::resolve(const GroupedDataset& train_split) {
  if (model.input_dim == 0) model.input_dim = static_cast<int>(train_split.feature_dim());
  if (model.num_classes == 0) model.num_classes = train_split.num_classes();
  model.allocation_seed = allocation_seed();
  train.seed = shuffle_seed();
  model.validate();
  train.validate();
}

namespace {

using nlohmann::json;

void parse_model(const json& doc, ModelConfig& model) {
  model.input_dim = doc.value("input_dim", 0);
  model.num_classes = doc.value("num_classes", 0);
  model.hidden_widths = doc.at("hidden_widths").get<std::vector<int>>();
  model.fd_position = doc.value("fd_position", std::string("none"));
  model.projection_width = doc.value("projection_width", 0);
  model.p_gen = doc.value("p_gen", 1.0);
  model.p_mem = doc.value("p_mem", 0.0);
}

void parse_train(const json& doc, TrainConfig& train) {
  train.learning_rate = doc.at("learning_rate").get<double>();
  train.weight_decay = doc.value("weight_decay", 0.0);
  train.epochs = doc.at("epochs").get<int>();
  train.batch_size = doc.value("batch_size", 32);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  return out;
}

void finish_out(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw Error("failed writing " + path.string());
}

json metrics_to_json(const Metrics& m) {
  json groups = json::array();
  for (const auto& [g, acc] : m.per_group_accuracy) {
    groups.push_back({{"y", g.y}, {"a", g.a}, {"accuracy", acc}});
  }
  json classes = json::array();
  for (const auto& [y, acc] : m.per_class_accuracy) {
    classes.push_back({{"y", y}, {"accuracy", acc}});
  }
  return json{{"average_accuracy", m.average_accuracy},
              {"worst_group_accuracy", m.worst_group_accuracy},
              {"worst_class_accuracy", m.worst_class_accuracy},
              {"average_loss", m.average_loss},
              {"per_group_accuracy", groups},
              {"per_class_accuracy", classes}};
}

double max_gap(const EpochRecord& rec) {
  double gap = -std::numeric_limits<double>::infinity();
  for (const auto& [g, v] : rec.per_group_gap) gap = std::max(gap, v);
  return rec.per_group_gap.empty() ? std::numeric_limits<double>::quiet_NaN() : gap;
}

}  // namespace

ExperimentConfig experiment_from_json_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("experiment config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    if (doc.contains("data")) {
      cfg.data = synthetic_spec_from_json_string(doc.at("data").dump());
    }
    parse_model(doc.at("model"), cfg.model);
    parse_train(doc.at("train"), cfg.train);
    cfg.class_reweight = doc.value("class_reweight", false);
    cfg.seed = doc.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw ParseError(std::string("experiment config schema mismatch: ") + e.what());
  }
  if (cfg.data.has_value()) {
    // The data spec inherits the experiment's data subseed unless pinned.
    if (!doc.at("data").contains("seed")) cfg.data->seed = cfg.data_seed();
  }
  return cfg;
}

ExperimentConfig experiment_from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open experiment config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return experiment_from_json_string(buf.str());
}

SweepExperiment sweep_experiment_from_json_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("sweep config is not valid JSON: ") + e.what());
  }
  SweepExperiment se;
  try {
    if (doc.contains("data")) {
      se.base.data = synthetic_spec_from_json_string(doc.at("data").dump());
    }
    parse_model(doc.at("model"), se.base.model);
    const json& tr = doc.at("train");
    se.base.train.learning_rate = tr.value("learning_rate", 0.1);
    se.base.train.weight_decay = tr.value("weight_decay", 0.0);
    se.base.train.epochs = tr.at("epochs").get<int>();
    se.base.train.batch_size = tr.value("batch_size", 32);
    se.base.class_reweight = doc.value("class_reweight", false);
    se.base.seed = doc.value("seed", std::uint64_t{0});
    if (se.base.data.has_value() && !doc.at("data").contains("seed")) {
      se.base.data->seed = se.base.data_seed();
    }

    const json& sw = doc.at("sweep");
    SweepPoint base_point;
    base_point.p_gen = se.base.model.p_gen;
    base_point.p_mem = se.base.model.p_mem;
    base_point.learning_rate = se.base.train.learning_rate;
    base_point.weight_decay = se.base.train.weight_decay;
    base_point.position = se.base.model.fd_position;

    if (sw.contains("points")) {
      for (const json& p : sw.at("points")) {
        SweepPoint pt = base_point;
        pt.p_gen = p.value("p_gen", pt.p_gen);
        pt.p_mem = p.value("p_mem", pt.p_mem);
        pt.learning_rate = p.value("learning_rate", pt.learning_rate);
        pt.weight_decay = p.value("weight_decay", pt.weight_decay);
        pt.position = p.value("position", pt.position);
        se.points.push_back(pt);
      }
    }
    if (sw.contains("grid")) {
      const json& grid = sw.at("grid");
      auto axis = [&](const char* name, double fallback) {
        return grid.contains(name) ? grid.at(name).get<std::vector<double>>()
                                   : std::vector<double>{fallback};
      };
      std::vector<std::string> positions =
          grid.contains("position") ? grid.at("position").get<std::vector<std::string>>()
                                    : std::vector<std::string>{base_point.position};
      auto p_gens = axis("p_gen", base_point.p_gen);
      auto p_mems = axis("p_mem", base_point.p_mem);
      auto lrs = axis("learning_rate", base_point.learning_rate);
      auto wds = axis("weight_decay", base_point.weight_decay);
      for (const std::string& pos : positions) {
        for (double pg : p_gens) {
          for (double pm : p_mems) {
            for (double lr : lrs) {
              for (double wd : wds) {
                se.points.push_back(SweepPoint{pg, pm, lr, wd, pos});
              }
            }
          }
        }
      }
    }
    se.budget = sw.value("budget", static_cast<int>(se.points.size()));
  } catch (const json::exception& e) {
    throw ParseError(std::string("sweep config schema mismatch: ") + e.what());
  }
  if (se.points.empty()) throw ParseError("sweep config lists no points");
  return se;
}

SweepExperiment sweep_experiment_from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open sweep config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return sweep_experiment_from_json_string(buf.str());
}

void save_history_csv(const History& history, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "epoch,train_loss,train_avg,train_wga,train_wca,"
         "train_avg_test_mode,train_wga_test_mode,"
         "test_avg_train_mode,train_mode_wga,"
         "test_avg,test_mode_wga,test_wca,max_group_gap\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const EpochRecord& rec : history.epochs) {
    out << rec.epoch << ',' << fmt(rec.train_loss) << ','
        << fmt(rec.train_split_train_mode.average_accuracy) << ','
        << fmt(rec.train_split_train_mode.worst_group_accuracy) << ','
        << fmt(rec.train_split_train_mode.worst_class_accuracy) << ','
        << fmt(rec.train_split_test_mode.average_accuracy) << ','
        << fmt(rec.train_split_test_mode.worst_group_accuracy) << ','
        << fmt(rec.has_test ? rec.test_split_train_mode.average_accuracy : nan) << ','
        << fmt(rec.has_test ? rec.test_split_train_mode.worst_group_accuracy : nan) << ','
        << fmt(rec.has_test ? rec.test_split_test_mode.average_accuracy : nan) << ','
        << fmt(rec.has_test ? rec.test_split_test_mode.worst_group_accuracy : nan) << ','
        << fmt(rec.has_test ? rec.test_split_test_mode.worst_class_accuracy : nan) << ','
        << fmt(max_gap(rec)) << "\n";
  }
  finish_out(out, path);
}

void save_history_json(const History& history, const std::filesystem::path& path) {
  json epochs = json::array();
  for (const EpochRecord& rec : history.epochs) {
    json gaps = json::array();
    for (const auto& [g, v] : rec.per_group_gap) {
      gaps.push_back({{"y", g.y}, {"a", g.a}, {"gap", v}});
    }
    json entry{{"epoch", rec.epoch},
               {"train_loss", rec.train_loss},
               {"train_split", {{"train_mode", metrics_to_json(rec.train_split_train_mode)},
                                {"test_mode", metrics_to_json(rec.train_split_test_mode)}}},
               {"per_group_gap", gaps}};
    if (rec.has_test) {
      entry["test_split"] = {{"train_mode", metrics_to_json(rec.test_split_train_mode)},
                             {"test_mode", metrics_to_json(rec.test_split_test_mode)}};
    }
    epochs.push_back(std::move(entry));
  }
  auto out = open_out(path);
  out << json{{"epochs", std::move(epochs)}}.dump(2) << "\n";
  finish_out(out, path);
}

void save_sweep_csv(const SweepResult& result, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "rank,position,p_gen,p_mem,learning_rate,weight_decay,status,"
         "val_worst_class,val_avg,val_wga,test_wga,test_avg,order\n";
  int rank = 1;
  for (const SweepRow& row : result.rows) {
    std::string status = row.status;
    for (char& c : status) {
      if (c == ',' || c == '\n' || c == '\r') c = ';';
    }
    out << rank++ << ',' << row.point.position << ',' << fmt(row.point.p_gen) << ','
        << fmt(row.point.p_mem) << ',' << fmt(row.point.learning_rate) << ','
        << fmt(row.point.weight_decay) << ',' << status << ','
        << fmt(row.val_worst_class) << ',' << fmt(row.val_avg) << ',' << fmt(row.val_wga)
        << ',' << fmt(row.test_wga) << ',' << fmt(row.test_avg) << ',' << row.order << "\n";
  }
  finish_out(out, path);
}

void save_sweep_json(const SweepResult& result, const std::filesystem::path& path) {
  json rows = json::array();
  for (const SweepRow& row : result.rows) {
    rows.push_back({{"position", row.point.position},
                    {"p_gen", row.point.p_gen},
                    {"p_mem", row.point.p_mem},
                    {"learning_rate", row.point.learning_rate},
                    {"weight_decay", row.point.weight_decay},
                    {"status", row.status},
                    {"val_worst_class", row.val_worst_class},
                    {"val_avg", row.val_avg},
                    {"val_wga", row.val_wga},
                    {"test_wga", row.test_wga},
                    {"test_avg", row.test_avg},
                    {"order", row.order}});
  }
  auto out = open_out(path);
  out << json{{"rows", std::move(rows)}, {"best", result.best}}.dump(2) << "\n";
  finish_out(out, path);
}

void save_probe_csv(const ProbeReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "example_id,group_y,group_a,n_removed,flipped,"
         "train_wga_after_drop,test_wga_after_drop\n";
  for (const ProbeRow& row : report.rows) {
    out << row.example_id << ',' << row.group_y << ',' << row.group_a << ','
        << row.n_removed << ',' << (row.flipped ? 1 : 0) << ','
        << fmt(row.train_wga_after_drop) << ',' << fmt(row.test_wga_after_drop) << "\n";
  }
  finish_out(out, path);
}

void save_probe_summary_json(const ProbeReport& report, const std::filesystem::path& path) {
  json groups = json::array();
  for (const GroupProbeStat& s : report.per_group) {
    groups.push_back({{"y", s.group.y},
                      {"a", s.group.a},
                      {"count", s.count},
                      {"n_removed_q1", s.q1},
                      {"n_removed_median", s.median},
                      {"n_removed_q3", s.q3},
                      {"n_removed_mean", s.mean},
                      {"flipped_fraction", s.flipped_fraction}});
  }
  auto out = open_out(path);
  out << json{{"baseline_train_wga", report.baseline_train_wga},
              {"baseline_test_wga", report.baseline_test_wga},
              {"improved_test_fraction", report.improved_test_fraction},
              {"per_group", std::move(groups)},
              {"probed", report.rows.size()}}
             .dump(2)
      << "\n";
  finish_out(out, path);
}

}  // namespace fairlab
