#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fairlab/dataset.hpp"
#include "fairlab/errors.hpp"
#include "fairlab/experiment.hpp"
#include "fairlab/memprobe.hpp"
#include "fairlab/metrics.hpp"
#include "fairlab/model.hpp"
#include "fairlab/model_config.hpp"
#include "fairlab/rng.hpp"
#include "fairlab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Relative --out paths land under FAIRLAB_OUT_ROOT when it is set, so batch
// jobs can redirect every run without touching their command lines.
fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  if (p.is_relative()) {
    if (const char* root = std::getenv("FAIRLAB_OUT_ROOT")) p = fs::path(root) / p;
  }
  fs::create_directories(p);
  return p;
}

// The only artifact that ever carries a timestamp; everything else is a pure
// function of config and seed so reruns are diffable.
void write_run_meta(const fs::path& dir, const std::string& command, json extra) {
  char stamp[32] = {0};
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", &tm);
  extra["command"] = command;
  extra["timestamp"] = stamp;
  std::ofstream out(dir / "run_meta.json", std::ios::binary);
  if (!out) throw fairlab::Error("cannot write " + (dir / "run_meta.json").string());
  out << extra.dump(2) << "\n";
}

fairlab::DatasetBundle load_bundle(const fs::path& dir) {
  return fairlab::DatasetBundle{
      fairlab::load_csv(dir / "train.csv", fairlab::Split::kTrain),
      fairlab::load_csv(dir / "val.csv", fairlab::Split::kVal),
      fairlab::load_csv(dir / "test.csv", fairlab::Split::kTest),
  };
}

struct GenDataOpts {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int run_gen_data(const GenDataOpts& opts) {
  auto spec = fairlab::synthetic_spec_from_json_file(opts.config);
  if (opts.seed_set) spec.seed = opts.seed;
  auto bundle = fairlab::generate(spec);

  fs::path out = resolve_out(opts.out);
  fairlab::save_csv(bundle.train, out / "train.csv");
  fairlab::save_csv(bundle.val, out / "val.csv");
  fairlab::save_csv(bundle.test, out / "test.csv");
  fairlab::save_group_stats_csv(fairlab::group_stats(bundle.train), out / "group_stats.csv");
  fairlab::save_group_stats_csv(fairlab::group_stats(bundle.val),
                                out / "group_stats_val.csv");
  fairlab::save_group_stats_csv(fairlab::group_stats(bundle.test),
                                out / "group_stats_test.csv");
  write_run_meta(out, "gen-data", json{{"seed", spec.seed}, {"config", opts.config}});

  std::cout << "wrote " << bundle.train.size() << " train / " << bundle.val.size()
            << " val / " << bundle.test.size() << " test examples to " << out.string()
            << "\n";
  for (const auto& stat : fairlab::group_stats(bundle.train)) {
    std::cout << "  train group " << stat.group.to_string() << ": " << stat.count << " ("
              << stat.fraction * 100.0 << "%)\n";
  }
  return 0;
}

struct TrainOpts {
  std::string config;
  std::string out;
  std::string data_dir;
};

int run_train(const TrainOpts& opts) {
  auto cfg = fairlab::experiment_from_json_file(opts.config);

  fairlab::DatasetBundle bundle = [&] {
    if (!opts.data_dir.empty()) return load_bundle(opts.data_dir);
    if (!cfg.data.has_value()) {
      throw fairlab::ConfigError(
          "no data source: pass --data-dir or add a \"data\" block to the config");
    }
    return fairlab::generate(*cfg.data);
  }();

  cfg.resolve(bundle.train);
  fairlab::Model model = fairlab::build_model(cfg.model, cfg.init_seed());
  fairlab::History history;
  try {
    history = fairlab::train(model, bundle.train, &bundle.test, cfg.train,
                             cfg.class_reweight);
  } catch (const fairlab::TrainingDivergedWithHistory& e) {
    // Keep whatever epochs completed; the half-updated model is not saved.
    fs::path out = resolve_out(opts.out);
    fairlab::save_history_csv(e.partial, out / "history.csv");
    fairlab::save_history_json(e.partial, out / "history.json");
    write_run_meta(out, "train",
                   json{{"seed", cfg.seed},
                        {"config", opts.config},
                        {"diverged", true},
                        {"completed_epochs", e.partial.epochs.size()}});
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << "partial history (" << e.partial.epochs.size() << " epochs) in "
              << out.string() << "\n";
    return 1;
  }

  fs::path out = resolve_out(opts.out);
  fairlab::save_checkpoint(model, out / "checkpoint.json");
  fairlab::save_history_csv(history, out / "history.csv");
  fairlab::save_history_json(history, out / "history.json");
  write_run_meta(out, "train", json{{"seed", cfg.seed}, {"config", opts.config}});

  if (!history.epochs.empty()) {
    const auto& last = history.epochs.back();
    std::cout << "epoch " << last.epoch << ": train loss " << last.train_loss
              << ", test avg " << last.test_split_test_mode.average_accuracy
              << ", test worst-group " << last.test_split_test_mode.worst_group_accuracy
              << " (test mode)\n";
  }
  std::cout << "artifacts in " << out.string() << "\n";
  return 0;
}

struct ProbeOpts {
  std::string checkpoint;
  std::string data_dir;
  std::string out;
  std::vector<std::int64_t> ids;
  int per_group = 0;
  int max_iters = 20;
  int batch_size = 64;
  std::uint64_t seed = 0;
  std::string mode = "train";
};

int run_probe(const ProbeOpts& opts) {
  fairlab::Model model = fairlab::load_checkpoint(opts.checkpoint);
  auto train_ds = fairlab::load_csv(fs::path(opts.data_dir) / "train.csv",
                                    fairlab::Split::kTrain);
  auto test_ds =
      fairlab::load_csv(fs::path(opts.data_dir) / "test.csv", fairlab::Split::kTest);

  std::vector<std::int64_t> targets = opts.ids;
  if (opts.per_group > 0) {
    for (const auto& [group, ids] : train_ds.group_index()) {
      std::vector<std::int64_t> pool = ids;
      fairlab::Rng rng(
          fairlab::derive_seed(opts.seed, "probe-targets-" + group.to_string()));
      rng.shuffle(pool);
      const auto take = std::min<std::size_t>(pool.size(),
                                              static_cast<std::size_t>(opts.per_group));
      targets.insert(targets.end(), pool.begin(),
                     pool.begin() + static_cast<std::ptrdiff_t>(take));
    }
  }
  if (targets.empty()) {
    throw fairlab::ConfigError("no probe targets: pass --ids or --per-group");
  }

  fairlab::ProbeConfig pc;
  pc.max_iters = opts.max_iters;
  pc.reference_batch_size = opts.batch_size;
  pc.seed = fairlab::derive_seed(opts.seed, "probe");
  if (opts.mode == "train") {
    pc.mode = fairlab::Mode::kTrain;
  } else if (opts.mode == "test") {
    pc.mode = fairlab::Mode::kTest;
  } else {
    throw fairlab::ConfigError("--mode must be train or test");
  }

  fairlab::ProbeReport report = fairlab::probe_report(model, train_ds, test_ds, targets, pc);

  fs::path out = resolve_out(opts.out);
  fairlab::save_probe_csv(report, out / "probe_report.csv");
  fairlab::save_probe_summary_json(report, out / "probe_summary.json");
  write_run_meta(out, "probe",
                 json{{"seed", opts.seed},
                      {"checkpoint", opts.checkpoint},
                      {"targets", report.rows.size()}});

  std::cout << "probed " << report.rows.size() << " examples; baseline test-mode worst-group "
            << report.baseline_test_wga << ", improved-or-equal fraction "
            << report.improved_test_fraction << "\n";
  for (const auto& stat : report.per_group) {
    std::cout << "  group " << stat.group.to_string() << ": median removed " << stat.median
              << " (q1 " << stat.q1 << ", q3 " << stat.q3 << ", n " << stat.count << ")\n";
  }
  std::cout << "artifacts in " << out.string() << "\n";
  return 0;
}

struct SweepOpts {
  std::string config;
  std::string out;
  std::string data_dir;
};

int run_sweep(const SweepOpts& opts) {
  auto se = fairlab::sweep_experiment_from_json_file(opts.config);

  fairlab::DatasetBundle bundle = [&] {
    if (!opts.data_dir.empty()) return load_bundle(opts.data_dir);
    if (!se.base.data.has_value()) {
      throw fairlab::ConfigError(
          "no data source: pass --data-dir or add a \"data\" block to the config");
    }
    return fairlab::generate(*se.base.data);
  }();

  se.base.resolve(bundle.train);
  fairlab::SweepResult result =
      fairlab::sweep(se.base.model, bundle, se.base.train, se.points, se.budget,
                     se.base.class_reweight, se.base.seed);

  fs::path out = resolve_out(opts.out);
  fairlab::save_sweep_csv(result, out / "sweep.csv");
  fairlab::save_sweep_json(result, out / "sweep.json");
  write_run_meta(out, "sweep",
                 json{{"seed", se.base.seed},
                      {"config", opts.config},
                      {"points", result.rows.size()}});

  if (result.best >= 0) {
    const auto& best = result.rows[static_cast<std::size_t>(result.best)];
    std::cout << "best by validation worst-class accuracy: position " << best.point.position
              << ", p_gen " << best.point.p_gen << ", p_mem " << best.point.p_mem << ", lr "
              << best.point.learning_rate << ", wd " << best.point.weight_decay
              << " (val worst-class " << best.val_worst_class << ", test worst-group "
              << best.test_wga << ")\n";
  } else {
    std::cout << "no configuration trained successfully\n";
  }
  std::cout << "artifacts in " << out.string() << "\n";
  return result.best >= 0 ? 0 : 1;
}

struct ReportOpts {
  std::string run;
};

int run_report(const ReportOpts& opts) {
  fs::path dir(opts.run);
  bool found = false;
  std::ostringstream text;

  fs::path history = dir / "history.csv";
  if (fs::exists(history)) {
    found = true;
    std::ifstream in(history);
    std::string line;
    std::string header;
    std::string last;
    while (std::getline(in, line)) {
      if (header.empty()) {
        header = line;
      } else if (!line.empty()) {
        last = line;
      }
    }
    text << "history: " << history.string() << "\n";
    if (!last.empty()) {
      text << "  final epoch: " << last << "\n  columns:     " << header << "\n";
    }
  }

  fs::path sweep = dir / "sweep.json";
  if (fs::exists(sweep)) {
    found = true;
    std::ifstream in(sweep);
    json doc = json::parse(in);
    text << "sweep: " << doc.at("rows").size() << " rows\n";
    int best = doc.at("best").get<int>();
    if (best >= 0) {
      const json& row = doc.at("rows").at(static_cast<std::size_t>(best));
      text << "  best: position " << row.at("position").get<std::string>() << ", p_gen "
           << row.at("p_gen").get<double>() << ", p_mem " << row.at("p_mem").get<double>()
           << ", lr " << row.at("learning_rate").get<double>() << ", wd "
           << row.at("weight_decay").get<double>() << ", val worst-class "
           << row.at("val_worst_class").get<double>() << ", test worst-group "
           << row.at("test_wga").get<double>() << "\n";
    }
  }

  fs::path probe = dir / "probe_summary.json";
  if (fs::exists(probe)) {
    found = true;
    std::ifstream in(probe);
    json doc = json::parse(in);
    text << "probe: " << doc.at("probed").get<std::size_t>()
         << " examples, baseline test worst-group "
         << doc.at("baseline_test_wga").get<double>() << ", improved-or-equal fraction "
         << doc.at("improved_test_fraction").get<double>() << "\n";
    for (const json& g : doc.at("per_group")) {
      text << "  group (y=" << g.at("y").get<int>() << ", a=" << g.at("a").get<int>()
           << "): median removed " << g.at("n_removed_median").get<double>() << " over "
           << g.at("count").get<std::int64_t>() << " probes\n";
    }
  }

  if (!found) {
    std::cerr << "error: no history.csv, sweep.json, or probe_summary.json under "
              << dir.string() << "\n";
    return 1;
  }
  std::cout << text.str();
  std::ofstream out(dir / "report.txt", std::ios::binary);
  if (!out) throw fairlab::Error("cannot write " + (dir / "report.txt").string());
  out << text.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training laboratory for example-tied dropout on group-structured data"};
  app.require_subcommand(1);

  GenDataOpts gen_opts;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic grouped dataset");
  gen->add_option("--config", gen_opts.config, "Synthetic data spec (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  gen->add_option("--out", gen_opts.out, "Output directory")->required();
  gen->add_option("--seed", gen_opts.seed, "Override the spec's seed")
      ->each([&](const std::string&) { gen_opts.seed_set = true; });

  TrainOpts train_opts;
  auto* train = app.add_subcommand("train", "Train one model and record its history");
  train->add_option("--config", train_opts.config, "Experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option("--out", train_opts.out, "Output directory")->required();
  train->add_option("--data-dir", train_opts.data_dir,
                    "Directory with train/val/test.csv (else the config's data block)");

  ProbeOpts probe_opts;
  auto* probe = app.add_subcommand("probe", "Locate the neurons predictions depend on");
  probe->add_option("--checkpoint", probe_opts.checkpoint, "Model checkpoint (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  probe->add_option("--data-dir", probe_opts.data_dir, "Directory with train/test.csv")
      ->required();
  probe->add_option("--out", probe_opts.out, "Output directory")->required();
  probe->add_option("--ids", probe_opts.ids, "Explicit training example ids to probe");
  probe->add_option("--per-group", probe_opts.per_group,
                    "Probe this many seeded-sampled examples per group");
  probe->add_option("--max-iters", probe_opts.max_iters, "Greedy removal budget");
  probe->add_option("--batch-size", probe_opts.batch_size, "Reference batch size");
  probe->add_option("--seed", probe_opts.seed, "Sampling seed");
  probe->add_option("--mode", probe_opts.mode, "Forward mode: train or test");

  SweepOpts sweep_opts;
  auto* sweep = app.add_subcommand("sweep", "Train a grid of configs, rank label-free");
  sweep->add_option("--config", sweep_opts.config, "Sweep config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  sweep->add_option("--out", sweep_opts.out, "Output directory")->required();
  sweep->add_option("--data-dir", sweep_opts.data_dir,
                    "Directory with train/val/test.csv (else the config's data block)");

  ReportOpts report_opts;
  auto* report = app.add_subcommand("report", "Summarize a run directory's artifacts");
  report->add_option("--run", report_opts.run, "Run directory")
      ->required()
      ->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen_data(gen_opts);
    if (train->parsed()) return run_train(train_opts);
    if (probe->parsed()) return run_probe(probe_opts);
    if (sweep->parsed()) return run_sweep(sweep_opts);
    if (report->parsed()) return run_report(report_opts);
  } catch (const fairlab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
