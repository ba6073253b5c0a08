#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metavrf/gradcheck.hpp"
#include "metavrf/runner.hpp"

namespace {

using metavrf::runner::Checkpoint;
using metavrf::runner::EvalReport;
using metavrf::runner::ExperimentConfig;

struct CliOptions {
  std::string task = "sine";
  std::string kind = "metavrf";
  std::string mode = "bilstm";
  int64_t ways = 5, shots = 1, query = -1, bases = 780;
  int64_t iters = -1, batch = -1;
  double lr = 1e-4;
  uint64_t seed = 0;
  std::string out, data;
  int64_t blob_classes = 16, blob_dim = 16, blob_examples = 40;
  double blob_sep = 6.0;
};

void add_experiment_flags(CLI::App* cmd, CliOptions& o, bool with_kind) {
  cmd->add_option("--task", o.task, "Task family: sine|omniglot|blobs")
      ->check(CLI::IsMember({"sine", "omniglot", "blobs"}));
  if (with_kind)
    cmd->add_option("--kind", o.kind, "Baseline kind: rff|rbf")
        ->check(CLI::IsMember({"rff", "rbf"}))
        ->required();
  cmd->add_option("--ways", o.ways, "Classes per episode (classification)");
  cmd->add_option("--shots", o.shots, "Support examples per class");
  cmd->add_option("--query", o.query, "Query examples per class (default 15; sine 10)");
  if (!with_kind)
    cmd->add_option("--mode", o.mode, "Context inference: none|lstm|bilstm")
        ->check(CLI::IsMember({"none", "lstm", "bilstm"}));
  cmd->add_option("--iters", o.iters, "Training iterations (default per family)");
  cmd->add_option("--batch", o.batch, "Tasks per iteration (default per family)");
  cmd->add_option("--lr", o.lr, "Adam learning rate");
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("--out", o.out, "Output directory (metrics.jsonl, checkpoint.bin)");
  cmd->add_option("--data", o.data, "Dataset root (overrides METAVRF_DATA)");
  cmd->add_option("--blob-classes", o.blob_classes, "Blob classes per partition");
  cmd->add_option("--blob-dim", o.blob_dim, "Blob feature dimension");
  cmd->add_option("--blob-sep", o.blob_sep, "Blob minimum mean separation");
  cmd->add_option("--blob-examples", o.blob_examples, "Blob examples per class");
}

ExperimentConfig to_config(const CliOptions& o, const std::string& kind_override,
                           int64_t bases_value) {
  nlohmann::json j{{"task", o.task},
                   {"kind", kind_override.empty() ? o.kind : kind_override},
                   {"mode", o.mode},
                   {"ways", o.ways},
                   {"shots", o.shots},
                   {"query", o.query},
                   {"bases", bases_value},
                   {"iterations", o.iters},
                   {"batch", o.batch},
                   {"lr", o.lr},
                   {"seed", o.seed},
                   {"out_dir", o.out},
                   {"data_root", o.data},
                   {"blob_classes", o.blob_classes},
                   {"blob_dim", o.blob_dim},
                   {"blob_examples", o.blob_examples},
                   {"blob_separation", o.blob_sep}};
  return ExperimentConfig::from_json(j);
}

void print_report(const EvalReport& r) {
  std::printf("%s over %lld episodes: %.6f +/- %.6f (95%% CI)\n", r.metric.c_str(),
              static_cast<long long>(r.episodes), r.mean, r.ci95);
}

int cmd_train(const CliOptions& o, int64_t bases) {
  ExperimentConfig cfg = to_config(o, "metavrf", bases);
  auto result = metavrf::runner::meta_train(cfg);
  std::printf("trained %lld iterations; initial loss %.6f, final loss %.6f\n",
              static_cast<long long>(result.checkpoint.iteration),
              result.losses.empty() ? 0.0 : result.losses.front(),
              result.losses.empty() ? 0.0 : result.losses.back());
  if (!cfg.out_dir.empty())
    std::printf("checkpoint: %s/checkpoint.bin\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_test(const std::string& ckpt_path, int64_t episodes, int64_t ways, int64_t shots,
             const std::string& out_dir) {
  Checkpoint ckpt = Checkpoint::load(ckpt_path);
  std::string curve;
  if (!out_dir.empty() && ckpt.config.family == metavrf::model::TaskFamily::kSine) {
    std::filesystem::create_directories(out_dir);
    curve = out_dir + "/curve.csv";
  }
  EvalReport report = metavrf::runner::meta_test(ckpt, episodes, ways, shots, curve);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metavrf::runner::write_report_json(out_dir + "/report.json", report);
  }
  print_report(report);
  return 0;
}

int cmd_baseline(const CliOptions& o, int64_t bases, int64_t episodes) {
  ExperimentConfig cfg = to_config(o, "", bases);  // kind comes from --kind
  EvalReport report = metavrf::runner::run_baseline(cfg, cfg.kind, episodes);
  print_report(report);
  return 0;
}

int cmd_sweep(const CliOptions& o, const std::vector<int64_t>& bases_list, int64_t episodes) {
  ExperimentConfig cfg = to_config(o, "metavrf", 780);
  auto rows = metavrf::runner::sweep_basis_count(cfg, bases_list, episodes);
  std::printf("bases,metric,ci95\n");
  for (const auto& r : rows)
    std::printf("%lld,%.6f,%.6f\n", static_cast<long long>(r.bases), r.metric, r.ci95);
  return 0;
}

int cmd_gradcheck() {
  auto results = metavrf::gradcheck::run_all(1e-4);
  bool all_ok = true;
  for (const auto& r : results) {
    std::printf("%-18s max_rel_err=%.3e %s\n", r.name.c_str(), r.max_rel_err,
                r.passed ? "PASS" : "FAIL");
    all_ok = all_ok && r.passed;
  }
  std::printf("gradient suite: %s (%zu checks)\n", all_ok ? "PASS" : "FAIL", results.size());
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned variational random feature kernels for few-shot learning"};
  app.require_subcommand(1);

  CliOptions train_o, base_o, sweep_o;
  int64_t train_bases = 780, base_bases = 780;
  std::vector<int64_t> sweep_bases{8, 64, 256, 780, 2048};
  int64_t base_episodes = 500, sweep_episodes = 500;

  auto* train = app.add_subcommand("train", "Meta-train a model episodically");
  add_experiment_flags(train, train_o, false);
  train->add_option("--bases", train_bases, "Random feature count D");

  std::string ckpt_path, test_out;
  int64_t test_episodes = 1000, test_ways = -1, test_shots = -1;
  auto* test = app.add_subcommand("test", "Evaluate a checkpoint (feed-forward only)");
  test->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  test->add_option("--episodes", test_episodes, "Evaluation episodes");
  test->add_option("--ways", test_ways, "Override ways (varied-way evaluation)");
  test->add_option("--shots", test_shots, "Override shots");
  test->add_option("--out", test_out, "Directory for report.json (and curve.csv for sine)");

  auto* baseline = app.add_subcommand("baseline", "Train and evaluate a kernel baseline");
  add_experiment_flags(baseline, base_o, true);
  baseline->add_option("--bases", base_bases, "Random feature count D (rff)");
  baseline->add_option("--episodes", base_episodes, "Evaluation episodes");

  auto* sweep = app.add_subcommand("sweep", "Train/evaluate across basis counts");
  add_experiment_flags(sweep, sweep_o, false);
  sweep->add_option("--bases", sweep_bases, "Comma-separated basis counts")->delimiter(',');
  sweep->add_option("--episodes", sweep_episodes, "Evaluation episodes per run");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
  (void)gradcheck;

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_o, train_bases);
    if (test->parsed()) return cmd_test(ckpt_path, test_episodes, test_ways, test_shots, test_out);
    if (baseline->parsed()) return cmd_baseline(base_o, base_bases, base_episodes);
    if (sweep->parsed()) return cmd_sweep(sweep_o, sweep_bases, sweep_episodes);
    if (gradcheck->parsed()) return cmd_gradcheck();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
