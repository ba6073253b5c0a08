#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "metavrf/context.hpp"
#include "metavrf/model.hpp"
#include "metavrf/tasks.hpp"

namespace metavrf::runner {

/// Full experiment description; round-trips through JSON (config echo) and the
/// checkpoint header.
struct ExperimentConfig {
  model::TaskFamily family = model::TaskFamily::kSine;
  model::ModelKind kind = model::ModelKind::kMetaVrf;
  model::InferenceMode mode = model::InferenceMode::kBilstm;
  int64_t ways = 5;
  int64_t shots = 1;
  int64_t query = -1;       // -1: family default (15 per class, 10 for sine)
  int64_t bases = 780;
  int64_t iterations = -1;  // -1: family default
  int64_t batch = -1;       // -1: family default
  double lr = 1e-4;
  uint64_t seed = 0;
  std::string out_dir;
  std::string data_root;    // omniglot root; falls back to METAVRF_DATA
  // Synthetic blob dataset shape.
  int64_t blob_classes = 16;
  int64_t blob_dim = 16;
  int64_t blob_examples = 40;
  double blob_separation = 6.0;

  /// Fills family-dependent defaults (query size, iterations, batch).
  void finalize();
  model::ModelSpec model_spec() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

struct MetricsRow {
  int64_t iteration = 0;  // 1-based
  double loss = 0.0;
  double wall_ms = 0.0;   // elapsed since training start
};

struct Checkpoint {
  ExperimentConfig config;
  int64_t iteration = 0;
  std::array<uint64_t, 6> rng_state{};
  model::ParamSet params;
  context::ContextState state;
  bool has_state = false;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRow> logged;       // every 100 iterations + the final one
  std::vector<double> losses;           // one per iteration
  std::vector<uint64_t> last_batch_task_seeds;
};

struct EvalReport {
  std::vector<double> per_episode;
  double mean = 0.0;
  double ci95 = 0.0;  // 1.96 * sample stddev / sqrt(N)
  int64_t episodes = 0;
  std::string metric;  // "accuracy" or "mse"
  nlohmann::json config_echo;

  nlohmann::json to_json() const;
};

/// Bias-corrected Adam over the trainable entries of a ParamSet.
struct Adam {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<Tensor> m, v;

  void step(model::ParamSet& params, const std::vector<Tensor>& grads);
};

/// Episodic meta-training: per iteration samples `batch` tasks, chains them
/// through the context LSTM, applies one Adam update on the batch-mean loss,
/// carries the (detached) context state, and checkpoints at the end. Writes
/// metrics.jsonl under config.out_dir when set.
TrainResult meta_train(const ExperimentConfig& config);

/// Frozen evaluation: feed-forward only, zero parameter updates. ways/shots <= 0
/// keep the training values (varied-way evaluation passes overrides).
/// curve_csv (regression only) collects (task, x, y_true, y_pred) rows.
EvalReport meta_test(const Checkpoint& ckpt, int64_t episodes, int64_t ways = -1,
                     int64_t shots = -1, const std::string& curve_csv = "");

/// Trains config with the baseline kind substituted, then evaluates it.
EvalReport run_baseline(ExperimentConfig config, model::ModelKind kind, int64_t episodes);

struct SweepRow {
  int64_t bases = 0;
  double metric = 0.0;
  double ci95 = 0.0;
};

/// Trains and evaluates one model per basis count; writes sweep.csv under
/// config.out_dir when set.
std::vector<SweepRow> sweep_basis_count(ExperimentConfig config, const std::vector<int64_t>& bases,
                                        int64_t episodes);

/// Dataset resolution shared by training and evaluation (blobs are synthesized
/// from the config seed; Omniglot loads from data_root / METAVRF_DATA).
tasks::DatasetSplit load_split(const ExperimentConfig& config);

/// Per-episode generators: stable hashes of (seed, phase, index, slot).
uint64_t train_task_seed(const ExperimentConfig& config, int64_t iteration, int64_t slot);
uint64_t test_task_seed(const ExperimentConfig& config, int64_t episode);

void write_metrics_jsonl(const std::string& path, const std::vector<MetricsRow>& rows);
void write_report_json(const std::string& path, const EvalReport& report);
void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

}  // namespace metavrf::runner
