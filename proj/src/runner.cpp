#include "metavrf/runner.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace metavrf::runner {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

// Stream phases hashed into per-episode seeds; distinct values keep the
// dataset, training, and evaluation draws independent.
constexpr uint64_t kPhaseDataset = 0xDA7AULL;
constexpr uint64_t kPhaseTrainTask = 0x7EA1ULL;
constexpr uint64_t kPhaseTestTask = 0x7E57ULL;

constexpr char kCheckpointMagic[8] = {'M', 'V', 'R', 'F', 'C', 'K', 'P', '1'};

model::TaskFamily parse_family(const std::string& s) {
  if (s == "sine") return model::TaskFamily::kSine;
  if (s == "omniglot") return model::TaskFamily::kOmniglot;
  if (s == "blobs") return model::TaskFamily::kBlobs;
  throw std::runtime_error("unknown task family '" + s + "' (expected sine|omniglot|blobs)");
}

model::ModelKind parse_kind(const std::string& s) {
  // Accept both the CLI vocabulary and the canonical names written by
  // ExperimentConfig::to_json so serialized configs always round-trip.
  if (s == "metavrf") return model::ModelKind::kMetaVrf;
  if (s == "rff" || s == "fixed-rff") return model::ModelKind::kFixedRff;
  if (s == "rbf" || s == "exact-rbf") return model::ModelKind::kExactRbf;
  throw std::runtime_error("unknown model kind '" + s + "' (expected metavrf|rff|rbf)");
}

model::InferenceMode parse_mode(const std::string& s) {
  if (s == "none") return model::InferenceMode::kNone;
  if (s == "lstm") return model::InferenceMode::kLstm;
  if (s == "bilstm") return model::InferenceMode::kBilstm;
  throw std::runtime_error("unknown inference mode '" + s + "' (expected none|lstm|bilstm)");
}

bool uses_context_lstm(const model::ModelSpec& spec) {
  return spec.kind == model::ModelKind::kMetaVrf && spec.mode != model::InferenceMode::kNone;
}

context::Direction direction_of(const model::ModelSpec& spec) {
  return spec.mode == model::InferenceMode::kBilstm ? context::Direction::kBidirectional
                                                    : context::Direction::kVanilla;
}

void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
}

void write_u64(std::ostream& os, uint64_t v) { write_bytes(os, &v, sizeof v); }
void write_u8(std::ostream& os, uint8_t v) { write_bytes(os, &v, sizeof v); }

uint64_t read_u64(std::istream& is, const char* what) {
  uint64_t v = 0;
  read_bytes(is, &v, sizeof v, what);
  return v;
}

uint8_t read_u8(std::istream& is, const char* what) {
  uint8_t v = 0;
  read_bytes(is, &v, sizeof v, what);
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  write_bytes(os, s.data(), s.size());
}

std::string read_string(std::istream& is, const char* what) {
  uint64_t n = read_u64(is, what);
  if (n > (1ULL << 32)) throw std::runtime_error(std::string("checkpoint corrupt: oversized ") + what);
  std::string s(n, '\0');
  read_bytes(is, s.data(), n, what);
  return s;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  write_u64(os, t.shape.size());
  for (int64_t d : t.shape) write_u64(os, static_cast<uint64_t>(d));
  write_u64(os, t.data.size());
  write_bytes(os, t.data.data(), t.data.size() * sizeof(double));
}

Tensor read_tensor(std::istream& is, const char* what) {
  Tensor t;
  uint64_t rank = read_u64(is, what);
  if (rank > 8) throw std::runtime_error(std::string("checkpoint corrupt: tensor rank for ") + what);
  t.shape.resize(rank);
  for (uint64_t i = 0; i < rank; ++i) t.shape[i] = static_cast<int64_t>(read_u64(is, what));
  uint64_t count = read_u64(is, what);
  if (count > (1ULL << 32)) throw std::runtime_error(std::string("checkpoint corrupt: tensor size for ") + what);
  t.data.resize(count);
  read_bytes(is, t.data.data(), count * sizeof(double), what);
  return t;
}

double episode_mse(const Tensor& preds, const Tensor& targets) {
  if (preds.data.size() != targets.data.size())
    throw std::runtime_error("prediction/target size mismatch in evaluation");
  double acc = 0.0;
  for (size_t i = 0; i < preds.data.size(); ++i) {
    const double d = preds.data[i] - targets.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(preds.data.size());
}

tasks::Task draw_task(const model::ModelSpec& spec, const tasks::DatasetSplit& split,
                      tasks::Partition part, bool grid_query, Rng& rng) {
  if (spec.is_classification())
    return tasks::sample_classification_episode(split, part, spec.ways, spec.shots,
                                                spec.query_per_class, rng);
  return tasks::sample_sine_task(rng, spec.shots, spec.query_per_class, grid_query);
}

}  // namespace

void ExperimentConfig::finalize() {
  if (family == model::TaskFamily::kSine) ways = 1;
  if (query <= 0) query = family == model::TaskFamily::kSine ? 10 : 15;
  if (iterations <= 0) {
    switch (family) {
      case model::TaskFamily::kSine: iterations = 20000; break;
      case model::TaskFamily::kBlobs: iterations = 5000; break;
      case model::TaskFamily::kOmniglot: iterations = 10000; break;
    }
  }
  if (batch <= 0) batch = family == model::TaskFamily::kBlobs ? 8 : 6;
  if (kind != model::ModelKind::kMetaVrf) mode = model::InferenceMode::kNone;
}

model::ModelSpec ExperimentConfig::model_spec() const {
  model::ModelSpec s;
  s.family = family;
  s.kind = kind;
  s.mode = mode;
  s.ways = family == model::TaskFamily::kSine ? 1 : ways;
  s.shots = shots;
  s.query_per_class = query;
  s.bases = bases;
  s.vec_dim = family == model::TaskFamily::kBlobs ? blob_dim : 1;
  return s;
}

json ExperimentConfig::to_json() const {
  return json{{"task", model::family_name(family)},
              {"kind", model::kind_name(kind)},
              {"mode", model::mode_name(mode)},
              {"ways", ways},
              {"shots", shots},
              {"query", query},
              {"bases", bases},
              {"iterations", iterations},
              {"batch", batch},
              {"lr", lr},
              {"seed", seed},
              {"out_dir", out_dir},
              {"data_root", data_root},
              {"blob_classes", blob_classes},
              {"blob_dim", blob_dim},
              {"blob_examples", blob_examples},
              {"blob_separation", blob_separation}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  c.family = parse_family(j.value("task", "sine"));
  c.kind = parse_kind(j.value("kind", "metavrf"));
  c.mode = parse_mode(j.value("mode", "bilstm"));
  c.ways = j.value("ways", c.ways);
  c.shots = j.value("shots", c.shots);
  c.query = j.value("query", c.query);
  c.bases = j.value("bases", c.bases);
  c.iterations = j.value("iterations", c.iterations);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.data_root = j.value("data_root", c.data_root);
  c.blob_classes = j.value("blob_classes", c.blob_classes);
  c.blob_dim = j.value("blob_dim", c.blob_dim);
  c.blob_examples = j.value("blob_examples", c.blob_examples);
  c.blob_separation = j.value("blob_separation", c.blob_separation);
  return c;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  write_bytes(os, kCheckpointMagic, sizeof kCheckpointMagic);
  write_string(os, config.to_json().dump());
  write_u64(os, static_cast<uint64_t>(iteration));
  for (uint64_t w : rng_state) write_u64(os, w);
  write_u64(os, params.entries.size());
  for (const auto& e : params.entries) {
    write_string(os, e.name);
    write_u8(os, e.trainable ? 1 : 0);
    write_tensor(os, e.value);
  }
  write_u8(os, has_state ? 1 : 0);
  if (has_state) {
    write_u8(os, state.direction == context::Direction::kBidirectional ? 1 : 0);
    write_tensor(os, state.h_fwd);
    write_tensor(os, state.c_fwd);
    write_tensor(os, state.h_bwd);
    write_tensor(os, state.c_bwd);
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8] = {};
  read_bytes(is, magic, sizeof magic, "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw std::runtime_error("not a checkpoint (bad magic): " + path);
  Checkpoint c;
  c.config = ExperimentConfig::from_json(json::parse(read_string(is, "config")));
  c.iteration = static_cast<int64_t>(read_u64(is, "iteration"));
  for (auto& w : c.rng_state) w = read_u64(is, "rng state");
  uint64_t n_params = read_u64(is, "parameter count");
  if (n_params > (1ULL << 20)) throw std::runtime_error("checkpoint corrupt: parameter count");
  c.params.entries.reserve(n_params);
  for (uint64_t i = 0; i < n_params; ++i) {
    model::ParamSet::Entry e;
    e.name = read_string(is, "parameter name");
    e.trainable = read_u8(is, "parameter flag") != 0;
    e.value = read_tensor(is, "parameter value");
    c.params.entries.push_back(std::move(e));
  }
  c.has_state = read_u8(is, "state flag") != 0;
  if (c.has_state) {
    c.state.direction = read_u8(is, "state direction") != 0 ? context::Direction::kBidirectional
                                                            : context::Direction::kVanilla;
    c.state.h_fwd = read_tensor(is, "state h_fwd");
    c.state.c_fwd = read_tensor(is, "state c_fwd");
    c.state.h_bwd = read_tensor(is, "state h_bwd");
    c.state.c_bwd = read_tensor(is, "state c_bwd");
  }
  return c;
}

json EvalReport::to_json() const {
  return json{{"metric", metric}, {"mean", mean},         {"ci95", ci95},
              {"episodes", episodes}, {"config", config_echo}, {"per_episode", per_episode}};
}

void Adam::step(model::ParamSet& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.entries.size())
    throw std::runtime_error("optimizer gradient list does not match parameter store");
  if (m.empty()) {
    m.resize(params.entries.size());
    v.resize(params.entries.size());
    for (size_t i = 0; i < params.entries.size(); ++i) {
      if (!params.entries[i].trainable) continue;
      m[i].shape = params.entries[i].value.shape;
      m[i].data.assign(params.entries[i].value.data.size(), 0.0);
      v[i] = m[i];
    }
  }
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.entries.size(); ++i) {
    auto& e = params.entries[i];
    if (!e.trainable) continue;
    if (grads[i].data.size() != e.value.data.size())
      throw std::runtime_error("gradient shape mismatch for parameter " + e.name);
    for (size_t j = 0; j < e.value.data.size(); ++j) {
      const double g = grads[i].data[j];
      m[i].data[j] = beta1 * m[i].data[j] + (1.0 - beta1) * g;
      v[i].data[j] = beta2 * v[i].data[j] + (1.0 - beta2) * g * g;
      const double mhat = m[i].data[j] / bc1;
      const double vhat = v[i].data[j] / bc2;
      e.value.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

tasks::DatasetSplit load_split(const ExperimentConfig& config) {
  switch (config.family) {
    case model::TaskFamily::kSine:
      return {};  // sine tasks are sampled analytically; no dataset involved
    case model::TaskFamily::kBlobs: {
      Rng rng(derive_seed(config.seed, kPhaseDataset, 0, 0));
      return tasks::make_blob_dataset(config.blob_classes, config.blob_dim,
                                      config.blob_separation, rng, config.blob_examples);
    }
    case model::TaskFamily::kOmniglot: {
      std::string root = config.data_root;
      if (root.empty()) {
        const char* env = std::getenv("METAVRF_DATA");
        if (env != nullptr) root = env;
      }
      if (root.empty())
        throw std::runtime_error(
            "omniglot root not set: pass --data or set the METAVRF_DATA environment variable");
      return tasks::load_omniglot(root);
    }
  }
  throw std::runtime_error("unreachable task family");
}

uint64_t train_task_seed(const ExperimentConfig& config, int64_t iteration, int64_t slot) {
  return derive_seed(config.seed, kPhaseTrainTask, static_cast<uint64_t>(iteration),
                     static_cast<uint64_t>(slot));
}

uint64_t test_task_seed(const ExperimentConfig& config, int64_t episode) {
  return derive_seed(config.seed, kPhaseTestTask, static_cast<uint64_t>(episode), 0);
}

TrainResult meta_train(const ExperimentConfig& config_in) {
  ExperimentConfig config = config_in;
  config.finalize();
  const model::ModelSpec spec = config.model_spec();
  model::ParamSet params = model::init_params(spec, config.seed);
  tasks::DatasetSplit split;
  if (spec.is_classification()) split = load_split(config);

  model::EpisodeGraph eg = model::build_episode_graph(spec, params, config.batch, true);
  const bool carry = uses_context_lstm(spec);
  context::ContextState state =
      context::ContextState::zeros(direction_of(spec), eg.hyper.lstm_hidden);

  Adam adam;
  adam.lr = config.lr;

  TrainResult result;
  result.losses.reserve(static_cast<size_t>(config.iterations));
  std::array<uint64_t, 6> last_rng_state{};
  std::vector<uint64_t> batch_seeds;
  std::vector<Tensor> grads(params.entries.size());
  ad::Graph::Bindings bind;
  const auto t0 = std::chrono::steady_clock::now();

  for (int64_t it = 0; it < config.iterations; ++it) {
    bind.clear();
    eg.bind_params(params, bind);
    if (carry) eg.bind_state(state, bind);
    batch_seeds.clear();
    for (int64_t slot = 0; slot < config.batch; ++slot) {
      const uint64_t ts = train_task_seed(config, it, slot);
      batch_seeds.push_back(ts);
      Rng task_rng(ts);
      tasks::Task task = draw_task(spec, split, tasks::Partition::kTrain, false, task_rng);
      task.task_seed = ts;
      eg.bind_task(slot, task, task_rng, bind);
      last_rng_state = task_rng.save_state();
    }
    eg.g.forward(bind);
    const double loss = eg.g.value(eg.total_loss).item();
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "training diverged: non-finite loss at iteration " << (it + 1)
          << "; batch task seeds:";
      for (uint64_t s : batch_seeds) msg << ' ' << s;
      throw std::runtime_error(msg.str());
    }
    result.losses.push_back(loss);
    eg.g.backward(eg.total_loss);
    for (size_t i = 0; i < params.entries.size(); ++i)
      if (eg.param_bindable[i]) grads[i] = eg.g.grad(eg.param_nodes[i]);
    adam.step(params, grads);
    if (carry) state = eg.read_final_state();
    if (it == 0 || (it + 1) % 100 == 0 || it + 1 == config.iterations) {
      const double wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      result.logged.push_back({it + 1, loss, wall_ms});
    }
  }

  result.checkpoint.config = config;
  result.checkpoint.iteration = config.iterations;
  result.checkpoint.rng_state = last_rng_state;
  result.checkpoint.params = std::move(params);
  result.checkpoint.state = state;
  result.checkpoint.has_state = carry;
  result.last_batch_task_seeds = batch_seeds;

  if (!config.out_dir.empty()) {
    fs::create_directories(config.out_dir);
    write_metrics_jsonl(config.out_dir + "/metrics.jsonl", result.logged);
    result.checkpoint.save(config.out_dir + "/checkpoint.bin");
  }
  return result;
}

EvalReport meta_test(const Checkpoint& ckpt, int64_t episodes, int64_t ways, int64_t shots,
                     const std::string& curve_csv) {
  ExperimentConfig config = ckpt.config;
  config.finalize();
  model::ModelSpec spec = config.model_spec();
  if (spec.is_classification() && ways > 0) spec.ways = ways;
  if (shots > 0) spec.shots = shots;
  const bool grid_query = !spec.is_classification();
  if (grid_query) spec.query_per_class = 100;  // fixed evaluation grid over [-5, 5]

  tasks::DatasetSplit split;
  if (spec.is_classification()) split = load_split(config);

  model::EpisodeGraph eg = model::build_episode_graph(spec, ckpt.params, 1, false);
  const bool carry = uses_context_lstm(spec) && ckpt.has_state;

  EvalReport report;
  report.metric = spec.is_classification() ? "accuracy" : "mse";
  report.episodes = episodes;
  report.per_episode.reserve(static_cast<size_t>(episodes));
  report.config_echo = config.to_json();
  report.config_echo["eval_ways"] = spec.ways;
  report.config_echo["eval_shots"] = spec.shots;
  report.config_echo["eval_episodes"] = episodes;

  std::ofstream curve;
  if (!curve_csv.empty()) {
    if (spec.is_classification())
      throw std::runtime_error("prediction curves are only produced for regression tasks");
    curve.open(curve_csv);
    if (!curve) throw std::runtime_error("cannot open curve file for writing: " + curve_csv);
    curve << "task,x,y_true,y_pred\n";
  }

  ad::Graph::Bindings bind;
  for (int64_t ep = 0; ep < episodes; ++ep) {
    bind.clear();
    if (carry) eg.bind_state(ckpt.state, bind);
    Rng task_rng(test_task_seed(config, ep));
    tasks::Task task = draw_task(spec, split, tasks::Partition::kTest, grid_query, task_rng);
    eg.bind_task(0, task, task_rng, bind);
    eg.g.forward(bind);
    const Tensor& preds = eg.g.value(eg.slots[0].preds);
    if (spec.is_classification()) {
      report.per_episode.push_back(model::accuracy_from_logits(preds, task.query_labels));
    } else {
      report.per_episode.push_back(episode_mse(preds, task.query_y));
      if (curve.is_open()) {
        for (int64_t j = 0; j < spec.query_per_class; ++j)
          curve << ep << ',' << task.query_x.at(j, 0) << ',' << task.query_y.at(0, j) << ','
                << preds.at(0, j) << '\n';
      }
    }
  }

  double sum = 0.0;
  for (double v : report.per_episode) sum += v;
  report.mean = report.per_episode.empty() ? 0.0 : sum / static_cast<double>(episodes);
  if (episodes > 1) {
    double sq = 0.0;
    for (double v : report.per_episode) sq += (v - report.mean) * (v - report.mean);
    const double stddev = std::sqrt(sq / static_cast<double>(episodes - 1));
    report.ci95 = 1.96 * stddev / std::sqrt(static_cast<double>(episodes));
  }
  return report;
}

EvalReport run_baseline(ExperimentConfig config, model::ModelKind kind, int64_t episodes) {
  config.kind = kind;
  config.mode = model::InferenceMode::kNone;
  TrainResult tr = meta_train(config);
  EvalReport report = meta_test(tr.checkpoint, episodes);
  if (!config.out_dir.empty()) write_report_json(config.out_dir + "/report.json", report);
  return report;
}

std::vector<SweepRow> sweep_basis_count(ExperimentConfig config, const std::vector<int64_t>& bases,
                                        int64_t episodes) {
  const std::string out_root = config.out_dir;
  std::vector<SweepRow> rows;
  for (int64_t d : bases) {
    ExperimentConfig c = config;
    c.bases = d;
    c.out_dir = out_root.empty() ? "" : out_root + "/bases_" + std::to_string(d);
    TrainResult tr = meta_train(c);
    EvalReport report = meta_test(tr.checkpoint, episodes);
    rows.push_back({d, report.mean, report.ci95});
  }
  if (!out_root.empty()) {
    fs::create_directories(out_root);
    write_sweep_csv(out_root + "/sweep.csv", rows);
  }
  return rows;
}

void write_metrics_jsonl(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open metrics file for writing: " + path);
  for (const auto& r : rows)
    os << json{{"iteration", r.iteration}, {"loss", r.loss}, {"wall_ms", r.wall_ms}}.dump()
       << '\n';
}

void write_report_json(const std::string& path, const EvalReport& report) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open report file for writing: " + path);
  os << report.to_json().dump(2) << '\n';
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open sweep file for writing: " + path);
  os << "bases,metric,ci95\n";
  for (const auto& r : rows) os << r.bases << ',' << r.metric << ',' << r.ci95 << '\n';
}

}  // namespace metavrf::runner
