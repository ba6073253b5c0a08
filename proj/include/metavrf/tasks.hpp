#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metavrf/rng.hpp"
#include "metavrf/tensor.hpp"

namespace metavrf::tasks {

/// One few-shot episode: a support set to fit on and a query set to score.
struct Task {
  Tensor support_x;  // (C*k, d) vectors or (C*k, h, w, 1) images
  Tensor query_x;    // (C*m, ...) likewise
  // Regression targets (1, n); classification keeps integer labels instead.
  Tensor support_y, query_y;
  std::vector<int64_t> support_labels, query_labels;  // class-major, relabeled 0..C-1
  int64_t ways = 0, shots = 0, query_per_class = 0;
  bool is_classification = false;
  uint64_t task_seed = 0;
};

enum class Partition { kTrain, kValidation, kTest };

/// Class-partitioned dataset: disjoint train/validation/test class lists, each
/// class holding its example tensors.
struct DatasetSplit {
  struct ClassData {
    std::vector<Tensor> examples;
  };
  std::vector<ClassData> train, validation, test;
  Shape example_shape;

  const std::vector<ClassData>& partition(Partition p) const;
};

/// y = A sin(w x + b) with A ~ U[0.1, 5], w ~ U[0.8, 1.2], b ~ U[0, pi];
/// k support and m query inputs ~ U[-5, 5]. grid_query replaces the random
/// query inputs with m uniformly spaced points over [-5, 5] (evaluation mode).
Task sample_sine_task(Rng& rng, int64_t k, int64_t m, bool grid_query = false);

/// C distinct classes from the partition; per class k support + m query
/// examples, disjoint; labels relabeled to 0..C-1 in sampled order, rows
/// class-major. Throws when the partition lacks classes or examples.
Task sample_classification_episode(const DatasetSplit& split, Partition part, int64_t ways,
                                   int64_t shots, int64_t query_per_class, Rng& rng);

/// Unit-variance Gaussian clusters; class means drawn at pairwise distance >=
/// separation (separation 0 degenerates to identical means = chance level).
/// Builds three disjoint partitions of classes_per_partition classes each.
DatasetSplit make_blob_dataset(int64_t classes_per_partition, int64_t dim, double separation,
                               Rng& rng, int64_t examples_per_class = 40);

/// Loads `root/<alphabet>/<character>/<image>.png`, resizes to 28x28 grayscale
/// in [0, 1], splits character classes 1100/200/423 by seeded shuffle
/// (proportionally for smaller corpora), and expands every class into 4
/// rotated variants (0/90/180/270 degrees) as distinct classes. Caches the
/// resized base images in a single versioned binary file beside the root.
DatasetSplit load_omniglot(const std::string& root);

/// Nearest-centroid accuracy oracle used by dataset audits: fits per-class
/// centroids on `fit_per_class` examples and scores the rest.
double nearest_centroid_accuracy(const std::vector<DatasetSplit::ClassData>& classes,
                                 int64_t fit_per_class);

}  // namespace metavrf::tasks
