#include "metavrf/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "metavrf/png_io.hpp"

namespace metavrf::tasks {

namespace fs = std::filesystem;

const std::vector<DatasetSplit::ClassData>& DatasetSplit::partition(Partition p) const {
  switch (p) {
    case Partition::kTrain: return train;
    case Partition::kValidation: return validation;
    case Partition::kTest: return test;
  }
  throw std::logic_error("unknown partition");
}

Task sample_sine_task(Rng& rng, int64_t k, int64_t m, bool grid_query) {
  if (k < 1 || m < 1) throw std::invalid_argument("sine task requires k >= 1 and m >= 1");
  const double amplitude = rng.uniform(0.1, 5.0);
  const double frequency = rng.uniform(0.8, 1.2);
  const double phase = rng.uniform(0.0, M_PI);
  Task task;
  task.ways = 1;
  task.shots = k;
  task.query_per_class = m;
  task.support_x = Tensor({k, 1});
  task.support_y = Tensor({1, k});
  for (int64_t i = 0; i < k; ++i) {
    const double x = rng.uniform(-5.0, 5.0);
    task.support_x[i] = x;
    task.support_y[i] = amplitude * std::sin(frequency * x + phase);
  }
  task.query_x = Tensor({m, 1});
  task.query_y = Tensor({1, m});
  for (int64_t i = 0; i < m; ++i) {
    const double x = grid_query ? (m == 1 ? 0.0 : -5.0 + 10.0 * static_cast<double>(i) /
                                                             static_cast<double>(m - 1))
                                : rng.uniform(-5.0, 5.0);
    task.query_x[i] = x;
    task.query_y[i] = amplitude * std::sin(frequency * x + phase);
  }
  return task;
}

Task sample_classification_episode(const DatasetSplit& split, Partition part, int64_t ways,
                                   int64_t shots, int64_t query_per_class, Rng& rng) {
  const auto& classes = split.partition(part);
  if (static_cast<int64_t>(classes.size()) < ways) {
    throw std::runtime_error("episode needs " + std::to_string(ways) + " classes but partition has " +
                             std::to_string(classes.size()));
  }
  // Draw `ways` distinct class indices.
  std::vector<int64_t> order(classes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
  for (int64_t i = 0; i < ways; ++i) {
    const int64_t j = i + rng.uniform_int(static_cast<int64_t>(order.size()) - i);
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }

  const Shape& ex_shape = split.example_shape;
  const int64_t ex_numel = shape_numel(ex_shape);
  Shape support_shape = ex_shape;
  support_shape.insert(support_shape.begin(), ways * shots);
  Shape query_shape = ex_shape;
  query_shape.insert(query_shape.begin(), ways * query_per_class);

  Task task;
  task.is_classification = true;
  task.ways = ways;
  task.shots = shots;
  task.query_per_class = query_per_class;
  task.support_x = Tensor(support_shape);
  task.query_x = Tensor(query_shape);

  for (int64_t c = 0; c < ways; ++c) {
    const auto& cls = classes[static_cast<size_t>(order[static_cast<size_t>(c)])];
    const int64_t available = static_cast<int64_t>(cls.examples.size());
    if (available < shots + query_per_class) {
      throw std::runtime_error("class has " + std::to_string(available) + " examples; episode needs " +
                               std::to_string(shots + query_per_class));
    }
    std::vector<int64_t> idx(cls.examples.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
    rng.shuffle(idx);
    for (int64_t s = 0; s < shots; ++s) {
      const Tensor& ex = cls.examples[static_cast<size_t>(idx[static_cast<size_t>(s)])];
      std::copy(ex.data.begin(), ex.data.end(),
                task.support_x.data.begin() + (c * shots + s) * ex_numel);
      task.support_labels.push_back(c);
    }
    for (int64_t q = 0; q < query_per_class; ++q) {
      const Tensor& ex = cls.examples[static_cast<size_t>(idx[static_cast<size_t>(shots + q)])];
      std::copy(ex.data.begin(), ex.data.end(),
                task.query_x.data.begin() + (c * query_per_class + q) * ex_numel);
      task.query_labels.push_back(c);
    }
  }
  return task;
}

DatasetSplit make_blob_dataset(int64_t classes_per_partition, int64_t dim, double separation,
                               Rng& rng, int64_t examples_per_class) {
  if (classes_per_partition < 1 || dim < 1) {
    throw std::invalid_argument("blob dataset needs >= 1 class and dim >= 1");
  }
  if (separation < 0.0) throw std::invalid_argument("blob separation must be >= 0");
  const int64_t total = 3 * classes_per_partition;
  // Means scale with the separation so that separation 0 collapses to
  // identical (zero) means; rejection enforces the pairwise floor.
  std::vector<Tensor> means;
  means.reserve(static_cast<size_t>(total));
  for (int64_t c = 0; c < total; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 10000) throw std::runtime_error("blob mean sampling failed: space too crowded");
      Tensor mean({dim});
      for (double& v : mean.data) v = rng.normal() * separation;
      bool ok = true;
      for (const Tensor& other : means) {
        double sq = 0.0;
        for (int64_t i = 0; i < dim; ++i) {
          const double diff = mean[i] - other[i];
          sq += diff * diff;
        }
        if (std::sqrt(sq) < separation && separation > 0.0) {
          ok = false;
          break;
        }
      }
      if (ok) {
        means.push_back(std::move(mean));
        break;
      }
    }
  }
  DatasetSplit split;
  split.example_shape = {dim};
  auto fill = [&](std::vector<DatasetSplit::ClassData>& out, int64_t first) {
    for (int64_t c = 0; c < classes_per_partition; ++c) {
      DatasetSplit::ClassData cls;
      const Tensor& mean = means[static_cast<size_t>(first + c)];
      for (int64_t e = 0; e < examples_per_class; ++e) {
        Tensor ex({dim});
        for (int64_t i = 0; i < dim; ++i) ex[i] = mean[i] + rng.normal();
        cls.examples.push_back(std::move(ex));
      }
      out.push_back(std::move(cls));
    }
  };
  fill(split.train, 0);
  fill(split.validation, classes_per_partition);
  fill(split.test, 2 * classes_per_partition);
  return split;
}

// ---------------------------------------------------------------------------
// Omniglot
// ---------------------------------------------------------------------------

namespace {

constexpr char kCacheMagic[] = "MVRFDS01";
constexpr int64_t kImageSize = 28;
constexpr uint64_t kSplitShuffleSeed = 1100200423ULL;  // fixed: split must not vary run to run

struct RawClass {
  std::string name;                  // alphabet/character
  std::vector<std::vector<uint8_t>> images;  // 28*28 bytes each
};

std::string cache_path_for(const std::string& root) {
  fs::path p(root);
  return (p.parent_path() / (p.filename().string() + ".metavrf_cache.bin")).string();
}

bool read_cache(const std::string& path, std::vector<RawClass>& classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCacheMagic, 8) != 0) return false;
  uint64_t n_classes = 0;
  in.read(reinterpret_cast<char*>(&n_classes), sizeof(n_classes));
  classes.clear();
  classes.resize(n_classes);
  for (auto& cls : classes) {
    uint64_t name_len = 0, n_images = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    cls.name.resize(name_len);
    in.read(cls.name.data(), static_cast<std::streamsize>(name_len));
    in.read(reinterpret_cast<char*>(&n_images), sizeof(n_images));
    cls.images.resize(n_images);
    for (auto& img : cls.images) {
      img.resize(kImageSize * kImageSize);
      in.read(reinterpret_cast<char*>(img.data()), kImageSize * kImageSize);
    }
    if (!in) return false;
  }
  return true;
}

void write_cache(const std::string& path, const std::vector<RawClass>& classes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) return;  // cache is an optimization; failure to write is not fatal
  out.write(kCacheMagic, 8);
  const uint64_t n_classes = classes.size();
  out.write(reinterpret_cast<const char*>(&n_classes), sizeof(n_classes));
  for (const auto& cls : classes) {
    const uint64_t name_len = cls.name.size();
    out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
    out.write(cls.name.data(), static_cast<std::streamsize>(name_len));
    const uint64_t n_images = cls.images.size();
    out.write(reinterpret_cast<const char*>(&n_images), sizeof(n_images));
    for (const auto& img : cls.images) {
      out.write(reinterpret_cast<const char*>(img.data()), kImageSize * kImageSize);
    }
  }
}

std::vector<RawClass> scan_image_tree(const std::string& root) {
  std::vector<RawClass> classes;
  std::vector<std::string> alphabets;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) alphabets.push_back(entry.path().filename().string());
  }
  std::sort(alphabets.begin(), alphabets.end());
  for (const auto& alphabet : alphabets) {
    std::vector<std::string> characters;
    for (const auto& entry : fs::directory_iterator(fs::path(root) / alphabet)) {
      if (entry.is_directory()) characters.push_back(entry.path().filename().string());
    }
    std::sort(characters.begin(), characters.end());
    for (const auto& character : characters) {
      RawClass cls;
      cls.name = alphabet + "/" + character;
      std::vector<std::string> files;
      for (const auto& entry : fs::directory_iterator(fs::path(root) / alphabet / character)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") {
          files.push_back(entry.path().string());
        }
      }
      std::sort(files.begin(), files.end());
      for (const auto& file : files) {
        Tensor img = png_io::read_gray(file);  // throws naming the path
        Tensor small = png_io::resize_area(img, kImageSize, kImageSize);
        std::vector<uint8_t> bytes(kImageSize * kImageSize);
        for (size_t i = 0; i < bytes.size(); ++i) {
          bytes[i] = static_cast<uint8_t>(std::lround(small.data[i] * 255.0));
        }
        cls.images.push_back(std::move(bytes));
      }
      if (!cls.images.empty()) classes.push_back(std::move(cls));
    }
  }
  return classes;
}

Tensor image_from_bytes(const std::vector<uint8_t>& bytes) {
  Tensor img({kImageSize, kImageSize});
  for (size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

void append_rotated_classes(std::vector<DatasetSplit::ClassData>& out, const RawClass& cls) {
  for (int turns = 0; turns < 4; ++turns) {
    DatasetSplit::ClassData rotated;
    for (const auto& bytes : cls.images) {
      Tensor img = png_io::rotate_quarter(image_from_bytes(bytes), turns);
      rotated.examples.push_back(Tensor({kImageSize, kImageSize, 1}, std::move(img.data)));
    }
    out.push_back(std::move(rotated));
  }
}

}  // namespace

DatasetSplit load_omniglot(const std::string& root) {
  if (!fs::is_directory(root)) {
    throw std::runtime_error("dataset root '" + root + "' is not a directory");
  }
  std::vector<RawClass> classes;
  const std::string cache = cache_path_for(root);
  if (!read_cache(cache, classes)) {
    classes = scan_image_tree(root);
    if (classes.empty()) {
      throw std::runtime_error("no '<alphabet>/<character>/*.png' classes under '" + root + "'");
    }
    write_cache(cache, classes);
  }

  // Deterministic seeded shuffle, then a 1100/200/423 split (scaled
  // proportionally when the corpus has fewer character classes).
  std::vector<int64_t> order(classes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
  Rng shuffle_rng(kSplitShuffleSeed);
  shuffle_rng.shuffle(order);

  const int64_t total = static_cast<int64_t>(classes.size());
  int64_t n_train = 1100, n_val = 200;
  if (total < 1723) {
    n_train = std::max<int64_t>(1, total * 1100 / 1723);
    n_val = std::max<int64_t>(total >= 3 ? 1 : 0, total * 200 / 1723);
    if (n_train + n_val >= total) n_train = std::max<int64_t>(1, total - n_val - 1);
  }
  DatasetSplit split;
  split.example_shape = {kImageSize, kImageSize, 1};
  for (int64_t i = 0; i < total; ++i) {
    const RawClass& cls = classes[static_cast<size_t>(order[static_cast<size_t>(i)])];
    if (i < n_train) {
      append_rotated_classes(split.train, cls);
    } else if (i < n_train + n_val) {
      append_rotated_classes(split.validation, cls);
    } else {
      append_rotated_classes(split.test, cls);
    }
  }
  return split;
}

double nearest_centroid_accuracy(const std::vector<DatasetSplit::ClassData>& classes,
                                 int64_t fit_per_class) {
  if (classes.empty()) throw std::invalid_argument("no classes");
  const int64_t dim = classes[0].examples.at(0).numel();
  std::vector<Tensor> centroids;
  for (const auto& cls : classes) {
    Tensor c({dim}, 0.0);
    for (int64_t i = 0; i < fit_per_class; ++i) {
      const Tensor& ex = cls.examples.at(static_cast<size_t>(i));
      for (int64_t d = 0; d < dim; ++d) c[d] += ex[d];
    }
    for (double& v : c.data) v /= static_cast<double>(fit_per_class);
    centroids.push_back(std::move(c));
  }
  int64_t correct = 0, count = 0;
  for (size_t ci = 0; ci < classes.size(); ++ci) {
    for (size_t e = static_cast<size_t>(fit_per_class); e < classes[ci].examples.size(); ++e) {
      const Tensor& ex = classes[ci].examples[e];
      double best = 1e300;
      size_t best_c = 0;
      for (size_t cj = 0; cj < centroids.size(); ++cj) {
        double sq = 0.0;
        for (int64_t d = 0; d < dim; ++d) {
          const double diff = ex[d] - centroids[cj][d];
          sq += diff * diff;
        }
        if (sq < best) {
          best = sq;
          best_c = cj;
        }
      }
      correct += best_c == ci ? 1 : 0;
      ++count;
    }
  }
  return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count);
}

}  // namespace metavrf::tasks
