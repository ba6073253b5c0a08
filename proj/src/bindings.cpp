#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <stdexcept>
#include <string>
#include <vector>

#include "metavrf/gradcheck.hpp"
#include "metavrf/inference.hpp"
#include "metavrf/kernels.hpp"
#include "metavrf/ridge.hpp"
#include "metavrf/rng.hpp"
#include "metavrf/runner.hpp"
#include "metavrf/tensor.hpp"

namespace py = pybind11;
using namespace metavrf;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  Tensor t;
  t.shape.assign(a.shape(), a.shape() + a.ndim());
  t.data.assign(a.data(), a.data() + a.size());
  return t;
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> dims(t.shape.begin(), t.shape.end());
  py::array_t<double> out(dims);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

kernels::ScaleMode parse_scale(const std::string& s) {
  if (s == "model") return kernels::ScaleMode::kModelScale;
  if (s == "unbiased") return kernels::ScaleMode::kUnbiasedScale;
  throw std::invalid_argument("scale must be 'model' or 'unbiased'");
}

runner::ExperimentConfig config_from_dict(const py::dict& d) {
  nlohmann::json j;
  for (auto item : d) {
    const std::string key = py::str(item.first);
    const py::handle v = item.second;
    if (py::isinstance<py::bool_>(v)) j[key] = v.cast<bool>();
    else if (py::isinstance<py::int_>(v)) j[key] = v.cast<int64_t>();
    else if (py::isinstance<py::float_>(v)) j[key] = v.cast<double>();
    else j[key] = std::string(py::str(v));
  }
  return runner::ExperimentConfig::from_json(j);
}

py::dict report_to_dict(const runner::EvalReport& r) {
  py::dict d;
  d["metric"] = r.metric;
  d["mean"] = r.mean;
  d["ci95"] = r.ci95;
  d["episodes"] = r.episodes;
  d["per_episode"] = r.per_episode;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Meta-learned variational random feature kernels: feature maps, "
            "ridge solver, KL, training and evaluation entry points.";

  m.def(
      "sample_basis",
      [](uint64_t seed, int64_t bases, int64_t dim, const std::string& scale, double freq_stddev) {
        Rng rng(seed);
        auto basis = kernels::sample_basis(rng, bases, dim, parse_scale(scale), freq_stddev);
        return py::make_tuple(to_array(basis.frequencies), to_array(basis.biases));
      },
      py::arg("seed"), py::arg("bases"), py::arg("dim"), py::arg("scale") = "unbiased",
      py::arg("freq_stddev") = 1.0,
      "Draw (frequencies, phases) for a random cosine feature map.");

  m.def(
      "feature_map",
      [](const DoubleArray& x, const DoubleArray& freqs, const DoubleArray& phases,
         const std::string& scale) {
        kernels::SpectralBasis basis;
        basis.frequencies = to_tensor(freqs);
        basis.biases = to_tensor(phases);
        basis.scale_mode = parse_scale(scale);
        return to_array(kernels::feature_map(basis, to_tensor(x)));
      },
      py::arg("x"), py::arg("frequencies"), py::arg("phases"), py::arg("scale") = "unbiased",
      "Cosine features: row i, col j = s * cos(w_j . x_i + b_j).");

  m.def(
      "rbf_exact",
      [](const DoubleArray& x, const DoubleArray& x_prime, double sigma) {
        return to_array(kernels::rbf_exact(to_tensor(x), to_tensor(x_prime), sigma));
      },
      py::arg("x"), py::arg("x_prime"), py::arg("sigma") = 1.0,
      "Exact Gaussian kernel matrix.");

  m.def(
      "mean_pairwise_bandwidth",
      [](const DoubleArray& x) { return kernels::mean_pairwise_bandwidth(to_tensor(x)); },
      py::arg("x"), "Mean pairwise Euclidean distance between rows.");

  m.def(
      "ridge_fit",
      [](const DoubleArray& k, const DoubleArray& y, double lam) {
        return to_array(ridge::fit(to_tensor(k), to_tensor(y), lam).alpha);
      },
      py::arg("gram"), py::arg("targets"), py::arg("lam"),
      "Dual coefficients alpha = Y (lambda I + K)^-1.");

  m.def(
      "ridge_predict",
      [](const DoubleArray& alpha, double lam, const DoubleArray& k_cross) {
        ridge::RidgeSolution sol{to_tensor(alpha), lam};
        return to_array(ridge::predict(sol, to_tensor(k_cross)));
      },
      py::arg("alpha"), py::arg("lam"), py::arg("gram_cross"),
      "Predictions alpha . K_cross for a fitted system.");

  m.def(
      "kl_diag_gaussians",
      [](const DoubleArray& mu_q, const DoubleArray& log_var_q, const DoubleArray& mu_p,
         const DoubleArray& log_var_p) {
        inference::GaussianPosterior q{to_tensor(mu_q), to_tensor(log_var_q)};
        inference::GaussianPosterior p{to_tensor(mu_p), to_tensor(log_var_p)};
        return inference::kl_diag_gaussians(q, p);
      },
      py::arg("mu_q"), py::arg("log_var_q"), py::arg("mu_p"), py::arg("log_var_p"),
      "Closed-form KL between diagonal Gaussians.");

  m.def(
      "train",
      [](const py::dict& config) {
        auto result = runner::meta_train(config_from_dict(config));
        py::dict d;
        d["iterations"] = result.checkpoint.iteration;
        d["initial_loss"] = result.losses.empty() ? 0.0 : result.losses.front();
        d["final_loss"] = result.losses.empty() ? 0.0 : result.losses.back();
        d["out_dir"] = result.checkpoint.config.out_dir;
        return d;
      },
      py::arg("config"),
      "Meta-train from a config dict (keys mirror the CLI flags); returns a summary.");

  m.def(
      "evaluate",
      [](const std::string& checkpoint, int64_t episodes, int64_t ways, int64_t shots) {
        auto report = runner::meta_test(runner::Checkpoint::load(checkpoint), episodes, ways, shots);
        return report_to_dict(report);
      },
      py::arg("checkpoint"), py::arg("episodes") = 100, py::arg("ways") = -1,
      py::arg("shots") = -1, "Evaluate a saved checkpoint feed-forward.");

  m.def(
      "gradcheck",
      [](double tol) {
        py::list out;
        for (const auto& r : gradcheck::run_all(tol)) {
          py::dict d;
          d["name"] = r.name;
          d["max_rel_err"] = r.max_rel_err;
          d["passed"] = r.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("tol") = 1e-4, "Finite-difference audit of every graph primitive.");
}
