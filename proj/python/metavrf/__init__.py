"""Meta-learned variational random feature kernels.

Thin python surface over the C++ core: random cosine feature maps, the
closed-form kernel ridge solver, diagonal-Gaussian KL, gradient auditing, and
the episodic train/evaluate entry points.
"""

from metavrf._core import (
    evaluate,
    feature_map,
    gradcheck,
    kl_diag_gaussians,
    mean_pairwise_bandwidth,
    rbf_exact,
    ridge_fit,
    ridge_predict,
    sample_basis,
    train,
)

__all__ = [
    "evaluate",
    "feature_map",
    "gradcheck",
    "kl_diag_gaussians",
    "mean_pairwise_bandwidth",
    "rbf_exact",
    "ridge_fit",
    "ridge_predict",
    "sample_basis",
    "train",
]
