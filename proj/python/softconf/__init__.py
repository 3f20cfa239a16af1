"""Softmax confidence geometry toolkit."""

from ._core import (
    ConfigError,
    DegenerateWeightError,
    DimensionError,
    Error,
    GaussianMixture,
    IoError,
    LinearRegion,
    NumericalError,
    OnBoundaryError,
    SingularModelError,
    SoftmaxHead,
    attribute,
    audit_head,
    auroc,
    balanced_auroc,
    decompose,
    empirical_threshold,
    fit_gmm,
    fit_linear_region,
    gen_counterfactual_head,
    gen_optimal_head,
    grad_u_density,
    grad_u_entropy,
    grad_u_max,
    pca,
    regularized_xent,
    run_cli,
    score,
    softmax,
    solve_alpha_exact_k2,
    structured_clusters,
    u_cool,
    u_density,
    u_entropy,
    u_max,
    u_mental,
)

__all__ = [name for name in dir() if not name.startswith("_")]
