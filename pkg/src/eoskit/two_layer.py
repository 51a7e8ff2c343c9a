"""Closed-form self-consistent solution for a two-layer erf CNN.

For a linear teacher on isotropic Gaussian inputs the full
self-consistency system collapses to one scalar equation for the
discrepancy overlap ``alpha`` (defined through delta(x) = alpha y(x)):

    noise_var * alpha = 1 - q_train * lam_y / (lam_y + noise_var / n)

where the signal eigenvalue stiffens with feature learning,

    lam_y   = lambda_inf / (1 - chi2)            (without the bulk term)
    chi2    = alpha^2 n^2 lambda_inf ||a*||^2 ||w*||^2 / channels
    lambda_inf = 4 readout_var weight_var / (pi (1 + 2 weight_var) N S).

``chi2`` is the feature-learning scale; the analytic branch lives at
chi2 < 1.  Only the input-covariance eigenvalue along the teacher
direction moves:

    l_star = 1 / [ (S / weight_var) (1 - chi2) + bulk_shift ],

the remaining eigenvalues staying at weight_var / S (up to the same
optional bulk shift, an isotropic hardening from the posterior-
covariance channel that is numerically negligible in the regimes of
interest but kept available for completeness).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import scipy.optimize

from . import gp
from .kernels import WeightCovariance


@dataclasses.dataclass(frozen=True)
class TwoLayerConfig:
    """Geometry and hyperparameters of the two-layer CNN problem.

    ``channels`` may be ``math.inf`` for the GP limit.  Teacher norms
    default to 1 (normalised teachers); pass the drawn values when
    comparing against a specific dataset.
    """

    n: int
    window: int
    pixels: int
    channels: float
    readout_var: float = 2.0
    weight_var: float = 2.0
    noise_var: float = 0.1
    a_norm_sq: float = 1.0
    w_norm_sq: float = 1.0

    def __post_init__(self):
        if self.n <= 0 or self.window <= 0 or self.pixels <= 0:
            raise ValueError("n, window and pixels must be positive")
        if self.channels <= 0:
            raise ValueError("channels must be positive (may be inf)")
        if min(self.readout_var, self.weight_var, self.noise_var) <= 0:
            raise ValueError("variances must be positive")
        if min(self.a_norm_sq, self.w_norm_sq) <= 0:
            raise ValueError("teacher norms must be positive")


@dataclasses.dataclass
class TwoLayerSolution:
    alpha: float
    alpha_ek: float
    lambda_inf: float
    lambda_y: float
    l_star: float
    bulk_eigenvalue: float
    chi2: float
    q_train: float
    cbar_n: float
    root_count: int
    config: TwoLayerConfig
    sigma: WeightCovariance | None = None

    @property
    def train_mse_over_sigma4(self) -> float:
        """alpha^2 times the target second moment: train MSE / sigma^4
        per unit ||y||^2/n."""
        return self.alpha**2


def lambda_inf(cfg: TwoLayerConfig) -> float:
    """Signal (linear-sector) eigenvalue of the infinite-channel kernel."""
    return (4.0 * cfg.readout_var * cfg.weight_var
            / (math.pi * (1.0 + 2.0 * cfg.weight_var) * cfg.pixels * cfg.window))


def feedback_coefficient(cfg: TwoLayerConfig) -> float:
    """chi2 = feedback_coefficient * alpha^2 / channels."""
    return cfg.n**2 * lambda_inf(cfg) * cfg.a_norm_sq * cfg.w_norm_sq


def _bulk_shift(cfg: TwoLayerConfig, include_fluctuation: bool) -> float:
    """Isotropic Sigma^-1 shift from the posterior-covariance channel,
    with Tr[Sigma] frozen at weight_var."""
    if not include_fluctuation or math.isinf(cfg.channels):
        return 0.0
    lam = lambda_inf(cfg)
    return (4.0 * cfg.n * cfg.readout_var
            / (cfg.channels * (1.0 + 2.0 * cfg.weight_var) * math.pi
               * (cfg.n * lam + cfg.noise_var)))


def _branch(cfg: TwoLayerConfig, alpha: float, bulk: float):
    """(chi2, l_star, lambda_y) along the analytic branch at given alpha."""
    kappa = feedback_coefficient(cfg)
    chi2 = 0.0 if math.isinf(cfg.channels) else kappa * alpha**2 / cfg.channels
    stiffness = (cfg.window / cfg.weight_var) * (1.0 - chi2) + bulk
    if stiffness <= 0.0:
        return chi2, math.inf, math.inf
    l_star = 1.0 / stiffness
    lam_y = lambda_inf(cfg) * (cfg.window / cfg.weight_var) * l_star
    return chi2, l_star, lam_y


def solve_alpha(cfg: TwoLayerConfig, q_train: float | None = None,
                cbar_n: float = 0.0, include_fluctuation: bool = False,
                grid_points: int = 256) -> TwoLayerSolution:
    """Solve the scalar self-consistency equation for alpha.

    ``q_train`` fixes the train-set correction factor; by default it is
    recomputed from ``cbar_n`` at the running lam_y, which is the
    self-consistent choice.  The admissible bracket is
    alpha in (0, (1 - eps)/noise_var) intersected with the chi2 < 1
    branch; a coarse grid scan locates sign changes and each is
    polished by Brent's method.  When several roots appear the one with
    the smallest chi2 is returned and ``root_count`` records how many
    were found.
    """
    bulk = _bulk_shift(cfg, include_fluctuation)
    s_over_n = cfg.noise_var / cfg.n

    def q_at(lam_y: float) -> float:
        if q_train is not None:
            return q_train
        return gp.q_train(gp.ek_alpha(lam_y, cfg.n, cfg.noise_var), cbar_n, cfg.noise_var)

    def residual(alpha: float) -> float:
        chi2, _, lam_y = _branch(cfg, alpha, bulk)
        if not math.isfinite(lam_y):
            return math.inf
        return (cfg.noise_var * alpha - 1.0
                + q_at(lam_y) * lam_y / (lam_y + s_over_n))

    lo = 1e-12
    hi = (1.0 - 1e-12) / cfg.noise_var
    if not math.isinf(cfg.channels):
        kappa = feedback_coefficient(cfg)
        branch_edge = math.sqrt(
            (1.0 + bulk * cfg.weight_var / cfg.window) * cfg.channels / kappa
        )
        hi = min(hi, branch_edge * (1.0 - 1e-9))

    grid = np.linspace(lo, hi, grid_points)
    values = np.array([residual(a) for a in grid])
    roots: list[float] = []
    for i in range(len(grid) - 1):
        va, vb = values[i], values[i + 1]
        if not (math.isfinite(va) and math.isfinite(vb)):
            continue
        if va == 0.0:
            roots.append(float(grid[i]))
        elif va * vb < 0.0:
            roots.append(float(scipy.optimize.brentq(residual, grid[i], grid[i + 1],
                                                     xtol=1e-14, rtol=1e-14)))
    # admissible roots stay strictly inside the chi2 < 1 branch
    admissible = []
    for r in roots:
        chi2, _, lam_y = _branch(cfg, r, bulk)
        if math.isfinite(lam_y) and chi2 < 1.0 - 1e-9:
            admissible.append((chi2, r))
    if not admissible:
        raise ValueError(
            "no admissible alpha root: the feature-learning scale chi2 reaches 1 "
            "before the discrepancy equation balances (channels too small for "
            "the analytic branch)"
        )
    admissible.sort()
    alpha = admissible[0][1]
    chi2, l_star, lam_y = _branch(cfg, alpha, bulk)
    bulk_eig = 1.0 / (cfg.window / cfg.weight_var + bulk)
    return TwoLayerSolution(
        alpha=alpha,
        alpha_ek=gp.ek_alpha(lam_y, cfg.n, cfg.noise_var),
        lambda_inf=lambda_inf(cfg),
        lambda_y=lam_y,
        l_star=l_star,
        bulk_eigenvalue=bulk_eig,
        chi2=chi2,
        q_train=q_at(lam_y),
        cbar_n=cbar_n,
        root_count=len(admissible),
        config=cfg,
    )


def first_order_alpha(cfg: TwoLayerConfig, cbar_n: float = 0.0) -> tuple[float, float]:
    """Tangent of alpha(1/channels) at the GP point.

    Returns ``(alpha_gp, slope)`` such that the first-order 1/C
    expansion predicts ``alpha_gp - slope / channels``.  With
    ``a = ek_alpha(lam_y)`` the discrepancy equation collapses to
    ``noise_var * alpha = a (1 - cbar_n a / noise_var)``, so
    differentiating through ``lam_y = lam_inf / (1 - kappa alpha^2 / C)``
    at 1/C = 0 gives exactly

        slope = (1 - 2 cbar_n a / noise_var) a (1 - a) kappa alpha_gp^2
                / noise_var.

    Comparing this line against the full solution is the cleanest way to
    exhibit the non-perturbative regime: once chi2 is order one the true
    alpha departs from the tangent completely.
    """
    gp_cfg = dataclasses.replace(cfg, channels=math.inf)
    sol_gp = solve_alpha(gp_cfg, cbar_n=cbar_n)
    alpha_gp = sol_gp.alpha
    a = gp.ek_alpha(sol_gp.lambda_y, cfg.n, cfg.noise_var)
    kappa = feedback_coefficient(cfg)
    correction = 1.0 - 2.0 * cbar_n * a / cfg.noise_var
    slope = correction * a * (1.0 - a) * kappa * alpha_gp**2 / cfg.noise_var
    return alpha_gp, slope


def sigma_construct(solution: TwoLayerSolution, w_star: np.ndarray) -> WeightCovariance:
    """Assemble the input weight covariance from the solved eigenvalues.

    Only the direction of ``w_star`` matters; it is normalised here.
    The covariance is ``l_star`` along the teacher direction and the
    bulk eigenvalue on its orthogonal complement.
    """
    w = np.asarray(w_star, dtype=float).ravel()
    norm = float(np.linalg.norm(w))
    if norm == 0:
        raise ValueError("teacher direction must be nonzero")
    if w.size != solution.config.window:
        raise ValueError("teacher direction has the wrong dimension")
    w = w / norm
    eye = np.eye(w.size)
    mat = (solution.l_star * np.outer(w, w)
           + solution.bulk_eigenvalue * (eye - np.outer(w, w)))
    return WeightCovariance(mat)
