"""Exact GP inference on the training set, plus equivalent-kernel spectra.

Conventions.  The training discrepancy vector is ``delta = (y - f_bar) /
noise_var``; it doubles as the dual coefficients of the posterior mean,
``f_bar = Q_f delta``.  Overlaps with the target come in two signs:
``alpha_overlap`` follows the "prediction minus target" definition and
is negative whenever the model underfits, while ``alpha`` (its negation)
is the quantity that enters the self-consistency analysis, where the
discrepancy function is ``alpha * y``.  Both are exposed to avoid silent
sign surprises; they are the same number up to sign, not two estimates.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .kernels import regularized_inverse, regularized_solve


@dataclasses.dataclass
class PosteriorSummary:
    """Training-set posterior of GP regression with noise ``noise_var``."""

    f_bar: np.ndarray
    delta: np.ndarray
    train_mse: float
    alpha_overlap: float
    noise_var: float

    @property
    def alpha(self) -> float:
        """Target-discrepancy overlap with the opposite (positive) sign."""
        return -self.alpha_overlap


def posterior_mean(Q_f: np.ndarray, y: np.ndarray, noise_var: float,
                   jitter: float | None = None) -> PosteriorSummary:
    """Exact GP posterior mean on the training points.

    Solves ``(Q_f + noise_var I) delta = y`` by Cholesky and returns the
    summary statistics.  ``f_bar`` is computed as ``y - noise_var *
    delta``, which is algebraically identical to ``Q_f delta``; tests
    hold the two routes to agreement.
    """
    Q_f = np.asarray(Q_f, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if Q_f.shape != (n, n):
        raise ValueError("kernel and target sizes disagree")
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    delta = regularized_solve(Q_f + noise_var * np.eye(n), y, jitter)
    f_bar = y - noise_var * delta
    train_mse = float(np.mean((y - f_bar) ** 2))
    y_sq = float(y @ y)
    if y_sq == 0:
        raise ValueError("target vector is identically zero")
    alpha_overlap = float(-(delta @ y) / y_sq)
    return PosteriorSummary(f_bar=f_bar, delta=delta, train_mse=train_mse,
                            alpha_overlap=alpha_overlap, noise_var=noise_var)


def posterior_predict(Q_train: np.ndarray, Q_cross: np.ndarray, y: np.ndarray,
                      noise_var: float, test_diag: np.ndarray | None = None):
    """Predictive mean (and optionally variance) on held-out points.

    ``Q_cross`` has shape (n_train, n_test).  When ``test_diag`` (prior
    variances of the test points) is given, the predictive variances are
    returned as well.
    """
    Q_train = np.asarray(Q_train, dtype=float)
    Q_cross = np.asarray(Q_cross, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    shifted = Q_train + noise_var * np.eye(y.size)
    mean = Q_cross.T @ regularized_solve(shifted, y)
    if test_diag is None:
        return mean
    solved_cross = regularized_solve(shifted, Q_cross)
    var = np.asarray(test_diag, dtype=float) - np.einsum("ij,ij->j", Q_cross, solved_cross)
    return mean, np.maximum(var, 0.0)


def output_fluctuation(Q_f: np.ndarray, y: np.ndarray, noise_var: float,
                       include_covariance_term: bool = True) -> np.ndarray:
    """Output-layer contraction matrix driving the kernel updates.

    Returns ``delta delta^T - (Q_f + noise_var I)^{-1}``.  The second
    (posterior-covariance) term is kept by default; dropping it isolates
    the pure mean-driven feedback and is occasionally useful when
    comparing against keeping only the squared-discrepancy channel.
    """
    Q_f = np.asarray(Q_f, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    shifted = Q_f + noise_var * np.eye(y.size)
    delta = regularized_solve(shifted, y)
    A = np.outer(delta, delta)
    if include_covariance_term:
        inv, _ = regularized_inverse(shifted)
        A = A - inv
    return 0.5 * (A + A.T)


# ---------------------------------------------------------------------------
# equivalent-kernel spectra
# ---------------------------------------------------------------------------


def ek_gram_size(n: int, floor: int = 2000) -> int:
    """Default number of measure samples for spectral estimates."""
    return max(4 * n, floor)


@dataclasses.dataclass
class EKSpectrum:
    """Operator spectrum of a kernel under the data measure.

    Estimated from an M x M Gram matrix of measure samples: operator
    eigenvalues are Gram eigenvalues divided by M.  ``lambda_y`` is the
    top eigenvalue — for the kernels used here the target function lives
    in the leading (linear) eigenspace, so this is the eigenvalue that
    carries the signal.  ``cbar_n`` is the posterior-covariance sum
    ``sum_k 1 / (1/lambda_k + n / noise_var)`` entering the train-set
    correction factor.
    """

    eigenvalues: np.ndarray
    lambda_y: float
    cbar_n: float
    n: int
    noise_var: float
    gram_size: int
    retained: int


def cbar(eigenvalues: np.ndarray, n: int, noise_var: float,
         retain: int | None = None) -> float:
    """Posterior-covariance sum over an operator spectrum.

    ``retain`` truncates the sum to the leading ``retain`` eigenvalues.
    With a finite sample the slow tail of a nonlinear kernel is both
    broadened and over-counted, so when the signal sector of the kernel
    is known (e.g. the d-dimensional linear sector of an odd kernel
    under an isotropic measure) truncating to it gives a far better
    estimate of the large-M sum than keeping everything.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    lam = lam[lam > 0]
    if retain is not None:
        lam = np.sort(lam)[::-1][: int(retain)]
    return float(np.sum(1.0 / (1.0 / lam + n / noise_var)))


def ek_spectrum(gram: np.ndarray, n: int, noise_var: float,
                retain: int | None = None,
                negative_mass_tol: float = 1e-6) -> EKSpectrum:
    """Operator spectrum from a Gram matrix of measure samples.

    ``retain`` restricts the C̄_n sum to the leading modes (see
    :func:`cbar`); the full positive spectrum is always stored.  Raises
    if the negative spectral mass exceeds ``negative_mass_tol``
    (relative to the total absolute mass): that signals a Gram matrix
    that was not assembled from a valid kernel, not mere round-off.
    Round-off-level negative eigenvalues are dropped.
    """
    gram = np.asarray(gram, dtype=float)
    M = gram.shape[0]
    lam = np.linalg.eigvalsh(0.5 * (gram + gram.T)) / M
    total = float(np.sum(np.abs(lam)))
    negative = float(np.sum(np.abs(lam[lam < 0])))
    if total > 0 and negative > negative_mass_tol * total:
        raise np.linalg.LinAlgError(
            f"spectrum has negative mass fraction {negative / total:.3e}; "
            "Gram matrix is not consistent with a PSD kernel"
        )
    lam = np.sort(lam)[::-1]
    lam = lam[lam > 0]
    return EKSpectrum(
        eigenvalues=lam,
        lambda_y=float(lam[0]),
        cbar_n=cbar(lam, n, noise_var, retain),
        n=n,
        noise_var=noise_var,
        gram_size=M,
        retained=len(lam) if retain is None else min(int(retain), len(lam)),
    )


def ek_alpha(lambda_y: float, n: int, noise_var: float) -> float:
    """Equivalent-kernel discrepancy overlap, ``(s/n) / (lambda_y + s/n)``
    with ``s = noise_var``.  This is ``noise_var * alpha`` of the strict
    large-n limit; divide by ``noise_var`` for the alpha convention."""
    ratio = noise_var / n
    return ratio / (lambda_y + ratio)


def q_train(alpha_ek: float, cbar_n: float, noise_var: float) -> float:
    """Leading finite-n correction factor to the equivalent-kernel
    train-set prediction; exactly 1 in the strict limit (cbar_n -> 0 and
    alpha_ek -> 0)."""
    if not 0.0 <= alpha_ek < 1.0:
        raise ValueError("alpha_ek must lie in [0, 1)")
    return (1.0 - alpha_ek * (1.0 - cbar_n * alpha_ek / noise_var)) / (1.0 - alpha_ek)
