"""Dense kernel primitives for finite-width self-consistency calculations.

Kernels live on a flat index that interleaves data points and pixels
(patch positions).  The layout is point-major: the flat index of data
point ``mu`` at pixel ``i`` is ``mu * pixels + i``.  Fully connected
networks are the single-pixel case, so every routine here covers both
architectures.

Two activation maps are provided in closed form.  For ``erf`` units with
pre-activation kernel ``K`` the post-activation kernel is

    Q[a, b] = out_var * (2/pi) * asin( 2 K[a,b] / sqrt((1 + 2 K[a,a]) (1 + 2 K[b,b])) )

and for ``relu`` units the (zero-mean input) arc-cosine expression

    Q[a, b] = out_var * sqrt(K[a,a] K[b,b]) / (2 pi) * (sin t + (pi - t) cos t),
    cos t = K[a,b] / sqrt(K[a,a] K[b,b]).

The erf map additionally has a closed-form adjoint: the matrix of trace
derivatives ``M[a, b] = Tr[A dQ/dK[a, b]]`` with every entry of ``K``
treated as independent.  That adjoint is the workhorse of the
equations-of-state updates; it never materialises the O(m^4) derivative
tensor.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import scipy.linalg

ACTIVATIONS = ("erf", "relu", "linear")

# Tolerated overshoot of |cos|-like arguments before an error is raised.
# Round-off from well-conditioned kernels stays far below this; anything
# larger signals a genuinely non-PSD input and must not be clipped away.
CLAMP_TOL = 1e-12


class KernelDomainError(ValueError):
    """Raised when a kernel violates the domain of an activation map."""


@dataclasses.dataclass(frozen=True)
class IndexSpace:
    """Flat indexing of (data point, pixel) pairs, point-major.

    ``pixels`` is the number of patch positions; use ``pixels=1`` for
    fully connected layers.  ``flat(mu, i) == mu * pixels + i``.
    """

    n_points: int
    pixels: int = 1

    def __post_init__(self):
        if self.n_points <= 0 or self.pixels <= 0:
            raise ValueError("IndexSpace dimensions must be positive")

    @property
    def size(self) -> int:
        return self.n_points * self.pixels

    def flat(self, point: int, pixel: int = 0) -> int:
        if not (0 <= point < self.n_points and 0 <= pixel < self.pixels):
            raise IndexError("index out of range")
        return point * self.pixels + pixel

    def unflat(self, index: int) -> tuple[int, int]:
        point, pixel = divmod(int(index), self.pixels)
        if not 0 <= point < self.n_points:
            raise IndexError("index out of range")
        return point, pixel

    def pixel_indices(self, pixel: int) -> np.ndarray:
        """Flat indices of every data point at one pixel position."""
        if not 0 <= pixel < self.pixels:
            raise IndexError("pixel out of range")
        return np.arange(self.n_points) * self.pixels + pixel


@dataclasses.dataclass
class KernelMatrix:
    """A dense symmetric kernel over an :class:`IndexSpace`.

    Thin wrapper used at API boundaries; the numerical routines operate
    on plain arrays.  ``block(i, k)`` extracts the ``n x n`` sub-kernel
    coupling pixel ``i`` to pixel ``k``.
    """

    array: np.ndarray
    space: IndexSpace

    def __post_init__(self):
        self.array = np.asarray(self.array, dtype=float)
        m = self.space.size
        if self.array.shape != (m, m):
            raise ValueError(
                f"kernel shape {self.array.shape} does not match index space size {m}"
            )

    def block(self, pixel_i: int, pixel_k: int) -> np.ndarray:
        rows = self.space.pixel_indices(pixel_i)
        cols = self.space.pixel_indices(pixel_k)
        return self.array[np.ix_(rows, cols)]

    def symmetrized(self) -> "KernelMatrix":
        return KernelMatrix(0.5 * (self.array + self.array.T), self.space)


@dataclasses.dataclass
class WeightCovariance:
    """Input-layer weight covariance with spectral helpers."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("weight covariance must be square")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def eigendecomposition(self) -> tuple[np.ndarray, np.ndarray]:
        return scipy.linalg.eigh(0.5 * (self.matrix + self.matrix.T))

    def top_eigpair(self) -> tuple[float, np.ndarray]:
        """Largest eigenvalue and its (unit) eigenvector."""
        lam, vec = self.eigendecomposition()
        v = vec[:, -1]
        # fix an overall sign so repeated calls are reproducible
        j = int(np.argmax(np.abs(v)))
        if v[j] < 0:
            v = -v
        return float(lam[-1]), v

    def bulk_mean(self) -> float:
        """Mean of all eigenvalues below the top one."""
        lam, _ = self.eigendecomposition()
        if self.dim == 1:
            return float(lam[0])
        return float(np.mean(lam[:-1]))

    def trace(self) -> float:
        return float(np.trace(self.matrix))


# ---------------------------------------------------------------------------
# patch handling and input-layer kernels
# ---------------------------------------------------------------------------


def extract_patches(X: np.ndarray, window: int) -> np.ndarray:
    """Split flat inputs into non-overlapping windows.

    Returns an array of shape ``(n, d // window, window)``.  Raises if
    the input dimension is not a multiple of the window.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-d (points, features)")
    n, d = X.shape
    if window <= 0 or d % window:
        raise ValueError(f"input dimension {d} is not divisible by window {window}")
    return X.reshape(n, d // window, window)


def input_kernel(X: np.ndarray, sigma: np.ndarray, window: int | None = None) -> KernelMatrix:
    """Pre-activation kernel of the first layer, ``K = P sigma P^T``.

    For fully connected layers (``window=None``) the rows of ``P`` are
    the inputs themselves.  For convolutional layers each row is one
    patch, and the flat index runs point-major over (point, pixel).
    """
    X = np.asarray(X, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if window is None:
        P = X
        space = IndexSpace(X.shape[0], 1)
    else:
        patches = extract_patches(X, window)
        space = IndexSpace(X.shape[0], patches.shape[1])
        P = patches.reshape(space.size, window)
    if sigma.shape != (P.shape[1], P.shape[1]):
        raise ValueError(
            f"covariance shape {sigma.shape} does not match patch size {P.shape[1]}"
        )
    K = P @ sigma @ P.T
    return KernelMatrix(0.5 * (K + K.T), space)


# ---------------------------------------------------------------------------
# activation maps
# ---------------------------------------------------------------------------


def _checked_clip(ratio: np.ndarray, what: str) -> np.ndarray:
    """Clip |ratio| to 1, erroring if the overshoot exceeds CLAMP_TOL."""
    overshoot = np.abs(ratio) - 1.0
    worst = float(np.max(overshoot, initial=0.0))
    if worst > CLAMP_TOL:
        raise KernelDomainError(
            f"{what} argument exceeds [-1, 1] by {worst:.3e}; "
            "the input kernel is not positive semi-definite"
        )
    return np.clip(ratio, -1.0, 1.0)


def erf_post_kernel(K: np.ndarray, out_var: float = 1.0) -> np.ndarray:
    """Post-activation kernel of erf units, scaled by ``out_var``."""
    K = np.asarray(K, dtype=float)
    d = 1.0 + 2.0 * np.diag(K)
    if np.any(d <= 0):
        raise KernelDomainError("erf map needs diagonal entries > -1/2")
    norm = np.sqrt(np.outer(d, d))
    ratio = _checked_clip(2.0 * K / norm, "erf kernel map")
    return out_var * (2.0 / math.pi) * np.arcsin(ratio)


def relu_post_kernel(K: np.ndarray, out_var: float = 1.0) -> np.ndarray:
    """Post-activation kernel of ReLU units (degree-1 arc-cosine form)."""
    K = np.asarray(K, dtype=float)
    d = np.diag(K).copy()
    if np.any(d < 0):
        raise KernelDomainError("relu map needs a non-negative diagonal")
    norm = np.sqrt(np.outer(d, d))
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_t = np.where(norm > 0, K / np.where(norm > 0, norm, 1.0), 0.0)
    cos_t = _checked_clip(cos_t, "relu kernel map")
    theta = np.arccos(cos_t)
    Q = out_var * norm / (2.0 * math.pi) * (np.sin(theta) + (math.pi - theta) * cos_t)
    # points with zero self-overlap contribute nothing
    return np.where(norm > 0, Q, 0.0)


def linear_post_kernel(K: np.ndarray, out_var: float = 1.0) -> np.ndarray:
    """Post-"activation" kernel of a linear layer: just a rescaling."""
    return out_var * np.asarray(K, dtype=float)


def post_kernel(kind: str, K: np.ndarray, out_var: float = 1.0) -> np.ndarray:
    """Dispatch on the activation name. See module docstring for formulas."""
    if kind == "erf":
        return erf_post_kernel(K, out_var)
    if kind == "relu":
        return relu_post_kernel(K, out_var)
    if kind == "linear":
        return linear_post_kernel(K, out_var)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def erf_post_kernel_adjoint(K: np.ndarray, out_var: float, A: np.ndarray) -> np.ndarray:
    """Trace-derivative matrix ``M[a,b] = Tr[A dQ/dK[a,b]]`` of the erf map.

    Entries of ``K`` are treated as independent (no symmetry factor of
    two), which is the convention probed by a one-entry finite
    difference ``Tr[A (Q(K + h E_ab) - Q(K - h E_ab))] / (2h)``.

    Writing ``beta_a = (1 + 2 K[a,a])^(-1/2)`` and
    ``u = 2 K[a,b] beta_a beta_b``, the derivative of ``asin`` gives

        M[a,b] = 2 W[a,b] beta_a beta_b            (a != b)
        M[a,a] = 2 W[a,a] beta_a^2
                 - 2/(1 + 2 K[a,a]) * sum_b W[a,b] u[a,b]

    with ``W = A * out_var * (2/pi) / sqrt(1 - u^2)``.  The diagonal
    correction comes from the normalising factors, which depend on the
    diagonal of ``K``.
    """
    K = np.asarray(K, dtype=float)
    A = np.asarray(A, dtype=float)
    if A.shape != K.shape:
        raise ValueError("contraction matrix must match the kernel shape")
    d = 1.0 + 2.0 * np.diag(K)
    if np.any(d <= 0):
        raise KernelDomainError("erf map needs diagonal entries > -1/2")
    beta = 1.0 / np.sqrt(d)
    u = _checked_clip(2.0 * K * np.outer(beta, beta), "erf kernel adjoint")
    W = A * (out_var * (2.0 / math.pi)) / np.sqrt(np.maximum(1.0 - u * u, 1e-300))
    M = 2.0 * W * np.outer(beta, beta)
    diag_correction = (2.0 / d) * np.sum(W * u, axis=1)
    np.fill_diagonal(M, 2.0 * np.diag(W) * beta**2 - diag_correction)
    return M


def linear_post_kernel_adjoint(K: np.ndarray, out_var: float, A: np.ndarray) -> np.ndarray:
    """Adjoint of the linear map: ``Tr[A d(out_var K)/dK[a,b]] = out_var A``."""
    A = np.asarray(A, dtype=float)
    if A.shape != np.asarray(K).shape:
        raise ValueError("contraction matrix must match the kernel shape")
    return out_var * A


def post_kernel_adjoint(kind: str, K: np.ndarray, out_var: float, A: np.ndarray) -> np.ndarray:
    """Adjoint dispatch. ReLU has no adjoint here (not differentiable at 0
    in a way the self-consistency updates can use) and is rejected."""
    if kind == "erf":
        return erf_post_kernel_adjoint(K, out_var, A)
    if kind == "linear":
        return linear_post_kernel_adjoint(K, out_var, A)
    if kind == "relu":
        raise ValueError("relu has no closed-form adjoint; use erf or linear")
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# readout / stride contractions
# ---------------------------------------------------------------------------


def readout_average(Q: np.ndarray | KernelMatrix, space: IndexSpace | None = None,
                    readout_var: float = 1.0) -> np.ndarray:
    """Average the same-pixel blocks of a post-activation kernel.

    Implements the final-layer contraction of a mean readout over
    pixels and channels,

        Q_f[mu, nu] = (readout_var / pixels) * sum_i Q[(mu, i), (nu, i)],

    assuming ``Q`` is the unit-variance post-kernel of the penultimate
    layer.  For a single pixel this is just ``readout_var * Q``.
    """
    if isinstance(Q, KernelMatrix):
        if space is None:
            space = Q.space
        Q = Q.array
    if space is None:
        raise ValueError("an IndexSpace is required for plain arrays")
    Q = np.asarray(Q, dtype=float)
    n, P = space.n_points, space.pixels
    if Q.shape != (space.size, space.size):
        raise ValueError("kernel does not match the index space")
    blocks = Q.reshape(n, P, n, P)
    return (readout_var / P) * np.einsum("mini->mn", blocks)


def lift_readout_contraction(A: np.ndarray, space: IndexSpace,
                             readout_var: float = 1.0) -> np.ndarray:
    """Adjoint of :func:`readout_average`.

    Maps an ``n x n`` contraction matrix on the readout kernel to the
    equivalent contraction on the full (point, pixel) kernel:
    ``A_full[(mu,i),(nu,k)] = (readout_var / pixels) A[mu,nu] delta_ik``.
    Only needed when the full kernel is materialised (desk scales); the
    fast paths fold the same weights in per pixel.
    """
    A = np.asarray(A, dtype=float)
    n, P = space.n_points, space.pixels
    if A.shape != (n, n):
        raise ValueError("contraction matrix must be n x n")
    out = np.zeros((n, P, n, P))
    for i in range(P):
        out[:, i, :, i] = (readout_var / P) * A
    return out.reshape(space.size, space.size)


def strided_post_kernel(patches: np.ndarray, sigma: np.ndarray, kind: str,
                        out_var: float) -> np.ndarray:
    """Forward map of a convolutional layer directly from input patches.

    ``patches`` has shape ``(n, groups, inner, s)``: for every data
    point, ``groups`` output pixels each pooling ``inner`` input
    positions with window size ``s``.  The returned kernel is flat
    point-major over ``(point, group)`` and equals

        (out_var / inner) * sum_i  g( P_i sigma P_i^T )

    where ``P_i`` stacks the patches at inner position ``i`` and ``g``
    is the activation's kernel map.  Memory use is one
    ``(n*groups)^2`` block at a time, never the full patch-level kernel.
    Special cases: ``groups=1`` gives a readout (kernel over points),
    ``groups=inner=1`` a fully connected layer.
    """
    patches = np.asarray(patches, dtype=float)
    if patches.ndim != 4:
        raise ValueError("patches must have shape (n, groups, inner, window)")
    n, groups, inner, s = patches.shape
    m = n * groups
    out = np.zeros((m, m))
    for i in range(inner):
        P_i = patches[:, :, i, :].reshape(m, s)
        K_i = P_i @ sigma @ P_i.T
        K_i = 0.5 * (K_i + K_i.T)
        out += post_kernel(kind, K_i, 1.0)
    out *= out_var / inner
    return out


def strided_post_adjoint(patches: np.ndarray, sigma: np.ndarray, kind: str,
                         out_var: float, A: np.ndarray) -> np.ndarray:
    """Gradient of ``Tr[A strided_post_kernel(...)]`` with respect to sigma.

    Returns the ``s x s`` matrix ``sum_i P_i^T M_i P_i`` where ``M_i``
    is the activation adjoint of the inner-position sub-kernel
    contracted against ``(out_var / inner) A``.  This is exact because
    the contraction matrix couples (point, group) pairs only at equal
    inner positions, so the full-kernel adjoint is block diagonal in
    the inner index.
    """
    patches = np.asarray(patches, dtype=float)
    n, groups, inner, s = patches.shape
    m = n * groups
    A = np.asarray(A, dtype=float)
    if A.shape != (m, m):
        raise ValueError("contraction matrix must cover (point, group) pairs")
    scaled = (out_var / inner) * A
    grad = np.zeros((s, s))
    for i in range(inner):
        P_i = patches[:, :, i, :].reshape(m, s)
        K_i = P_i @ sigma @ P_i.T
        K_i = 0.5 * (K_i + K_i.T)
        M_i = post_kernel_adjoint(kind, K_i, 1.0, scaled)
        grad += P_i.T @ M_i @ P_i
    return 0.5 * (grad + grad.T)


# ---------------------------------------------------------------------------
# linear algebra helpers
# ---------------------------------------------------------------------------


def default_jitter(M: np.ndarray) -> float:
    """Default regularisation scale: 1e-10 times the mean diagonal."""
    diag_mean = float(np.mean(np.abs(np.diag(M))))
    return 1e-10 * (diag_mean if diag_mean > 0 else 1.0)


def regularized_cholesky(M: np.ndarray, jitter: float | None = None):
    """Cholesky factor of ``M + eps I`` with jitter escalation.

    Tries ``eps``, ``10 eps``, ``100 eps`` and raises if all fail.
    Returns ``(factor, eps_used)`` where ``factor`` is the
    ``scipy.linalg.cho_factor`` output.
    """
    M = np.asarray(M, dtype=float)
    eps0 = default_jitter(M) if jitter is None else float(jitter)
    eye = np.eye(M.shape[0])
    last_err: Exception | None = None
    for mult in (1.0, 10.0, 100.0):
        eps = eps0 * mult
        try:
            factor = scipy.linalg.cho_factor(M + eps * eye, lower=True)
            return factor, eps
        except scipy.linalg.LinAlgError as err:
            last_err = err
    raise np.linalg.LinAlgError(
        f"matrix is not positive definite even with jitter {100 * eps0:.3e}"
    ) from last_err


def regularized_inverse(M: np.ndarray, jitter: float | None = None):
    """Symmetric positive-definite inverse with jitter escalation.

    Returns ``(M_inv, eps_used)``; see :func:`regularized_cholesky` for
    the escalation policy.
    """
    factor, eps = regularized_cholesky(M, jitter)
    inv = scipy.linalg.cho_solve(factor, np.eye(M.shape[0]))
    return 0.5 * (inv + inv.T), eps


def regularized_solve(M: np.ndarray, B: np.ndarray, jitter: float | None = None) -> np.ndarray:
    """Solve ``M x = B`` through the jittered Cholesky factorisation."""
    factor, _ = regularized_cholesky(M, jitter)
    return scipy.linalg.cho_solve(factor, np.asarray(B, dtype=float))


def psd_clip(M: np.ndarray, rel_floor: float = 1e-12) -> tuple[np.ndarray, int]:
    """Project a symmetric matrix onto the PSD cone (softly).

    Eigenvalues below ``rel_floor * max(eigenvalue)`` are raised to that
    floor; the count of strictly negative eigenvalues encountered is
    returned so callers can track how often the projection fires.
    """
    M = 0.5 * (np.asarray(M, dtype=float) + np.asarray(M, dtype=float).T)
    lam, vec = scipy.linalg.eigh(M)
    clipped = int(np.sum(lam < 0.0))
    floor = rel_floor * max(float(lam[-1]), 0.0)
    if clipped == 0 and lam[0] >= floor:
        return M, 0
    lam = np.maximum(lam, floor)
    out = (vec * lam) @ vec.T
    return 0.5 * (out + out.T), clipped
