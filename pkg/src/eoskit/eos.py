"""Self-consistent kernel equations for finite-width networks trained to
equilibrium.

The unknowns are the input weight covariance ``Sigma`` and the hidden
pre-activation kernels ``K^(l)``.  Each carries an inverse-form update:
the readout layer feeds back through the output fluctuation matrix
``A_out = delta delta^T - (Q_f + noise*I)^{-1}`` and every hidden layer
through ``A^(l) = Q^{-1} (Q - K) Q^{-1}``, pushed down one layer by the
adjoint of the activation kernel map.  A damped Picard iteration (with
an optional Newton-Krylov refinement) drives the stacked residual to a
fixed point; widths can be annealed from large to small so each stage
warm-starts the next.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.optimize

from .gp import PosteriorSummary, output_fluctuation, posterior_mean
from .kernels import (
    IndexSpace,
    KernelDomainError,
    extract_patches,
    erf_post_kernel,
    lift_readout_contraction,
    post_kernel,
    post_kernel_adjoint,
    readout_average,
    regularized_inverse,
    strided_post_adjoint,
    strided_post_kernel,
)
from .networks import NetworkSpec

__all__ = [
    "SolverOptions",
    "EoSState",
    "StageResult",
    "EmergentScale",
    "hidden_fluctuation",
    "kl_gradient",
    "fcn_residual",
    "cnn_residual",
    "solve",
    "emergent_scale",
    "mf_diagnostic",
]


@dataclasses.dataclass(frozen=True)
class SolverOptions:
    """Knobs for the fixed-point iteration.

    ``damping`` under-relaxes the output-feedback matrix (the data
    term driving all equations): each sweep mixes the freshly computed
    matrix into a running average with weight ``damping`` and solves
    the layer equations against the average, undamped.  Damping the
    kernels themselves instead would leave each sweep a stale K - Q
    gap that the inter-layer conditions amplify without any 1/width
    suppression.  ``schedule`` is an optional strictly decreasing list of
    hidden widths ending at the target width; each stage warm-starts
    the next.  ``update_mode`` "jacobi" defers all block updates to the
    end of the sweep; it is exposed for diagnostics, but the one-sweep
    lag it introduces between layers can oscillate on deep problems
    with strong feature learning, so "gauss-seidel" is the default.  When ``newton_krylov`` is on, a Krylov-accelerated root
    find is attempted once the Picard residual stalls (less than a 2x
    reduction over ten sweeps).
    """

    damping: float = 0.5
    max_iters: int = 500
    residual_tol: float = 1e-9
    schedule: tuple[int, ...] | None = None
    update_mode: str = "gauss-seidel"
    include_output_covariance: bool = True
    newton_krylov: bool = False
    krylov_dim: int = 20
    newton_iters: int = 25
    min_damping: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.update_mode not in ("gauss-seidel", "jacobi"):
            raise ValueError("update_mode must be gauss-seidel or jacobi")
        if self.schedule is not None:
            sched = tuple(int(w) for w in self.schedule)
            if any(b >= a for a, b in zip(sched, sched[1:])):
                raise ValueError("schedule widths must be strictly decreasing")
            object.__setattr__(self, "schedule", sched)


@dataclasses.dataclass(frozen=True)
class StageResult:
    width: int
    iterations: int
    residual: float
    converged: bool
    alpha: float


@dataclasses.dataclass
class EoSState:
    """Converged (or best-effort) solution of the layer equations."""

    spec: NetworkSpec
    noise_var: float
    sigma: np.ndarray
    pre_kernels: list[np.ndarray]
    post_kernels: list[np.ndarray]
    Q_f: np.ndarray
    posterior: PosteriorSummary
    output_fluct: np.ndarray
    residual: float
    iterations: int
    converged: bool
    clip_count: int
    history: tuple[float, ...]
    stages: tuple[StageResult, ...]

    @property
    def alpha(self) -> float:
        return self.posterior.alpha


class EmergentScale(tuple):
    """(chi, width_at_unity) pair; chi scales like 1/width at fixed posterior."""

    __slots__ = ()

    def __new__(cls, chi, width_at_unity):
        return tuple.__new__(cls, (float(chi), float(width_at_unity)))

    @property
    def chi(self):
        return self[0]

    @property
    def width_at_unity(self):
        return self[1]


# ---------------------------------------------------------------------------
# building blocks


def hidden_fluctuation(K, Q):
    """Fluctuation matrix ``Q^{-1} (Q - K) Q^{-1}`` of a hidden layer.

    Vanishes when the layer kernel agrees with its infinite-width image,
    so it measures how far the layer has moved from the lazy limit.
    """
    K = np.asarray(K, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if K.shape != Q.shape:
        raise ValueError("kernel shapes disagree")
    Qinv, _ = regularized_inverse(Q)
    A = Qinv - Qinv @ K @ Qinv
    return 0.5 * (A + A.T)


def kl_gradient(K_prev, K, Q, out_var, kind="erf"):
    """Gradient of twice the Gaussian KL term of one layer with respect
    to the kernel feeding it.

    ``Q`` must be the image of ``K_prev`` under the activation map with
    output variance ``out_var``; the result is the matrix ``M`` with
    ``d(2 KL) = Tr[M dK_prev]``.
    """
    A = hidden_fluctuation(K, Q)
    return post_kernel_adjoint(kind, K_prev, out_var, A)


def _invert_rhs(rhs, floor_scale=1e-8):
    """Invert an inverse-form right-hand side, flooring its spectrum.

    Transients of the iteration can push the RHS slightly indefinite;
    negative eigenvalues are clipped to ``floor_scale`` times the top
    one and counted.
    """
    rhs = 0.5 * (rhs + rhs.T)
    lam, vec = np.linalg.eigh(rhs)
    top = float(lam[-1])
    if not np.isfinite(top) or top <= 0.0:
        raise np.linalg.LinAlgError("update has no positive spectrum")
    floor = floor_scale * top
    clipped = int(np.sum(lam < floor))
    lam = np.clip(lam, floor, None)
    out = (vec / lam) @ vec.T
    return 0.5 * (out + out.T), clipped


def _patches(spec, X):
    if spec.arch == "conv2":
        n = X.shape[0]
        return extract_patches(X, spec.windows[0]).reshape(
            n, 1, spec.pixels, spec.windows[0])
    if spec.arch == "conv3":
        s0, s1 = spec.windows
        n = X.shape[0]
        return extract_patches(X, s0).reshape(n, spec.pixels, s1, s0)
    raise ValueError("patches only defined for convolutional specs")


def _forward(spec, X, sigma, pre_kernels):
    """All infinite-width images implied by the current unknowns.

    Returns ``(posts, Q_f)`` where ``posts[j]`` sits above
    ``pre_kernels[j-1]`` (``posts[0]`` above the input layer).
    """
    kind = spec.activation
    if spec.arch == "fcn":
        K1 = X @ sigma @ X.T
        pres = [K1, *pre_kernels]
        posts = [post_kernel(kind, pres[j], spec.layer_vars[j + 1])
                 for j in range(len(pres) - 1)]
        Q_f = post_kernel(kind, pres[-1], spec.readout_var)
        return posts, Q_f
    patches = _patches(spec, X)
    if spec.arch == "conv2":
        Q_f = strided_post_kernel(patches, sigma, kind, spec.readout_var)
        return [], Q_f
    # conv3
    Q2 = strided_post_kernel(patches, sigma, kind, spec.layer_vars[1])
    space = IndexSpace(X.shape[0], spec.pixels)
    Q_f = readout_average(post_kernel(kind, pre_kernels[0], 1.0),
                          space, spec.readout_var)
    return [Q2], Q_f


def _rhs_blocks(spec, X, sigma, pre_kernels, posts, A_out):
    """Inverse-form right-hand sides for every unknown, deepest first.

    Yields ``(name, index, rhs)`` with ``index`` the position in
    ``pre_kernels`` (or -1 for ``sigma``).  Lazily generated on
    purpose: a Gauss-Seidel sweep mutates ``pre_kernels`` between
    items, so shallower right-hand sides pick up the fresh kernels.
    The infinite-width images ``posts`` stay fixed for the sweep.
    """
    kind = spec.activation
    if spec.arch == "fcn":
        depth = spec.depth
        widths = spec.widths
        if depth >= 3:
            # output feedback into the deepest hidden kernel
            Kpen = pre_kernels[-1]
            Qpen_inv, _ = regularized_inverse(posts[-1])
            grad = post_kernel_adjoint(kind, Kpen, spec.readout_var, A_out)
            yield ("K", len(pre_kernels) - 1, Qpen_inv - grad / widths[-1])
            # interior layers: fluctuation of the layer above
            for j in range(len(pre_kernels) - 1, 0, -1):
                A = hidden_fluctuation(pre_kernels[j], posts[j])
                Qinv, _ = regularized_inverse(posts[j - 1])
                grad = post_kernel_adjoint(kind, pre_kernels[j - 1],
                                           spec.layer_vars[j + 1], A)
                yield ("K", j - 1,
                       Qinv + (widths[j] / widths[j - 1]) * grad)
            # input covariance
            K1 = X @ sigma @ X.T
            A2 = hidden_fluctuation(pre_kernels[0], posts[0])
            grad = post_kernel_adjoint(kind, K1, spec.layer_vars[1], A2)
            d = spec.input_dim
            yield ("sigma", -1, (d / spec.layer_vars[0]) * np.eye(d)
                   + (widths[1] / widths[0]) * (X.T @ grad @ X))
        else:
            # two weight layers: the readout feeds sigma directly
            K1 = X @ sigma @ X.T
            grad = post_kernel_adjoint(kind, K1, spec.readout_var, A_out)
            d = spec.input_dim
            yield ("sigma", -1, (d / spec.layer_vars[0]) * np.eye(d)
                   - (X.T @ grad @ X) / widths[0])
        return
    patches = _patches(spec, X)
    if spec.arch == "conv2":
        s = spec.windows[0]
        c = spec.widths[0]
        grad = strided_post_adjoint(patches, sigma, kind,
                                    spec.readout_var, A_out)
        yield ("sigma", -1, (s / spec.layer_vars[0]) * np.eye(s) - grad / c)
        return
    # conv3
    s0, _ = spec.windows
    c1, c2 = spec.widths
    space = IndexSpace(X.shape[0], spec.pixels)
    Q2_inv, _ = regularized_inverse(posts[0])
    lifted = lift_readout_contraction(A_out, space, spec.readout_var)
    grad = post_kernel_adjoint(kind, pre_kernels[0], 1.0, lifted)
    yield ("K", 0, Q2_inv - grad / c2)
    A2 = hidden_fluctuation(pre_kernels[0], posts[0])
    grad = strided_post_adjoint(patches, sigma, kind, spec.layer_vars[1], A2)
    yield ("sigma", -1,
           (s0 / spec.layer_vars[0]) * np.eye(s0) + (c2 / c1) * grad)


def _gp_refresh(spec, X, y, noise_var, sigma, pre_kernels, include_cov):
    posts, Q_f = _forward(spec, X, sigma, pre_kernels)
    summary = posterior_mean(Q_f, y, noise_var)
    A_out = output_fluctuation(Q_f, y, noise_var,
                               include_covariance_term=include_cov)
    return posts, Q_f, summary, A_out


def _residual_blocks(spec, X, y, noise_var, sigma, pre_kernels, include_cov):
    """Jacobi-style residuals ``inv(U) - RHS`` for every unknown."""
    posts, Q_f, _, A_out = _gp_refresh(spec, X, y, noise_var, sigma,
                                       pre_kernels, include_cov)
    blocks = []
    for name, idx, rhs in _rhs_blocks(spec, X, sigma, pre_kernels, posts,
                                      A_out):
        current = sigma if name == "sigma" else pre_kernels[idx]
        # the unknowns are PD by construction (convex combinations of
        # floored inverses), so invert exactly -- jitter here would put
        # a floor under the measurable residual
        inv = np.linalg.inv(current)
        scale = np.linalg.norm(rhs)
        blocks.append((name, idx, (inv - rhs) / scale))
    return blocks


def _stack(blocks):
    parts = []
    for _, _, res in blocks:
        iu = np.triu_indices(res.shape[0])
        parts.append(res[iu])
    return np.concatenate(parts)


def fcn_residual(spec, X, y, noise_var, state, include_output_covariance=True):
    """Stacked fixed-point residual of a fully connected solution.

    Zero (to solver tolerance) exactly at a self-consistent state; used
    by the Newton-Krylov refinement and by convergence checks.
    """
    if spec.arch != "fcn":
        raise ValueError("fcn_residual expects a fully connected spec")
    return _stack(_residual_blocks(spec, X, y, noise_var, state.sigma,
                                   state.pre_kernels,
                                   include_output_covariance))


def cnn_residual(spec, X, y, noise_var, state, include_output_covariance=True):
    """Stacked fixed-point residual of a convolutional solution."""
    if spec.arch not in ("conv2", "conv3"):
        raise ValueError("cnn_residual expects a convolutional spec")
    return _stack(_residual_blocks(spec, X, y, noise_var, state.sigma,
                                   state.pre_kernels,
                                   include_output_covariance))


# ---------------------------------------------------------------------------
# solver


def _initial_state(spec, X):
    """Prior covariance and lazy-limit kernels as the starting point."""
    fan = spec.fan_ins()[0]
    sigma = (spec.layer_vars[0] / fan) * np.eye(fan)
    pre_kernels = []
    if spec.arch == "fcn" and spec.depth >= 3:
        kind = spec.activation
        K = X @ sigma @ X.T
        for j in range(spec.depth - 2):
            K = post_kernel(kind, K, spec.layer_vars[j + 1])
            pre_kernels.append(K)
    elif spec.arch == "conv3":
        patches = _patches(spec, X)
        pre_kernels.append(strided_post_kernel(patches, sigma,
                                               spec.activation,
                                               spec.layer_vars[1]))
    return sigma, pre_kernels


def _pack(sigma, pre_kernels):
    parts = [sigma[np.triu_indices(sigma.shape[0])]]
    parts += [K[np.triu_indices(K.shape[0])] for K in pre_kernels]
    return np.concatenate(parts)


def _unpack(vec, shapes):
    arrays = []
    pos = 0
    for m in shapes:
        iu = np.triu_indices(m)
        size = iu[0].size
        arr = np.zeros((m, m))
        arr[iu] = vec[pos:pos + size]
        arr = arr + arr.T - np.diag(np.diag(arr))
        arrays.append(arr)
        pos += size
    return arrays[0], arrays[1:]


def _newton_refine(spec, X, y, noise_var, sigma, pre_kernels, options):
    shapes = [sigma.shape[0]] + [K.shape[0] for K in pre_kernels]
    size = sum(m * (m + 1) // 2 for m in shapes)

    def func(vec):
        s, pres = _unpack(vec, shapes)
        try:
            blocks = _residual_blocks(spec, X, y, noise_var, s, pres,
                                      options.include_output_covariance)
        except (KernelDomainError, np.linalg.LinAlgError):
            return np.full(size, 1e6)
        return _stack(blocks)

    x0 = _pack(sigma, pre_kernels)
    try:
        sol = scipy.optimize.newton_krylov(
            func, x0, method="lgmres", inner_maxiter=options.krylov_dim,
            maxiter=options.newton_iters, f_tol=options.residual_tol,
            line_search="armijo", verbose=False)
    except (scipy.optimize.NoConvergence, ValueError,
            np.linalg.LinAlgError):
        return None
    s, pres = _unpack(sol, shapes)
    try:
        np.linalg.cholesky(s + 1e-12 * np.trace(s) / s.shape[0]
                           * np.eye(s.shape[0]))
    except np.linalg.LinAlgError:
        return None
    return s, pres


def _run_stage(spec, X, y, noise_var, sigma, pre_kernels, options, history,
               clip_total):
    """Damped sweeps at fixed widths; returns the updated unknowns."""
    beta = options.damping
    residual = np.inf
    converged = False
    iters = 0
    nk_attempts = 0
    A_bar = None
    for it in range(1, options.max_iters + 1):
        snapshot = (sigma.copy(), [K.copy() for K in pre_kernels],
                    None if A_bar is None else A_bar.copy())
        try:
            jacobi_src = ([K.copy() for K in pre_kernels]
                          if options.update_mode == "jacobi" else pre_kernels)
            posts, Q_f, _, A_out = _gp_refresh(
                spec, X, y, noise_var, sigma, jacobi_src,
                options.include_output_covariance)
            # under-relax the data term, never the kernels: the layer
            # equations below are solved exactly against A_bar, so the
            # unknowns stay mutually consistent every sweep
            if A_bar is None:
                A_bar = A_out
                lag = 0.0
            else:
                A_bar = (1.0 - beta) * A_bar + beta * A_out
                lag = (np.linalg.norm(A_bar - A_out)
                       / max(np.linalg.norm(A_out), 1e-300))
            worst = 0.0
            updates = []
            for name, idx, rhs in _rhs_blocks(spec, X, sigma, jacobi_src,
                                              posts, A_bar):
                current = sigma if name == "sigma" else (
                    jacobi_src[idx] if options.update_mode == "jacobi"
                    else pre_kernels[idx])
                inv = np.linalg.inv(current)
                scale = np.linalg.norm(rhs)
                worst = max(worst, np.linalg.norm(inv - rhs) / scale)
                new, clipped = _invert_rhs(rhs)
                clip_total[0] += clipped
                if options.update_mode == "jacobi":
                    updates.append((name, idx, new))
                elif name == "sigma":
                    sigma = new
                else:
                    pre_kernels[idx] = new
            for name, idx, new in updates:
                if name == "sigma":
                    sigma = new
                else:
                    pre_kernels[idx] = new
        except (KernelDomainError, np.linalg.LinAlgError):
            sigma, pre_kernels, A_bar = snapshot
            beta *= 0.5
            if beta < options.min_damping:
                break
            continue
        # a genuine fixed point needs both the block equations and the
        # averaged data term to have settled
        residual = max(worst, lag)
        history.append(residual)
        iters = it
        if residual < options.residual_tol:
            converged = True
            break
        if (options.newton_krylov and nk_attempts < 3 and it >= 25
                and len(history) >= 10
                and history[-10] < 2.0 * history[-1]):
            nk_attempts += 1
            refined = _newton_refine(spec, X, y, noise_var, sigma,
                                     pre_kernels, options)
            if refined is not None:
                sigma, pre_kernels = refined[0], list(refined[1])
                A_bar = None
                blocks = _residual_blocks(
                    spec, X, y, noise_var, sigma, pre_kernels,
                    options.include_output_covariance)
                residual = max(np.linalg.norm(res) for _, _, res in blocks)
                history.append(residual)
                if residual < options.residual_tol:
                    converged = True
                    break
    return sigma, pre_kernels, residual, iters, converged


def solve(spec, X, y, noise_var, options=None):
    """Solve the coupled layer equations for one dataset.

    Runs damped Picard sweeps (optionally annealed through a width
    schedule) and returns the final :class:`EoSState`.  A state that
    fails to reach tolerance is returned with ``converged=False``
    rather than raising, so callers can inspect partial progress.
    """
    options = options or SolverOptions()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be (n, d) with one target per row")
    if noise_var <= 0:
        raise ValueError("noise variance must be positive")
    if spec.activation == "relu":
        raise ValueError("relu has no closed-form feedback; use erf or linear")
    if X.shape[1] != spec.input_dim:
        raise ValueError("input dimension mismatch")

    if options.schedule is not None:
        if len(set(spec.widths)) != 1:
            raise ValueError("width schedules need uniform hidden widths")
        if options.schedule[-1] != spec.widths[0]:
            raise ValueError("schedule must end at the requested width")
        stage_specs = [spec.with_widths(w) for w in options.schedule]
    else:
        stage_specs = [spec]

    sigma, pre_kernels = _initial_state(spec, X)
    history = []
    clip_total = [0]
    stages = []
    for stage_spec in stage_specs:
        sigma, pre_kernels, residual, iters, converged = _run_stage(
            stage_spec, X, y, noise_var, sigma, pre_kernels, options,
            history, clip_total)
        posts, Q_f, summary, A_out = _gp_refresh(
            stage_spec, X, y, noise_var, sigma, pre_kernels,
            options.include_output_covariance)
        stages.append(StageResult(stage_spec.widths[-1], iters, residual,
                                  converged, summary.alpha))
    return EoSState(
        spec=spec, noise_var=float(noise_var), sigma=sigma,
        pre_kernels=pre_kernels, post_kernels=posts, Q_f=Q_f,
        posterior=summary, output_fluct=A_out, residual=stages[-1].residual,
        iterations=sum(s.iterations for s in stages),
        converged=stages[-1].converged, clip_count=clip_total[0],
        history=tuple(history), stages=tuple(stages))


# ---------------------------------------------------------------------------
# diagnostics


def _unit_cross_block(patches, sigma, i, k, kind):
    """One pixel-pair block of the unit-variance activation kernel."""
    Pi = patches[:, 0, i, :]
    Pk = patches[:, 0, k, :]
    M = Pi @ sigma @ Pk.T
    if kind == "linear":
        return M
    di = np.einsum("ns,st,nt->n", Pi, sigma, Pi)
    dk = np.einsum("ns,st,nt->n", Pk, sigma, Pk)
    denom = np.sqrt(np.outer(1.0 + 2.0 * di, 1.0 + 2.0 * dk))
    arg = np.clip(2.0 * M / denom, -1.0, 1.0)
    return (2.0 / np.pi) * np.arcsin(arg)


def emergent_scale(state, X=None):
    """Feature-learning scale of the converged state.

    For a fully connected network this is
    ``readout_var * delta^T G delta / width`` with ``G`` the
    unit-variance activation kernel of the last hidden layer; for the
    convolutional networks the pixel-block generalization
    ``readout_var * sum_ik g_ik^2 / (C * pixels * sum_i g_ii)`` with
    ``g_ik = delta^T G_ik delta``.  The companion value is the width at
    which the scale extrapolates to one (at fixed posterior).
    """
    spec = state.spec
    delta = state.posterior.delta
    kind = spec.activation
    if spec.arch == "fcn":
        if spec.depth >= 3:
            G = post_kernel(kind, state.pre_kernels[-1], 1.0)
        else:
            if X is None:
                raise ValueError("two-layer fcn scale needs the inputs")
            G = post_kernel(kind, X @ state.sigma @ X.T, 1.0)
        g = float(delta @ G @ delta)
        chi = spec.readout_var * g / spec.penultimate_width
        return EmergentScale(chi, chi * spec.penultimate_width)
    if spec.arch == "conv2":
        if X is None:
            raise ValueError("convolutional scale needs the inputs")
        patches = _patches(spec, X)
        N = spec.pixels
        g = np.empty((N, N))
        for i in range(N):
            for k in range(i, N):
                block = _unit_cross_block(patches, state.sigma, i, k, kind)
                g[i, k] = g[k, i] = float(delta @ block @ delta)
        width = spec.widths[0]
    else:
        space = IndexSpace(delta.size, spec.pixels)
        G = post_kernel(kind, state.pre_kernels[0], 1.0)
        N = spec.pixels
        g = np.empty((N, N))
        for i in range(N):
            for k in range(i, N):
                block = G[np.ix_(space.pixel_indices(i),
                                 space.pixel_indices(k))]
                g[i, k] = g[k, i] = float(delta @ block @ delta)
        width = spec.widths[-1]
    chi = spec.readout_var * float(np.sum(g * g)) \
        / (width * spec.pixels * float(np.trace(g)))
    return EmergentScale(chi, chi * width)


def mf_diagnostic(state):
    """Effective number of active output modes per readout weight.

    ``Tr[(Q_f + noise*I)^{-1} Q_f] / (width * pixels)`` -- small values
    mean the readout layer is far from its mean-field capacity.
    """
    Q = state.Q_f
    n = Q.shape[0]
    M = np.linalg.solve(Q + state.noise_var * np.eye(n), Q)
    width = state.spec.penultimate_width
    return float(np.trace(M)) / (width * state.spec.pixels)
