"""Gradient-descent-plus-noise equilibrium sampler.

Brute-force counterpart to the self-consistency solver: trains
finite-width networks with discretized overdamped Langevin dynamics and
estimates the same observables (first-layer weight covariance, layer
kernels, train error, target overlap, Gaussianity and correlation
statistics) directly from the trajectory.

The dynamics is Euler--Maruyama on the potential

    U(w) = L(w) / (2 sigma^2) + sum_l fan_in_l ||W^(l)||^2 / (2 sigma_l^2),

with ``L`` the *sum*-squared training error, so one step reads

    w <- w - eta * grad U + sqrt(2 eta) * xi,    xi ~ N(0, 1).

The stationary density exp(-U) is then the Bayes posterior whose prior
puts variance ``sigma_l^2 / fan_in_l`` on every weight of layer ``l``;
equivalently the drift is plain gradient descent on ``L / (2 sigma^2)``
plus a per-layer weight decay ``gamma_l = sigma^2 * fan_in_l / sigma_l^2``
(in loss-gradient units) -- the decay is derived, not a free knob.
Learning rates are quoted against the sum-reduction potential ``U``;
divide by ``n / (2 sigma^2)`` to compare with a rate quoted against a
mean-reduction MSE loss.

Autocorrelation of the slowest (input-layer) modes is handled by
running many moderate-length seeds rather than one long chain; seeds
evolve with independent generators and are reduced in sorted order, so
a rerun of the same config reproduces every trajectory bit for bit.
"""

from __future__ import annotations

import collections
import dataclasses
import math

import numpy as np
import scipy.special
import scipy.stats

from . import io, kernels
from .networks import NetworkSpec

__all__ = [
    "AdaptiveSchedule",
    "DivergenceError",
    "EquilibriumStats",
    "LangevinConfig",
    "adaptive_schedule",
    "cross_correlations",
    "empirical_kernels",
    "gaussianity_report",
    "sample_equilibrium",
]

_ERF_SLOPE = 2.0 / math.sqrt(math.pi)


def _phi(z, kind):
    if kind == "erf":
        return scipy.special.erf(z)
    if kind == "linear":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unsupported activation {kind!r}")


def _dphi(z, kind):
    if kind == "erf":
        out = np.multiply(z, z)
        np.negative(out, out)
        np.exp(out, out)
        out *= _ERF_SLOPE
        return out
    if kind == "linear":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0.0).astype(float)
    raise ValueError(f"unsupported activation {kind!r}")


_EINSUM_PATHS: dict = {}


def _contract(subscripts, *ops):
    """einsum with the contraction path planned once per shape set."""
    key = (subscripts, tuple(op.shape for op in ops))
    path = _EINSUM_PATHS.get(key)
    if path is None:
        path, _ = np.einsum_path(subscripts, *ops, optimize="optimal")
        _EINSUM_PATHS[key] = path
    return np.einsum(subscripts, *ops, optimize=path)


class DivergenceError(RuntimeError):
    """Raised when the training loss explodes past the divergence guard."""

    def __init__(self, seed, epoch, last_stable_rate):
        super().__init__(
            f"loss diverged for seed {seed} at epoch {epoch}; "
            f"last stable learning rate {last_stable_rate:.3e}")
        self.seed = seed
        self.epoch = epoch
        self.last_stable_rate = last_stable_rate


class AdaptiveSchedule:
    """Spike-detecting learning-rate controller.

    Protocol: the first ``warmup`` epochs run at ``warmup_factor *
    eta0``.  After warmup, an epoch whose loss exceeds the rolling mean
    by ``spike_factor`` times the rolling standard deviation over the
    last ``window`` epochs cuts the rate by ``cut``.  Once ``quiet``
    consecutive spike-free epochs have passed, the rate is halved one
    final time and frozen.  All windows and factors are configurable;
    every decision is appended to ``log``.
    """

    def __init__(self, eta0, warmup=100, warmup_factor=0.1, window=500,
                 spike_factor=5.0, cut=0.7, quiet=50000):
        if eta0 <= 0:
            raise ValueError("learning rate must be positive")
        if window < 2:
            raise ValueError("rolling window must hold at least 2 epochs")
        self.eta0 = float(eta0)
        self.protocol = {
            "warmup_epochs": int(warmup),
            "warmup_factor": float(warmup_factor),
            "spike_window": int(window),
            "spike_factor": float(spike_factor),
            "spike_cut": float(cut),
            "quiet_epochs": int(quiet),
        }
        self._rate = float(eta0)
        self._epoch = 0
        self._quiet = 0
        self.frozen = False
        self._trace = collections.deque(maxlen=int(window))
        self._sum = 0.0
        self._sumsq = 0.0
        self._pushes = 0
        self.log = [{"epoch": 0, "event": "warmup",
                     "learning_rate": self.eta0 * self.protocol["warmup_factor"]}]

    @property
    def current(self):
        """Rate in effect for the upcoming epoch."""
        if self._epoch < self.protocol["warmup_epochs"]:
            return self.eta0 * self.protocol["warmup_factor"]
        return self._rate

    def observe(self, loss):
        """Register one finished epoch's loss and update the rate."""
        loss = float(loss)
        warmup = self.protocol["warmup_epochs"]
        window = self.protocol["spike_window"]
        spike = False
        if (not self.frozen and self._epoch >= warmup
                and len(self._trace) == window):
            mean = self._sum / window
            var = max(self._sumsq / window - mean * mean, 0.0)
            std = math.sqrt(var)
            spike = loss > mean + self.protocol["spike_factor"] * std
        self._push(loss)
        self._epoch += 1
        if self._epoch == warmup:
            self.log.append({"epoch": self._epoch, "event": "warmup-end",
                             "learning_rate": self._rate})
        if self.frozen:
            return self.current
        if spike:
            self._rate *= self.protocol["spike_cut"]
            self._quiet = 0
            self.log.append({"epoch": self._epoch, "event": "spike-cut",
                             "learning_rate": self._rate})
        else:
            self._quiet += 1
            if self._quiet >= self.protocol["quiet_epochs"]:
                self._rate *= 0.5
                self.frozen = True
                self.log.append({"epoch": self._epoch, "event": "quiet-halving",
                                 "learning_rate": self._rate})
        return self.current

    def _push(self, loss):
        if len(self._trace) == self._trace.maxlen:
            old = self._trace[0]
            self._sum -= old
            self._sumsq -= old * old
        self._trace.append(loss)
        self._sum += loss
        self._sumsq += loss * loss
        self._pushes += 1
        if self._pushes % 100000 == 0:
            # running sums drift; recompute from the stored window
            arr = np.asarray(self._trace)
            self._sum = float(arr.sum())
            self._sumsq = float((arr * arr).sum())


def adaptive_schedule(loss_trace, learning_rate, **protocol):
    """Replay the spike-detecting controller over a finished loss trace.

    Returns ``(rates, log)`` where ``rates[i]`` is the learning rate
    that was in effect while producing ``loss_trace[i]``.  Keyword
    arguments are forwarded to :class:`AdaptiveSchedule`.
    """
    trace = np.asarray(loss_trace, dtype=float).ravel()
    sched = AdaptiveSchedule(learning_rate, **protocol)
    if trace.size < sched.protocol["spike_window"]:
        raise ValueError("loss trace is shorter than the rolling window")
    rates = np.empty(trace.size)
    for i, loss in enumerate(trace):
        rates[i] = sched.current
        sched.observe(loss)
    return rates, sched.log


@dataclasses.dataclass(frozen=True)
class LangevinConfig:
    """Run description for :func:`sample_equilibrium`.

    ``learning_rate`` is the step size against the sum-reduction
    potential (see module docstring).  ``seeds`` are independent
    trajectories; at least two are needed for the cross-seed
    equilibration certificate and all error bars.  ``probe_points``
    bounds the training subset on which layer kernels are accumulated;
    ``kernel_stride`` (default ``10 * sample_stride``) thins those
    expensive accumulations, and ``weight_sample_stride`` thins the
    stored first-layer snapshots (moment accumulators always use every
    sample).
    """

    spec: NetworkSpec
    learning_rate: float
    noise_var: float
    epochs: int
    burn_in: int
    sample_stride: int = 10
    seeds: tuple[int, ...] = (0, 1)
    scheduler: str = "adaptive"
    warmup_epochs: int = 100
    warmup_factor: float = 0.1
    spike_window: int = 500
    spike_factor: float = 5.0
    spike_cut: float = 0.7
    quiet_epochs: int = 50000
    probe_points: int = 512
    kernel_stride: int | None = None
    collect_kernels: bool = True
    weight_sample_stride: int = 1
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.noise_var <= 0:
            raise ValueError("noise variance must be positive")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not 0 <= self.burn_in < self.epochs:
            raise ValueError("burn_in must lie in [0, epochs)")
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be at least 1")
        if self.weight_sample_stride < 1:
            raise ValueError("weight_sample_stride must be at least 1")
        if self.scheduler not in ("adaptive", "fixed"):
            raise ValueError("scheduler must be 'adaptive' or 'fixed'")
        seeds = tuple(sorted(int(s) for s in self.seeds))
        if not seeds:
            raise ValueError("need at least one seed")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        object.__setattr__(self, "seeds", seeds)
        if self.probe_points < 1:
            raise ValueError("probe_points must be positive")
        if self.kernel_stride is not None and self.kernel_stride < 1:
            raise ValueError("kernel_stride must be positive")
        _phi(np.zeros(1), self.spec.activation)  # reject unknown activations

    def layer_variances(self) -> tuple[float, ...]:
        """Per-layer prior variances (readout after mean-field rescaling)."""
        return (*self.spec.layer_vars[:-1], self.spec.readout_var)

    def weight_decays(self) -> tuple[float, ...]:
        """Derived decay coefficients gamma_l = sigma^2 * fan_in_l / sigma_l^2."""
        return tuple(self.noise_var * fan / var for fan, var
                     in zip(self.spec.fan_ins(), self.layer_variances()))

    def prior_stiffness(self) -> tuple[float, ...]:
        """Curvature fan_in_l / sigma_l^2 of the prior term of U."""
        return tuple(fan / var for fan, var
                     in zip(self.spec.fan_ins(), self.layer_variances()))


def _layer_names(spec: NetworkSpec) -> tuple[str, ...]:
    if spec.arch == "fcn":
        return tuple(f"hidden{l + 1}" for l in range(len(spec.widths))) + ("readout",)
    if spec.arch == "conv2":
        return ("conv", "readout")
    return ("conv", "mix", "readout")


def _layer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    if spec.arch == "fcn":
        dims = (spec.input_dim, *spec.widths)
        shapes = [(dims[l + 1], dims[l]) for l in range(len(spec.widths))]
        shapes.append((spec.widths[-1],))
        return shapes
    if spec.arch == "conv2":
        (c,), (s,) = spec.widths, spec.windows
        return [(c, s), (spec.pixels, c)]
    (c1, c2), (s0, s1) = spec.widths, spec.windows
    return [(c1, s0), (c2, s1, c1), (spec.pixels, c2)]


def _init_state(cfg: LangevinConfig, rngs) -> list[np.ndarray]:
    shapes = _layer_shapes(cfg.spec)
    fans = cfg.spec.fan_ins()
    variances = cfg.layer_variances()
    state = []
    for shape, fan, var in zip(shapes, fans, variances):
        scale = math.sqrt(var / fan)
        state.append(np.stack([rng.normal(0.0, scale, size=shape)
                               for rng in rngs]))
    return state


def _forward(spec: NetworkSpec, state, X, patches):
    kind = spec.activation
    if spec.arch == "fcn":
        zs = [np.einsum("nd,kod->kno", X, state[0])]
        x = _phi(zs[0], kind)
        for W in state[1:-1]:
            zs.append(np.einsum("kno,kpo->knp", x, W))
            x = _phi(zs[-1], kind)
        f = np.einsum("kno,ko->kn", x, state[-1])
        return f, {"zs": zs, "x_last": x}
    if spec.arch == "conv2":
        z = _contract("nis,kcs->knic", patches, state[0])
        g = _phi(z, kind)
        f = _contract("knic,kic->kn", g, state[1])
        return f, {"z": z, "g": g}
    nseeds, n = state[0].shape[0], X.shape[0]
    s1, c1 = spec.windows[1], spec.widths[0]
    z1 = _contract("nis,kcs->knic", patches, state[0])
    g1 = _phi(z1, kind).reshape(nseeds, n, spec.pixels, s1, c1)
    z2 = _contract("knjtc,kdtc->knjd", g1, state[1])
    g2 = _phi(z2, kind)
    f = _contract("knjd,kjd->kn", g2, state[2])
    return f, {"z1": z1, "g1": g1, "z2": z2, "g2": g2}


def _gradients(spec: NetworkSpec, state, X, patches, cache, df, stiffness):
    """Gradient of U; ``df`` is residual / noise_var (empty for no data)."""
    kind = spec.activation
    grads = [stiff * W for stiff, W in zip(stiffness, state)]
    if df is None:
        return grads
    if spec.arch == "fcn":
        zs = cache["zs"]
        grads[-1] += np.einsum("kn,kno->ko", df, cache["x_last"])
        delta = df[:, :, None] * state[-1][:, None, :] * _dphi(zs[-1], kind)
        for l in range(len(zs) - 1, 0, -1):
            x_prev = _phi(zs[l - 1], kind)
            grads[l] += np.einsum("knp,kno->kpo", delta, x_prev)
            delta = np.einsum("knp,kpo->kno", delta, state[l]) \
                * _dphi(zs[l - 1], kind)
        grads[0] += np.einsum("kno,nd->kod", delta, X)
        return grads
    if spec.arch == "conv2":
        z, g = cache["z"], cache["g"]
        grads[1] += _contract("kn,knic->kic", df, g)
        m = df[:, :, None, None] * state[1][:, None, :, :] * _dphi(z, kind)
        grads[0] += _contract("knic,nis->kcs", m, patches)
        return grads
    z1, g1 = cache["z1"], cache["g1"]
    z2, g2 = cache["z2"], cache["g2"]
    grads[2] += _contract("kn,knjd->kjd", df, g2)
    m2 = df[:, :, None, None] * state[2][:, None, :, :] * _dphi(z2, kind)
    grads[1] += _contract("knjd,knjtc->kdtc", m2, g1)
    dg1 = _contract("knjd,kdtc->knjtc", m2, state[1])
    m1 = dg1.reshape(z1.shape) * _dphi(z1, kind)
    grads[0] += _contract("knic,nis->kcs", m1, patches)
    return grads


def _flat_sites(z):
    """Collapse (seeds, points, pixels, channels) to point-major flat
    (seeds, points * pixels, channels)."""
    k, p = z.shape[0], z.shape[1]
    return z.reshape(k, p * z.shape[2], z.shape[3])


def _hidden_probe_sites(spec: NetworkSpec, cache, probe):
    """Per hidden layer: flat (seeds, sites, channels) pre-activations
    on the probe subset, plus the variance of the following layer."""
    if spec.arch == "fcn":
        last = len(cache["zs"]) - 1
        for l, z in enumerate(cache["zs"]):
            next_var = spec.readout_var if l == last else spec.layer_vars[l + 1]
            yield f"hidden{l + 1}", z[:, probe, :], next_var
        return
    if spec.arch == "conv2":
        yield "conv", _flat_sites(cache["z"][:, probe]), spec.readout_var
        return
    yield "conv", _flat_sites(cache["z1"][:, probe]), spec.layer_vars[1]
    yield "mix", _flat_sites(cache["z2"][:, probe]), spec.readout_var


def _channel_summaries(spec: NetworkSpec, state):
    """Per layer: (seeds, channels) squared norms of channel slices."""
    out = {}
    names = _layer_names(spec)
    if spec.arch == "fcn":
        for name, W in zip(names[:-1], state[:-1]):
            out[name] = np.sum(W * W, axis=-1)
        out["readout"] = state[-1] ** 2
        return out
    if spec.arch == "conv2":
        out["conv"] = np.sum(state[0] ** 2, axis=-1)
        out["readout"] = np.sum(state[1] ** 2, axis=1)
        return out
    out["conv"] = np.sum(state[0] ** 2, axis=-1)
    out["mix"] = np.sum(state[1] ** 2, axis=(2, 3))
    out["readout"] = np.sum(state[2] ** 2, axis=1)
    return out


def _unpack_data(data, spec: NetworkSpec):
    if data is None:
        return None, None
    if hasattr(data, "X") and hasattr(data, "y"):
        X, y = data.X, data.y
    else:
        X, y = data
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("data must provide matching (X, y)")
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"input dimension mismatch: data has {X.shape[1]}, "
                         f"spec wants {spec.input_dim}")
    return X, y


def _block_bootstrap_means(samples, rng, reps=200):
    """Bootstrap distribution of the mean using contiguous blocks."""
    x = np.asarray(samples, dtype=float)
    block = max(1, x.size // 20)
    nblocks = int(math.ceil(x.size / block))
    starts = rng.integers(0, x.size - block + 1, size=(reps, nblocks))
    idx = starts[:, :, None] + np.arange(block)[None, None, :]
    draws = x[idx.reshape(reps, -1)[:, :x.size]]
    return draws.mean(axis=1)


@dataclasses.dataclass
class EquilibriumStats:
    """Observables estimated from the post-burn-in trajectory.

    ``sigma_hat`` is the first-layer weight covariance averaged over
    channels, seeds and snapshots.  ``pre_kernels[name]`` /
    ``post_kernels[name]`` hold, on the probe subset,
    K_hat[a, b] = mean h_a h_b and sigma_next^2 * mean phi(h_a) phi(h_b).
    ``alpha_hat`` follows the posterior-summary sign convention
    (positive while the model underfits).  Standard errors come from a
    seed-level bootstrap; ``train_mse`` is the full per-seed trace of
    the mean-squared training error.
    """

    seeds: tuple[int, ...]
    layer_names: tuple[str, ...]
    sample_count: int
    sigma_hat: np.ndarray
    per_weight_variance: tuple[float, ...]
    per_weight_variance_se: tuple[float, ...]
    prior_weight_variance: tuple[float, ...]
    weight_samples: np.ndarray
    channel_summaries: dict
    stationarity: dict
    final_learning_rates: np.ndarray
    schedule_logs: list | None
    config: LangevinConfig
    train_mse: np.ndarray | None = None
    alpha_hat: float | None = None
    alpha_hat_se: float | None = None
    f_bar: np.ndarray | None = None
    f_bar_seeds: np.ndarray | None = None
    pre_kernels: dict = dataclasses.field(default_factory=dict)
    post_kernels: dict = dataclasses.field(default_factory=dict)
    kernel_sample_count: int = 0
    probe_index: np.ndarray | None = None

    def to_json(self) -> dict:
        """Summary without the bulk arrays (kernels and samples are
        written separately as kernel files)."""
        out = {
            "seeds": list(self.seeds),
            "layer_names": list(self.layer_names),
            "sample_count": int(self.sample_count),
            "kernel_sample_count": int(self.kernel_sample_count),
            "per_weight_variance": list(self.per_weight_variance),
            "per_weight_variance_se": list(self.per_weight_variance_se),
            "prior_weight_variance": list(self.prior_weight_variance),
            "sigma_hat_top_eigenvalue": float(
                np.linalg.eigvalsh(self.sigma_hat)[-1]),
            "stationarity": self.stationarity,
            "final_learning_rates": [float(v) for v in self.final_learning_rates],
        }
        if self.alpha_hat is not None:
            out["alpha_hat"] = float(self.alpha_hat)
            out["alpha_hat_se"] = float(self.alpha_hat_se)
        if self.train_mse is not None:
            out["train_mse_mean"] = [float(v) for v in
                                     self.train_mse[:, self.config.burn_in:]
                                     .mean(axis=1)]
        if self.schedule_logs is not None:
            out["schedule_logs"] = self.schedule_logs
        return out


def sample_equilibrium(cfg: LangevinConfig, data=None,
                       log_path=None) -> EquilibriumStats:
    """Run GD+noise to equilibrium and collect empirical observables.

    ``data`` is a dataset (anything with ``.X``/``.y``) or an ``(X, y)``
    pair; ``None`` drops the data term entirely, leaving independent
    Ornstein--Uhlenbeck priors per layer.  ``log_path`` streams the
    per-epoch loss and learning rate of every seed to an append-only
    binary trajectory log.

    Equilibrium is certified by (i) the first and second halves of each
    seed's post-burn-in loss agreeing within 3 block-bootstrap sigma
    and (ii) the first two seeds' mean losses agreeing within 3 sigma;
    the verdict is recorded in ``stationarity`` rather than raised.
    A loss above ``divergence_factor`` times its initial value aborts
    with :class:`DivergenceError`.
    """
    spec = cfg.spec
    X, y = _unpack_data(data, spec)
    have_data = X is not None
    nseeds = len(cfg.seeds)
    rngs = [np.random.Generator(np.random.Philox(key=int(seed)))
            for seed in cfg.seeds]
    state = _init_state(cfg, rngs)
    stiffness = cfg.prior_stiffness()
    names = _layer_names(spec)
    patches = None
    if have_data and spec.arch != "fcn":
        patches = kernels.extract_patches(X, spec.windows[0])

    if cfg.scheduler == "adaptive" and have_data:
        # the controller is driven by the loss; without a data term the
        # dynamics is linear and runs at the requested rate directly
        scheds = [AdaptiveSchedule(cfg.learning_rate, warmup=cfg.warmup_epochs,
                                   warmup_factor=cfg.warmup_factor,
                                   window=cfg.spike_window,
                                   spike_factor=cfg.spike_factor,
                                   cut=cfg.spike_cut, quiet=cfg.quiet_epochs)
                  for _ in cfg.seeds]
    else:
        scheds = None
    eta = np.full(nseeds, cfg.learning_rate)
    if scheds is not None:
        eta = np.array([s.current for s in scheds])

    kstride = cfg.kernel_stride or 10 * cfg.sample_stride
    probe = None
    if have_data:
        probe = np.arange(min(X.shape[0], cfg.probe_points))

    fan0 = _layer_shapes(spec)[0][-1]
    sigma_sum = np.zeros((fan0, fan0))
    sigma_rows = 0
    layer_sq = np.zeros((len(state), nseeds))
    layer_weights = [int(np.prod(W.shape[1:])) for W in state]
    weight_snaps = []
    summaries = {name: [] for name in names}
    loss_samples = []
    f_sum = np.zeros((nseeds, X.shape[0])) if have_data else None
    losses = np.zeros((cfg.epochs, nseeds)) if have_data else None
    pre_sums, post_sums, chan_counts = {}, {}, {}
    kernel_samples = 0
    sample_count = 0

    loss0 = None
    eta_prev = eta.copy()
    traj = None
    if log_path is not None:
        fields = ["epoch"] + [f"loss_seed{s}" for s in cfg.seeds] \
            + [f"eta_seed{s}" for s in cfg.seeds]
        traj = io.TrajectoryLog(log_path, fields)

    try:
        for epoch in range(cfg.epochs):
            cache = None
            df = None
            if have_data:
                f, cache = _forward(spec, state, X, patches)
                resid = f - y[None, :]
                loss = np.einsum("kn,kn->k", resid, resid)
                losses[epoch] = loss
                if loss0 is None:
                    loss0 = np.maximum(loss, 1e-12)
                bad = loss > cfg.divergence_factor * loss0
                if np.any(bad):
                    k = int(np.argmax(bad))
                    raise DivergenceError(cfg.seeds[k], epoch,
                                          float(eta_prev[k]))
                df = resid / cfg.noise_var
                if traj is not None:
                    traj.append([float(epoch), *loss.tolist(), *eta.tolist()])

            collecting = epoch >= cfg.burn_in
            offset = epoch - cfg.burn_in
            if collecting and offset % cfg.sample_stride == 0:
                W0 = state[0].reshape(nseeds, -1, fan0)
                sigma_sum += np.einsum("kcf,kcg->fg", W0, W0)
                sigma_rows += W0.shape[0] * W0.shape[1]
                for l, W in enumerate(state):
                    layer_sq[l] += np.sum(W * W, axis=tuple(range(1, W.ndim)))
                for name, val in _channel_summaries(spec, state).items():
                    summaries[name].append(val)
                if sample_count % cfg.weight_sample_stride == 0:
                    weight_snaps.append(W0.copy())
                if have_data:
                    f_sum += f
                    loss_samples.append(loss.copy())
                sample_count += 1
            if (collecting and have_data and cfg.collect_kernels
                    and offset % kstride == 0):
                for name, sites, next_var in _hidden_probe_sites(
                        spec, cache, probe):
                    if name not in pre_sums:
                        side = sites.shape[1]
                        pre_sums[name] = np.zeros((side, side))
                        post_sums[name] = np.zeros((side, side))
                        chan_counts[name] = 0
                    pre_sums[name] += np.einsum("kac,kbc->ab", sites, sites,
                                                optimize=True)
                    g = _phi(sites, spec.activation)
                    post_sums[name] += next_var * np.einsum(
                        "kac,kbc->ab", g, g, optimize=True)
                    chan_counts[name] += sites.shape[0] * sites.shape[2]
                kernel_samples += 1

            grads = _gradients(spec, state, X, patches, cache, df, stiffness)
            eta_prev = eta.copy()
            for l, (W, g) in enumerate(zip(state, grads)):
                bshape = (nseeds,) + (1,) * (W.ndim - 1)
                W -= eta.reshape(bshape) * g
            amp = np.sqrt(2.0 * eta)
            for k, rng in enumerate(rngs):
                for W in state:
                    W[k] += amp[k] * rng.standard_normal(W.shape[1:])
            if scheds is not None and have_data:
                for k, sched in enumerate(scheds):
                    eta[k] = sched.observe(losses[epoch, k])
    finally:
        if traj is not None:
            traj.close()

    if sample_count == 0:
        raise RuntimeError("no samples collected; check burn_in and stride")

    sigma_hat = sigma_sum / max(sigma_rows, 1)
    fans = spec.fan_ins()
    variances = cfg.layer_variances()
    prior_var = tuple(v / f for v, f in zip(variances, fans))
    per_seed_var = layer_sq / (sample_count * np.array(layer_weights)[:, None])
    boot_rng = np.random.Generator(np.random.Philox(key=0x5EED))
    pw_var, pw_se = [], []
    for l in range(len(state)):
        pw_var.append(float(per_seed_var[l].mean()))
        if nseeds > 1:
            draws = boot_rng.integers(0, nseeds, size=(400, nseeds))
            pw_se.append(float(per_seed_var[l][draws].mean(axis=1).std()))
        else:
            pw_se.append(float("nan"))

    summaries = {name: np.stack(vals, axis=1)
                 for name, vals in summaries.items()}
    weight_samples = np.concatenate(
        [snap.reshape(-1, fan0) for snap in
         np.stack(weight_snaps).transpose(1, 0, 2, 3)], axis=0)

    stationarity = {"equilibrated": True, "seed_half_drift": [],
                    "seed_agreement": None}
    train_mse = None
    alpha_hat = alpha_se = None
    f_bar = f_bar_seeds = None
    if have_data:
        n = X.shape[0]
        train_mse = (losses / n).T
        samples = np.stack(loss_samples) / n          # (T, nseeds)
        for k, seed in enumerate(cfg.seeds):
            half = samples.shape[0] // 2
            first, second = samples[:half, k], samples[half:, k]
            boots = (_block_bootstrap_means(first, boot_rng)
                     - _block_bootstrap_means(second, boot_rng))
            diff = float(first.mean() - second.mean())
            sig = float(boots.std())
            ok = bool(abs(diff) <= 3.0 * max(sig, 1e-300))
            stationarity["seed_half_drift"].append(
                {"seed": seed, "difference": diff, "sigma": sig, "ok": ok})
            stationarity["equilibrated"] &= ok
        if nseeds >= 2:
            m0 = _block_bootstrap_means(samples[:, 0], boot_rng)
            m1 = _block_bootstrap_means(samples[:, 1], boot_rng)
            diff = float(samples[:, 0].mean() - samples[:, 1].mean())
            sig = float(math.hypot(m0.std(), m1.std()))
            ok = bool(abs(diff) <= 3.0 * max(sig, 1e-300))
            stationarity["seed_agreement"] = {
                "seeds": list(cfg.seeds[:2]), "difference": diff,
                "sigma": sig, "ok": ok}
            stationarity["equilibrated"] &= ok
        f_bar_seeds = f_sum / sample_count
        f_bar = f_bar_seeds.mean(axis=0)
        y_sq = float(y @ y)
        alpha_of = lambda fb: float((y - fb) @ y / (cfg.noise_var * y_sq))
        alpha_hat = alpha_of(f_bar)
        if nseeds > 1:
            draws = boot_rng.integers(0, nseeds, size=(400, nseeds))
            alpha_se = float(np.std(
                [alpha_of(f_bar_seeds[d].mean(axis=0)) for d in draws]))
        else:
            alpha_se = float("nan")

    pre_kernels = {name: s / max(chan_counts[name], 1)
                   for name, s in pre_sums.items()}
    post_kernels = {name: s / max(chan_counts[name], 1)
                    for name, s in post_sums.items()}

    return EquilibriumStats(
        seeds=cfg.seeds, layer_names=names, sample_count=sample_count,
        sigma_hat=sigma_hat, per_weight_variance=tuple(pw_var),
        per_weight_variance_se=tuple(pw_se),
        prior_weight_variance=prior_var,
        weight_samples=weight_samples, channel_summaries=summaries,
        stationarity=stationarity, final_learning_rates=eta,
        schedule_logs=None if scheds is None else [s.log for s in scheds],
        config=cfg, train_mse=train_mse, alpha_hat=alpha_hat,
        alpha_hat_se=alpha_se, f_bar=f_bar, f_bar_seeds=f_bar_seeds,
        pre_kernels=pre_kernels, post_kernels=post_kernels,
        kernel_sample_count=kernel_samples, probe_index=probe)


def empirical_kernels(preacts=None, weights=None, kind="erf", next_var=1.0,
                      validate_counts=True):
    """Moment estimators from stacked snapshots.

    ``preacts``: array (seeds, snapshots, sites, channels) of hidden
    pre-activations; ``weights``: array (seeds, snapshots, channels,
    fan_in) of first-layer weights.  Returns ``(sigma_hat, K_hat,
    Q_hat)`` where the entries corresponding to omitted inputs are
    ``None`` and

        K_hat[a, b] = mean over (channel, seed, time) of h_a h_b,
        Q_hat       = next_var * mean of phi(h_a) phi(h_b),
        sigma_hat   = mean over (channel, seed, time) of w w^T.

    ``validate_counts=False`` skips the >=2 seeds / >=10 snapshots
    requirement (useful for degenerate sanity identities).
    """
    def check(arr, label):
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 4:
            raise ValueError(f"{label} must be 4-d "
                             "(seeds, snapshots, rows, cols)")
        if validate_counts and arr.shape[0] < 2:
            raise ValueError(f"{label}: need at least 2 seeds")
        if validate_counts and arr.shape[1] < 10:
            raise ValueError(f"{label}: need at least 10 snapshots")
        return arr

    sigma_hat = K_hat = Q_hat = None
    if weights is not None:
        w = check(weights, "weights")
        count = w.shape[0] * w.shape[1] * w.shape[2]
        sigma_hat = np.einsum("ktcf,ktcg->fg", w, w, optimize=True) / count
    if preacts is not None:
        h = check(preacts, "preacts")
        count = h.shape[0] * h.shape[1] * h.shape[3]
        K_hat = np.einsum("ktac,ktbc->ab", h, h, optimize=True) / count
        g = _phi(h, kind)
        Q_hat = next_var * np.einsum("ktac,ktbc->ab", g, g,
                                     optimize=True) / count
    return sigma_hat, K_hat, Q_hat


def gaussianity_report(samples, directions):
    """Normality diagnostics of weight samples projected on directions.

    ``samples``: (M, dim) pooled rows (seed-major order so the half
    split separates seed groups); ``directions``: mapping name -> unit
    vector.  Per direction: mean, variance, skewness, excess kurtosis,
    Kolmogorov--Smirnov distance against the best-fit normal, and a
    split-half reproducibility error bar on the variance.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ValueError("samples must be 2-d (draws, dim)")
    if samples.shape[0] < 100:
        raise ValueError("need at least 100 samples per direction")
    report = {}
    for name, direction in directions.items():
        d = np.asarray(direction, dtype=float).ravel()
        if d.size != samples.shape[1]:
            raise ValueError(f"direction {name!r} has wrong dimension")
        norm = np.linalg.norm(d)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"direction {name!r} is not normalized")
        proj = samples @ d
        mean = float(proj.mean())
        var = float(proj.var())
        half = proj.size // 2
        report[name] = {
            "mean": mean,
            "variance": var,
            "skewness": float(scipy.stats.skew(proj)),
            "excess_kurtosis": float(scipy.stats.kurtosis(proj)),
            "ks_distance": float(scipy.stats.kstest(
                proj, "norm", args=(mean, math.sqrt(max(var, 1e-300)))
            ).statistic),
            "variance_split_error": float(
                abs(proj[:half].var() - proj[half:].var())),
            "sample_count": int(proj.size),
        }
    return report


def _pearson(x, y):
    x = x - x.mean()
    y = y - y.mean()
    denom = math.sqrt(float(x @ x) * float(y @ y))
    if denom == 0.0:
        raise ValueError("zero-variance summary; correlation undefined")
    return float(x @ y) / denom


def cross_correlations(summaries, bootstrap=200, seed=0):
    """Pearson tables for per-channel summary statistics.

    ``summaries``: mapping layer name -> array (seeds, snapshots,
    channels), e.g. squared channel norms along the trajectory.

    Inter-layer: for each pair of layers with equal channel counts, the
    correlation across (seed, channel) of the time-averaged summaries,
    with a bootstrap-over-channels error.  Inter-channel: within each
    layer, the correlation matrix of channel time series (seeds
    stacked along time).
    """
    arrs = {}
    for name, val in summaries.items():
        val = np.asarray(val, dtype=float)
        if val.ndim != 3:
            raise ValueError(f"{name}: expected (seeds, snapshots, channels)")
        if val.shape[2] < 2:
            raise ValueError(f"{name}: need at least 2 channels")
        arrs[name] = val
    if len(arrs) < 2:
        raise ValueError("need at least 2 layers")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))

    inter_layer = {}
    names = list(arrs)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            va, vb = arrs[a], arrs[b]
            if va.shape[0] != vb.shape[0] or va.shape[2] != vb.shape[2]:
                continue
            xa = va.mean(axis=1)        # (seeds, channels)
            xb = vb.mean(axis=1)
            rho = _pearson(xa.ravel(), xb.ravel())
            nchan = xa.shape[1]
            reps = []
            for _ in range(bootstrap):
                idx = rng.integers(0, nchan, size=nchan)
                try:
                    reps.append(_pearson(xa[:, idx].ravel(),
                                         xb[:, idx].ravel()))
                except ValueError:
                    continue
            sig = float(np.std(reps)) if reps else float("nan")
            inter_layer[(a, b)] = {"rho": rho, "sigma": sig,
                                   "count": int(xa.size)}
    inter_channel = {}
    for name, val in arrs.items():
        series = val.transpose(2, 0, 1).reshape(val.shape[2], -1)
        sd = series.std(axis=1)
        if np.any(sd == 0.0):
            raise ValueError(f"{name}: zero-variance summary; "
                             "correlation undefined")
        matrix = np.corrcoef(series)
        inter_channel[name] = {"matrix": matrix,
                               "count": int(series.shape[1])}
    return {"inter_layer": inter_layer, "inter_channel": inter_channel}
