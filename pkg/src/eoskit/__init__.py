"""eoskit: self-consistent kernel equations of state for finite-width networks.

The package is organised around a small set of dense-kernel primitives
(:mod:`eoskit.kernels`), exact GP inference and equivalent-kernel spectra
(:mod:`eoskit.gp`), a damped fixed-point solver for the finite-width
equations of state (:mod:`eoskit.eos`), a closed-form two-layer solution
(:mod:`eoskit.two_layer`), and a Langevin sampler used as an empirical
oracle for equilibrium statistics (:mod:`eoskit.langevin`).
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("eoskit")
except PackageNotFoundError:  # pragma: no cover - package not installed
    __version__ = "0.0.0"

__all__ = ["__version__"]
