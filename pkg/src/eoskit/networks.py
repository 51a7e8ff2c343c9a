"""Architecture descriptions shared by the self-consistency solver and
the Langevin sampler.

Three families are supported:

``fcn``
    Fully connected, depth ``len(widths) + 1``: hidden pre-activations
    ``h^l`` of widths ``widths``, erf (or linear) activations, scalar
    linear readout.  Weight priors are ``layer_vars[l] / fan_in``.

``conv2``
    One 1-d convolutional layer with non-overlapping windows of size
    ``windows[0]`` and ``widths[0]`` channels, followed by a linear
    readout over (pixels x channels).

``conv3``
    Two convolutional stages: windows ``windows[0]`` on the input, then
    windows ``windows[1]`` in pixel space mixing all channels, then the
    readout.  ``widths = (C1, C2)``.
"""

from __future__ import annotations

import dataclasses

ARCHITECTURES = ("fcn", "conv2", "conv3")


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    arch: str
    input_dim: int
    widths: tuple[int, ...]
    layer_vars: tuple[float, ...]
    windows: tuple[int, ...] = ()
    activation: str = "erf"
    mean_field_readout: bool = False

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "layer_vars", tuple(float(v) for v in self.layer_vars))
        object.__setattr__(self, "windows", tuple(int(s) for s in self.windows))
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if any(v <= 0 for v in self.layer_vars):
            raise ValueError("layer variances must be positive")
        if self.arch == "fcn":
            if self.windows:
                raise ValueError("fcn takes no windows")
            if len(self.layer_vars) != len(self.widths) + 1:
                raise ValueError("fcn needs one variance per weight layer "
                                 "(hidden layers + readout)")
        elif self.arch == "conv2":
            if len(self.windows) != 1 or len(self.widths) != 1:
                raise ValueError("conv2 takes one window and one channel count")
            if len(self.layer_vars) != 2:
                raise ValueError("conv2 takes (conv_var, readout_var)")
            if self.input_dim % self.windows[0]:
                raise ValueError("window must divide the input dimension")
        else:  # conv3
            if len(self.windows) != 2 or len(self.widths) != 2:
                raise ValueError("conv3 takes two windows and two channel counts")
            if len(self.layer_vars) != 3:
                raise ValueError("conv3 takes (conv_var, mix_var, readout_var)")
            if self.input_dim % (self.windows[0] * self.windows[1]):
                raise ValueError("windows must divide the input dimension")

    @property
    def depth(self) -> int:
        """Number of weight layers."""
        return len(self.widths) + 1

    @property
    def pixels(self) -> int:
        """Readout pixel count (1 for fcn)."""
        if self.arch == "fcn":
            return 1
        if self.arch == "conv2":
            return self.input_dim // self.windows[0]
        return self.input_dim // (self.windows[0] * self.windows[1])

    @property
    def penultimate_width(self) -> int:
        return self.widths[-1]

    @property
    def readout_var(self) -> float:
        """Readout weight variance, after mean-field rescaling if set."""
        v = self.layer_vars[-1]
        if self.mean_field_readout:
            v = v / self.penultimate_width
        return v

    def with_widths(self, value: int) -> "NetworkSpec":
        """All hidden widths replaced by ``value`` (annealing stages)."""
        return dataclasses.replace(self, widths=tuple(value for _ in self.widths))

    def fan_ins(self) -> tuple[int, ...]:
        """Fan-in of each weight layer, input to readout."""
        if self.arch == "fcn":
            dims = (self.input_dim, *self.widths)
            return dims
        if self.arch == "conv2":
            return (self.windows[0], self.pixels * self.widths[0])
        s0, s1 = self.windows
        c1, c2 = self.widths
        return (s0, s1 * c1, self.pixels * c2)
