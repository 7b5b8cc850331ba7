"""Conditional invertible flow over motion-behavior vectors.

Each step of flow applies a per-channel pattern normalization, an
invertible channel-mixing linear map, and an affine coupling layer whose
scale/shift network is conditioned on the social-context vector. Forward
maps behavior vectors to a standard-normal base; reverse evolves base
samples back into behavior vectors. Both directions are exact inverses and
the per-sample log-determinant is accumulated analytically, so the
negative log-likelihood is exact.
"""

from __future__ import annotations

import math

import numpy as np

from . import numcore as nc
from .errors import (
    ConfigError,
    ContractError,
    DegenerateChannelError,
    FlowNumericsError,
)
from .layers import Linear, _prefix
from .numcore import Tensor

LOG_SCALE_BOUND = 5.0  # coupling log-scales are clamped to +-this


class PatternNorm:
    """Per-channel affine map with data-dependent initialization.

    The first batch fixes scale and bias so that outputs have zero mean and
    unit variance per channel jointly over the sample axis; afterwards both
    train as ordinary parameters.
    """

    def __init__(self, channels: int):
        self.channels = channels
        self.s = Tensor(np.ones(channels), requires_grad=True)
        self.b = Tensor(np.zeros(channels), requires_grad=True)
        self.initialized = False

    def init_from_data(self, batch: np.ndarray) -> None:
        if self.initialized:
            raise ContractError("pattern norm already initialized")
        if batch.ndim != 2 or batch.shape[0] < 2:
            raise ContractError("pattern norm init needs a (B>=2, C) batch")
        std = batch.std(axis=0)
        if np.any(std < 1e-8):
            bad = int(np.argmin(std))
            raise DegenerateChannelError(f"channel {bad} has std {std[bad]:.3g} < 1e-8")
        self.s.data[:] = 1.0 / std
        self.b.data[:] = -batch.mean(axis=0) / std
        self.initialized = True

    def forward(self, x: Tensor, _st: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            raise ContractError("pattern norm used before data-dependent init")
        y = nc.add(nc.mul(x, self.s), self.b)
        logdet = nc.sum_all(nc.log(nc.abs_(self.s)))
        return y, logdet

    def reverse(self, y: Tensor, _st: Tensor | None = None) -> Tensor:
        if not self.initialized:
            raise ContractError("pattern norm used before data-dependent init")
        return nc.div(nc.sub(y, self.b), self.s)

    def params(self) -> dict[str, Tensor]:
        return {"s": self.s, "b": self.b}


def random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    """Orthogonal matrix with determinant +1 from a QR of a Gaussian draw."""
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class InvertibleLinear:
    """Dense channel-mixing map, initialized as a rotation (log-det zero)."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.channels = channels
        self.w = Tensor(random_rotation(rng, channels), requires_grad=True)

    def forward(self, x: Tensor, _st: Tensor | None = None) -> tuple[Tensor, Tensor]:
        y = nc.matmul(x, nc.transpose(self.w))
        return y, nc.logabsdet(self.w)

    def reverse(self, y: Tensor, _st: Tensor | None = None) -> Tensor:
        return nc.matmul(y, nc.transpose(nc.inverse(self.w)))

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w}


class AffineCoupling:
    """Scale/shift of the second half-channels, conditioned on context.

    The first half passes through unchanged and, concatenated with the
    social-context vector, drives a small network whose zero-initialized
    output layer makes the layer start as the identity.
    """

    def __init__(self, rng: np.random.Generator, channels: int, cond_dim: int, hidden: int | None = None):
        if channels % 2 != 0:
            raise ConfigError(f"coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.half = channels // 2
        hidden = hidden if hidden is not None else 2 * channels
        self.fc0 = Linear(rng, self.half + cond_dim, hidden)
        self.fc1 = Linear(rng, hidden, channels, zero_init=True)

    def _scale_shift(self, xa: Tensor, st: Tensor) -> tuple[Tensor, Tensor]:
        h = nc.relu(self.fc0(nc.concat_lastdim([xa, st])))
        out = self.fc1(h)
        log_s = nc.clamp(nc.slice_lastdim(out, 0, self.half), -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        t = nc.slice_lastdim(out, self.half, self.channels)
        return log_s, t

    def forward(self, x: Tensor, st: Tensor) -> tuple[Tensor, Tensor]:
        xa = nc.slice_lastdim(x, 0, self.half)
        xb = nc.slice_lastdim(x, self.half, self.channels)
        log_s, t = self._scale_shift(xa, st)
        yb = nc.add(nc.mul(nc.exp(log_s), xb), t)
        return nc.concat_lastdim([xa, yb]), nc.sum_lastdim(log_s)

    def reverse(self, y: Tensor, st: Tensor) -> Tensor:
        ya = nc.slice_lastdim(y, 0, self.half)
        yb = nc.slice_lastdim(y, self.half, self.channels)
        log_s, t = self._scale_shift(ya, st)
        xb = nc.div(nc.sub(yb, t), nc.exp(log_s))
        return nc.concat_lastdim([ya, xb])

    def params(self) -> dict[str, Tensor]:
        return _prefix({"fc0": self.fc0, "fc1": self.fc1})


class FactorOut:
    """Marker op diverting the trailing channels straight to the base."""

    def __init__(self, width_in: int, out_channels: int):
        self.keep = width_in - out_channels
        self.out_channels = out_channels

    def params(self) -> dict[str, Tensor]:
        return {}


class BaseDensity:
    """Isotropic Gaussian base with a temperature scale."""

    def __init__(self, dim: int, sigma: float = 1.0):
        if sigma <= 0:
            raise ConfigError("base density temperature must be positive")
        self.dim = dim
        self.sigma = sigma

    def log_prob(self, z: Tensor) -> Tensor:
        quad = nc.mul(nc.sum_lastdim(nc.mul(z, z)), -0.5 / (self.sigma**2))
        const = -0.5 * self.dim * math.log(2.0 * math.pi * self.sigma**2)
        return nc.add(quad, const)

    def log_prob_np(self, z: np.ndarray) -> np.ndarray:
        const = -0.5 * self.dim * math.log(2.0 * math.pi * self.sigma**2)
        return -0.5 * (z * z).sum(axis=-1) / self.sigma**2 + const


class FlowStack:
    """Ordered invertible steps with per-sample log-det accounting."""

    def __init__(
        self,
        rng: np.random.Generator,
        channels: int,
        cond_dim: int,
        n_steps: int = 16,
        use_pattern_norm: bool = True,
        factor_out: bool = False,
        factor_out_every: int = 4,
        factor_out_channels: int = 64,
        coupling_hidden: int | None = None,
    ):
        self.channels = channels
        self.cond_dim = cond_dim
        self.n_steps = n_steps
        self.use_pattern_norm = use_pattern_norm
        self.ops: list = []
        self._part_widths: list[int] = []
        width = channels
        for step in range(n_steps):
            if width % 2 != 0:
                raise ConfigError(f"flow width became odd ({width}) at step {step}")
            if use_pattern_norm:
                self.ops.append(PatternNorm(width))
            self.ops.append(InvertibleLinear(rng, width))
            self.ops.append(AffineCoupling(rng, width, cond_dim, hidden=coupling_hidden))
            last = step == n_steps - 1
            if factor_out and not last and (step + 1) % factor_out_every == 0:
                if width - factor_out_channels < 2:
                    raise ConfigError(
                        f"factor-out would leave {width - factor_out_channels} channels at step {step}"
                    )
                self.ops.append(FactorOut(width, factor_out_channels))
                self._part_widths.append(factor_out_channels)
                width -= factor_out_channels
        self._part_widths.append(width)

    @classmethod
    def identity(cls, channels: int, cond_dim: int, n_steps: int = 1) -> "FlowStack":
        """A stack whose every step is the identity map (testing aid)."""
        stack = cls(np.random.default_rng(0), channels, cond_dim, n_steps=n_steps)
        for op in stack.ops:
            if isinstance(op, PatternNorm):
                op.initialized = True  # s=1, b=0 already
            elif isinstance(op, InvertibleLinear):
                op.w.data[:] = np.eye(channels)
        return stack

    @property
    def initialized(self) -> bool:
        return all(op.initialized for op in self.ops if isinstance(op, PatternNorm))

    def initialize(self, mb: np.ndarray, st: np.ndarray) -> None:
        """Data-dependent init of every pattern norm, in flow order."""
        with nc.no_grad():
            x = Tensor(np.asarray(mb, dtype=np.float64))
            stt = Tensor(np.asarray(st, dtype=np.float64))
            for op in self.ops:
                if isinstance(op, FactorOut):
                    x = nc.slice_lastdim(x, 0, op.keep)
                    continue
                if isinstance(op, PatternNorm) and not op.initialized:
                    op.init_from_data(x.data)
                x, _ = op.forward(x, stt)

    def forward(self, mb: Tensor, st: Tensor) -> tuple[Tensor, Tensor]:
        """(z, per-sample log-det); z concatenates factored parts in order."""
        b = mb.data.shape[0]
        logdet = Tensor(np.zeros(b))
        parts: list[Tensor] = []
        x = mb
        for idx, op in enumerate(self.ops):
            if isinstance(op, FactorOut):
                parts.append(nc.slice_lastdim(x, op.keep, op.keep + op.out_channels))
                x = nc.slice_lastdim(x, 0, op.keep)
                continue
            x, ld = op.forward(x, st)
            if not np.all(np.isfinite(x.data)) or not np.all(np.isfinite(ld.data)):
                raise FlowNumericsError("non-finite activation in forward pass", step=idx)
            logdet = nc.add(logdet, ld)
        parts.append(x)
        z = parts[0] if len(parts) == 1 else nc.concat_lastdim(parts)
        return z, logdet

    def reverse(self, z: Tensor, st: Tensor) -> Tensor:
        """Exact inverse of `forward` for the same conditioning."""
        offsets = np.cumsum([0] + self._part_widths)
        chunks = [nc.slice_lastdim(z, int(offsets[i]), int(offsets[i + 1])) for i in range(len(self._part_widths))]
        x = chunks.pop()
        for idx in range(len(self.ops) - 1, -1, -1):
            op = self.ops[idx]
            if isinstance(op, FactorOut):
                x = nc.concat_lastdim([x, chunks.pop()])
                continue
            x = op.reverse(x, st)
            if not np.all(np.isfinite(x.data)):
                raise FlowNumericsError("non-finite activation in reverse pass", step=idx)
        return x

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        step = 0
        for op in self.ops:
            tag = type(op).__name__
            kind = {"PatternNorm": "pn", "InvertibleLinear": "lin", "AffineCoupling": "coup"}.get(tag)
            if kind is None:
                continue
            for k, v in op.params().items():
                out[f"op{step:02d}.{kind}.{k}"] = v
            step += 1
        return out


def nll_loss(mb: Tensor, st: Tensor, stack: FlowStack, sigma: float = 1.0) -> Tensor:
    """Mean negative log-likelihood of behavior vectors under the flow."""
    z, logdet = stack.forward(mb, st)
    base = BaseDensity(stack.channels, sigma)
    ll = nc.add(base.log_prob(z), logdet)
    if not np.all(np.isfinite(ll.data)):
        raise FlowNumericsError("non-finite log-likelihood", step=len(stack.ops) - 1)
    return nc.neg(nc.mean_all(ll))


def sample_behaviors(
    st: Tensor,
    stack: FlowStack,
    k: int,
    sigma: float,
    rng: np.random.Generator,
) -> tuple[Tensor, np.ndarray]:
    """Evolve base draws into behavior vectors, k per conditioning row.

    Returns (behaviors, z) where behaviors has shape (B*k, C) with row
    b*k + j holding sample j for conditioning row b (a (B, k, C) layout
    flattened along the first axis), and z holds the raw base draws.
    """
    if k < 1:
        raise ContractError("need at least one sample")
    b = st.data.shape[0]
    if sigma == 0.0:
        z = np.zeros((b * k, stack.channels))
    else:
        z = rng.standard_normal((b, k, stack.channels)).reshape(b * k, stack.channels) * sigma
    st_rep = nc.repeat_rows(st, k)
    return stack.reverse(Tensor(z), st_rep), z
