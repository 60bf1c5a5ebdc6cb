"""Bijective layers, their composition, and the standard normal prior.

Every layer works on batches of row vectors ``x`` with shape ``(N, D)`` and
returns ``(z, log_det)`` where ``log_det`` has shape ``(N,)``.  Layer math is
written against the helpers in :mod:`mflow.autodiff`, so passing a dict of
:class:`~mflow.autodiff.Var` parameters traces the computation for
training, while the default (the layer's own arrays) evaluates directly.

For a square bijection ``f`` the volume term of the change-of-variables
formula, ``0.5 * log|det G|`` with ``G = J_{f^-1}^T J_{f^-1}``, equals
``-log|det J_f|``, which is exactly the negated ``log_det`` returned by
:meth:`FlowStack.forward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .rng import SplitMix64

LAYER_KINDS = ("affine_coupling", "actnorm", "invertible_linear")
SCALE_BOUND = 5.0
MIN_DIAG = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dim: int
    hidden_sizes: tuple[int, ...] = ()
    mask_parity: str = "even"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.dim < 1:
            raise ValueError(f"layer dim must be >= 1, got {self.dim}")
        if self.kind == "affine_coupling" and self.dim < 2:
            raise ValueError("affine_coupling needs dim >= 2")
        if self.mask_parity not in ("even", "odd"):
            raise ValueError(f"mask_parity must be 'even' or 'odd', got {self.mask_parity!r}")


def _as_batch(x):
    if isinstance(x, ad.Var):
        return x, False
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


class Layer:
    """Base class; subclasses fill ``params`` and implement the maps."""

    spec: LayerSpec
    params: dict[str, np.ndarray]

    def forward(self, x, p=None):
        raise NotImplementedError

    def inverse(self, z, p=None):
        raise NotImplementedError

    def param_names(self) -> list[str]:
        return list(self.params)

    def state(self) -> dict[str, str]:
        """Non-trainable state needed to rebuild the layer."""
        return {}


class AffineCoupling(Layer):
    """RealNVP coupling: the passive half conditions a scale and shift of the active half.

    ``mask_parity='even'`` keeps the even-indexed coordinates passive.  The
    log-scale is bounded as ``s = SCALE_BOUND * tanh(raw / SCALE_BOUND)``.
    """

    def __init__(self, spec: LayerSpec, rng: SplitMix64 | None = None):
        self.spec = spec
        idx = np.arange(spec.dim)
        first = 0 if spec.mask_parity == "even" else 1
        self.passive = idx[first::2]
        self.active = np.setdiff1d(idx, self.passive)
        self.restore = np.argsort(np.concatenate([self.passive, self.active]))
        rng = rng or SplitMix64(0)
        widths = [len(self.passive), *spec.hidden_sizes]
        self.params = {}
        for k in range(len(spec.hidden_sizes)):
            fan_in, fan_out = widths[k], widths[k + 1]
            w = rng.normal(fan_in * fan_out).reshape(fan_in, fan_out) / math.sqrt(fan_in)
            self.params[f"w{k}"] = w
            self.params[f"b{k}"] = np.zeros(fan_out)
        # zero output layer: the coupling starts as the identity
        self.params["w_out"] = np.zeros((widths[-1], 2 * len(self.active)))
        self.params["b_out"] = np.zeros(2 * len(self.active))

    def _scale_shift(self, xp, p):
        h = xp
        for k in range(len(self.spec.hidden_sizes)):
            h = ad.tanh(h @ p[f"w{k}"] + p[f"b{k}"])
        out = h @ p["w_out"] + p["b_out"]
        na = len(self.active)
        s = SCALE_BOUND * ad.tanh(out[:, :na] * (1.0 / SCALE_BOUND))
        return s, out[:, na:]

    def forward(self, x, p=None):
        p = self.params if p is None else p
        xp, xa = x[:, self.passive], x[:, self.active]
        s, t = self._scale_shift(xp, p)
        ya = xa * ad.exp(s) + t
        z = ad.concat([xp, ya], axis=1)[:, self.restore]
        return z, s.sum(axis=1)

    def inverse(self, z, p=None):
        p = self.params if p is None else p
        zp, za = z[:, self.passive], z[:, self.active]
        s, t = self._scale_shift(zp, p)
        xa = (za - t) * ad.exp(-s)
        x = ad.concat([zp, xa], axis=1)[:, self.restore]
        return x, -s.sum(axis=1)


class ActNorm(Layer):
    """Per-coordinate affine map ``z = scale * x + bias``.

    Starts as the identity; :meth:`initialize` sets scale and bias from a
    batch so that the batch leaves the layer with zero mean and unit variance.
    """

    def __init__(self, spec: LayerSpec, rng: SplitMix64 | None = None):
        self.spec = spec
        self.params = {"scale": np.ones(spec.dim), "bias": np.zeros(spec.dim)}
        self.initialized = False

    def initialize(self, x: np.ndarray) -> None:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        self.params["scale"][...] = 1.0 / std
        self.params["bias"][...] = -mean / std
        self.initialized = True

    def _check(self, scale):
        s = ad.value_of(scale)
        if np.any(s == 0):
            raise ValueError(f"actnorm scale is zero at coordinates {np.flatnonzero(s == 0).tolist()}")

    def forward(self, x, p=None):
        p = self.params if p is None else p
        self._check(p["scale"])
        z = x * p["scale"] + p["bias"]
        log_det = ad.log(ad.absolute(p["scale"])).sum() + np.zeros(ad.value_of(x).shape[0])
        return z, log_det

    def inverse(self, z, p=None):
        p = self.params if p is None else p
        self._check(p["scale"])
        x = (z - p["bias"]) / p["scale"]
        log_det = -ad.log(ad.absolute(p["scale"])).sum() + np.zeros(ad.value_of(z).shape[0])
        return x, log_det

    def state(self):
        return {"initialized": str(int(self.initialized))}


class InvertibleLinear(Layer):
    """Dense ``z = W x`` with ``W = P L U`` stored in LU form.

    ``L`` is unit lower triangular, ``U`` upper triangular with diagonal
    ``sign * exp(log_diag)``, so ``log|det W| = sum(log_diag)``.  ``P`` and
    ``sign`` are fixed.  A fresh layer has ``P = L = U = I``.
    """

    def __init__(self, spec: LayerSpec, rng: SplitMix64 | None = None):
        self.spec = spec
        n = spec.dim
        self.perm = np.arange(n)
        self.sign = np.ones(n)
        self.params = {
            "lower": np.zeros((n, n)),
            "upper": np.zeros((n, n)),
            "log_diag": np.zeros(n),
        }
        self._tril = np.tril(np.ones((n, n)), -1)
        self._triu = np.triu(np.ones((n, n)), 1)

    @property
    def permutation_matrix(self) -> np.ndarray:
        return np.eye(self.spec.dim)[self.perm]

    def _check(self, log_diag):
        ld = ad.value_of(log_diag)
        bad = ld < math.log(MIN_DIAG)
        if np.any(bad):
            raise ValueError(
                f"invertible_linear is near-singular: |U_ii| < {MIN_DIAG} at {np.flatnonzero(bad).tolist()}"
            )

    def weight(self, p=None):
        p = self.params if p is None else p
        eye = np.eye(self.spec.dim)
        lower = p["lower"] * self._tril + eye
        upper = p["upper"] * self._triu + eye * (self.sign * ad.exp(p["log_diag"]))
        return self.permutation_matrix @ (lower @ upper)

    def forward(self, x, p=None):
        p = self.params if p is None else p
        self._check(p["log_diag"])
        z = x @ self.weight(p).T
        return z, p["log_diag"].sum() + np.zeros(ad.value_of(x).shape[0])

    def inverse(self, z, p=None):
        p = self.params if p is None else p
        self._check(p["log_diag"])
        x = z @ ad.inv(self.weight(p)).T
        return x, -p["log_diag"].sum() + np.zeros(ad.value_of(z).shape[0])

    def state(self):
        return {
            "perm": ",".join(str(int(i)) for i in self.perm),
            "sign": ",".join("1" if s > 0 else "-1" for s in self.sign),
        }


_LAYER_TYPES = {
    "affine_coupling": AffineCoupling,
    "actnorm": ActNorm,
    "invertible_linear": InvertibleLinear,
}


def make_layer(spec: LayerSpec, rng: SplitMix64 | None = None) -> Layer:
    return _LAYER_TYPES[spec.kind](spec, rng)


class FlowStack:
    """Ordered composition of layers; ``forward`` maps data to latent."""

    def __init__(self, layers: list[Layer], dim: int):
        for layer in layers:
            if layer.spec.dim != dim:
                raise ValueError(f"layer dim {layer.spec.dim} does not match stack dim {dim}")
        self.layers = list(layers)
        self.dim = dim

    @classmethod
    def from_specs(cls, specs: list[LayerSpec], dim: int, seed: int = 0) -> "FlowStack":
        rng = SplitMix64(seed)
        return cls([make_layer(s, rng.split(i)) for i, s in enumerate(specs)], dim)

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    # parameters ---------------------------------------------------------

    def parameter_arrays(self) -> Iterator[np.ndarray]:
        for layer in self.layers:
            for name in layer.param_names():
                yield layer.params[name]

    def num_params(self) -> int:
        return sum(a.size for a in self.parameter_arrays())

    def get_flat(self) -> np.ndarray:
        arrays = list(self.parameter_arrays())
        if not arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in arrays])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.num_params():
            raise ValueError(f"expected {self.num_params()} parameters, got {theta.size}")
        pos = 0
        for a in self.parameter_arrays():
            a[...] = theta[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def trace_params(self, tape: ad.Tape) -> tuple[list[dict], list[ad.Var]]:
        """Register every parameter array as a leaf on ``tape``.

        Returns per-layer dicts for :meth:`forward`/:meth:`inverse` and the
        flat list of leaves in :meth:`parameter_arrays` order.
        """
        per_layer, leaves = [], []
        for layer in self.layers:
            d = {}
            for name in layer.param_names():
                v = tape.var(layer.params[name])
                d[name] = v
                leaves.append(v)
            per_layer.append(d)
        return per_layer, leaves

    # maps ---------------------------------------------------------------

    def forward_layers(self, x, params=None):
        """Forward pass returning the latent and the list of per-layer log-dets."""
        z = x
        dets = []
        for i, layer in enumerate(self.layers):
            z, ld = layer.forward(z, None if params is None else params[i])
            dets.append(ld)
        return z, dets

    def forward(self, x, params=None):
        x, squeeze = _as_batch(x)
        z, dets = self.forward_layers(x, params)
        log_det = _sum_terms(dets, ad.value_of(x).shape[0])
        if squeeze:
            return z[0], log_det[0]
        return z, log_det

    def inverse(self, z, params=None):
        z, squeeze = _as_batch(z)
        x = z
        dets = []
        for i in range(len(self.layers) - 1, -1, -1):
            x, ld = self.layers[i].inverse(x, None if params is None else params[i])
            dets.append(ld)
        log_det = _sum_terms(dets, ad.value_of(z).shape[0])
        if squeeze:
            return x[0], log_det[0]
        return x, log_det

    def randomize(self, rng: SplitMix64, scale: float = 0.3) -> None:
        """Fill every parameter (and the fixed permutation/sign state) with random values.

        Used to exercise the layers away from their identity initialization.
        """
        for layer in self.layers:
            for name in layer.param_names():
                a = layer.params[name]
                a[...] = scale * rng.normal(a.size).reshape(a.shape)
            if isinstance(layer, ActNorm):
                a = layer.params["scale"]
                signs = np.where(rng.uniform(a.size) < 0.5, -1.0, 1.0)
                a[...] = signs * np.exp(a)
                layer.initialized = True
            if isinstance(layer, InvertibleLinear):
                layer.perm = rng.permutation(layer.spec.dim)
                layer.sign = np.where(rng.uniform(layer.spec.dim) < 0.5, -1.0, 1.0)


def _sum_terms(terms, n):
    total = np.zeros(n)
    for t in terms:
        total = total + t
    return total


def stack_forward(f: FlowStack, x):
    return f.forward(x)


def stack_inverse(f: FlowStack, z):
    return f.inverse(z)[0]


def glow_specs(dim: int, steps: int, hidden: tuple[int, ...] = (32, 32)) -> list[LayerSpec]:
    """``steps`` repetitions of actnorm -> invertible linear -> coupling,
    closed by one more invertible linear layer.

    Coupling masks alternate between steps.  The closing linear layer lets
    training rotate the latent freely: the standard normal prior is
    isotropic, so the likelihood does not resist a rotation that moves
    information between the kept and dropped coordinates.  For ``dim == 1``
    couplings are impossible and each step is actnorm -> invertible linear.
    """
    specs = []
    for k in range(steps):
        specs.append(LayerSpec("actnorm", dim))
        specs.append(LayerSpec("invertible_linear", dim))
        if dim >= 2:
            parity = "even" if k % 2 == 0 else "odd"
            specs.append(LayerSpec("affine_coupling", dim, tuple(hidden), parity))
    if steps and dim >= 2:
        specs.append(LayerSpec("invertible_linear", dim))
    return specs


@dataclass
class GaussianPrior:
    """Standard normal N(0, I_dim)."""

    dim: int

    def log_density(self, y):
        return gaussian_log_density(self, y)


def gaussian_log_density(p: GaussianPrior, y):
    """Log density of N(0, I) summed over the last axis."""
    n = ad.value_of(y).shape[-1]
    if n != p.dim:
        raise ValueError(f"expected dimension {p.dim}, got {n}")
    return -0.5 * (y * y).sum(axis=-1) - 0.5 * p.dim * math.log(2.0 * math.pi)
