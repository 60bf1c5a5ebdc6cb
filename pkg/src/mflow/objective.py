"""Pixel-rejection objective: Huber penalty, latent split, loss and sampling.

The flow ``f`` maps data ``x`` (dimension ``D``) to a latent ``z`` which is
split into manifold coordinates ``u = z[:d]`` and off-manifold coordinates
``v = z[d:]``.  Reconstruction drops ``v``::

    x_rec = f^-1(u, 0, ..., 0)

and the per-sample loss is::

    alpha * (-log N(u) - log N(v) - log|det J_f(x)|) + lam * mean_i H_delta(x_i, x_rec_i)

In the two-block variant a second flow ``h`` on the manifold coordinates
replaces ``-log N(u)`` by ``-log N(h(u)) - log|det J_h(u)|``.  The
likelihood weight ``alpha`` applies to the first flow's terms only; the
second flow's terms always carry weight one.

An end-to-end multi-block model with a single objective needs no separate
engine: compose both blocks into one :class:`~mflow.flows.FlowStack` and
use the single-block variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .flows import FlowStack, GaussianPrior, gaussian_log_density
from .rng import SplitMix64

VARIANTS = ("single_block", "two_block")


@dataclass(frozen=True)
class LatentSplit:
    D: int
    d: int

    def __post_init__(self):
        if not 1 <= self.d < self.D:
            raise ValueError(f"manifold dim d must satisfy 1 <= d < D, got d={self.d}, D={self.D}")

    def split(self, z):
        return z[..., : self.d], z[..., self.d:]


@dataclass(frozen=True)
class LossConfig:
    """``delta = inf`` selects the pure quadratic (MSE) penalty."""

    delta: float = 1.0
    lam: float = 1.0
    alpha: float = 1.0
    variant: str = "single_block"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class Model:
    """A data flow, its latent split, and the optional manifold prior flow."""

    flow: FlowStack
    split: LatentSplit
    prior_flow: FlowStack | None = None

    def __post_init__(self):
        if self.flow.dim != self.split.D:
            raise ValueError(f"flow dim {self.flow.dim} != D={self.split.D}")
        if self.prior_flow is not None and self.prior_flow.dim != self.split.d:
            raise ValueError(f"prior flow dim {self.prior_flow.dim} != d={self.split.d}")

    @property
    def variant(self) -> str:
        return "single_block" if self.prior_flow is None else "two_block"

    def flows(self) -> list[FlowStack]:
        return [self.flow] if self.prior_flow is None else [self.flow, self.prior_flow]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([f.get_flat() for f in self.flows()])

    def set_flat(self, theta) -> None:
        pos = 0
        for f in self.flows():
            n = f.num_params()
            f.set_flat(theta[pos:pos + n])
            pos += n


@dataclass
class LossParts:
    """Batch means of the loss components (plain floats)."""

    nll_u: float
    nll_v: float
    log_det: float
    r: float
    recon_mse: float

    @property
    def nll(self) -> float:
        """-log p_X(x): the exact negative log-likelihood."""
        return self.nll_u + self.nll_v - self.log_det


def huber(a, b, delta: float):
    """Elementwise Huber penalty of ``a - b``: quadratic inside ``delta``, linear outside."""
    diff = a - b
    if math.isinf(delta):
        return 0.5 * diff * diff
    quad = np.abs(ad.value_of(diff)) < delta
    return ad.where(quad, 0.5 * diff * diff, delta * (ad.absolute(diff) - 0.5 * delta))


def pad_latent(u, D: int):
    u_val = ad.value_of(u)
    d = u_val.shape[-1]
    if d >= D:
        raise ValueError(f"cannot pad a {d}-dim latent to D={D}")
    zeros = np.zeros(u_val.shape[:-1] + (D - d,))
    return ad.concat([u, zeros], axis=-1)


def reconstruct(f: FlowStack, x, split: LatentSplit, params=None):
    """``f^-1`` of the zero-padded manifold coordinates of ``f(x)``."""
    x_b = x if isinstance(x, ad.Var) else np.atleast_2d(np.asarray(x, dtype=np.float64))
    z, _ = f.forward(x_b, params)
    x_rec, _ = f.inverse(pad_latent(z[:, : split.d], split.D), params)
    if not isinstance(x, ad.Var) and np.ndim(x) == 1:
        return x_rec[0]
    return x_rec


def reconstruction_penalty(x, x_rec, delta: float):
    """Mean over coordinates of the Huber penalty between ``x`` and its reconstruction."""
    if np.shape(ad.value_of(x)) != np.shape(ad.value_of(x_rec)):
        raise ValueError("x and its reconstruction must have the same shape")
    return huber(x, x_rec, delta).mean(axis=-1)


def per_sample_terms(f, x, split, h=None, f_params=None, h_params=None):
    """Latent, reconstruction and per-sample NLL pieces, shared by loss and metrics."""
    z, log_det = f.forward(x, f_params)
    u, v = z[:, : split.d], z[:, split.d:]
    if h is None:
        nll_u = -gaussian_log_density(GaussianPrior(split.d), u)
    else:
        u2, ld_h = h.forward(u, h_params)
        nll_u = -gaussian_log_density(GaussianPrior(split.d), u2) - ld_h
    nll_v = -gaussian_log_density(GaussianPrior(split.D - split.d), v)
    x_rec, _ = f.inverse(pad_latent(u, split.D), f_params)
    return nll_u, nll_v, log_det, x_rec


def pixel_rejection_loss(f: FlowStack, x, split: LatentSplit, cfg: LossConfig,
                         h: FlowStack | None = None, f_params=None, h_params=None):
    """Batch-mean pixel-rejection loss and its parts.

    ``x`` is a single vector or an ``(N, D)`` batch.  The returned loss is a
    float, or a :class:`~mflow.autodiff.Var` when ``f_params``/``h_params``
    are traced.
    """
    if (h is not None) != (cfg.variant == "two_block"):
        raise ValueError(f"variant {cfg.variant!r} requires prior flow h to be "
                         f"{'given' if cfg.variant == 'two_block' else 'absent'}")
    if h is not None and h.dim != split.d:
        raise ValueError(f"prior flow dim {h.dim} != d={split.d}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != split.D:
        raise ValueError(f"data dim {x.shape[1]} != D={split.D}")
    nll_u, nll_v, log_det, x_rec = per_sample_terms(f, x, split, h, f_params, h_params)
    r = reconstruction_penalty(x, x_rec, cfg.delta)
    if h is None:
        per = cfg.alpha * (nll_u + nll_v - log_det) + cfg.lam * r
    else:
        per = cfg.alpha * (nll_v - log_det) + nll_u + cfg.lam * r
    loss = per.mean()
    err = x - ad.value_of(x_rec)
    parts = LossParts(
        nll_u=float(np.mean(ad.value_of(nll_u))),
        nll_v=float(np.mean(ad.value_of(nll_v))),
        log_det=float(np.mean(ad.value_of(log_det))),
        r=float(np.mean(ad.value_of(r))),
        recon_mse=float(np.mean(np.mean(err * err, axis=1))),
    )
    if not isinstance(loss, ad.Var):
        loss = float(loss)
    return loss, parts


def sample(f: FlowStack, split: LatentSplit, n: int, rng_seed: int, h: FlowStack | None = None):
    """Draw ``n`` points: u ~ N(0, I_d) (through ``h^-1`` if given), zero-pad, invert ``f``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return np.zeros((0, split.D))
    u = SplitMix64(rng_seed).normal(n * split.d).reshape(n, split.d)
    if h is not None:
        u, _ = h.inverse(u)
    x, _ = f.inverse(pad_latent(u, split.D))
    return x
